"""Self-attention over shared gradients and the fused gradient step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from sgfusion.errors import ConfigError, DomainError, SchemaError


@dataclass(frozen=True)
class TrainingSchedule:
    mode: str = "inverse_mu_t"
    mu: float = 1.0
    eta0: float = 0.1

    def __post_init__(self):
        if self.mode not in ("inverse_mu_t", "constant"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        rate = self.mu if self.mode == "inverse_mu_t" else self.eta0
        if not (rate > 0 and math.isfinite(rate)):
            raise ConfigError(f"schedule rate must be positive, got {rate!r}")


def lr_at(schedule: TrainingSchedule, t: int) -> float:
    if t < 1:
        raise DomainError(f"round index must be >= 1, got {t}")
    if schedule.mode == "inverse_mu_t":
        return 1.0 / (schedule.mu * t)
    return schedule.eta0


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def attention(
    local_grad: np.ndarray,
    shared: Mapping[str, np.ndarray],
    similarity: str = "inner",
) -> dict[str, float]:
    """Attention weights over the shared gradients.

    ``e = sigmoid(<local, shared>)`` and the weights are ``softmax(e)`` over
    the keys of ``shared``. ``similarity="cosine"`` replaces the raw inner
    product with cosine similarity. An empty map gives empty weights.
    """
    if not shared:
        return {}
    if similarity not in ("inner", "cosine"):
        raise ConfigError(f"unknown attention similarity {similarity!r}")
    g = np.asarray(local_grad, dtype=float)
    keys = list(shared)
    G = np.asarray([np.asarray(shared[k], dtype=float) for k in keys])
    if G.ndim != 2 or G.shape[1] != g.shape[0]:
        raise SchemaError("shared gradients must match the local gradient dimension")
    scores = G @ g
    if similarity == "cosine":
        norms = np.linalg.norm(G, axis=1) * np.linalg.norm(g)
        scores = np.divide(scores, norms, out=np.zeros_like(scores), where=norms > 0)
    e = _sigmoid(scores)
    w = np.exp(e - e.max())
    w /= w.sum()
    return dict(zip(keys, w.tolist()))


def fused_step(
    theta: np.ndarray,
    local_grad: np.ndarray,
    shared: Mapping[str, np.ndarray],
    lam: Mapping[str, float],
    eta_t: float,
) -> np.ndarray:
    """``theta - eta_t * (local_grad + sum_k lam[k] * shared[k])``; inputs untouched."""
    if set(lam) != set(shared):
        raise SchemaError("attention keys do not match the shared gradient keys")
    if not eta_t > 0:
        raise DomainError(f"learning rate must be positive, got {eta_t!r}")
    direction = np.array(local_grad, dtype=float)
    for k in shared:
        direction = direction + lam[k] * np.asarray(shared[k], dtype=float)
    return np.asarray(theta, dtype=float) - eta_t * direction
