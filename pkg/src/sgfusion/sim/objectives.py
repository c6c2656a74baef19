"""Strongly convex per-user losses and their zone-level aggregates.

A zone objective is the mean over users of each user's mean per-sample
loss. Because every objective here is either quadratic in the parameters or
a weighted sum over samples, the zone aggregate is precomputed once per
zone (:meth:`Objective.bind`) and then evaluated in O(p^2) or one pass over
the zone's stacked samples.

- ``quadratic``         ``0.5 * sum_j a_j (theta_j - x_j)^2`` (mean estimation)
- ``ridge_regression``  ``0.5 * (x.theta - y)^2 + 0.5 * reg * |theta|^2``
- ``logistic_l2``       ``log(1 + e^{x.theta}) - y x.theta + 0.5 * reg * |theta|^2``
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from sgfusion.errors import ConfigError, DomainError

OBJECTIVES = ("quadratic", "ridge_regression", "logistic_l2")


def _log1pexp(z: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, z)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class Objective:
    tag: str
    dim: int
    reg: float = 0.1
    curvature: tuple[float, ...] = ()

    def __post_init__(self):
        if self.tag not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.tag!r}; expected one of {OBJECTIVES}")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.tag == "quadratic":
            curv = self.curvature or (1.0,) * self.dim
            if len(curv) != self.dim or min(curv) <= 0:
                raise ConfigError("quadratic curvature needs dim positive entries")
            object.__setattr__(self, "curvature", tuple(float(a) for a in curv))
        elif not self.reg > 0:
            raise ConfigError(f"{self.tag} needs a positive L2 coefficient to be strongly convex")

    # -- per-user reference evaluations (no precomputation) --------------------

    def user_loss(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> float:
        theta = np.asarray(theta, dtype=float)
        if self.tag == "quadratic":
            a = np.asarray(self.curvature)
            return float(np.mean(0.5 * ((theta - X) ** 2 * a).sum(axis=1)))
        z = X @ theta
        if self.tag == "ridge_regression":
            data = np.mean(0.5 * (z - y) ** 2)
        else:
            data = np.mean(_log1pexp(z) - y * z)
        return float(data + 0.5 * self.reg * theta @ theta)

    def user_grad(self, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        if self.tag == "quadratic":
            return np.asarray(self.curvature) * (theta - X.mean(axis=0))
        z = X @ theta
        if self.tag == "ridge_regression":
            r = z - y
        else:
            r = _sigmoid(z) - y
        return X.T @ r / len(y) + self.reg * theta

    def predict(self, theta: np.ndarray, X: np.ndarray) -> np.ndarray:
        """Model output per sample: a vector for quadratic, a scalar otherwise."""
        if self.tag == "quadratic":
            return np.broadcast_to(np.asarray(theta, dtype=float), X.shape)
        z = X @ theta
        return z if self.tag == "ridge_regression" else _sigmoid(z)

    def targets(self, X: np.ndarray, y: np.ndarray) -> np.ndarray:
        return X if self.tag == "quadratic" else y

    @property
    def mu(self) -> float | None:
        """Strong convexity constant when it is data independent."""
        if self.tag == "quadratic":
            return min(self.curvature)
        if self.tag == "logistic_l2":
            return self.reg
        return None

    def bind(self, users: Sequence[tuple[np.ndarray, np.ndarray]]) -> "ZoneProblem":
        if not users:
            raise DomainError("a zone needs at least one user")
        return ZoneProblem(self, [(np.asarray(X, float), np.asarray(y, float)) for X, y in users])


@dataclass
class ZoneProblem:
    """Zone objective ``F_z`` with cached sufficient statistics."""

    objective: Objective
    users: list[tuple[np.ndarray, np.ndarray]]
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        obj = self.objective
        m = len(self.users)
        if obj.tag == "quadratic":
            a = np.asarray(obj.curvature)
            means = np.array([X.mean(axis=0) for X, _ in self.users])
            center = means.mean(axis=0)
            # F_z(center) = mean_u mean_i 0.5 * sum_j a_j (center_j - x_ij)^2
            const = np.mean([np.mean(0.5 * ((X - center) ** 2 * a).sum(axis=1)) for X, _ in self.users])
            self._cache.update(a=a, center=center, const=float(const))
        elif obj.tag == "ridge_regression":
            A = sum(X.T @ X / len(y) for X, y in self.users) / m
            b = sum(X.T @ y / len(y) for X, y in self.users) / m
            c = sum(y @ y / len(y) for _, y in self.users) / m
            self._cache.update(A=A, b=b, c=float(c))
        else:
            X = np.vstack([X for X, _ in self.users])
            y = np.concatenate([y for _, y in self.users])
            w = np.concatenate([np.full(len(yy), 1.0 / (m * len(yy))) for _, yy in self.users])
            self._cache.update(X=X, y=y, w=w)

    @property
    def dim(self) -> int:
        return self.objective.dim

    def value(self, theta: np.ndarray) -> float:
        obj, c = self.objective, self._cache
        theta = np.asarray(theta, dtype=float)
        if obj.tag == "quadratic":
            d = theta - c["center"]
            return float(0.5 * (c["a"] * d * d).sum() + c["const"])
        if obj.tag == "ridge_regression":
            A, b = c["A"], c["b"]
            return float(0.5 * theta @ A @ theta - b @ theta + 0.5 * c["c"] + 0.5 * obj.reg * theta @ theta)
        z = c["X"] @ theta
        return float(c["w"] @ (_log1pexp(z) - c["y"] * z) + 0.5 * obj.reg * theta @ theta)

    def grad(self, theta: np.ndarray) -> np.ndarray:
        obj, c = self.objective, self._cache
        theta = np.asarray(theta, dtype=float)
        if obj.tag == "quadratic":
            return c["a"] * (theta - c["center"])
        if obj.tag == "ridge_regression":
            return c["A"] @ theta - c["b"] + obj.reg * theta
        z = c["X"] @ theta
        return c["X"].T @ (c["w"] * (_sigmoid(z) - c["y"])) + obj.reg * theta

    def hessian(self, theta: np.ndarray) -> np.ndarray:
        obj, c = self.objective, self._cache
        if obj.tag == "quadratic":
            return np.diag(c["a"])
        if obj.tag == "ridge_regression":
            return c["A"] + obj.reg * np.eye(self.dim)
        s = _sigmoid(c["X"] @ theta)
        return (c["X"].T * (c["w"] * s * (1 - s))) @ c["X"] + obj.reg * np.eye(self.dim)

    def optimum(self) -> np.ndarray:
        if "opt" in self._cache:
            return self._cache["opt"]
        obj, c = self.objective, self._cache
        if obj.tag == "quadratic":
            opt = c["center"].copy()
        elif obj.tag == "ridge_regression":
            opt = np.linalg.solve(c["A"] + obj.reg * np.eye(self.dim), c["b"])
        else:
            opt = self._newton()
        self._cache["opt"] = opt
        return opt

    def _newton(self, tol: float = 1e-13, max_iter: int = 100) -> np.ndarray:
        theta = np.zeros(self.dim)
        for _ in range(max_iter):
            g = self.grad(theta)
            if np.linalg.norm(g) < tol:
                break
            step = np.linalg.solve(self.hessian(theta), g)
            # damped Newton; the objective is smooth and strongly convex
            t, f0 = 1.0, self.value(theta)
            while self.value(theta - t * step) > f0 - 0.25 * t * (g @ step) and t > 1e-8:
                t *= 0.5
            theta = theta - t * step
        return theta

    def strong_convexity(self) -> float:
        """Global strong convexity constant of ``F_z``."""
        obj = self.objective
        if obj.tag == "ridge_regression":
            return float(np.linalg.eigvalsh(self._cache["A"])[0] + obj.reg)
        return float(obj.mu)

    def excess(self, theta: np.ndarray) -> float:
        """``F_z(theta) - F_z(theta*)``."""
        d = np.asarray(theta, dtype=float) - self.optimum()
        if self.objective.tag in ("quadratic", "ridge_regression"):
            # exact second-order expansion, no cancellation between large values
            return float(0.5 * d @ self.hessian(theta) @ d)
        return self.value(theta) - self.value(self.optimum())
