"""Zone training loops: SGFusion, its variants, and the baselines.

All zones of a round read the model snapshot taken at the start of the
round, and every shared gradient is evaluated at the owner's parameters.
Randomness is drawn from per-(algorithm, zone, round) streams derived from
the master seed, so results do not depend on zone evaluation order.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from sgfusion.errors import ConfigError, DomainError
from sgfusion.fusion import TrainingSchedule, attention, fused_step, lr_at
from sgfusion.label_stats import ZoneDistanceGraph
from sgfusion.rng import derive_rng
from sgfusion.sim.objectives import Objective, ZoneProblem
from sgfusion.sim.world import Zone, check_test_split, grid_neighbors
from sgfusion.zone_sampler import ProbDendrogram, SampledNeighborhood, sample_neighborhood

ALGORITHMS = ("fedavg", "sgeofl", "dzgd", "sgfusion", "chi_sgfusion", "topk_sgfusion")

TRACE_COLUMNS = (
    "round",
    "zone_id",
    "algorithm",
    "train_loss",
    "test_rmse",
    "n_sampled",
    "sampled_ids",
    "sum_lambda",
    "grad_norm",
    "eta_t",
)


@dataclass(frozen=True)
class AlgorithmSpec:
    tag: str
    rounds: int = 100
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    k: int | None = None
    chi: int | str | None = None
    similarity: str = "inner"

    def __post_init__(self):
        if self.tag not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.tag!r}; expected one of {ALGORITHMS}")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.tag == "topk_sgfusion" and (self.k is None or self.k < 0):
            raise ConfigError("topk_sgfusion needs k >= 0")
        if self.tag == "chi_sgfusion":
            if self.chi is None:
                raise ConfigError("chi_sgfusion needs chi (an integer or 'dzgd')")
            if isinstance(self.chi, str) and self.chi != "dzgd":
                raise ConfigError("chi must be a non-negative integer or 'dzgd'")
            if not isinstance(self.chi, str) and self.chi < 0:
                raise ConfigError("chi must be non-negative")

    @property
    def label(self) -> str:
        if self.tag == "topk_sgfusion":
            return f"topk_sgfusion_k{self.k}"
        if self.tag == "chi_sgfusion" and self.chi != "dzgd":
            return f"chi_sgfusion_{self.chi}"
        return self.tag


@dataclass
class FusionArtifacts:
    prob_dendrograms: Mapping[str, ProbDendrogram] | None = None
    graph: ZoneDistanceGraph | None = None


@dataclass(frozen=True)
class RoundTrace:
    round: int
    zone_id: str
    algorithm: str
    train_loss: float
    test_rmse: float
    n_sampled: int
    sampled_ids: tuple[str, ...]
    sum_lambda: float
    grad_norm: float
    eta_t: float

    def row(self) -> list[str]:
        return [
            str(self.round),
            self.zone_id,
            self.algorithm,
            repr(self.train_loss),
            repr(self.test_rmse),
            str(self.n_sampled),
            ";".join(self.sampled_ids),
            repr(self.sum_lambda),
            repr(self.grad_norm),
            repr(self.eta_t),
        ]


@dataclass
class RunResult:
    algorithm: AlgorithmSpec
    traces: list[RoundTrace]
    thetas: dict[str, np.ndarray]
    max_drift: float = 0.0  # max |theta_t - theta_0| seen across zones and rounds
    snapshots: dict[int, dict[str, np.ndarray]] = field(default_factory=dict)
    n_projected: int = 0  # zone updates pulled back onto the parameter ball

    def final_rmse(self) -> dict[str, float]:
        last = max(t.round for t in self.traces)
        return {t.zone_id: t.test_rmse for t in self.traces if t.round == last}

    def shared_gradient_count(self) -> int:
        return sum(t.n_sampled for t in self.traces)


@dataclass
class ZoneModel:
    zone_id: str
    theta: np.ndarray
    objective: Objective


# --- gradients and evaluation ------------------------------------------------------


def bind_zones(zones: Sequence[Zone], objective: Objective) -> dict[str, ZoneProblem]:
    return {z.zone_id: objective.bind(z.train_pairs()) for z in zones}


def local_gradient(model: ZoneModel, zone: Zone, at: np.ndarray | None = None) -> np.ndarray:
    """Mean over the zone's users of each user's mean-loss gradient at ``at``."""
    theta = model.theta if at is None else at
    obj = model.objective
    return np.mean([obj.user_grad(theta, u.x_train, u.y_train) for u in zone.users], axis=0)


def evaluate(model: ZoneModel, zone: Zone) -> dict[str, float]:
    """RMSE (and mean test loss) over the union of the zone users' test shards."""
    check_test_split(zone)
    X = np.vstack([u.x_test for u in zone.users])
    y = np.concatenate([u.y_test for u in zone.users])
    return _evaluate_arrays(model.objective, model.theta, X, y)


def _evaluate_arrays(obj: Objective, theta: np.ndarray, X: np.ndarray, y: np.ndarray) -> dict[str, float]:
    pred = obj.predict(theta, X)
    target = obj.targets(X, y)
    err = pred - target
    if obj.tag == "quadratic":
        sq = (err**2).mean(axis=1)
    else:
        sq = err**2
    out = {"rmse": math.sqrt(float(sq.mean()))}
    if obj.tag == "logistic_l2":
        z = X @ theta
        out["loss"] = float(np.mean(np.logaddexp(0.0, z) - y * z))
    elif obj.tag == "ridge_regression":
        out["loss"] = float(np.mean(0.5 * err**2))
    else:
        out["loss"] = float(np.mean(0.5 * (err**2 * np.asarray(obj.curvature)).sum(axis=1)))
    return out


def estimate_gradient_bound(
    problems: Mapping[str, ZoneProblem],
    center: np.ndarray,
    radius: float,
    rng: np.random.Generator,
    n_points: int = 256,
    margin: float = 1.1,
) -> float:
    """``margin`` times the largest zone-gradient norm seen on a ball around ``center``.

    Probes random points on the sphere plus, for every zone, the sphere
    point farthest from that zone's optimum.
    """
    center = np.asarray(center, dtype=float)
    p = center.size
    dirs = rng.normal(size=(n_points, p))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    points = [center] + list(center + radius * dirs)
    for prob in problems.values():
        away = center - prob.optimum()
        nrm = np.linalg.norm(away)
        if nrm > 0:
            points.append(center + radius * away / nrm)
    best = 0.0
    for prob in problems.values():
        for x in points:
            best = max(best, float(np.linalg.norm(prob.grad(x))))
    return margin * best


# --- fusion sets -------------------------------------------------------------------


def _top_k(graph: ZoneDistanceGraph, zone_id: str, k: int) -> tuple[str, ...]:
    i = graph.index(zone_id)
    row = graph.distances[i].copy()
    order = [j for j in np.argsort(row, kind="stable") if j != i]
    return tuple(graph.zone_ids[j] for j in order[:k])


def _weighted_without_replacement(
    pd: ProbDendrogram, count: int, rng: np.random.Generator
) -> tuple[str, ...]:
    probs = pd.probabilities()
    ids = sorted(probs)
    count = min(count, len(ids))
    if count == 0:
        return ()
    w = np.array([probs[z] for z in ids])
    if np.count_nonzero(w) < count:
        raise DomainError(f"zone {pd.owner} has fewer than {count} zones with positive probability")
    picked = rng.choice(len(ids), size=count, replace=False, p=w / w.sum())
    return tuple(ids[j] for j in picked)


class _FusionPlanner:
    def __init__(self, algo: AlgorithmSpec, zones: Sequence[Zone], artifacts: FusionArtifacts, seed: int):
        self.algo = algo
        self.seed = seed
        self.ids = [z.zone_id for z in zones]
        self.trivial = len(zones) == 1
        pds = artifacts.prob_dendrograms
        tag = algo.tag
        if not self.trivial:
            if tag in ("sgfusion", "chi_sgfusion"):
                if pds is None or set(pds) != set(self.ids):
                    raise ConfigError(f"{tag} needs a probabilistic dendrogram for every zone")
            if tag == "topk_sgfusion":
                if artifacts.graph is None or set(artifacts.graph.zone_ids) != set(self.ids):
                    raise ConfigError("topk_sgfusion needs the zone distance graph")
        self.pds = pds
        self.fixed: dict[str, tuple[str, ...]] = {}
        nbrs = grid_neighbors(list(zones))
        if tag == "dzgd":
            self.fixed = nbrs
        elif tag == "topk_sgfusion" and not self.trivial:
            self.fixed = {z: _top_k(artifacts.graph, z, algo.k) for z in self.ids}
        self.chi = {}
        if tag == "chi_sgfusion":
            for z in self.ids:
                self.chi[z] = len(nbrs[z]) if algo.chi == "dzgd" else int(algo.chi)

    def fusion_set(self, zone_id: str, t: int) -> tuple[str, ...]:
        tag = self.algo.tag
        if self.trivial or tag in ("sgeofl", "fedavg"):
            return ()
        if tag in ("dzgd", "topk_sgfusion"):
            return self.fixed[zone_id]
        rng = derive_rng(self.seed, f"fusion:{self.algo.label}", zone_id, t)
        if tag == "sgfusion":
            return sample_neighborhood(self.pds[zone_id], rng, t).zones
        return _weighted_without_replacement(self.pds[zone_id], self.chi[zone_id], rng)


# --- training loop -------------------------------------------------------------------


def run(
    algorithm: AlgorithmSpec,
    zones: Sequence[Zone],
    artifacts: FusionArtifacts | None,
    seed: int,
    objective: Objective,
    init: np.ndarray | None = None,
    eval_every: int = 1,
    problems: Mapping[str, ZoneProblem] | None = None,
    record_at: Sequence[int] = (),
    clip_radius: float | None = None,
) -> RunResult:
    """Train every zone model for ``algorithm.rounds`` rounds.

    ``eval_every`` controls how often test RMSE is computed; other rounds
    record ``nan``. The final round is always evaluated. Parameters after
    each round listed in ``record_at`` are kept in ``RunResult.snapshots``.
    With ``clip_radius`` every update is projected onto the ball of that
    radius around the initial parameters.
    """
    if not zones:
        raise DomainError("no zones to train")
    artifacts = artifacts or FusionArtifacts()
    planner = _FusionPlanner(algorithm, zones, artifacts, seed)
    problems = problems if problems is not None else bind_zones(zones, objective)
    test = {}
    for z in zones:
        check_test_split(z)
        test[z.zone_id] = (
            np.vstack([u.x_test for u in z.users]),
            np.concatenate([u.y_test for u in z.users]),
        )
    ids = [z.zone_id for z in zones]
    theta0 = np.zeros(objective.dim) if init is None else np.asarray(init, dtype=float)
    thetas = {z: theta0.copy() for z in ids}
    traces: list[RoundTrace] = []
    snapshots: dict[int, dict[str, np.ndarray]] = {}
    record = set(record_at)
    drift = 0.0
    projected = 0
    if clip_radius is not None and not clip_radius > 0:
        raise ConfigError("clip_radius must be positive")
    T = algorithm.rounds
    for t in range(1, T + 1):
        eta = lr_at(algorithm.schedule, t)
        snapshot = thetas
        updated: dict[str, np.ndarray] = {}
        info: dict[str, tuple[tuple[str, ...], float, float]] = {}
        if algorithm.tag == "fedavg":
            theta = snapshot[ids[0]]
            grads = [problems[z].grad(theta) for z in ids]
            g = np.mean(grads, axis=0)
            new = fused_step(theta, g, {}, {}, eta)
            for z, gz in zip(ids, grads):
                updated[z] = new
                info[z] = ((), 0.0, float(np.linalg.norm(gz)))
        else:
            for z in ids:
                theta = snapshot[z]
                g = problems[z].grad(theta)
                chosen = planner.fusion_set(z, t)
                shared = {o: problems[o].grad(theta) for o in chosen}
                lam = attention(g, shared, algorithm.similarity)
                updated[z] = fused_step(theta, g, shared, lam, eta)
                info[z] = (chosen, math.fsum(lam.values()), float(np.linalg.norm(g)))
        if clip_radius is not None:
            for z, th in updated.items():
                dist = float(np.linalg.norm(th - theta0))
                if dist > clip_radius:
                    updated[z] = theta0 + (th - theta0) * (clip_radius / dist)
                    projected += 1
        thetas = updated
        if t in record:
            snapshots[t] = {z: th.copy() for z, th in thetas.items()}
        evaluate_now = t == T or (eval_every > 0 and t % eval_every == 0)
        for z in ids:
            drift = max(drift, float(np.linalg.norm(thetas[z] - theta0)))
            chosen, sum_lam, gnorm = info[z]
            rmse = _evaluate_arrays(objective, thetas[z], *test[z])["rmse"] if evaluate_now else math.nan
            traces.append(
                RoundTrace(
                    t, z, algorithm.label, problems[z].value(thetas[z]), rmse,
                    len(chosen), tuple(chosen), sum_lam, gnorm, eta,
                )
            )
    return RunResult(algorithm, traces, thetas, drift, snapshots, projected)


def neighborhoods(traces: Sequence[RoundTrace]) -> list[SampledNeighborhood]:
    return [SampledNeighborhood(t.zone_id, t.round, t.sampled_ids) for t in traces]


# --- trace CSV ---------------------------------------------------------------------


def traces_to_csv(traces: Sequence[RoundTrace]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_COLUMNS)
    for t in traces:
        w.writerow(t.row())
    return buf.getvalue()


def traces_from_csv(text: str) -> list[RoundTrace]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(header) != TRACE_COLUMNS:
        raise ConfigError(f"trace CSV header must be {','.join(TRACE_COLUMNS)}")
    out = []
    for row in reader:
        if not row:
            continue
        out.append(
            RoundTrace(
                int(row[0]), row[1], row[2], float(row[3]), float(row[4]), int(row[5]),
                tuple(s for s in row[6].split(";") if s), float(row[7]), float(row[8]), float(row[9]),
            )
        )
    return out
