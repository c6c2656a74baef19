"""Convergence bound, excess risk, homophily and zone-level win counting."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from sgfusion.errors import DomainError, SchemaError
from sgfusion.label_stats import LabelHistogram, parse_metric, zone_distance

TIE_TOL = 1e-9

REPORT_COLUMNS = ("zone_id", "algorithm", "rmse", "excess_risk", "bound_rhs", "homophily")


@dataclass(frozen=True)
class BoundInputs:
    """Constants of the bound plus the pairwise sampling probabilities.

    ``p_pairs[i, j]`` is the probability that zone ``zone_ids[i]`` samples
    zone ``zone_ids[j]``; the diagonal is ignored.
    """

    mu: float
    G: float
    tau: float
    T: int
    p_pairs: np.ndarray
    zone_ids: tuple[str, ...]

    def __post_init__(self):
        P = np.array(self.p_pairs, dtype=float)
        object.__setattr__(self, "zone_ids", tuple(self.zone_ids))
        if P.shape != (len(self.zone_ids),) * 2:
            raise SchemaError("p_pairs must be square over zone_ids")
        for name in ("mu", "G", "tau"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DomainError(f"{name} must be finite and non-negative, got {v!r}")
        if not self.mu > 0:
            raise DomainError("mu must be positive")
        if not np.all(np.isfinite(P)) or P.min(initial=0) < 0 or P.max(initial=0) > 1:
            raise DomainError("p_pairs entries must lie in [0, 1]")
        P.setflags(write=False)
        object.__setattr__(self, "p_pairs", P)

    def row(self, z: str) -> np.ndarray:
        i = self.zone_ids.index(z)
        return np.delete(self.p_pairs[i], i)


def gbar(inputs: BoundInputs, z: str) -> float:
    """``G^2 * E[(1 + N)^2]`` where ``N`` is the sampled-neighbourhood size."""
    p = inputs.row(z)
    s = float(p.sum())
    return inputs.G**2 * (1.0 + 2.0 * s + float((p * (1.0 - p)).sum()) + s * s)


def bound_rhs(inputs: BoundInputs, z: str) -> float:
    """Upper bound on the expected excess risk of zone ``z`` after ``T`` rounds."""
    T = inputs.T
    if T < 2:
        raise DomainError(f"the bound needs T >= 2, got {T}")
    G2, mu = inputs.G**2, inputs.mu
    return (
        10.0 * G2 / (mu * T)
        + 16.0 * G2 / (mu * T) * (1.0 + math.log(T / 2.0))
        + gbar(inputs, z) / (2.0 * mu) * (1.0 + math.log(T)) / T
        + 1.5 * inputs.G * inputs.tau * float(inputs.row(z).sum())
    )


def excess_risk(thetas: Mapping[str, np.ndarray], problems: Mapping) -> dict[str, float]:
    """``F_z(theta_z) - F_z(theta*_z)`` per zone for one run."""
    out = {}
    for z, theta in thetas.items():
        prob = problems[z]
        if prob.objective.tag not in ("quadratic", "ridge_regression", "logistic_l2"):
            raise DomainError(f"no exact optimum for objective {prob.objective.tag!r}")
        out[z] = prob.excess(theta)
    return out


@dataclass(frozen=True)
class MeanEstimate:
    mean: float
    stderr: float
    n: int

    @property
    def upper(self) -> float:
        """Mean plus two standard errors."""
        return self.mean + 2.0 * self.stderr


def mean_with_stderr(values: Sequence[float]) -> MeanEstimate:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise DomainError("no values to average")
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return MeanEstimate(float(v.mean()), se, int(v.size))


def homophily(
    traces: Sequence,
    zone_hists: Mapping[str, LabelHistogram],
    metric_tag: str,
    per_zone: bool = False,
) -> float | dict[str, float]:
    """Average label-distribution distance between zones and their fusion partners.

    Averaged over partners, then zones, then rounds. A zone with no partners
    in a round contributes 0 but still counts toward the zone average.
    ``per_zone=True`` returns the round-averaged value for each zone instead.
    """
    parse_metric(metric_tag)
    cache: dict[tuple[str, str], float] = {}

    def dist(a: str, b: str) -> float:
        key = (a, b) if a <= b else (b, a)
        if key not in cache:
            cache[key] = zone_distance(zone_hists[a], zone_hists[b], metric_tag)
        return cache[key]

    by_round: dict[int, dict[str, float]] = {}
    for tr in traces:
        ids = tr.sampled_ids
        val = math.fsum(dist(tr.zone_id, o) for o in ids) / len(ids) if ids else 0.0
        by_round.setdefault(tr.round, {})[tr.zone_id] = val
    if not by_round:
        return {} if per_zone else 0.0
    if per_zone:
        zones = sorted({z for r in by_round.values() for z in r})
        return {z: math.fsum(r.get(z, 0.0) for r in by_round.values()) / len(by_round) for z in zones}
    return math.fsum(math.fsum(r.values()) / len(r) for r in by_round.values()) / len(by_round)


@dataclass
class ComparisonReport:
    algorithm_a: str
    algorithm_b: str
    rmse: dict[str, dict[str, float]]
    wins_a: int
    wins_b: int
    ties: int
    winners: dict[str, str] = field(default_factory=dict)

    @property
    def gain(self) -> float:
        """Percent gain of A's win count over B's; ``inf`` if B never wins but A does."""
        if self.wins_b == 0:
            return 0.0 if self.wins_a == 0 else math.inf
        return (self.wins_a - self.wins_b) / self.wins_b * 100.0

    def table_row(self) -> str:
        gain = "inf" if math.isinf(self.gain) else f"{self.gain:.0f}%"
        return f"{self.algorithm_b}: {self.wins_b} | {self.algorithm_a}: {self.wins_a} | ties: {self.ties} | gain: {gain}"

    def to_dict(self) -> dict:
        return {
            "algorithm_a": self.algorithm_a,
            "algorithm_b": self.algorithm_b,
            "wins_a": self.wins_a,
            "wins_b": self.wins_b,
            "ties": self.ties,
            "gain_percent": None if math.isinf(self.gain) else self.gain,
            "winners": dict(sorted(self.winners.items())),
        }


def compare(
    rmse_a: Mapping[str, float],
    rmse_b: Mapping[str, float],
    name_a: str = "A",
    name_b: str = "B",
    tie_tol: float = TIE_TOL,
) -> ComparisonReport:
    if set(rmse_a) != set(rmse_b):
        raise SchemaError("the two reports cover different zones")
    wins_a = wins_b = ties = 0
    winners = {}
    for z in sorted(rmse_a):
        a, b = rmse_a[z], rmse_b[z]
        if a < b - tie_tol:
            wins_a += 1
            winners[z] = name_a
        elif b < a - tie_tol:
            wins_b += 1
            winners[z] = name_b
        else:
            ties += 1
            winners[z] = "tie"
    return ComparisonReport(name_a, name_b, {name_a: dict(rmse_a), name_b: dict(rmse_b)}, wins_a, wins_b, ties, winners)


# --- report serialization ----------------------------------------------------------


@dataclass(frozen=True)
class ReportRow:
    zone_id: str
    algorithm: str
    rmse: float
    excess_risk: float
    bound_rhs: float
    homophily: float


def _num(x: float) -> str:
    return repr(float(x))


def report_to_csv(rows: Sequence[ReportRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for r in rows:
        w.writerow([r.zone_id, r.algorithm, _num(r.rmse), _num(r.excess_risk), _num(r.bound_rhs), _num(r.homophily)])
    return buf.getvalue()


def report_from_csv(text: str) -> list[ReportRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or tuple(h.strip() for h in header) != REPORT_COLUMNS:
        raise SchemaError(f"report CSV header must be {','.join(REPORT_COLUMNS)}")
    return [
        ReportRow(r[0], r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]))
        for r in reader
        if r
    ]


def _jsonable(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return _jsonable(x.item())
    return x


def report_to_json(payload: dict) -> str:
    """Deterministic JSON: sorted keys, non-finite floats as null."""
    return json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"
