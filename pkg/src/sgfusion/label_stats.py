"""Label histograms, the Laplace mechanism and the zone distance graph.

Histograms hold raw counts over fixed bin edges. Bins are left-closed and
right-open except the final bin, which also includes its right edge.
Distances between zones are computed after scaling each histogram to unit
mass of ``|counts|`` so that noised (possibly negative) counts stay usable
without clipping.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from sgfusion.errors import ConfigError, DomainError, LabelRangeError, SchemaError

#: Sensitivity of a raw-count histogram under replace-one-label adjacency.
HISTOGRAM_SENSITIVITY = 1.0

_MINKOWSKI = re.compile(r"^minkowski[(:]\s*([0-9.eE+-]+)\s*\)?$")


@dataclass(frozen=True)
class LabelHistogram:
    bin_edges: tuple[float, ...]
    counts: tuple[float, ...]

    def __post_init__(self):
        edges = tuple(float(e) for e in self.bin_edges)
        counts = tuple(float(c) for c in self.counts)
        if len(edges) < 2:
            raise ConfigError("a histogram needs at least two bin edges")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigError("bin edges must be strictly increasing")
        if len(counts) != len(edges) - 1:
            raise SchemaError(f"{len(counts)} counts for {len(edges) - 1} bins")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)

    @property
    def n_bins(self) -> int:
        return len(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float)

    def normalized(self) -> np.ndarray:
        """Counts scaled to unit L1 mass of ``|counts|`` (zeros stay zeros)."""
        arr = self.as_array()
        mass = np.abs(arr).sum()
        if mass == 0.0:
            return arr
        return arr / mass


@dataclass(frozen=True)
class DPConfig:
    epsilon: float = 10.0
    enabled: bool = True

    def __post_init__(self):
        if self.enabled and not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ConfigError(f"epsilon must be positive and finite, got {self.epsilon!r}")


@dataclass(frozen=True)
class ZoneDistanceGraph:
    zone_ids: tuple[str, ...]
    distances: np.ndarray = field(repr=False)
    metric_tag: str = "euclidean"

    def __post_init__(self):
        d = np.array(self.distances, dtype=float)
        n = len(self.zone_ids)
        if d.shape != (n, n):
            raise SchemaError(f"distance matrix shape {d.shape} does not match {n} zones")
        if not np.all(np.isfinite(d)) or np.any(d < 0):
            raise DomainError("distances must be finite and non-negative")
        if not np.array_equal(d, d.T):
            raise DomainError("distance matrix must be symmetric")
        if np.any(np.diag(d) != 0):
            raise DomainError("distance matrix must have a zero diagonal")
        d.setflags(write=False)
        object.__setattr__(self, "zone_ids", tuple(str(z) for z in self.zone_ids))
        object.__setattr__(self, "distances", d)

    def __len__(self) -> int:
        return len(self.zone_ids)

    def index(self, zone_id: str) -> int:
        return self.zone_ids.index(zone_id)

    def distance(self, a: str, b: str) -> float:
        return float(self.distances[self.index(a), self.index(b)])


def uniform_bin_edges(lo: float, hi: float, n_bins: int = 20) -> tuple[float, ...]:
    if n_bins < 1:
        raise ConfigError("n_bins must be >= 1")
    if not hi > lo:
        raise ConfigError(f"empty label range [{lo}, {hi}]")
    return tuple(float(e) for e in np.linspace(lo, hi, n_bins + 1))


def build_user_histogram(labels: Iterable[float], bin_edges: Sequence[float]) -> LabelHistogram:
    edges = np.asarray(list(bin_edges), dtype=float)
    if edges.size == 0:
        raise ConfigError("bin_edges must not be empty")
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ConfigError("bin_edges must be strictly increasing with at least two entries")
    y = np.asarray(list(labels), dtype=float)
    lo, hi = edges[0], edges[-1]
    bad = ~((y >= lo) & (y <= hi))
    if np.any(bad):
        raise LabelRangeError(float(y[bad][0]), float(lo), float(hi))
    idx = np.searchsorted(edges, y, side="right") - 1
    idx[idx == edges.size - 1] = edges.size - 2
    counts = np.bincount(idx, minlength=edges.size - 1).astype(float)
    return LabelHistogram(tuple(edges), tuple(counts))


def dp_perturb(h: LabelHistogram, cfg: DPConfig, rng: np.random.Generator) -> LabelHistogram:
    """Release ``h`` under ``cfg.epsilon``-DP with Laplace noise of scale 1/epsilon.

    Output counts are not clipped. With ``cfg.enabled`` false the histogram
    is returned unchanged.
    """
    if not cfg.enabled:
        return h
    if not cfg.epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {cfg.epsilon!r}")
    scale = HISTOGRAM_SENSITIVITY / cfg.epsilon
    noise = rng.laplace(0.0, scale, size=h.n_bins)
    return LabelHistogram(h.bin_edges, tuple(h.as_array() + noise))


def aggregate_zone_histogram(users: Sequence[LabelHistogram], m_z: int | None = None) -> LabelHistogram:
    if not users:
        raise DomainError("cannot aggregate an empty user list")
    if m_z is not None and m_z != len(users):
        raise DomainError(f"m_z={m_z} but {len(users)} user histograms given")
    edges = users[0].bin_edges
    for h in users[1:]:
        if h.bin_edges != edges:
            raise SchemaError("user histograms do not share bin edges")
    mean = np.mean([h.as_array() for h in users], axis=0)
    return LabelHistogram(edges, tuple(mean))


def parse_metric(metric_tag: str) -> tuple[str, float]:
    """Return ``(name, p)`` for a metric tag such as ``"minkowski(3)"``."""
    tag = metric_tag.strip().lower()
    if tag == "euclidean":
        return "euclidean", 2.0
    if tag == "manhattan":
        return "manhattan", 1.0
    m = _MINKOWSKI.match(tag)
    if m is None:
        raise ConfigError(f"unknown metric {metric_tag!r}")
    p = float(m.group(1))
    if not p >= 1 or not math.isfinite(p):
        raise ConfigError(f"minkowski order must be >= 1, got {p}")
    return "minkowski", p


def canonical_metric(metric_tag: str) -> str:
    name, p = parse_metric(metric_tag)
    return f"minkowski({p:g})" if name == "minkowski" else name


def _vector_distance(a: np.ndarray, b: np.ndarray, name: str, p: float) -> float:
    diff = np.abs(a - b)
    if name == "euclidean":
        return float(np.sqrt(np.sum(diff * diff)))
    if name == "manhattan":
        return float(np.sum(diff))
    return float(np.sum(diff**p) ** (1.0 / p))


def zone_distance(a: LabelHistogram, b: LabelHistogram, metric_tag: str = "euclidean") -> float:
    name, p = parse_metric(metric_tag)
    if a.bin_edges != b.bin_edges:
        raise SchemaError("histograms do not share bin edges")
    return _vector_distance(a.normalized(), b.normalized(), name, p)


def build_zone_graph(
    zones: Mapping[str, LabelHistogram] | Sequence[tuple[str, LabelHistogram]],
    metric_tag: str = "euclidean",
) -> ZoneDistanceGraph:
    items = list(zones.items()) if isinstance(zones, Mapping) else list(zones)
    if len(items) < 2:
        raise DomainError("a zone graph needs at least two zones")
    ids = [str(z) for z, _ in items]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate zone ids")
    hists = [h for _, h in items]
    edges = hists[0].bin_edges
    if any(h.bin_edges != edges for h in hists):
        raise SchemaError("zone histograms do not share bin edges")
    name, p = parse_metric(metric_tag)
    vecs = [h.normalized() for h in hists]
    n = len(items)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = _vector_distance(vecs[i], vecs[j], name, p)
    return ZoneDistanceGraph(tuple(ids), d, canonical_metric(metric_tag))


# --- text formats ---------------------------------------------------------

HISTOGRAM_HEADER = ("zone_id", "bin_lo", "bin_hi", "count")


def histograms_to_csv(zones: Mapping[str, LabelHistogram]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(HISTOGRAM_HEADER)
    for zid, h in zones.items():
        for lo, hi, c in zip(h.bin_edges, h.bin_edges[1:], h.counts):
            w.writerow([zid, repr(lo), repr(hi), repr(c)])
    return buf.getvalue()


def histograms_from_csv(text: str) -> dict[str, LabelHistogram]:
    rows = list(csv.reader(io.StringIO(text)))
    if rows and tuple(rows[0]) == HISTOGRAM_HEADER:
        rows = rows[1:]
    edges: dict[str, list[float]] = {}
    counts: dict[str, list[float]] = {}
    for lineno, row in enumerate(rows, start=2):
        if not row:
            continue
        if len(row) != 4:
            raise SchemaError(f"line {lineno}: expected 4 fields, got {len(row)}")
        zid, lo, hi, c = row[0], float(row[1]), float(row[2]), float(row[3])
        if zid not in edges:
            edges[zid] = [lo]
            counts[zid] = []
        elif edges[zid][-1] != lo:
            raise SchemaError(f"line {lineno}: bins of zone {zid!r} are not contiguous")
        edges[zid].append(hi)
        counts[zid].append(c)
    return {z: LabelHistogram(tuple(edges[z]), tuple(counts[z])) for z in edges}


def graph_to_csv(graph: ZoneDistanceGraph) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["zone_id", *graph.zone_ids])
    for zid, row in zip(graph.zone_ids, graph.distances):
        w.writerow([zid, *(repr(float(v)) for v in row)])
    return buf.getvalue()


def graph_from_csv(text: str, metric_tag: str = "euclidean") -> ZoneDistanceGraph:
    rows = [r for r in csv.reader(io.StringIO(text)) if r]
    if not rows or rows[0][0] != "zone_id":
        raise SchemaError("graph CSV must start with a 'zone_id' header row")
    ids = rows[0][1:]
    body = rows[1:]
    if [r[0] for r in body] != ids:
        raise SchemaError("graph CSV row labels do not match the header")
    d = np.array([[float(v) for v in r[1:]] for r in body])
    return ZoneDistanceGraph(tuple(ids), d, metric_tag)
