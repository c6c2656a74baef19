"""Synthetic zones, users and data.

Each zone gets a ground-truth parameter vector. Pairwise distances between
the ground truths are rescaled so their maximum equals ``non_iid_tau``.
Zone truths are either i.i.d. Gaussian or drawn around a few cluster
centres; ``cluster_layout`` controls how clusters map onto the grid, which
is how experiments decouple label similarity from geographic adjacency.

Sample generation depends on the objective:

- ``quadratic``: ``x ~ N(truth, sample_sd^2 I)``, label ``mean(x) + noise``
- ``ridge_regression``: ``x ~ N(feature_shift * 1, I)``, ``y = x.truth + noise``
- ``logistic_l2``: same features, ``y ~ Bernoulli(sigmoid(x.truth))``
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from sgfusion.errors import ConfigError, DomainError
from sgfusion.rng import derive_rng
from sgfusion.sim.objectives import OBJECTIVES, Objective

LAYOUTS = ("iid", "contiguous", "random", "interleaved")


@dataclass(frozen=True)
class WorldSpec:
    n_zones: int = 16
    grid: tuple[int, int] = (4, 4)
    users_per_zone: int = 12
    samples_per_user: int = 460
    dim: int = 5
    non_iid_tau: float = 1.0
    label_noise_sd: float = 0.5
    seed: int = 0
    objective: str = "ridge_regression"
    reg: float = 0.1
    feature_shift: float = 1.0
    sample_sd: float = 1.0
    curvature: tuple[float, float] = (1.0, 1.0)
    n_clusters: int = 0
    cluster_spread: float = 0.1
    cluster_layout: str = "iid"
    test_fraction: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "curvature", tuple(float(c) for c in self.curvature))
        rows, cols = self.grid
        if self.n_zones < 1:
            raise ConfigError("n_zones must be positive")
        if rows < 1 or cols < 1 or rows * cols < self.n_zones:
            raise ConfigError(f"grid {rows}x{cols} cannot hold {self.n_zones} zones")
        if self.users_per_zone < 1 or self.samples_per_user < 1:
            raise ConfigError("users_per_zone and samples_per_user must be positive")
        if self.dim < 1:
            raise ConfigError("dim must be positive")
        if self.non_iid_tau < 0 or self.label_noise_sd < 0 or self.sample_sd < 0:
            raise ConfigError("non_iid_tau, label_noise_sd and sample_sd must be non-negative")
        if self.objective not in OBJECTIVES:
            raise ConfigError(f"unknown objective {self.objective!r}")
        if len(self.curvature) != 2 or not 0 < self.curvature[0] <= self.curvature[1]:
            raise ConfigError("curvature must be (lo, hi) with 0 < lo <= hi")
        if self.cluster_layout not in LAYOUTS:
            raise ConfigError(f"cluster_layout must be one of {LAYOUTS}")
        if self.cluster_layout != "iid" and not 1 <= self.n_clusters <= self.n_zones:
            raise ConfigError("clustered layouts need 1 <= n_clusters <= n_zones")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")

    def make_objective(self) -> Objective:
        curv = tuple(np.linspace(self.curvature[0], self.curvature[1], self.dim))
        return Objective(self.objective, self.dim, reg=self.reg, curvature=curv)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["curvature"] = list(self.curvature)
        return d


@dataclass
class UserDataset:
    user_id: str
    zone_id: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def features(self) -> np.ndarray:
        return np.vstack([self.x_train, self.x_test])

    @property
    def labels(self) -> np.ndarray:
        return np.concatenate([self.y_train, self.y_test])


@dataclass
class Zone:
    zone_id: str
    users: list[UserDataset]
    geo_cell: tuple[int, int]
    truth: np.ndarray = field(repr=False)
    cluster: int = 0

    @property
    def m_z(self) -> int:
        return len(self.users)

    def train_pairs(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(u.x_train, u.y_train) for u in self.users]


def zone_ids_for(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"z{i:0{width}d}" for i in range(n)]


def _cluster_assignment(spec: WorldSpec, rng: np.random.Generator) -> np.ndarray:
    n, k = spec.n_zones, spec.n_clusters
    base = np.arange(n) % k
    if spec.cluster_layout == "contiguous":
        # row-major blocks of equal size share a cluster
        return (np.arange(n) * k) // n
    if spec.cluster_layout == "random":
        return rng.permutation(base)
    # interleaved: cluster index cycles along rows and jumps between rows,
    # so 4-neighbours on the grid never share a cluster when k >= 3
    rows, cols = spec.grid
    cells = [(i // cols, i % cols) for i in range(n)]
    return np.array([(r * (k // 2 + 1) + c) % k for r, c in cells])


def _draw_truths(spec: WorldSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n, p = spec.n_zones, spec.dim
    center = rng.normal(size=p)
    if spec.cluster_layout == "iid":
        clusters = np.zeros(n, dtype=int)
        offsets = rng.normal(size=(n, p))
    else:
        clusters = _cluster_assignment(spec, rng)
        centers = rng.normal(size=(spec.n_clusters, p))
        offsets = centers[clusters] + spec.cluster_spread * rng.normal(size=(n, p))
    if n == 1 or spec.non_iid_tau == 0:
        return np.tile(center, (n, 1)), clusters
    diff = offsets[:, None, :] - offsets[None, :, :]
    diam = float(np.sqrt((diff**2).sum(-1)).max())
    if diam == 0:
        raise ConfigError("degenerate zone optima; cannot rescale to non_iid_tau")
    offsets = (offsets - offsets.mean(axis=0)) * (spec.non_iid_tau / diam)
    return center + offsets, clusters


def _user_samples(spec: WorldSpec, truth: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n, p = spec.samples_per_user, spec.dim
    if spec.objective == "quadratic":
        X = truth + spec.sample_sd * rng.normal(size=(n, p))
        y = X.mean(axis=1) + spec.label_noise_sd * rng.normal(size=n)
        return X, y
    X = spec.feature_shift + rng.normal(size=(n, p))
    z = X @ truth
    if spec.objective == "ridge_regression":
        return X, z + spec.label_noise_sd * rng.normal(size=n)
    prob = 0.5 * (1.0 + np.tanh(0.5 * z))
    return X, (rng.random(n) < prob).astype(float)


def generate_world(spec: WorldSpec) -> list[Zone]:
    """Build the zones for ``spec``; a pure function of the spec (seed included)."""
    rng = derive_rng(spec.seed, "world")
    truths, clusters = _draw_truths(spec, rng)
    rows, cols = spec.grid
    zones = []
    for i, zid in enumerate(zone_ids_for(spec.n_zones)):
        users = []
        for u in range(spec.users_per_zone):
            urng = derive_rng(spec.seed, "user", zid, u)
            X, y = _user_samples(spec, truths[i], urng)
            n = len(y)
            n_test = max(1, int(round(spec.test_fraction * n))) if n >= 2 else 0
            perm = urng.permutation(n)
            test, train = perm[:n_test], perm[n_test:]
            users.append(UserDataset(f"{zid}u{u:03d}", zid, X[train], y[train], X[test], y[test]))
        zones.append(Zone(zid, users, (i // cols, i % cols), truths[i].copy(), int(clusters[i])))
    return zones


def grid_neighbors(zones: list[Zone]) -> dict[str, tuple[str, ...]]:
    """4-neighbour adjacency between occupied grid cells."""
    at = {z.geo_cell: z.zone_id for z in zones}
    out = {}
    for z in zones:
        r, c = z.geo_cell
        nbrs = [at[cell] for cell in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)) if cell in at]
        out[z.zone_id] = tuple(sorted(nbrs))
    return out


def truth_diameter(zones: list[Zone]) -> float:
    T = np.array([z.truth for z in zones])
    if len(T) < 2:
        return 0.0
    return float(np.sqrt(((T[:, None] - T[None]) ** 2).sum(-1)).max())


def all_labels(zones: list[Zone]) -> np.ndarray:
    return np.concatenate([u.y_train for z in zones for u in z.users])


def label_range(zones: list[Zone]) -> tuple[float, float]:
    y = all_labels(zones)
    lo, hi = float(y.min()), float(y.max())
    if hi <= lo:
        hi = lo + 1.0
    return lo, hi


def check_test_split(zone: Zone) -> None:
    if not any(len(u.y_test) for u in zone.users):
        raise DomainError(f"zone {zone.zone_id} has an empty test split")


def preset_16_zones(seed: int = 0, **overrides) -> WorldSpec:
    """16 zones of 12 users with ~460 samples each."""
    params = dict(n_zones=16, grid=(4, 4), users_per_zone=12, samples_per_user=460, seed=seed)
    params.update(overrides)
    return WorldSpec(**params)
