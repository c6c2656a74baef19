"""YAML experiment configuration with line-numbered validation errors.

Example::

    seed: 7
    output_dir: runs/demo
    world:
      n_zones: 16
      grid: [4, 4]
      objective: ridge_regression
    dp: {epsilon: 10.0, enabled: true}
    histogram: {n_bins: 20}
    metric: euclidean
    mcmc: {max_steps: 50000}
    training: {rounds: 200}
    algorithms: [sgeofl, dzgd, sgfusion, {tag: topk_sgfusion, k: 3}]

Every key is optional except ``algorithms``. ``world.seed`` defaults to the
master seed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from sgfusion.dendrogram import McmcConfig
from sgfusion.errors import ConfigError
from sgfusion.fusion import TrainingSchedule
from sgfusion.label_stats import DPConfig, canonical_metric
from sgfusion.sim.training import ALGORITHMS, AlgorithmSpec
from sgfusion.sim.world import WorldSpec

SECTIONS = ("seed", "output_dir", "world", "dp", "histogram", "metric", "mcmc", "training", "algorithms")
HISTOGRAM_KEYS = ("n_bins", "lo", "hi")
TRAINING_KEYS = ("rounds", "schedule", "mu", "eta0", "similarity", "eval_every", "clip")
ALGO_KEYS = ("tag", "k", "chi", "rounds")


@dataclass(frozen=True)
class HistogramConfig:
    n_bins: int = 20
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.n_bins < 1:
            raise ConfigError("n_bins must be positive")
        if (self.lo is None) != (self.hi is None):
            raise ConfigError("give both lo and hi, or neither")
        if self.lo is not None and not self.lo < self.hi:
            raise ConfigError("lo must be below hi")


@dataclass(frozen=True)
class TrainingConfig:
    rounds: int = 100
    schedule: str = "inverse_mu_t"
    mu: float | None = None  # None: measured strong convexity of the zone objectives
    eta0: float = 0.1
    similarity: str = "inner"
    eval_every: int = 0  # 0: evaluate test RMSE on the final round only
    clip: bool = True  # project iterates onto the ball the gradient bound is measured on

    def __post_init__(self):
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.schedule not in ("inverse_mu_t", "constant"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.mu is not None and not self.mu > 0:
            raise ConfigError("mu must be positive")
        if self.similarity not in ("inner", "cosine"):
            raise ConfigError(f"unknown similarity {self.similarity!r}")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0")

    def schedule_for(self, mu: float) -> TrainingSchedule:
        return TrainingSchedule(self.schedule, mu=mu, eta0=self.eta0)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec
    dp: DPConfig
    metric: str
    mcmc: McmcConfig
    algorithms: tuple[AlgorithmSpec, ...]
    output_dir: str
    master_seed: int
    histogram: HistogramConfig = field(default_factory=HistogramConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def __post_init__(self):
        if not self.algorithms:
            raise ConfigError("at least one algorithm is required")
        labels = [a.label for a in self.algorithms]
        if len(set(labels)) != len(labels):
            raise ConfigError(f"duplicate algorithms: {labels}")

    def to_dict(self) -> dict:
        return {
            "seed": self.master_seed,
            "output_dir": self.output_dir,
            "world": self.world.to_dict(),
            "dp": dataclasses.asdict(self.dp),
            "histogram": dataclasses.asdict(self.histogram),
            "metric": self.metric,
            "mcmc": dataclasses.asdict(self.mcmc),
            "training": dataclasses.asdict(self.training),
            "algorithms": [algorithm_to_dict(a) for a in self.algorithms],
        }

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


def algorithm_to_dict(a: AlgorithmSpec) -> dict:
    d: dict[str, Any] = {"tag": a.tag, "rounds": a.rounds}
    if a.k is not None:
        d["k"] = a.k
    if a.chi is not None:
        d["chi"] = a.chi
    return d


# --- YAML with line marks ------------------------------------------------------------


class _Located:
    """Parsed YAML plus the line of every mapping key and sequence item."""

    def __init__(self, text: str, source: str):
        self.source = source
        self.lines: dict[tuple, int] = {}
        try:
            node = yaml.compose(text, Loader=yaml.SafeLoader)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            line = mark.line + 1 if mark is not None else 1
            raise ConfigError(f"{source}:{line}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
        self.data = {} if node is None else self._walk(node, ())
        if not isinstance(self.data, dict):
            raise ConfigError(f"{source}:1: top level must be a mapping")

    def _walk(self, node, path):
        self.lines.setdefault(path, node.start_mark.line + 1)
        if isinstance(node, yaml.MappingNode):
            out = {}
            for k, v in node.value:
                key = yaml.safe_load(yaml.serialize(k))
                self.lines[path + (key,)] = k.start_mark.line + 1
                out[key] = self._walk(v, path + (key,))
            return out
        if isinstance(node, yaml.SequenceNode):
            return [self._walk(v, path + (i,)) for i, v in enumerate(node.value)]
        return yaml.safe_load(yaml.serialize(node))

    def error(self, path: tuple, msg: str) -> ConfigError:
        p = path
        while p and p not in self.lines:
            p = p[:-1]
        line = self.lines.get(p, 1)
        where = ".".join(str(s) for s in path)
        return ConfigError(f"{self.source}:{line}: {where + ': ' if where else ''}{msg}")


def _section(loc: _Located, key: str, allowed: tuple[str, ...] | None) -> dict:
    val = loc.data.get(key, {})
    if val is None:
        return {}
    if not isinstance(val, dict):
        raise loc.error((key,), "must be a mapping")
    if allowed is not None:
        for k in val:
            if k not in allowed:
                raise loc.error((key, k), f"unknown key (allowed: {', '.join(allowed)})")
    return val


def _build(loc: _Located, path: tuple, factory, kwargs: dict):
    """Call ``factory(**kwargs)``, pinning any error to the offending key's line."""
    try:
        return factory(**kwargs)
    except (ConfigError, TypeError, ValueError) as exc:
        msg = str(exc)
        culprit = next((k for k in kwargs if str(k) in msg), None)
        raise loc.error(path + ((culprit,) if culprit is not None else ()), msg) from None


def parse_algorithm_token(token: str, rounds: int, similarity: str = "inner") -> AlgorithmSpec:
    """``sgfusion``, ``topk_sgfusion:3`` / ``topk_sgfusion_k3``, ``chi_sgfusion:dzgd``."""
    token = token.strip()
    if token.startswith("topk_sgfusion_k"):
        token = "topk_sgfusion:" + token[len("topk_sgfusion_k"):]
    elif token.startswith("chi_sgfusion_"):
        token = "chi_sgfusion:" + token[len("chi_sgfusion_"):]
    tag, _, arg = token.partition(":")
    if tag not in ALGORITHMS:
        raise ConfigError(f"unknown algorithm {tag!r}; expected one of {ALGORITHMS}")
    kw: dict[str, Any] = {}
    if tag == "topk_sgfusion":
        if not arg.isdigit():
            raise ConfigError("topk_sgfusion needs an integer k, e.g. topk_sgfusion:3")
        kw["k"] = int(arg)
    elif tag == "chi_sgfusion":
        if arg != "dzgd" and not arg.isdigit():
            raise ConfigError("chi_sgfusion needs chi, e.g. chi_sgfusion:2 or chi_sgfusion:dzgd")
        kw["chi"] = arg if arg == "dzgd" else int(arg)
    elif arg:
        raise ConfigError(f"{tag} takes no argument")
    return AlgorithmSpec(tag, rounds=rounds, similarity=similarity, **kw)


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    loc = _Located(text, source)
    for k in loc.data:
        if k not in SECTIONS:
            raise loc.error((k,), f"unknown section (allowed: {', '.join(SECTIONS)})")
    seed = loc.data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise loc.error(("seed",), "must be a non-negative integer")

    world_fields = tuple(f.name for f in dataclasses.fields(WorldSpec))
    world_kw = dict(_section(loc, "world", world_fields))
    world_kw.setdefault("seed", seed)
    world = _build(loc, ("world",), WorldSpec, world_kw)
    dp = _build(loc, ("dp",), DPConfig, _section(loc, "dp", ("epsilon", "enabled")))
    hist = _build(loc, ("histogram",), HistogramConfig, _section(loc, "histogram", HISTOGRAM_KEYS))
    # the chain's seed is derived from the master seed
    mcmc_fields = tuple(f.name for f in dataclasses.fields(McmcConfig) if f.name != "seed")
    mcmc = _build(loc, ("mcmc",), McmcConfig, _section(loc, "mcmc", mcmc_fields))
    training = _build(
        loc, ("training",), TrainingConfig, _section(loc, "training", TRAINING_KEYS)
    )

    metric = loc.data.get("metric", "euclidean")
    try:
        metric = canonical_metric(str(metric))
    except ValueError as exc:
        raise loc.error(("metric",), str(exc)) from None

    raw_algos = loc.data.get("algorithms")
    if not isinstance(raw_algos, list) or not raw_algos:
        raise loc.error(("algorithms",), "must be a non-empty list")
    algos = []
    for i, item in enumerate(raw_algos):
        path = ("algorithms", i)
        try:
            if isinstance(item, str):
                algos.append(parse_algorithm_token(item, training.rounds, training.similarity))
            elif isinstance(item, dict):
                for k in item:
                    if k not in ALGO_KEYS:
                        raise loc.error(path + (k,), f"unknown key (allowed: {', '.join(ALGO_KEYS)})")
                kw = dict(item)
                kw.setdefault("rounds", training.rounds)
                algos.append(_build(loc, path, AlgorithmSpec, dict(kw, similarity=training.similarity)))
            else:
                raise loc.error(path, "must be a tag string or a mapping")
        except ConfigError as exc:
            if str(exc).startswith(source):
                raise
            raise loc.error(path, str(exc)) from None

    out_dir = loc.data.get("output_dir", "sgfusion_out")
    try:
        return ExperimentConfig(
            world=world, dp=dp, metric=metric, mcmc=mcmc, algorithms=tuple(algos),
            output_dir=str(out_dir), master_seed=seed, histogram=hist, training=training,
        )
    except ConfigError as exc:
        raise loc.error(("algorithms",), str(exc)) from None


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, str(p))


def with_overrides(
    cfg: ExperimentConfig,
    seed: int | None = None,
    out: str | None = None,
    algorithms: str | None = None,
) -> ExperimentConfig:
    """Apply command-line overrides; a new seed also reseeds the world."""
    changes: dict[str, Any] = {}
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed must be non-negative")
        changes["master_seed"] = seed
        changes["world"] = dataclasses.replace(cfg.world, seed=seed)
    if out is not None:
        changes["output_dir"] = out
    if algorithms is not None:
        tokens = [t for t in algorithms.split(",") if t.strip()]
        if not tokens:
            raise ConfigError("--algorithms needs at least one tag")
        rounds = cfg.training.rounds
        changes["algorithms"] = tuple(
            parse_algorithm_token(t, rounds, cfg.training.similarity) for t in tokens
        )
    return cfg.replace(**changes) if changes else cfg
