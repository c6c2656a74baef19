"""Experiment stages and their on-disk artifacts.

Stages and the files they read / write under the output directory::

    gen-world   -> world.json, histograms.csv, graph.csv
    build-hrg   graph.csv -> dendrogram.txt, prob_dendrograms.txt, hrg_meta.json
    train       world.json, graph.csv, prob_dendrograms.txt -> trace_<algo>.csv, run_meta.json
    report      world.json, histograms.csv, prob_dendrograms.txt, run_meta.json,
                trace_<algo>.csv -> report.json, report.csv

Every stage reads its inputs back from disk, so the monolithic run and a
sequence of single-stage invocations produce the same bytes. Nothing that
depends on wall-clock time is written.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from sgfusion import analysis
from sgfusion.cli.config import ExperimentConfig, HistogramConfig
from sgfusion.dendrogram import McmcConfig, McmcResult, from_text, optimize
from sgfusion.errors import DependencyError, SchemaError
from sgfusion.label_stats import (
    DPConfig,
    LabelHistogram,
    ZoneDistanceGraph,
    aggregate_zone_histogram,
    build_user_histogram,
    build_zone_graph,
    dp_perturb,
    graph_from_csv,
    graph_to_csv,
    histograms_from_csv,
    histograms_to_csv,
    uniform_bin_edges,
)
from sgfusion.rng import derive_rng
from sgfusion.sim.objectives import ZoneProblem
from sgfusion.sim.training import (
    AlgorithmSpec,
    FusionArtifacts,
    RoundTrace,
    RunResult,
    bind_zones,
    estimate_gradient_bound,
    run,
    traces_from_csv,
    traces_to_csv,
)
from sgfusion.sim.world import WorldSpec, Zone, generate_world, label_range
from sgfusion.zone_sampler import (
    ProbDendrogram,
    build_all,
    pair_probabilities,
    prob_dendrograms_from_text,
    prob_dendrograms_to_text,
)

WORLD = "world.json"
HISTOGRAMS = "histograms.csv"
GRAPH = "graph.csv"
DENDROGRAM = "dendrogram.txt"
PROB_DENDROGRAMS = "prob_dendrograms.txt"
HRG_META = "hrg_meta.json"
RUN_META = "run_meta.json"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"

Log = Callable[[str], None]


def trace_name(label: str) -> str:
    return f"trace_{label}.csv"


def _dumps(obj) -> str:
    return analysis.report_to_json(obj)


# --- in-memory building blocks -------------------------------------------------------


def zone_histograms(
    zones: list[Zone], hist: HistogramConfig, dp: DPConfig, seed: int
) -> dict[str, LabelHistogram]:
    """DP-perturbed per-user histograms of training labels, averaged per zone."""
    if hist.lo is None:
        lo, hi = label_range(zones)
    else:
        lo, hi = hist.lo, hist.hi
    edges = uniform_bin_edges(lo, hi, hist.n_bins)
    out = {}
    for z in zones:
        users = []
        for i, u in enumerate(z.users):
            h = build_user_histogram(u.y_train, edges)
            users.append(dp_perturb(h, dp, derive_rng(seed, "dp", z.zone_id, i)))
        out[z.zone_id] = aggregate_zone_histogram(users, z.m_z)
    return out


def build_hrg(graph: ZoneDistanceGraph, mcmc: McmcConfig, seed: int) -> tuple[McmcResult, dict[str, ProbDendrogram]]:
    result = optimize(graph, mcmc, derive_rng(seed, "mcmc"))
    return result, build_all(result.dendrogram)


def optimum_diameter(problems: Mapping[str, ZoneProblem]) -> float:
    opts = np.array([p.optimum() for p in problems.values()])
    if len(opts) < 2:
        return 0.0
    return float(np.sqrt(((opts[:, None] - opts[None]) ** 2).sum(-1)).max())


def training_constants(
    problems: Mapping[str, ZoneProblem], init: np.ndarray, seed: int, mu: float | None = None
) -> dict:
    """Strong convexity, gradient bound on a ball around ``init`` and optimum spread."""
    tau = optimum_diameter(problems)
    far = max(float(np.linalg.norm(init - p.optimum())) for p in problems.values())
    radius = 2.0 * far + 2.0 * tau + 1.0
    G = estimate_gradient_bound(problems, init, radius, derive_rng(seed, "gradient_bound"))
    measured_mu = min(p.strong_convexity() for p in problems.values())
    return {
        "mu": measured_mu if mu is None else mu,
        "measured_mu": measured_mu,
        "G": G,
        "tau": tau,
        "ball_radius": radius,
    }


def train_all(
    cfg: ExperimentConfig,
    zones: list[Zone],
    graph: ZoneDistanceGraph | None,
    pds: Mapping[str, ProbDendrogram] | None,
    log: Log | None = None,
) -> tuple[dict[str, RunResult], dict]:
    objective = cfg.world.make_objective()
    problems = bind_zones(zones, objective)
    init = np.zeros(objective.dim)
    consts = training_constants(problems, init, cfg.master_seed, cfg.training.mu)
    schedule = cfg.training.schedule_for(consts["mu"])
    arts = FusionArtifacts(pds, graph)
    results = {}
    drift = {}
    projected = {}
    clip = consts["ball_radius"] if cfg.training.clip else None
    for algo in cfg.algorithms:
        if log:
            log(f"training {algo.label} for {algo.rounds} rounds")
        spec = AlgorithmSpec(algo.tag, algo.rounds, schedule, algo.k, algo.chi, algo.similarity)
        res = run(
            spec, zones, arts, cfg.master_seed, objective, init, cfg.training.eval_every, problems,
            clip_radius=clip,
        )
        results[algo.label] = res
        drift[algo.label] = res.max_drift
        projected[algo.label] = res.n_projected
    meta = dict(consts)
    meta["max_drift"] = drift
    meta["projected_updates"] = projected
    # true when no update left the ball, i.e. clipping never changed the trajectory
    meta["iterates_in_ball"] = not any(projected.values()) and all(
        d <= consts["ball_radius"] * (1 + 1e-12) for d in drift.values()
    )
    meta["objective"] = objective.tag
    meta["seeds"] = {"master": cfg.master_seed, "world": cfg.world.seed}
    return results, meta


def _bound_probabilities(
    algo: str, ids: list[str], traces: list[RoundTrace], pds: Mapping[str, ProbDendrogram] | None
) -> np.ndarray | None:
    """Inclusion probabilities used to evaluate the bound for one algorithm.

    Exact for SGFusion (from the dendrograms) and for the deterministic
    fusion sets; empirical frequencies for chi-SGFusion. FedAvg trains one
    global model and is not covered.
    """
    n = len(ids)
    if algo == "fedavg":
        return None
    if algo == "sgfusion" and pds is not None and n > 1:
        return pair_probabilities(pds, ids)
    idx = {z: i for i, z in enumerate(ids)}
    P = np.zeros((n, n))
    rounds = {t.round for t in traces}
    for t in traces:
        for o in t.sampled_ids:
            P[idx[t.zone_id], idx[o]] += 1.0
    return P / max(1, len(rounds))


def build_report(
    cfg: ExperimentConfig,
    zones: list[Zone],
    hists: Mapping[str, LabelHistogram],
    pds: Mapping[str, ProbDendrogram] | None,
    traces: Mapping[str, list[RoundTrace]],
    meta: Mapping,
) -> tuple[dict, list[analysis.ReportRow]]:
    objective = cfg.world.make_objective()
    problems = bind_zones(zones, objective)
    ids = [z.zone_id for z in zones]
    rows: list[analysis.ReportRow] = []
    per_algo: dict[str, dict] = {}
    rmse_by_algo: dict[str, dict[str, float]] = {}
    for a in cfg.algorithms:
        label = a.label
        tr = traces[label]
        T = max(t.round for t in tr)
        last = {t.zone_id: t for t in tr if t.round == T}
        homo_zone = analysis.homophily(tr, hists, cfg.metric, per_zone=True)
        P = _bound_probabilities(a.tag, ids, tr, pds)
        inputs = None
        if P is not None and T >= 2:
            inputs = analysis.BoundInputs(meta["mu"], meta["G"], meta["tau"], T, P, tuple(ids))
        zone_stats = {}
        for z in ids:
            excess = max(0.0, last[z].train_loss - problems[z].value(problems[z].optimum()))
            rhs = analysis.bound_rhs(inputs, z) if inputs is not None else math.nan
            h = homo_zone.get(z, 0.0)
            rows.append(analysis.ReportRow(z, label, last[z].test_rmse, excess, rhs, h))
            zone_stats[z] = {"rmse": last[z].test_rmse, "excess_risk": excess, "bound_rhs": rhs, "homophily": h}
        rmse_by_algo[label] = {z: last[z].test_rmse for z in ids}
        per_algo[label] = {
            "rounds": T,
            "mean_rmse": float(np.mean(list(rmse_by_algo[label].values()))),
            "mean_excess_risk": float(np.mean([s["excess_risk"] for s in zone_stats.values()])),
            "homophily": analysis.homophily(tr, hists, cfg.metric),
            "shared_gradients": sum(t.n_sampled for t in tr),
            "zones": zone_stats,
        }
    labels = [a.label for a in cfg.algorithms]
    ref = "sgfusion" if "sgfusion" in labels else labels[0]
    comparisons = []
    for other in labels:
        if other == ref:
            continue
        rep = analysis.compare(rmse_by_algo[ref], rmse_by_algo[other], ref, other)
        d = rep.to_dict()
        d["table_row"] = rep.table_row()
        comparisons.append(d)
    payload = {
        # output_dir is left out so results do not depend on where they are written
        "config": {k: v for k, v in cfg.to_dict().items() if k != "output_dir"},
        "constants": dict(meta),
        "algorithms": per_algo,
        "comparisons": comparisons,
        "conventions": {
            "homophily": "rounds where a zone fuses with no other zone contribute 0 for that zone",
            "log": "natural",
            "tie_tol": analysis.TIE_TOL,
        },
    }
    return payload, rows


# --- file stages ------------------------------------------------------------------


class _Writer:
    """Atomic writes into one directory, remembering what was written."""

    def __init__(self, out: Path):
        self.out = out
        self.written: list[Path] = []

    def write(self, name: str, text: str) -> Path:
        path = self.out / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.out)
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(path)
        return path


@contextmanager
def _stage(out: str | Path):
    """Yield a writer; on failure remove whatever this stage wrote."""
    out = Path(out)
    created = not out.exists()
    out.mkdir(parents=True, exist_ok=True)
    w = _Writer(out)
    try:
        yield w
    except BaseException:
        for p in w.written:
            if p.exists():
                p.unlink()
        if created and out.exists() and not any(out.iterdir()):
            out.rmdir()
        raise


def _read(out: Path, name: str, stage: str) -> str:
    p = Path(out) / name
    if not p.is_file():
        raise DependencyError(f"{stage} needs {p}; run the earlier stage first")
    return p.read_text()


def load_world(out: Path, stage: str) -> list[Zone]:
    data = json.loads(_read(out, WORLD, stage))
    return generate_world(WorldSpec(**data["spec"]))


def _check_world(cfg: ExperimentConfig, out: Path, stage: str) -> None:
    data = json.loads(_read(out, WORLD, stage))
    if data["spec"] != json.loads(_dumps(cfg.world.to_dict())):
        raise DependencyError(f"{out / WORLD} was generated from a different world config")


def stage_gen_world(cfg: ExperimentConfig, out: str | Path, log: Log | None = None) -> None:
    zones = generate_world(cfg.world)
    hists = zone_histograms(zones, cfg.histogram, cfg.dp, cfg.master_seed)
    graph = build_zone_graph(hists, cfg.metric)
    world = {
        "spec": cfg.world.to_dict(),
        "zones": [
            {
                "zone_id": z.zone_id,
                "geo_cell": list(z.geo_cell),
                "cluster": z.cluster,
                "m_z": z.m_z,
                "n_train": int(sum(len(u.y_train) for u in z.users)),
                "n_test": int(sum(len(u.y_test) for u in z.users)),
                "truth": [float(v) for v in z.truth],
            }
            for z in zones
        ],
    }
    with _stage(out) as w:
        w.write(WORLD, _dumps(world))
        w.write(HISTOGRAMS, histograms_to_csv(hists))
        w.write(GRAPH, graph_to_csv(graph))
    if log:
        log(f"world: {len(zones)} zones written to {out}")


def stage_build_hrg(cfg: ExperimentConfig, out: str | Path, log: Log | None = None) -> None:
    out = Path(out)
    graph = graph_from_csv(_read(out, GRAPH, "build-hrg"), cfg.metric)
    result, pds = build_hrg(graph, cfg.mcmc, cfg.master_seed)
    t = result.dendrogram
    meta = {
        "loss": result.best_loss,
        "initial_loss": result.initial_loss,
        "steps": result.steps,
        "accepted": result.accepted,
        "converged": result.converged,
    }
    with _stage(out) as w:
        w.write(DENDROGRAM, t.to_text() + "\n")
        w.write(PROB_DENDROGRAMS, prob_dendrograms_to_text(t, pds))
        w.write(HRG_META, _dumps(meta))
    if log:
        state = "converged" if result.converged else "hit max_steps"
        log(f"dendrogram loss {result.best_loss:.6g} after {result.steps} steps ({state})")


def stage_train(cfg: ExperimentConfig, out: str | Path, log: Log | None = None) -> None:
    out = Path(out)
    _check_world(cfg, out, "train")
    zones = load_world(out, "train")
    graph = graph_from_csv(_read(out, GRAPH, "train"), cfg.metric)
    pds = prob_dendrograms_from_text(_read(out, PROB_DENDROGRAMS, "train"))
    results, meta = train_all(cfg, zones, graph, pds, log)
    with _stage(out) as w:
        for label, res in results.items():
            w.write(trace_name(label), traces_to_csv(res.traces))
        w.write(RUN_META, _dumps(meta))


def stage_report(cfg: ExperimentConfig, out: str | Path, log: Log | None = None) -> dict:
    out = Path(out)
    _check_world(cfg, out, "report")
    zones = load_world(out, "report")
    hists = histograms_from_csv(_read(out, HISTOGRAMS, "report"))
    pds = prob_dendrograms_from_text(_read(out, PROB_DENDROGRAMS, "report"))
    meta = json.loads(_read(out, RUN_META, "report"))
    traces = {a.label: traces_from_csv(_read(out, trace_name(a.label), "report")) for a in cfg.algorithms}
    payload, rows = build_report(cfg, zones, hists, pds, traces, meta)
    with _stage(out) as w:
        w.write(REPORT_JSON, _dumps(payload))
        w.write(REPORT_CSV, analysis.report_to_csv(rows))
    if log:
        for label, s in payload["algorithms"].items():
            log(f"{label:>24}: mean rmse {s['mean_rmse']:.6g}  homophily {s['homophily']:.4g}")
        for c in payload["comparisons"]:
            log(c["table_row"])
    return payload


STAGES = {
    "gen-world": stage_gen_world,
    "build-hrg": stage_build_hrg,
    "train": stage_train,
    "report": stage_report,
}


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, log: Log | None = None) -> Path:
    """All stages in order; on failure every file written by this run is removed."""
    out = Path(out if out is not None else cfg.output_dir)
    created = not out.exists()
    before = set(out.iterdir()) if not created else set()
    try:
        for fn in STAGES.values():
            fn(cfg, out, log)
    except BaseException:
        if out.exists():
            for p in out.iterdir():
                if p not in before and p.is_file():
                    p.unlink()
            if created and not any(out.iterdir()):
                out.rmdir()
        raise
    return out


def validate_artifacts(out: str | Path, metric: str = "euclidean") -> list[str]:
    """Re-check every structural invariant of the saved HRG artifacts; returns checked file names."""
    out = Path(out)
    checked = []
    graph = None
    if (out / GRAPH).is_file():
        graph = graph_from_csv((out / GRAPH).read_text(), metric)
        checked.append(GRAPH)
    t = None
    if (out / DENDROGRAM).is_file():
        t = from_text((out / DENDROGRAM).read_text().strip(), graph)
        t.validate(graph)
        checked.append(DENDROGRAM)
    if (out / PROB_DENDROGRAMS).is_file():
        pds = prob_dendrograms_from_text((out / PROB_DENDROGRAMS).read_text())
        zones = sorted(pds)
        for pd in pds.values():
            pd.validate(zones)
        if t is not None:
            if set(zones) != set(t.zone_ids):
                raise SchemaError("prob_dendrograms.txt and dendrogram.txt cover different zones")
            fresh = build_all(t)
            for z in zones:
                a = [(r.d, r.p, r.sibling_zones) for r in fresh[z].ancestors]
                b = [(r.d, r.p, r.sibling_zones) for r in pds[z].ancestors]
                if len(a) != len(b) or any(
                    sa != sb or abs(da - db) > 1e-12 or abs(pa - pb) > 1e-12
                    for (da, pa, sa), (db, pb, sb) in zip(a, b)
                ):
                    raise SchemaError(f"probabilistic dendrogram of {z} disagrees with dendrogram.txt")
        checked.append(PROB_DENDROGRAMS)
    if not checked:
        raise DependencyError(f"no dendrogram artifacts found in {out}")
    return checked
