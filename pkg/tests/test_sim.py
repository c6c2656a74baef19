import math

import numpy as np
import pytest

from sgfusion.errors import ConfigError, DomainError
from sgfusion.fusion import TrainingSchedule, attention, fused_step, lr_at
from sgfusion.label_stats import DPConfig, build_zone_graph
from sgfusion.sim.objectives import Objective
from sgfusion.sim.training import (
    TRACE_COLUMNS,
    AlgorithmSpec,
    FusionArtifacts,
    ZoneModel,
    bind_zones,
    estimate_gradient_bound,
    evaluate,
    local_gradient,
    run,
    traces_from_csv,
    traces_to_csv,
)
from sgfusion.sim.world import (
    UserDataset,
    WorldSpec,
    Zone,
    generate_world,
    grid_neighbors,
    preset_16_zones,
    truth_diameter,
)
from sgfusion.zone_sampler import AncestorRecord, ProbDendrogram
from sgfusion.cli.config import HistogramConfig
from sgfusion.cli.pipeline import build_hrg, zone_histograms
from sgfusion.dendrogram import McmcConfig


def central_fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def small_world(**kw):
    base = dict(n_zones=6, grid=(2, 3), users_per_zone=3, samples_per_user=20, dim=3, non_iid_tau=1.0, seed=4,
                objective="quadratic", n_clusters=2, cluster_layout="random")
    base.update(kw)
    return WorldSpec(**base)


def artifacts_for(zones, seed=0):
    hists = zone_histograms(zones, HistogramConfig(), DPConfig(10.0), seed)
    g = build_zone_graph(hists)
    _, pds = build_hrg(g, McmcConfig(max_steps=3000, convergence_window=500), seed)
    return FusionArtifacts(pds, g)


# --- objectives ----------------------------------------------------------------------


@pytest.mark.parametrize("tag", ["ridge_regression", "logistic_l2", "quadratic"])
def test_zone_problem_agrees_with_user_mean(tag):
    spec = small_world(objective=tag)
    zone = generate_world(spec)[0]
    obj = spec.make_objective()
    prob = obj.bind(zone.train_pairs())
    rng = np.random.default_rng(0)
    for _ in range(5):
        th = rng.normal(size=obj.dim)
        vals = [obj.user_loss(th, X, y) for X, y in zone.train_pairs()]
        assert prob.value(th) == pytest.approx(np.mean(vals), rel=1e-12, abs=1e-12)
        model = ZoneModel(zone.zone_id, th, obj)
        assert np.allclose(prob.grad(th), local_gradient(model, zone), atol=1e-12)


@pytest.mark.parametrize("tag", ["ridge_regression", "logistic_l2"])
def test_gradients_match_finite_differences(tag):
    spec = small_world(objective=tag)
    zone = generate_world(spec)[1]
    obj = spec.make_objective()
    prob = obj.bind(zone.train_pairs())
    rng = np.random.default_rng(1)
    for _ in range(50):
        th = rng.normal(size=obj.dim)
        fd = central_fd(prob.value, th)
        g = prob.grad(th)
        assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(g))


@pytest.mark.parametrize("tag", ["ridge_regression", "logistic_l2", "quadratic"])
def test_optimum_is_stationary_and_hessian_matches(tag):
    spec = small_world(objective=tag)
    prob = spec.make_objective().bind(generate_world(spec)[2].train_pairs())
    opt = prob.optimum()
    assert np.linalg.norm(prob.grad(opt)) < 1e-9
    H = np.array([central_fd(lambda x, j=j: prob.grad(x)[j], opt) for j in range(prob.dim)])
    assert np.allclose(H, prob.hessian(opt), atol=1e-5)
    assert prob.strong_convexity() <= np.linalg.eigvalsh(prob.hessian(opt))[0] + 1e-9


def test_quadratic_gradient_zero_at_center_and_two_user_mean():
    obj = Objective("quadratic", 2)
    c = np.array([1.5, -2.0])
    zone = Zone("z", [UserDataset("u", "z", np.tile(c, (4, 1)), np.zeros(4), np.tile(c, (1, 1)), np.zeros(1))], (0, 0), c)
    assert np.array_equal(local_gradient(ZoneModel("z", c, obj), zone), np.zeros(2))
    X1, X2 = np.array([[0.0, 0.0]]), np.array([[2.0, 4.0]])
    th = np.array([1.0, 1.0])
    two = Zone("z", [UserDataset("a", "z", X1, np.zeros(1), X1, np.zeros(1)),
                     UserDataset("b", "z", X2, np.zeros(1), X2, np.zeros(1))], (0, 0), c)
    g1, g2 = obj.user_grad(th, X1, None), obj.user_grad(th, X2, None)
    assert np.allclose(local_gradient(ZoneModel("z", th, obj), two), (g1 + g2) / 2)


def test_quadratic_excess_is_half_squared_distance():
    spec = small_world(objective="quadratic")
    prob = spec.make_objective().bind(generate_world(spec)[0].train_pairs())
    d = np.array([0.3, -0.2, 0.5])
    assert prob.excess(prob.optimum() + d) == pytest.approx(0.5 * d @ d, rel=1e-12)
    assert prob.excess(prob.optimum()) == 0.0


def test_objective_validation():
    with pytest.raises(ConfigError):
        Objective("lstm", 3)
    with pytest.raises(ConfigError):
        Objective("ridge_regression", 3, reg=0.0)
    with pytest.raises(ConfigError):
        Objective("quadratic", 2, curvature=(1.0, -1.0))


# --- world -------------------------------------------------------------------------


def test_iid_world_shares_optimum():
    zones = generate_world(small_world(non_iid_tau=0.0))
    assert truth_diameter(zones) == 0.0


@pytest.mark.parametrize("tau", [0.5, 2.0])
def test_truth_diameter_equals_tau(tau):
    assert truth_diameter(generate_world(small_world(non_iid_tau=tau))) <= tau + 1e-9
    assert truth_diameter(generate_world(small_world(non_iid_tau=tau))) == pytest.approx(tau, rel=1e-9)


def test_sixteen_zone_preset():
    spec = preset_16_zones()
    assert (spec.n_zones, spec.users_per_zone, spec.samples_per_user) == (16, 12, 460)
    zones = generate_world(WorldSpec(**{**spec.to_dict(), "samples_per_user": 20}))
    assert len(zones) == 16 and all(z.m_z == 12 for z in zones)
    assert [z.geo_cell for z in zones[:5]] == [(0, 0), (0, 1), (0, 2), (0, 3), (1, 0)]


def test_world_is_pure_function_of_spec():
    a, b = generate_world(small_world()), generate_world(small_world())
    for za, zb in zip(a, b):
        for ua, ub in zip(za.users, zb.users):
            assert np.array_equal(ua.x_train, ub.x_train) and np.array_equal(ua.y_test, ub.y_test)


def test_split_is_80_20():
    u = generate_world(small_world(samples_per_user=50))[0].users[0]
    assert (len(u.y_train), len(u.y_test)) == (40, 10)


def test_infeasible_specs():
    with pytest.raises(ConfigError):
        WorldSpec(n_zones=10, grid=(3, 3))
    with pytest.raises(ConfigError):
        WorldSpec(cluster_layout="random", n_clusters=0)
    with pytest.raises(ConfigError):
        WorldSpec(non_iid_tau=-1)


def test_grid_neighbors():
    nb = grid_neighbors(generate_world(small_world()))
    assert nb["z00"] == ("z01", "z03")
    assert nb["z04"] == ("z01", "z03", "z05")


def test_interleaved_layout_separates_neighbours():
    zones = generate_world(WorldSpec(n_clusters=4, cluster_layout="interleaved", samples_per_user=5))
    cl = {z.zone_id: z.cluster for z in zones}
    for z, nbrs in grid_neighbors(zones).items():
        assert all(cl[z] != cl[o] for o in nbrs)


# --- evaluate ------------------------------------------------------------------------


def test_perfect_model_on_noiseless_data():
    spec = small_world(objective="ridge_regression", label_noise_sd=0.0)
    zone = generate_world(spec)[0]
    out = evaluate(ZoneModel(zone.zone_id, zone.truth, Objective("ridge_regression", 3)), zone)
    assert out["rmse"] < 1e-12


def test_constant_predictor_rmse():
    X = np.zeros((2, 1))
    zone = Zone("z", [UserDataset("u", "z", X, np.array([0.0, 0.0]), X, np.array([3.0, 4.0]))], (0, 0), np.zeros(1))
    out = evaluate(ZoneModel("z", np.zeros(1), Objective("ridge_regression", 1)), zone)
    assert out["rmse"] == pytest.approx(math.sqrt(12.5), abs=1e-12)


def test_rmse_matches_two_pass_oracle():
    spec = small_world(objective="ridge_regression")
    zone = generate_world(spec)[3]
    th = np.random.default_rng(2).normal(size=3)
    out = evaluate(ZoneModel(zone.zone_id, th, Objective("ridge_regression", 3)), zone)
    preds, ys = [], []
    for u in zone.users:
        for x, y in zip(u.x_test, u.y_test):
            preds.append(float(sum(a * b for a, b in zip(x, th))))
            ys.append(float(y))
    mse = sum((p - y) ** 2 for p, y in zip(preds, ys)) / len(ys)
    assert out["rmse"] == pytest.approx(math.sqrt(mse), abs=1e-12)


def test_logistic_evaluate_reports_log_loss():
    spec = small_world(objective="logistic_l2")
    zone = generate_world(spec)[0]
    out = evaluate(ZoneModel(zone.zone_id, np.zeros(3), Objective("logistic_l2", 3)), zone)
    assert out["loss"] == pytest.approx(math.log(2), abs=1e-12)
    assert out["rmse"] == pytest.approx(0.5, abs=1e-12)


def test_empty_test_split_is_domain_error():
    X = np.zeros((1, 1))
    zone = Zone("z", [UserDataset("u", "z", X, np.zeros(1), np.zeros((0, 1)), np.zeros(0))], (0, 0), np.zeros(1))
    with pytest.raises(DomainError):
        evaluate(ZoneModel("z", np.zeros(1), Objective("ridge_regression", 1)), zone)


# --- training loop -----------------------------------------------------------------


def thetas_by_round(res):
    return {(t.round, t.zone_id): t.train_loss for t in res.traces}


def test_zero_probability_sgfusion_equals_sgeofl():
    spec = small_world()
    zones = generate_world(spec)
    obj = spec.make_objective()
    pds = {
        z.zone_id: ProbDendrogram(z.zone_id, (AncestorRecord(99, 0.0, 0.0, tuple(o.zone_id for o in zones if o is not z)),))
        for z in zones
    }
    sch = TrainingSchedule(mu=1.0)
    a = run(AlgorithmSpec("sgfusion", 30, sch), zones, FusionArtifacts(pds), 0, obj)
    b = run(AlgorithmSpec("sgeofl", 30, sch), zones, None, 0, obj)
    for z in a.thetas:
        assert np.array_equal(a.thetas[z], b.thetas[z])
    assert thetas_by_round(a) == thetas_by_round(b)


def test_single_zone_all_algorithms_identical():
    spec = small_world(n_zones=1, grid=(1, 1), cluster_layout="iid")
    zones = generate_world(spec)
    obj = spec.make_objective()
    sch = TrainingSchedule(mu=1.0)
    algos = [AlgorithmSpec(t, 20, sch) for t in ("fedavg", "sgeofl", "dzgd", "sgfusion")]
    algos += [AlgorithmSpec("topk_sgfusion", 20, sch, k=2), AlgorithmSpec("chi_sgfusion", 20, sch, chi=1)]
    results = [run(a, zones, None, 0, obj) for a in algos]
    for r in results[1:]:
        assert np.array_equal(r.thetas["z00"], results[0].thetas["z00"])
        assert thetas_by_round(r) == thetas_by_round(results[0])


def test_fedavg_converges_to_shared_optimum():
    spec = small_world(non_iid_tau=0.0, curvature=(1.0, 3.5), cluster_layout="iid")
    zones = generate_world(spec)
    obj = spec.make_objective()
    probs = bind_zones(zones, obj)
    # minimiser of the mean zone objective: curvature is shared, so the mean of centres
    target = np.mean([p.optimum() for p in probs.values()], axis=0)
    res = run(AlgorithmSpec("fedavg", 2000, TrainingSchedule(mu=obj.mu)), zones, None, 0, obj, eval_every=0)
    for th in res.thetas.values():
        assert np.linalg.norm(th - target) < 1e-6


def test_sgeofl_equals_plain_gradient_descent():
    spec = small_world(objective="ridge_regression")
    zones = generate_world(spec)
    obj = spec.make_objective()
    sch = TrainingSchedule("constant", eta0=0.05)
    res = run(AlgorithmSpec("sgeofl", 40, sch), zones, None, 0, obj)
    for z in zones:
        th = np.zeros(3)
        for t in range(1, 41):
            th = th - 0.05 * local_gradient(ZoneModel(z.zone_id, th, obj), z)
        assert np.allclose(res.thetas[z.zone_id], th, atol=1e-12)


def sequential_reference(algo, zones, arts, seed, obj):
    """Straightforward re-implementation: snapshot, then per-zone fused steps."""
    from sgfusion.rng import derive_rng
    from sgfusion.zone_sampler import sample_neighborhood

    probs = bind_zones(zones, obj)
    th = {z.zone_id: np.zeros(obj.dim) for z in zones}
    for t in range(1, algo.rounds + 1):
        eta = lr_at(algo.schedule, t)
        snap = {k: v.copy() for k, v in th.items()}
        for z in zones:
            zid = z.zone_id
            chosen = sample_neighborhood(arts.prob_dendrograms[zid], derive_rng(seed, "fusion:sgfusion", zid, t)).zones
            g = probs[zid].grad(snap[zid])
            shared = {o: probs[o].grad(snap[zid]) for o in chosen}
            th[zid] = fused_step(snap[zid], g, shared, attention(g, shared), eta)
    return th


def test_snapshot_semantics_match_sequential_reference():
    spec = small_world()
    zones = generate_world(spec)
    obj = spec.make_objective()
    arts = artifacts_for(zones)
    algo = AlgorithmSpec("sgfusion", 25, TrainingSchedule(mu=1.0))
    res = run(algo, zones, arts, 3, obj)
    ref = sequential_reference(algo, zones, arts, 3, obj)
    for z in ref:
        assert np.allclose(res.thetas[z], ref[z], atol=1e-12)


def test_reproducible_and_work_accounting():
    spec = small_world()
    zones = generate_world(spec)
    obj = spec.make_objective()
    arts = artifacts_for(zones)
    algo = AlgorithmSpec("sgfusion", 15, TrainingSchedule(mu=1.0))
    a, b = run(algo, zones, arts, 9, obj), run(algo, zones, arts, 9, obj)
    assert traces_to_csv(a.traces) == traces_to_csv(b.traces)
    assert a.shared_gradient_count() == sum(len(t.sampled_ids) for t in a.traces)
    assert all(abs(t.sum_lambda - (1.0 if t.n_sampled else 0.0)) < 1e-12 for t in a.traces)
    # reversing zone order changes nothing per zone
    c = run(algo, list(reversed(zones)), arts, 9, obj)
    for z in a.thetas:
        assert np.array_equal(a.thetas[z], c.thetas[z])


def test_iid_identical_data_fused_direction_is_scaled_gradient():
    spec = small_world(non_iid_tau=0.0, cluster_layout="iid")
    zones = generate_world(spec)
    # give every zone the same users so all zone objectives coincide
    same = [Zone(z.zone_id, zones[0].users, z.geo_cell, z.truth) for z in zones]
    obj = spec.make_objective()
    arts = artifacts_for(same)
    res = run(AlgorithmSpec("sgfusion", 1, TrainingSchedule("constant", eta0=0.1)), same, arts, 0, obj)
    g = bind_zones(same[:1], obj)[same[0].zone_id].grad(np.zeros(3))
    for t in res.traces:
        scale = 1.0 + t.sum_lambda
        assert np.allclose(res.thetas[t.zone_id], -0.1 * scale * g, atol=1e-12)


def test_fusion_sets_per_algorithm():
    spec = small_world()
    zones = generate_world(spec)
    obj = spec.make_objective()
    arts = artifacts_for(zones)
    sch = TrainingSchedule(mu=1.0)
    nb = grid_neighbors(zones)
    d = run(AlgorithmSpec("dzgd", 3, sch), zones, arts, 0, obj)
    assert all(t.sampled_ids == nb[t.zone_id] for t in d.traces)
    k = run(AlgorithmSpec("topk_sgfusion", 3, sch, k=2), zones, arts, 0, obj)
    g = arts.graph
    for t in k.traces:
        row = {o: g.distance(t.zone_id, o) for o in g.zone_ids if o != t.zone_id}
        assert set(t.sampled_ids) == set(sorted(row, key=row.get)[:2])
    c = run(AlgorithmSpec("chi_sgfusion", 20, sch, chi="dzgd"), zones, arts, 0, obj)
    assert all(t.n_sampled == len(nb[t.zone_id]) for t in c.traces)
    assert len({(t.zone_id, t.sampled_ids) for t in c.traces}) > len(zones)
    f = run(AlgorithmSpec("fedavg", 3, sch), zones, arts, 0, obj)
    last = [t for t in f.traces if t.round == 3]
    assert all(np.array_equal(f.thetas[t.zone_id], f.thetas[zones[0].zone_id]) for t in last)


def test_missing_artifacts_are_config_errors():
    spec = small_world()
    zones = generate_world(spec)
    obj = spec.make_objective()
    sch = TrainingSchedule(mu=1.0)
    with pytest.raises(ConfigError):
        run(AlgorithmSpec("sgfusion", 2, sch), zones, None, 0, obj)
    with pytest.raises(ConfigError):
        run(AlgorithmSpec("topk_sgfusion", 2, sch, k=1), zones, FusionArtifacts(), 0, obj)
    with pytest.raises(ConfigError):
        AlgorithmSpec("chi_sgfusion", 2, sch)
    with pytest.raises(ConfigError):
        AlgorithmSpec("sgfusion", 0, sch)


def test_algorithm_labels():
    assert AlgorithmSpec("topk_sgfusion", k=3).label == "topk_sgfusion_k3"
    assert AlgorithmSpec("chi_sgfusion", chi=2).label == "chi_sgfusion_2"
    assert AlgorithmSpec("chi_sgfusion", chi="dzgd").label == "chi_sgfusion"


def test_trace_csv_round_trip_and_header():
    spec = small_world()
    zones = generate_world(spec)
    res = run(AlgorithmSpec("dzgd", 3, TrainingSchedule(mu=1.0)), zones, None, 0, spec.make_objective(), eval_every=2)
    text = traces_to_csv(res.traces)
    assert text.splitlines()[0] == "round,zone_id,algorithm,train_loss,test_rmse,n_sampled,sampled_ids,sum_lambda,grad_norm,eta_t"
    assert tuple(text.splitlines()[0].split(",")) == TRACE_COLUMNS
    back = traces_from_csv(text)
    assert traces_to_csv(back) == text
    assert math.isnan(back[0].test_rmse) and not math.isnan(back[-1].test_rmse)


def test_gradient_bound_covers_ball():
    spec = small_world(objective="quadratic")
    zones = generate_world(spec)
    probs = bind_zones(zones, spec.make_objective())
    G = estimate_gradient_bound(probs, np.zeros(3), 5.0, np.random.default_rng(0))
    rng = np.random.default_rng(1)
    for _ in range(500):
        v = rng.normal(size=3)
        x = v / np.linalg.norm(v) * 5.0 * rng.uniform() ** (1 / 3)
        assert max(np.linalg.norm(p.grad(x)) for p in probs.values()) <= G


def test_projection_onto_parameter_ball():
    spec = small_world(objective="ridge_regression")
    zones = generate_world(spec)
    obj = spec.make_objective()
    algo = AlgorithmSpec("sgeofl", 20, TrainingSchedule(mu=0.05))
    free = run(algo, zones, None, 0, obj)
    clipped = run(algo, zones, None, 0, obj, clip_radius=1.0)
    assert clipped.n_projected > 0 and clipped.max_drift <= 1.0 + 1e-12
    wide = run(algo, zones, None, 0, obj, clip_radius=10 * free.max_drift + 1)
    assert wide.n_projected == 0
    for z in free.thetas:
        assert np.array_equal(wide.thetas[z], free.thetas[z])
    with pytest.raises(ConfigError):
        run(algo, zones, None, 0, obj, clip_radius=0.0)
