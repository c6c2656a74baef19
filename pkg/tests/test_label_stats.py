import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgfusion.errors import ConfigError, DomainError, LabelRangeError, SchemaError
from sgfusion.label_stats import (
    DPConfig,
    LabelHistogram,
    aggregate_zone_histogram,
    build_user_histogram,
    build_zone_graph,
    canonical_metric,
    dp_perturb,
    graph_from_csv,
    graph_to_csv,
    histograms_from_csv,
    histograms_to_csv,
    uniform_bin_edges,
    zone_distance,
)


def hist(counts, edges=None):
    edges = edges or tuple(float(i) for i in range(len(counts) + 1))
    return LabelHistogram(edges, tuple(counts))


# --- build_user_histogram -------------------------------------------------------------


def test_empty_labels_give_zero_counts():
    h = build_user_histogram([], [0.0, 1.0, 2.0])
    assert h.counts == (0.0, 0.0)


def test_direct_counting():
    assert build_user_histogram([0.5, 0.5, 1.5], [0, 1, 2]).counts == (2.0, 1.0)


def test_bins_left_closed_last_bin_closed():
    h = build_user_histogram([0.0, 1.0, 2.0], [0, 1, 2])
    assert h.counts == (1.0, 2.0)


def test_counts_match_one_pass_oracle():
    rng = np.random.default_rng(42)
    y = rng.uniform(-3, 5, size=1000)
    edges = uniform_bin_edges(-3, 5, 10)
    h = build_user_histogram(y, edges)
    oracle = [0] * 10
    for v in y:
        for b in range(10):
            last = b == 9
            if edges[b] <= v < edges[b + 1] or (last and v == edges[b + 1]):
                oracle[b] += 1
                break
    assert list(h.counts) == oracle
    assert sum(h.counts) == 1000


def test_out_of_range_label_is_named():
    with pytest.raises(LabelRangeError) as exc:
        build_user_histogram([0.5, 7.25], [0, 1, 2])
    assert exc.value.label == 7.25
    assert "7.25" in str(exc.value)


def test_empty_edges_is_config_error():
    with pytest.raises(ConfigError):
        build_user_histogram([1.0], [])


# --- dp_perturb -------------------------------------------------------------------


def test_vanishing_noise_limit():
    h = hist([3, 0, 5])
    out = dp_perturb(h, DPConfig(epsilon=1e9), np.random.default_rng(0))
    assert np.allclose(out.as_array(), h.as_array(), atol=1e-3)


def test_disabled_dp_is_identity():
    h = hist([3, 0, 5])
    assert dp_perturb(h, DPConfig(epsilon=1.0, enabled=False), np.random.default_rng(0)) is h


def test_noise_variance_matches_laplace():
    rng = np.random.default_rng(1)
    h = hist([0.0])
    noise = np.array([dp_perturb(h, DPConfig(1.0), rng).counts[0] for _ in range(100_000)])
    assert abs(noise.var() - 2.0) / 2.0 < 0.05


def test_adjacent_histograms_density_ratio_bounded_by_e_eps():
    # one count differs by 1; output density ratio must stay below e^eps
    rng = np.random.default_rng(2)
    n = 1_000_000
    a = rng.laplace(0.0, 1.0, size=n)
    b = 1.0 + rng.laplace(0.0, 1.0, size=n)
    bins = np.linspace(-3, 4, 29)
    ca, _ = np.histogram(a, bins)
    cb, _ = np.histogram(b, bins)
    keep = (ca > 2000) & (cb > 2000)
    ratio = np.maximum(ca[keep] / cb[keep], cb[keep] / ca[keep])
    # Monte-Carlo slack: relative sd of a ratio of two counts >= 2000 is < 3.2%
    assert ratio.max() < math.e * 1.1


def test_nonpositive_epsilon_rejected():
    with pytest.raises(ConfigError):
        DPConfig(epsilon=0.0)
    with pytest.raises(ConfigError):
        DPConfig(epsilon=-1.0)


# --- aggregate_zone_histogram ------------------------------------------------------------


def test_single_user_aggregate_is_identity():
    h = hist([1, 2, 3])
    assert aggregate_zone_histogram([h], 1) == h


def test_two_users_mean():
    assert aggregate_zone_histogram([hist([2, 0]), hist([0, 2])], 2).counts == (1.0, 1.0)


def test_mismatched_edges_and_empty_list():
    with pytest.raises(SchemaError):
        aggregate_zone_histogram([hist([1, 2]), hist([1, 2], (0.0, 1.0, 3.0))])
    with pytest.raises(DomainError):
        aggregate_zone_histogram([])


def test_aggregate_noise_shrinks_like_inverse_sqrt_m():
    rng = np.random.default_rng(5)
    edges = uniform_bin_edges(0, 1, 20)
    gaps = {}
    for m in (10, 50, 250):
        vals = []
        for _ in range(100):
            users = [build_user_histogram(rng.uniform(0, 1, 30), edges) for _ in range(m)]
            clean = aggregate_zone_histogram(users).as_array()
            noised = aggregate_zone_histogram([dp_perturb(u, DPConfig(10.0), rng) for u in users]).as_array()
            vals.append(np.abs(noised - clean).sum())
        gaps[m] = np.mean(vals)
    # factor sqrt(5) per step, within 10%
    for lo, hi in ((10, 50), (50, 250)):
        assert gaps[lo] / gaps[hi] == pytest.approx(math.sqrt(5), rel=0.1)


def test_aggregate_commutes_with_noise_in_expectation():
    rng = np.random.default_rng(6)
    users = [hist([3, 1, 0, 4]), hist([0, 2, 2, 1]), hist([1, 1, 1, 1])]
    clean = aggregate_zone_histogram(users).as_array()
    N = 4000
    draws = np.array(
        [aggregate_zone_histogram([dp_perturb(u, DPConfig(1.0), rng) for u in users]).as_array() for _ in range(N)]
    )
    sigma = math.sqrt(2.0 / len(users)) / math.sqrt(N)
    assert np.all(np.abs(draws.mean(axis=0) - clean) < 3 * sigma)


# --- distances and graph -----------------------------------------------------------------


@pytest.mark.parametrize("metric", ["euclidean", "manhattan", "minkowski(3)"])
def test_identical_histograms_distance_zero(metric):
    h = hist([1, 5, 2])
    assert zone_distance(h, h, metric) == 0.0


def test_two_bin_analytic_distances():
    a, b = hist([1, 0]), hist([0, 1])
    assert zone_distance(a, b, "euclidean") == pytest.approx(math.sqrt(2), abs=1e-12)
    assert zone_distance(a, b, "manhattan") == pytest.approx(2.0, abs=1e-12)


def test_minkowski_matches_direct_summation():
    rng = np.random.default_rng(7)
    a, b = hist(rng.uniform(0, 5, 10)), hist(rng.uniform(0, 5, 10))
    from fractions import Fraction

    na = [Fraction(c) / sum(Fraction(x) for x in a.counts) for c in a.counts]
    nb = [Fraction(c) / sum(Fraction(x) for x in b.counts) for c in b.counts]
    s = sum(abs(x - y) ** 3 for x, y in zip(na, nb))
    assert zone_distance(a, b, "minkowski(3)") == pytest.approx(float(s) ** (1 / 3), abs=1e-12)


def test_distance_errors():
    with pytest.raises(SchemaError):
        zone_distance(hist([1, 2]), hist([1, 2, 3]))
    with pytest.raises(ConfigError):
        zone_distance(hist([1, 2]), hist([2, 1]), "minkowski(0.5)")
    with pytest.raises(ConfigError):
        zone_distance(hist([1, 2]), hist([2, 1]), "cosine")


def test_metric_tags_canonicalise():
    assert canonical_metric("Minkowski:3") == "minkowski(3)"
    assert canonical_metric("euclidean") == "euclidean"


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["euclidean", "manhattan", "minkowski(3)"]))
def test_metric_axioms_on_random_triples(seed, metric):
    rng = np.random.default_rng(seed)
    a, b, c = (hist(rng.uniform(-1, 5, 8)) for _ in range(3))
    ab, bc, ac = zone_distance(a, b, metric), zone_distance(b, c, metric), zone_distance(a, c, metric)
    assert ab == pytest.approx(zone_distance(b, a, metric), abs=1e-15)
    assert min(ab, bc, ac) >= 0
    assert ac <= ab + bc + 1e-12


def test_triangle_inequality_1000_triples():
    rng = np.random.default_rng(8)
    for metric in ("euclidean", "manhattan", "minkowski(3)"):
        for _ in range(1000):
            a, b, c = (hist(rng.uniform(0, 5, 6)) for _ in range(3))
            assert zone_distance(a, c, metric) <= zone_distance(a, b, metric) + zone_distance(b, c, metric) + 1e-12


def test_graph_two_identical_zones():
    g = build_zone_graph({"a": hist([1, 2]), "b": hist([1, 2])})
    assert np.array_equal(g.distances, np.zeros((2, 2)))


def test_graph_three_zones_three_pairs():
    g = build_zone_graph({"a": hist([1, 0]), "b": hist([0, 1]), "c": hist([1, 1])}, "manhattan")
    upper = g.distances[np.triu_indices(3, 1)]
    assert upper.size == 3 * 2 // 2
    assert g.distance("a", "b") == pytest.approx(2.0)
    assert g.distance("a", "c") == pytest.approx(1.0)


def test_graph_matches_double_loop_on_16_zones():
    rng = np.random.default_rng(9)
    edges = uniform_bin_edges(0, 10, 20)
    hists = {
        f"z{i:02d}": dp_perturb(build_user_histogram(rng.uniform(0, 10, 460), edges), DPConfig(10.0), rng)
        for i in range(16)
    }
    g = build_zone_graph(hists)
    ids = list(hists)
    for i, a in enumerate(ids):
        for j, b in enumerate(ids):
            va, vb = hists[a].normalized(), hists[b].normalized()
            assert g.distances[i, j] == pytest.approx(math.sqrt(sum((x - y) ** 2 for x, y in zip(va, vb))), abs=1e-12)


def test_graph_permutation_invariance():
    rng = np.random.default_rng(10)
    hists = {f"z{i}": hist(rng.uniform(0, 3, 5)) for i in range(6)}
    g1 = build_zone_graph(hists)
    order = ["z3", "z0", "z5", "z1", "z4", "z2"]
    g2 = build_zone_graph([(z, hists[z]) for z in order])
    for a in order:
        for b in order:
            assert g1.distance(a, b) == g2.distance(a, b)


def test_graph_needs_two_zones():
    with pytest.raises(DomainError):
        build_zone_graph({"a": hist([1])})


def test_graph_is_read_only_and_validated():
    g = build_zone_graph({"a": hist([1, 0]), "b": hist([0, 1])})
    with pytest.raises(ValueError):
        g.distances[0, 1] = 5.0


def test_csv_round_trips():
    rng = np.random.default_rng(11)
    hists = {f"z{i}": hist(rng.normal(size=4)) for i in range(3)}
    assert histograms_from_csv(histograms_to_csv(hists)) == hists
    g = build_zone_graph(hists, "manhattan")
    g2 = graph_from_csv(graph_to_csv(g), "manhattan")
    assert g2.zone_ids == g.zone_ids
    assert np.array_equal(g2.distances, g.distances)
