import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mfchaos.dynamics import simulate_replicas
from mfchaos.model import InitSpec, ModelConfig
from mfchaos.norms import default_dictionary, evaluate_power_sums
from mfchaos.statistics import (
    InsufficientReplicas,
    MissingMoments,
    MomentTable,
    Partition,
    block_sums,
    concentration_scan,
    correlation_cumulant,
    correlation_moebius,
    cumulants_from_moments,
    empirical_Qr,
    jackknife,
    moebius_correlation,
    moments_from_cumulants,
    partition_shapes,
    power_sums,
    replica_stats,
    set_partitions,
    ustat_tested_moment,
    ustats_from_power_sums,
)

# -- independent oracles ---------------------------------------------------------


def rgs_partitions(m):
    """Set partitions of {1..m} from restricted growth strings."""
    out = []

    def rec(prefix, top):
        if len(prefix) == m:
            blocks = {}
            for i, b in enumerate(prefix, start=1):
                blocks.setdefault(b, []).append(i)
            out.append(sorted(tuple(v) for v in blocks.values()))
            return
        for b in range(top + 2):
            rec(prefix + [b], max(top, b))

    rec([0], 0)
    return out


def bell(m):
    b = [1]
    for n in range(m):
        b.append(sum(math.comb(n, k) * b[k] for k in range(n + 1)))
    return b[m]


def brute_cumulant(a, m):
    total = 0.0
    for p in rgs_partitions(m):
        k = len(p)
        total += (-1) ** (k - 1) * math.factorial(k - 1) * math.prod(a[len(b) - 1] for b in p)
    return total


def recursive_cumulants(a):
    # kappa_n = a_n - sum_{k=1}^{n-1} binom(n-1, k-1) kappa_k a_{n-k}
    k = []
    for n in range(1, len(a) + 1):
        k.append(a[n - 1] - sum(math.comb(n - 1, j - 1) * k[j - 1] * a[n - j - 1] for j in range(1, n)))
    return np.array(k)


def naive_ustat(values, m):
    vals = [math.prod(values[i] for i in idx) for idx in itertools.permutations(range(len(values)), m)]
    return sum(vals) / len(vals)


# -- partitions -------------------------------------------------------------------


def test_small_partition_counts():
    assert [p.blocks for p in set_partitions(1)] == [((1,),)]
    assert len(set_partitions(3)) == 5
    assert len(set_partitions(4)) == 15


@pytest.mark.parametrize("m", range(1, 9))
def test_partitions_match_brute_force(m):
    ours = sorted(sorted(p.blocks) for p in set_partitions(m))
    theirs = sorted(tuple(map(tuple, p)) for p in rgs_partitions(m))
    assert [list(p) for p in ours] == [list(p) for p in theirs]
    assert len(ours) == bell(m)
    assert len({tuple(p) for p in ours}) == len(ours)


@pytest.mark.parametrize("m", range(1, 11))
def test_partition_shapes_count_bell(m):
    assert sum(c for _, c in partition_shapes(m)) == bell(m)


def test_order_cap():
    with pytest.raises(ValueError):
        set_partitions(13)
    with pytest.raises(ValueError):
        cumulants_from_moments(np.ones(13))


def test_partition_validation():
    with pytest.raises(ValueError):
        Partition(((1, 2), (2, 3)))
    with pytest.raises(ValueError):
        Partition(((1,), (3,)))


# -- cumulants --------------------------------------------------------------------


def test_constant_has_no_higher_cumulants():
    c = 1.7
    k = cumulants_from_moments([c**j for j in range(1, 7)])
    assert k[0] == pytest.approx(c)
    np.testing.assert_allclose(k[1:], 0.0, atol=1e-12)


def test_gaussian_moments_have_zero_fourth_cumulant():
    assert cumulants_from_moments([0, 1, 0, 3])[3] == 0.0


def test_fourth_cumulant_example():
    assert cumulants_from_moments([0, 1, 0, 1])[3] == -2.0


@pytest.mark.parametrize("m", range(1, 7))
def test_cumulants_match_brute_force(m):
    rng = np.random.default_rng(m)
    for _ in range(20):
        a = rng.normal(size=m)
        ours = cumulants_from_moments(a)
        for j in range(1, m + 1):
            ref = brute_cumulant(a, j)
            assert abs(ours[j - 1] - ref) <= 1e-12 * max(1.0, abs(ref))
            assert abs(moebius_correlation(a, j) - ref) <= 1e-12 * max(1.0, abs(ref))
        np.testing.assert_allclose(ours, recursive_cumulants(a), rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("m", [4, 7, 10])
def test_round_trip(m):
    # moment sequences of actual distributions; arbitrary reals can make the map ill conditioned
    for seed in range(50):
        rng = np.random.default_rng(100 * m + seed)
        x = rng.normal(rng.normal(), rng.uniform(0.2, 1.5), size=30)
        a = np.array([np.mean(x**j) for j in range(1, m + 1)])
        back = moments_from_cumulants(cumulants_from_moments(a))
        assert np.max(np.abs(back - a) / np.maximum(1.0, np.abs(a))) < 1e-12


def test_cumulants_broadcast_over_leading_axes():
    a = np.random.default_rng(0).normal(size=(3, 4, 5))
    k = cumulants_from_moments(a)
    np.testing.assert_allclose(k[1, 2], cumulants_from_moments(a[1, 2]))


def test_moebius_m2_and_product_law():
    a = np.array([0.3, 0.5])
    assert moebius_correlation(a, 2) == pytest.approx(0.5 - 0.09)
    c = 0.7
    for m in range(2, 8):
        assert abs(moebius_correlation([c**j for j in range(1, m + 1)], m)) < 1e-14


def test_moebius_missing_moments():
    with pytest.raises(MissingMoments):
        moebius_correlation([0.1, 0.2], 3)


# -- U-statistics -------------------------------------------------------------------


def test_ustat_examples():
    assert ustat_tested_moment([1, 2, 3], 2) == pytest.approx(11 / 3, rel=1e-15)
    assert ustat_tested_moment([1, 2, 3], 3) == pytest.approx(6.0, rel=1e-15)
    v = np.random.default_rng(0).normal(size=17)
    assert ustat_tested_moment(v, 1) == pytest.approx(v.mean(), rel=1e-14)


def test_ustat_order_exceeds_n():
    with pytest.raises(ValueError):
        ustat_tested_moment([1.0, 2.0], 3)


def test_ustats_match_naive_enumeration():
    rng = np.random.default_rng(7)
    for _ in range(100):
        n = int(rng.integers(1, 9))
        v = rng.normal(size=n)
        u = ustats_from_power_sums(power_sums(v, min(n, 4)), n, min(n, 4))
        for m in range(1, min(n, 4) + 1):
            ref = naive_ustat(v, m)
            assert abs(u[m - 1] - ref) <= 1e-13 * max(1.0, abs(ref))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=4, max_size=8))
def test_ustats_permutation_invariant(values):
    v = np.array(values)
    perm = np.random.default_rng(len(values)).permutation(len(v))
    a = ustats_from_power_sums(power_sums(v, 4), len(v), 4)
    b = ustats_from_power_sums(power_sums(v[perm], 4), len(v), 4)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-9 * np.max(np.abs(v)) ** 4 + 1e-12)


# -- jackknife ----------------------------------------------------------------------


def test_jackknife_of_mean_is_standard_error():
    x = np.random.default_rng(1).normal(size=200)
    sums, counts = block_sums(x[:, None], 200)
    est, se = jackknife(sums, counts, lambda mean: mean[..., 0])
    assert est == pytest.approx(x.mean())
    assert se == pytest.approx(x.std(ddof=1) / math.sqrt(200), rel=1e-12)


def test_grouped_jackknife_close_to_full():
    x = np.random.default_rng(2).normal(size=5000)
    full = jackknife(*block_sums(x[:, None], 5000), lambda m: m[..., 0])[1]
    grouped = jackknife(*block_sums(x[:, None], 500), lambda m: m[..., 0])[1]
    assert grouped == pytest.approx(full, rel=0.1)


# -- correlation estimates ----------------------------------------------------------


def _toy_configs():
    # exchangeable law on {0,1}^4: Bernoulli(p) iid given p = 1/4 w.p. 1/3 or p = 3/4 w.p. 2/3;
    # P(config with k ones) = (3^{4-k} + 2 3^k) / 768
    configs, weights = [], []
    for z in itertools.product([0, 1], repeat=4):
        k = sum(z)
        configs.append(np.array(z))
        weights.append(3 ** (4 - k) + 2 * 3**k)
    return configs, np.array(weights)


def test_toy_exchangeable_g3_matches_exact_marginals():
    configs, weights = _toy_configs()
    prob = weights / weights.sum()
    phi = np.array([-0.4, 1.3])

    def marginal(m):
        out = np.zeros((2,) * m)
        for z, p in zip(configs, prob):
            out[tuple(z[:m])] += p
        return out

    f1, f2, f3 = marginal(1), marginal(2), marginal(3)
    # G^{N,3} = F3 - F2(12)F1(3) - F2(13)F1(2) - F2(23)F1(1) + 2 F1 F1 F1
    g3 = (f3 - np.einsum("ij,k->ijk", f2, f1) - np.einsum("ik,j->ijk", f2, f1)
          - np.einsum("jk,i->ijk", f2, f1) + 2 * np.einsum("i,j,k->ijk", f1, f1, f1))
    exact = np.einsum("ijk,i,j,k->", g3, phi, phi, phi)

    values = np.concatenate([np.repeat(phi[z][None], w, axis=0) for z, w in zip(configs, weights)])
    stats = replica_stats(power_sums(values[:, None, None, :], 3), 4, 3)
    table = MomentTable.from_replica_stats(stats, ["phi"], [0.0], 4, 3, np.zeros((1, 1)), n_blocks=64)
    est = correlation_moebius(table, 3, "phi", 0.0)
    assert est.value == pytest.approx(exact, abs=1e-14)
    assert est.route == "moebius"
    assert abs(exact) > 1e-3


def test_m1_correlation_is_first_moment():
    x = np.random.default_rng(3).normal(size=(300, 10))
    stats = replica_stats(power_sums(x[:, None, None, :], 2), 10, 2)
    table = MomentTable.from_replica_stats(stats, ["x"], [0.0], 10, 2, np.zeros((1, 1)))
    assert table.correlation_moebius(1, "x", 0.0).value == pytest.approx(x.mean())
    with pytest.raises(MissingMoments):
        table.correlation_moebius(2, "y", 0.0)


def test_constant_observable_zero_cumulants():
    for m in (2, 3, 4):
        est = correlation_cumulant(np.full(50, 2.5), m)
        assert abs(est.value) < 1e-12


def test_cumulant_route_needs_replicas():
    with pytest.raises(InsufficientReplicas):
        correlation_cumulant([1.0, 2.0], 2)


def test_m2_route_identity_on_arbitrary_data():
    rng = np.random.default_rng(4)
    n = 12
    x = rng.normal(size=(400, 3, 2, n)) + rng.normal(size=(400, 3, 2, 1))
    centers = rng.normal(size=(3, 2))
    stats = replica_stats(power_sums(x - centers[..., None], 2), n, 2)
    table = MomentTable.from_replica_stats(stats, ["a", "b"], [0.0, 1.0, 2.0], n, 2, centers)
    resid = table.route_identity_residual()
    cum = table.correlations(2, "cumulant")[0]
    assert np.max(np.abs(resid)) < 1e-15 * max(1.0, np.max(np.abs(cum))) * 10


def test_cumulant_route_matches_array_function():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(500, 8))
    stats = replica_stats(power_sums(x[:, None, None, :], 3), 8, 3)
    table = MomentTable.from_replica_stats(stats, ["x"], [0.0], 8, 3, np.zeros((1, 1)), n_blocks=500)
    for m in (2, 3):
        a = table.correlation_cumulant(m, "x", 0.0)
        b = correlation_cumulant(x.mean(axis=1), m, n_blocks=500)
        assert a.value == pytest.approx(b.value, rel=1e-10)
        assert a.se == pytest.approx(b.se, rel=1e-8)


def test_permutation_invariance_of_estimators():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(50, 1, 1, 9))
    perm = rng.permutation(9)
    a = replica_stats(power_sums(x, 3), 9, 3)
    b = replica_stats(power_sums(x[..., perm], 3), 9, 3)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


def test_table_merge_and_records():
    x = np.random.default_rng(8).normal(size=(200, 1, 1, 6))
    stats = replica_stats(power_sums(x, 2), 6, 2)
    t1 = MomentTable.from_replica_stats(stats[:100], ["x"], [0.0], 6, 2, np.zeros((1, 1)), n_blocks=10)
    t2 = MomentTable.from_replica_stats(stats[100:], ["x"], [0.0], 6, 2, np.zeros((1, 1)), n_blocks=10)
    full = MomentTable.from_replica_stats(stats, ["x"], [0.0], 6, 2, np.zeros((1, 1)), n_blocks=20)
    merged = MomentTable.merge([t1, t2])
    assert merged.n_replicas == 200
    np.testing.assert_allclose(merged.moments()[0], full.moments()[0])
    rec = merged.to_records("r")[0]
    assert rec["M"] == 200 and len(rec["a"]) == 2


def test_zero_correlation_null_calibration():
    # iid data and no interaction: tested correlations vanish; |value| <= 4 SE in 95%+ of cells
    cfg = ModelConfig(kappa=0.0, n_particles=20, t_final=1.0)
    init = InitSpec.gaussian([1.0], 0.25)
    dic = default_dictionary(1)
    tabs = dic.tables()
    times = [0.5, 1.0]
    m_max, M = 3, 4000

    def observer(ti, t, batch):
        p = np.empty((batch.x.shape[0], len(dic), m_max))
        evaluate_power_sums(np.ascontiguousarray(batch.x), *tabs, dic.p, np.zeros(len(dic)), m_max, p)
        return replica_stats(p, cfg.n_particles, m_max)

    res = simulate_replicas(cfg, init, 21, np.arange(M), times, observer)
    stats = np.stack([np.concatenate([job[ti] for job in res]) for ti in range(len(times))], axis=1)
    table = MomentTable.from_replica_stats(stats, dic.ids, times, 20, m_max, np.zeros((2, len(dic))))
    z = []
    for m in (2, 3):
        val, se = table.correlations(m)
        z.append(np.abs(val) / se)
    z = np.concatenate([a.ravel() for a in z])
    assert np.mean(z <= 4) >= 0.95


def test_cumulant_clt_variance_scaling():
    # kappa = 0, iid start N(1, 1/4), phi(x) = x: N kappa_2[X] = Var(x_t)
    t = 1.0
    var_t = 0.25 * math.exp(-2 * t) + (1 - math.exp(-2 * t)) / 2
    for n in (250, 1000):
        cfg = ModelConfig(kappa=0.0, n_particles=n, t_final=t)
        res = simulate_replicas(cfg, InitSpec.gaussian([1.0], 0.25), 5, np.arange(2000), [t],
                                lambda ti, tt, b: b.x[:, :, 0].mean(axis=1))
        x = np.concatenate([job[0] for job in res])
        est = correlation_cumulant(x, 2)
        assert abs(n * est.value - var_t) < 3 * n * est.se


def test_qr_examples():
    assert empirical_Qr(np.zeros((1, 1)), 3.7) == 1.0
    assert empirical_Qr(np.array([[0.0], [math.sqrt(3.0)]]), 2) == pytest.approx(2.5)


def test_concentration_scan_rows():
    q = np.array([1.0, 2.0, 3.0, 4.0])
    rows = concentration_scan(q, 2.0, [1, 2])
    assert rows[0].value == pytest.approx((0 + 0 + 1 + 2) / 4)
    assert rows[1].value == pytest.approx((0 + 0 + 1 + 4) / 4)
    with pytest.raises(ValueError):
        concentration_scan(q, 0.0, [1])


def test_product_deviation_matches_uncentered_ustat():
    # sum_j binom(m, j) c^{m-j} a_j(phi - c) - v^m equals the mean U_m(phi) - v^m for any center c
    rng = np.random.default_rng(9)
    n, m_max = 7, 3
    phi = rng.normal(1.0, 0.5, size=(300, 1, 1, n))
    centers = np.array([[0.8]])
    v = np.array([[0.9]])
    stats = replica_stats(power_sums(phi - centers[..., None], m_max), n, m_max)
    table = MomentTable.from_replica_stats(stats, ["phi"], [0.0], n, m_max, centers)
    for m in (1, 2, 3):
        val, _ = table.uncentered_minus_product(m, v)
        direct = np.mean([naive_ustat(row, m) for row in phi[:, 0, 0, :]]) - v[0, 0] ** m
        assert val[0, 0] == pytest.approx(direct, rel=1e-10, abs=1e-13)
