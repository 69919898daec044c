import math

import numpy as np
import pytest

from clusterdepth import EffectSpec, NoiseSpec, agresti_coull, generate_noise, inject_effect, run_study
from clusterdepth.simlab import FactorizationError, ReplicationRecord, resolve_procedures, summarize


def _corr_and_se(x, y):
    r = np.corrcoef(x, y)[0, 1]
    return r, (1 - r ** 2) / math.sqrt(len(x) - 1)


def test_independent_noise_is_uncorrelated():
    Z = generate_noise(NoiseSpec("independent", m=20), 100_000, seed=1).data
    for s, t in [(0, 1), (3, 10), (5, 19)]:
        r, se = _corr_and_se(Z[:, s], Z[:, t])
        assert abs(r) < 3 * se
    np.testing.assert_allclose(Z.var(axis=0), 1, atol=3 * math.sqrt(2 / 100_000) * 1.5)


def test_gaussian_acf_unit_diagonal_and_target_correlation():
    spec = NoiseSpec("gaussian", m=60, range=10)
    cov = spec.covariance()
    assert np.all(np.diag(cov) == 1.0)
    L = spec.factor()
    np.testing.assert_allclose(L @ L.T, cov, atol=1e-8)
    Z = generate_noise(spec, 100_000, seed=2).data
    r, se = _corr_and_se(Z[:, 20], Z[:, 30])
    assert abs(r - math.exp(-1)) < 3 * se


def test_exponential_acf_at_range_is_e_inverse():
    spec = NoiseSpec("exponential", m=50, range=10)
    Z = generate_noise(spec, 100_000, seed=3).data
    r, se = _corr_and_se(Z[:, 15], Z[:, 25])
    assert abs(r - math.exp(-1)) < 3 * se
    np.testing.assert_allclose(spec.factor() @ spec.factor().T, spec.covariance(), atol=1e-10)


def test_noise_is_reproducible():
    spec = NoiseSpec("gaussian", m=30)
    a = generate_noise(spec, 5, seed=7).data
    b = generate_noise(spec, 5, seed=7).data
    assert np.array_equal(a, b)
    assert not np.array_equal(a, generate_noise(spec, 5, seed=8).data)


def test_non_psd_kernel_is_reported(monkeypatch):
    spec = NoiseSpec("gaussian", m=5, range=1.234)
    bad = np.eye(5)
    bad[0, 4] = bad[4, 0] = 2.0
    monkeypatch.setattr(NoiseSpec, "covariance", lambda self: bad)
    with pytest.raises(FactorizationError):
        spec.factor()


def test_square_one_region_40_points_centered_at_200():
    eff = EffectSpec("square", "one", 0.10, 2.0)
    mask = eff.truth_mask(400)
    idx = np.flatnonzero(mask) + 1  # 1-based
    assert mask.sum() == 40
    assert idx[0] == 200 - 20 and idx[-1] == 200 + 19
    assert np.all(eff.betas(400)[mask] == 2.0)


def test_triangular_ramp():
    eff = EffectSpec("triangular", "one", 0.01, 2.0)
    beta = eff.betas(400)
    np.testing.assert_allclose(beta[beta > 0], [0.5, 1.0, 1.5, 2.0])


def test_two_regions_centers():
    eff = EffectSpec("square", "two", 0.2, 1.0)
    (a, b), (c, d) = eff.region_bounds(300)
    assert (b - a, d - c) == (30, 30)
    assert abs((a + b) / 2 - 100) <= 1 and abs((c + d) / 2 - 200) <= 1


@pytest.mark.parametrize("m,prop", [(400, 0.01), (400, 0.1), (100, 0.2), (101, 0.07)])
def test_two_nearby_single_gap(m, prop):
    eff = EffectSpec("square", "two_nearby", prop, 1.0)
    mask = eff.truth_mask(m)
    (a, b), (c, d) = eff.region_bounds(m)
    assert c == b + 1 and not mask[b]
    assert b - a >= d - c
    assert mask.sum() == round(prop * m)
    inside = np.flatnonzero(mask)
    assert (~mask[inside[0]:inside[-1] + 1]).sum() == 1


def test_null_effect_leaves_noise_unchanged():
    noise = generate_noise(NoiseSpec("independent", m=40), 10, seed=0)
    out = inject_effect(noise, np.repeat([0, 1], 5), EffectSpec("square", "one", 0.2, 0.0))
    assert np.array_equal(out.data, noise.data)
    none = EffectSpec("square", "none", 0.2, 2.0)
    assert not none.truth_mask(40).any()


def test_effect_added_to_second_group_only():
    noise = generate_noise(NoiseSpec("independent", m=40), 10, seed=0)
    eff = EffectSpec("square", "one", 0.2, 1.5)
    out = inject_effect(noise, np.repeat([0, 1], 5), eff)
    assert np.array_equal(out.data[:5], noise.data[:5])
    np.testing.assert_allclose(out.data[5:] - noise.data[5:], np.tile(eff.betas(40), (5, 1)))


def test_agresti_coull_formula():
    lo, hi = agresti_coull(0, 4000)
    p = 2 / 4004
    assert lo == 0.0
    assert hi == pytest.approx(p + 1.96 * math.sqrt(p * (1 - p) / 4004), rel=1e-12)
    lo, hi = agresti_coull(50, 1000)
    p = 52 / 1004
    assert (lo, hi) == pytest.approx((p - 1.96 * math.sqrt(p * (1 - p) / 1004),
                                      p + 1.96 * math.sqrt(p * (1 - p) / 1004)))


def test_procedure_that_rejects_nothing():
    # alpha below 1/n_P: no p-value can reach it
    met = run_study(NoiseSpec("independent", m=30), EffectSpec("square", "one", 0.2, 3.0),
                    ["maxt", "clusterdepth"], replications=5, n_perm=50, seed=0, alpha=1e-6)
    for m in met.values():
        assert m.fwer == 0 and m.average_power == 0 and m.disjunctive_power == 0
        assert m.fwer_ci[0] <= m.fwer <= m.fwer_ci[1]


def test_metrics_recompute_and_power_ordering():
    procs = ["clusterdepth", "clusterdepth_manly", "clustermass", "troendle", "maxt"]
    met, records = run_study(NoiseSpec("gaussian", m=60, range=4),
                             EffectSpec("square", "one", 0.2, 1.5), procs, replications=12,
                             n_perm=100, seed=5, return_records=True)
    again = summarize(records, procs)
    for name in procs:
        a, b = met[name], again[name]
        assert (a.fwer, a.average_power, a.disjunctive_power) == (b.fwer, b.average_power,
                                                                   b.disjunctive_power)
        rows = [r for r in records if r.procedure == name]
        assert a.fwer == sum(r.V > 0 for r in rows) / len(rows)
        assert a.average_power == math.fsum(r.S / r.m1 for r in rows) / len(rows)
        assert a.average_power <= a.disjunctive_power
        assert 0 <= a.fwer <= 1 and a.fwer_ci[0] <= a.fwer <= a.fwer_ci[1]


def test_worker_count_invariance():
    args = (NoiseSpec("exponential", m=40, range=3), EffectSpec("triangular", "two", 0.2, 2.0),
            ["clusterdepth", "tfce", "minp"])
    _, r1 = run_study(*args, replications=6, n_perm=60, seed=9, workers=1, return_records=True)
    _, r3 = run_study(*args, replications=6, n_perm=60, seed=9, workers=3, return_records=True)
    assert r1 == r3


def test_power_ratio_without_true_effects():
    assert ReplicationRecord(0, "x", 2, 0, 0, 10).power_ratio == 0.0


def test_resolve_procedures_defaults():
    specs = {s.name: s.scheme.value for s in resolve_procedures(
        ["clusterdepth", "clusterdepth_manly", "troendle", "maxt:terbraak"])}
    assert specs == {"clusterdepth": "terbraak", "clusterdepth_manly": "manly",
                     "troendle": "manly", "maxt:terbraak": "terbraak"}
    with pytest.raises(ValueError):
        resolve_procedures(["nope"])
