from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from scipy.special import expit

from clusterpolicy.data import ClusterObservation, Dataset, enumerate_treatments
from clusterpolicy.estimator import (
    ClusterBlock,
    EstimandSpec,
    EstimatorConfig,
    TooFewClusters,
    block_eifs,
    crossfit,
    uncentered_eif,
    estimate,
    estimate_ipw,
    evaluate,
    fixed_fitter,
    uncentered_eif_mu,
    uncentered_eif_mu_t,
    variance,
)
from clusterpolicy.nuisance import LearnerSpec
from clusterpolicy.policies import CIPS, CMS, TPB, TypeB
from clusterpolicy.simulation import DgpConfig, OracleNuisance, generate_dgp

import helpers

LOGIT = LearnerSpec(ensemble=False)


def _random_cluster(rng, n, p_lo=0.05):
    pi = rng.uniform(p_lo, 1 - p_lo, n)
    gtab = rng.uniform(0, 1, (n, 2, n))
    a = rng.integers(0, 2, n)
    y = rng.integers(0, 2, n).astype(float)
    x = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n)])
    return ClusterObservation(y, a, x), pi, gtab


# worked examples ---------------------------------------------------------------------

def test_typeb_worked_example():
    c = ClusterObservation([1.0], [1], [[0.0]])
    nuis = helpers.TableNuisance([0.5], np.array([[[0.4], [0.8]]]))
    assert uncentered_eif_mu(c, nuis, TypeB(0.5)) == pytest.approx(0.8)


def test_typeb_mu1_single_unit():
    c = ClusterObservation([1.0], [1], [[0.0]])
    nuis = helpers.TableNuisance([0.3], np.array([[[0.4], [0.8]]]))
    want = 0.8 + (1 / 0.3) * (1.0 - 0.8)
    assert uncentered_eif_mu_t(c, nuis, TypeB(0.5), 1) == pytest.approx(want)
    assert uncentered_eif_mu_t(c, nuis, TypeB(0.5), 0) == pytest.approx(0.4)


@pytest.mark.parametrize("policy", [TypeB(0.3), CIPS(2.0), CMS(0.4, "xs"), TPB(0.5), TPB(0.0)])
def test_constant_regression_returns_constant(policy):
    rng = np.random.default_rng(0)
    for n in (1, 2, 3):
        for _ in range(5):
            c, pi, _ = _random_cluster(rng, n)
            c = ClusterObservation(np.full(n, 0.6), c.a, c.x)
            nuis = helpers.TableNuisance(pi, np.full((n, 2, n), 0.6))
            for kind in ("mu", "mu1", "mu0"):
                val = uncentered_eif(c, nuis, policy, kind, column_names=("z", "xs"))
                assert val == pytest.approx(0.6, abs=1e-12)


def test_matches_naive_double_loop():
    rng = np.random.default_rng(1)
    names = ("z", "xs")
    for _ in range(150):
        n = int(rng.integers(1, 5))
        c, pi, gtab = _random_cluster(rng, n)
        policy = helpers.random_policy(rng)
        nuis = helpers.TableNuisance(pi, gtab)
        want = helpers.naive_eifs(policy, c.y, c.a.astype(int), pi, gtab, c.x, names)
        for kind in ("mu", "mu1", "mu0"):
            got = uncentered_eif(c, nuis, policy, kind, column_names=names)
            assert got == pytest.approx(want[kind], abs=1e-10), (policy, kind)


@pytest.mark.parametrize("policy", [CIPS(0.5), TPB(0.4), CMS(0.7, "xs")])
def test_subsampled_value_unbiased(policy):
    """Averaging single-draw subsampled values recovers the exact value."""
    rng = np.random.default_rng(2)
    n = 6
    c, pi, gtab = _random_cluster(rng, n)
    R = 10_000
    block = ClusterBlock(pi=np.tile(pi, (R, 1)), a_obs=np.tile(c.a.astype(float), (R, 1)),
                         x=np.tile(c.x, (R, 1, 1)), column_names=("z", "xs"), y=np.tile(c.y, (R, 1)),
                         gtab=np.tile(gtab, (R, 1, 1, 1)), index=np.arange(R))
    bits = rng.integers(0, 2, (R, 1, n)).astype(np.int8)
    draws, _ = block_eifs(block, policy, bits, 2.0**n)
    exact, _ = block_eifs(block, policy, enumerate_treatments(n)[None], 1.0)
    for kind in ("mu", "mu1", "mu0"):
        se = draws[kind].std() / np.sqrt(R)
        assert abs(draws[kind].mean() - exact[kind][0]) < 3 * se


# variance --------------------------------------------------------------------------------

def test_variance_examples():
    assert variance(np.full(7, 0.3), 0.3) == 0.0
    assert variance([0.0, 2.0], 1.0) == 1.0
    folds = np.array([0, 0, 1, 1])
    assert variance([0.0, 2.0, 1.0, 1.0], 1.0, folds, 2) == pytest.approx(0.5)


# estimator ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def small_data():
    return generate_dgp(DgpConfig(m=200, size_dist="uniform:3-8", seed=21))


def test_too_few_clusters(small_data):
    with pytest.raises(TooFewClusters):
        estimate(small_data.subset(range(3)), [EstimandSpec("mu", CIPS(1.0))], EstimatorConfig(K=2))


def test_contrast_linearity(small_data):
    q, ref = CIPS(0.5), CIPS(1.0)
    ests = [EstimandSpec(k, q) for k in ("mu", "mu1", "mu0", "de")] + \
        [EstimandSpec(k, ref) for k in ("mu", "mu1", "mu0")] + \
        [EstimandSpec(k, q, ref) for k in ("se1", "se0", "oe", "te")]
    for S in (1, 3):
        rep = estimate(small_data, ests, EstimatorConfig(seed=3, S=S, learner=LOGIT))
        get = {(r.spec.kind, r.spec.policy_label): r for r in rep.results}
        lq, lr = q.label, ref.label
        pairs = {
            ("de", lq): (("mu1", lq), ("mu0", lq)),
            ("se1", f"{lq}|{lr}"): (("mu1", lq), ("mu1", lr)),
            ("se0", f"{lq}|{lr}"): (("mu0", lq), ("mu0", lr)),
            ("oe", f"{lq}|{lr}"): (("mu", lq), ("mu", lr)),
            ("te", f"{lq}|{lr}"): (("mu1", lq), ("mu0", lr)),
        }
        for key, (plus, minus) in pairs.items():
            assert get[key].point == get[plus].point - get[minus].point
            assert np.array_equal(get[key].per_cluster_eif, get[plus].per_cluster_eif - get[minus].per_cluster_eif)


def test_determinism(small_data):
    ests = [EstimandSpec("mu", CIPS(1.0)), EstimandSpec("de", TPB(0.3))]
    cfg = EstimatorConfig(seed=5, learner=LearnerSpec(cv_folds=3))
    r1, r2 = estimate(small_data, ests, cfg), estimate(small_data, ests, cfg)
    for a, b in zip(r1.results, r2.results):
        assert a.point == b.point and a.se == b.se
        assert np.array_equal(a.per_cluster_eif, b.per_cluster_eif)


def test_permutation_invariance(small_data):
    rng = np.random.default_rng(4)
    perm = Dataset(tuple(c.permuted(rng.permutation(c.n)) for c in small_data.clusters), small_data.column_names)
    ests = [EstimandSpec(k, p) for p in (CIPS(0.5), TPB(0.45)) for k in ("mu", "mu1", "mu0")]
    cfg = EstimatorConfig(seed=7, learner=LOGIT)
    r1, r2 = estimate(small_data, ests, cfg), estimate(perm, ests, cfg)
    for a, b in zip(r1.results, r2.results):
        assert abs(a.point - b.point) < 1e-12


def test_median_of_splits(small_data):
    spec = EstimandSpec("mu", CIPS(1.0))
    cfg = EstimatorConfig(seed=8, S=5, learner=LOGIT)
    rep = estimate(small_data, [spec], cfg)
    assert rep.results[0].se > 0
    assert "split_spread" in rep.diagnostics
    # the attached influence vector comes from one split; its fold average is that split's point
    cf = crossfit(small_data, cfg)
    pts = []
    for s in range(5):
        sub = type(cf)([cf.folds[s]], [cf.pis[s]], [cf.gtabs[s]])
        pts.append(evaluate(small_data, [spec], replace(cfg, S=1), sub).results[0].point)
    assert rep.results[0].point == pytest.approx(float(np.median(pts)), abs=1e-15)


def test_subsampling_point_unbiased():
    data = generate_dgp(DgpConfig(m=60, size_dist="uniform:5-10", seed=9))
    cfg = EstimatorConfig(seed=1, r=20, exact_floor=1)
    cf = crossfit(data, cfg, fixed_fitter(OracleNuisance()))
    ests = [EstimandSpec("mu", CIPS(2.0)), EstimandSpec("mu0", TPB(0.5))]
    exact = evaluate(data, ests, replace(cfg, r="exact"), cf)
    draws = np.array([[r.point for r in evaluate(data, ests, replace(cfg, subsample_seed=s), cf).results]
                      for s in range(200)])
    for k, r in enumerate(exact.results):
        se = draws[:, k].std(ddof=1) / np.sqrt(200)
        assert abs(draws[:, k].mean() - r.point) < 3 * se


def test_tpb_rho_zero_targets_mean_outcome(small_data):
    rep = estimate(small_data, [EstimandSpec("mu", TPB(0.0))], EstimatorConfig(seed=2, learner=LOGIT))
    ybar = np.mean([c.ybar for c in small_data.clusters])
    r = rep.results[0]
    assert abs(r.point - ybar) < 3 * r.se
    ipw = estimate_ipw(small_data, [EstimandSpec("mu", TPB(0.0))], EstimatorConfig())
    assert ipw.results[0].point == pytest.approx(ybar, abs=1e-12)


def test_all_ones_outcome():
    data = generate_dgp(DgpConfig(m=80, size_dist="uniform:3-6", seed=3))
    ones = Dataset(tuple(ClusterObservation(np.ones(c.n), c.a, c.x) for c in data.clusters), data.column_names)
    for pol in (CIPS(2.0), TPB(0.5), TypeB(0.3)):
        rep = estimate(ones, [EstimandSpec("mu", pol)], EstimatorConfig(seed=1, learner=LOGIT))
        assert rep.results[0].point == pytest.approx(1.0, abs=1e-12)
        ipw = estimate_ipw(ones, [EstimandSpec("mu", pol)], EstimatorConfig(), model=OracleNuisance())
        r = ipw.results[0]
        assert abs(r.point - 1.0) < 3 * r.se + 1e-12


def test_no_interference_mu_t_invariant_across_policies():
    rng = np.random.default_rng(11)
    clusters = []
    for i in range(3000):
        n = int(rng.integers(2, 6))
        x = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n), np.full(n, rng.normal())])
        a = rng.binomial(1, 0.5, n)
        y = rng.binomial(1, expit(0.5 - a + x[:, 0])).astype(float)
        clusters.append(ClusterObservation(y, a, x))
    data = Dataset(tuple(clusters), ("x1", "x2", "c"))

    class NoInterference:
        clip_eps = 0.0
        info = {}

        def block_arrays(self, xb):
            c, n, _ = xb.shape
            g = expit(0.5 - np.arange(2)[None, None, :, None] + xb[:, :, None, None, 0])
            return np.full((c, n), 0.5), np.broadcast_to(g, (c, n, 2, n)).copy()

    ests = [EstimandSpec("mu1", p) for p in (CIPS(0.5), CIPS(2.0), TPB(0.6))]
    rep = estimate(data, ests, EstimatorConfig(seed=1, r="exact"), fixed_fitter(NoInterference()))
    base = rep.results[0].per_cluster_eif
    for r in rep.results[1:]:
        diff = r.per_cluster_eif - base
        assert abs(diff.mean()) < 3 * diff.std() / np.sqrt(diff.size)


def test_fold_count_robustness():
    data = generate_dgp(DgpConfig(m=500, seed=12))
    spec = [EstimandSpec("mu", CIPS(1.0))]
    r2 = estimate(data, spec, EstimatorConfig(K=2, seed=1, learner=LOGIT)).results[0]
    r5 = estimate(data, spec, EstimatorConfig(K=5, seed=1, learner=LOGIT)).results[0]
    assert abs(r2.point - r5.point) < 4 * np.hypot(r2.se, r5.se)


def test_section5_single_dataset_ensemble():
    data = generate_dgp(DgpConfig(m=500, seed=13))
    r = estimate(data, [EstimandSpec("mu", CIPS(1.0))], EstimatorConfig(seed=2)).results[0]
    assert abs(r.point - 0.364) < 3 * 0.012
    lo, hi = r.ci
    assert lo < r.point < hi and hi - lo == pytest.approx(2 * 1.959963984540054 * r.se)


def test_tpb_floor_flagged():
    rng = np.random.default_rng(14)
    clusters = [ClusterObservation(rng.integers(0, 2, 6).astype(float), np.zeros(6, int), np.zeros((6, 1)))
                for _ in range(10)]
    data = Dataset(tuple(clusters))

    class Tiny:
        clip_eps = 0.01
        info = {}

        def block_arrays(self, xb):
            c, n, _ = xb.shape
            return np.full((c, n), 0.01), np.full((c, n, 2, n), 0.5)

    rep = estimate(data, [EstimandSpec("mu", TPB(1.0))], EstimatorConfig(seed=0), fixed_fitter(Tiny()))
    assert rep.results[0].flags == ["tpb_denominator_floored:10"]
    assert len(rep.diagnostics["flagged_clusters"]["tpb:rho=1"]) == 10


def test_estimand_spec_validation_and_parse():
    with pytest.raises(ValueError):
        EstimandSpec("oe", CIPS(1.0))
    with pytest.raises(ValueError):
        EstimandSpec("mu", CIPS(1.0), CIPS(2.0))
    e = EstimandSpec.parse("te:cips:delta0=0.5/cips:delta0=1")
    assert e.kind == "te" and e.policy == CIPS(0.5) and e.reference == CIPS(1.0)


def test_config_validation():
    for bad in (dict(K=1), dict(S=0), dict(r=0), dict(r="all"), dict(alpha_level=1.0)):
        with pytest.raises(ValueError):
            EstimatorConfig(**bad)
    cfg = EstimatorConfig(r=100)
    assert cfg.is_exact(12) and not cfg.is_exact(13)
    assert EstimatorConfig(r=10_000).is_exact(13)
