import math
from itertools import combinations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from macura.gaussian import (
    DiagGaussian,
    Diagnostics,
    EnsemblePrediction,
    geometric_mean_gaussian,
    gjs_arrays,
    gjs_divergence,
    hellinger_distance,
    kl_arrays,
    kl_divergence,
    tv_upper_bound,
    u_gjs,
    u_gjs_arrays,
    u_mean_variance,
    u_mean_variance_arrays,
    u_ovr,
    u_ovr_arrays,
)
from oracles import quad_hellinger, quad_kl, quad_tv


def N(mean, var):
    return DiagGaussian(np.atleast_1d(mean), np.atleast_1d(var))


def random_pair(rng, dim=1):
    mu = rng.normal(0, 2, size=(2, dim))
    var = 10 ** rng.uniform(-1, 1, size=(2, dim))
    return N(mu[0], var[0]), N(mu[1], var[1])


# -- DiagGaussian -----------------------------------------------------------

@pytest.mark.parametrize("var", [[0.0], [-1.0], [np.inf], [np.nan]])
def test_rejects_bad_variance(var):
    with pytest.raises(ValueError):
        DiagGaussian([0.0], var)


def test_rejects_shape_mismatch_and_nonfinite_mean():
    with pytest.raises(ValueError):
        DiagGaussian([0.0, 1.0], [1.0])
    with pytest.raises(ValueError):
        DiagGaussian([np.nan], [1.0])


def test_ensemble_needs_two_members():
    with pytest.raises(ValueError):
        EnsemblePrediction((N(0, 1),))
    with pytest.raises(ValueError):
        EnsemblePrediction((N(0, 1), N([0, 0], [1, 1])))


# -- KL ---------------------------------------------------------------------

def test_kl_identity_and_mean_shift():
    assert kl_divergence(N(0, 1), N(0, 1)) == 0.0
    assert kl_divergence(N(0, 1), N(1, 1)) == pytest.approx(0.5, abs=1e-15)


def test_kl_variance_change_against_quadrature():
    p, q = N(0, 1), N(0, 4)
    assert kl_divergence(p, q) == pytest.approx(quad_kl(p, q), abs=1e-8)


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        kl_divergence(N(0, 1), N([0, 0], [1, 1]))


def test_kl_sums_over_dimensions():
    rng = np.random.default_rng(3)
    mu = rng.normal(size=(2, 4))
    var = rng.uniform(0.5, 2, size=(2, 4))
    total = sum(kl_divergence(N(mu[0, i], var[0, i]), N(mu[1, i], var[1, i])) for i in range(4))
    assert kl_divergence(N(mu[0], var[0]), N(mu[1], var[1])) == pytest.approx(total, rel=1e-13)


# -- geometric mean ---------------------------------------------------------

def test_geometric_mean_idempotent():
    p = N([0.3, -2.0], [0.7, 3.0])
    m = geometric_mean_gaussian(p, p)
    np.testing.assert_array_equal(m.mean, p.mean)
    np.testing.assert_array_equal(m.var, p.var)


def test_geometric_mean_hand_values():
    m = geometric_mean_gaussian(N(0, 1), N(0, 9))
    assert m.var[0] == pytest.approx(1.8, rel=1e-15)
    assert m.mean[0] == 0.0
    m = geometric_mean_gaussian(N(1, 1), N(3, 1))
    assert m.mean[0] == pytest.approx(2.0, rel=1e-15)
    assert m.var[0] == pytest.approx(1.0, rel=1e-15)


def test_geometric_mean_symmetric():
    p, q = N([0.1, 5.0], [0.3, 2.0]), N([-1.0, 2.0], [4.0, 0.01])
    a, b = geometric_mean_gaussian(p, q), geometric_mean_gaussian(q, p)
    np.testing.assert_array_equal(a.mean, b.mean)
    np.testing.assert_array_equal(a.var, b.var)


def test_geometric_mean_matches_precision_formula():
    p, q = N(0.5, 0.2), N(-1.5, 3.0)
    prec = 0.5 / 0.2 + 0.5 / 3.0
    m = geometric_mean_gaussian(p, q)
    assert m.var[0] == pytest.approx(1 / prec, rel=1e-14)
    assert m.mean[0] == pytest.approx((0.5 * 0.5 / 0.2 + 0.5 * -1.5 / 3.0) / prec, rel=1e-14)


# -- GJS ----------------------------------------------------------------------

def test_gjs_identity_and_symmetry():
    p = N([1.0, 2.0], [0.5, 4.0])
    assert gjs_divergence(p, p) == 0.0
    assert gjs_divergence(N(0, 1), N(2, 1)) == gjs_divergence(N(2, 1), N(0, 1))


def test_gjs_composition_oracle():
    p, q = N(0, 1), N(1, 2)
    m = geometric_mean_gaussian(p, q)
    expected = 0.5 * quad_kl(p, m) + 0.5 * quad_kl(q, m)
    assert gjs_divergence(p, q) == pytest.approx(expected, abs=1e-9)
    assert gjs_divergence(p, q) == pytest.approx(0.5 * kl_divergence(p, m) + 0.5 * kl_divergence(q, m), rel=1e-14)


# -- ensemble measures ----------------------------------------------------------

def test_u_gjs_identical_members_is_zero():
    g = N([0.2, -0.1], [0.3, 0.05])
    assert u_gjs([g] * 5) == 0.0


def test_u_gjs_two_members_is_single_gjs():
    p, q = N(0.0, 1.0), N(0.7, 2.5)
    assert u_gjs([p, q]) == pytest.approx(gjs_divergence(p, q), rel=1e-15)


def test_u_gjs_three_member_pairwise_mean():
    members = [N(0, 1), N(1, 1), N(2, 1)]
    pairs = [gjs_divergence(members[e], members[f]) for e, f in combinations(range(3), 2)]
    assert u_gjs(members) == pytest.approx(sum(pairs) / 3, rel=1e-14)
    # equal variances: GJS reduces to (dmu)^2 / 8
    assert u_gjs(members) == pytest.approx((1 + 4 + 1) / 8 / 3, rel=1e-14)


def test_u_gjs_needs_two_members():
    with pytest.raises(ValueError):
        u_gjs_arrays(np.zeros((1, 3, 2)), np.ones((1, 3, 2)))


def test_u_gjs_arrays_matches_scalar():
    rng = np.random.default_rng(5)
    means = rng.normal(size=(4, 6, 3))
    variances = rng.uniform(0.1, 2.0, size=(4, 6, 3))
    batch = u_gjs_arrays(means, variances)
    for n in range(6):
        pred = EnsemblePrediction.from_arrays(means[:, n], variances[:, n])
        assert batch[n] == pytest.approx(u_gjs(pred), rel=1e-13)


def test_u_ovr_cases():
    g = N(1.0, 0.5)
    assert u_ovr([g, g, g], 1) == pytest.approx(0.0, abs=1e-15)
    p, q = N(0.0, 1.0), N(2.0, 3.0)
    assert u_ovr([p, q], 0) == pytest.approx(kl_divergence(p, q), rel=1e-14)
    members = [N(0, 1), N(2, 1), N(4, 1)]
    # rest moments: mean 3, var ((1+4)+(1+16))/2 - 9 = 2
    assert u_ovr(members, 0) == pytest.approx(kl_divergence(N(0, 1), N(3, 2)), rel=1e-14)


def test_u_ovr_index_errors():
    with pytest.raises(IndexError):
        u_ovr([N(0, 1), N(1, 1)], 2)
    with pytest.raises(IndexError):
        u_ovr([N(0, 1), N(1, 1)], -1)


def test_u_ovr_arrays_per_entry_member():
    rng = np.random.default_rng(11)
    means = rng.normal(size=(5, 7, 2))
    variances = rng.uniform(0.2, 1.5, size=(5, 7, 2))
    held = rng.integers(0, 5, size=7)
    batch = u_ovr_arrays(means, variances, held)
    for n in range(7):
        pred = EnsemblePrediction.from_arrays(means[:, n], variances[:, n])
        assert batch[n] == pytest.approx(u_ovr(pred, int(held[n])), rel=1e-13)


def _mean_variance_oracle(means):
    means = np.asarray(means)
    mu = means.mean(axis=0)
    cov = np.zeros((means.shape[1], means.shape[1]))
    for m in means:
        cov += np.outer(m - mu, m - mu)
    cov /= len(means)
    return math.sqrt(sum(c * c for c in cov.ravel()))


def test_u_mean_variance_cases():
    assert u_mean_variance([N(1.0, 0.1), N(1.0, 5.0), N(1.0, 2.0)]) == 0.0
    assert u_mean_variance([N(-1.0, 1.0), N(1.0, 1.0)]) == pytest.approx(1.0, rel=1e-15)
    rng = np.random.default_rng(2)
    for _ in range(20):
        E, d = rng.integers(2, 8), rng.integers(1, 6)
        means = rng.normal(size=(E, d))
        pred = EnsemblePrediction.from_arrays(means, np.ones((E, d)))
        assert u_mean_variance(pred) == pytest.approx(_mean_variance_oracle(means), rel=1e-12)


def test_u_mean_variance_arrays_batch():
    rng = np.random.default_rng(4)
    means = rng.normal(size=(3, 5, 4))
    out = u_mean_variance_arrays(means)
    for n in range(5):
        assert out[n] == pytest.approx(_mean_variance_oracle(means[:, n]), rel=1e-12)


# -- Hellinger / TV -------------------------------------------------------------

def test_hellinger_identity():
    p = N([0.5, 1.0], [2.0, 0.1])
    assert hellinger_distance(p, p) == 0.0
    assert tv_upper_bound(p, p) == 0.0


def test_hellinger_far_apart_against_quadrature():
    p, q = N(0, 1), N(5, 1)
    h = hellinger_distance(p, q)
    assert h == pytest.approx(quad_hellinger(p, q), abs=1e-6)
    assert h > 0.95


def test_hellinger_dimension_mismatch():
    with pytest.raises(ValueError):
        hellinger_distance(N(0, 1), N([0, 1], [1, 1]))


def test_tv_bound_dominates_quadrature_tv():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p, q = random_pair(rng)
        assert math.sqrt(2) * hellinger_distance(p, q) >= quad_tv(p, q) - 1e-9


# -- clamping diagnostics ---------------------------------------------------------

def test_clamp_counter_only_counts_extreme_ratios():
    diag = Diagnostics()
    kl_divergence(N(0, 1), N(0, 2), diag)
    assert diag.clamp_events == 0
    value = kl_divergence(N([0, 0], [1e-10, 1.0]), N([0, 0], [1e10, 1.0]), diag)
    assert diag.clamp_events == 1
    assert np.isfinite(value)


def test_array_functions_broadcast_over_batches():
    rng = np.random.default_rng(9)
    mp, mq = rng.normal(size=(2, 3, 4, 2))
    vp, vq = rng.uniform(0.1, 3, size=(2, 3, 4, 2))
    assert kl_arrays(mp, vp, mq, vq).shape == (3, 4)
    np.testing.assert_allclose(gjs_arrays(mp, vp, mq, vq), gjs_arrays(mq, vq, mp, vp), rtol=0, atol=0)


# -- properties -------------------------------------------------------------------

log_var = st.floats(min_value=-3, max_value=3)
finite = st.floats(min_value=-50, max_value=50)


@st.composite
def gaussian_pairs(draw):
    d = draw(st.integers(1, 8))
    mu = [draw(st.lists(finite, min_size=d, max_size=d)) for _ in range(2)]
    lv = [draw(st.lists(log_var, min_size=d, max_size=d)) for _ in range(2)]
    return N(mu[0], 10.0 ** np.array(lv[0])), N(mu[1], 10.0 ** np.array(lv[1]))


@settings(max_examples=300, deadline=None)
@given(gaussian_pairs())
def test_divergence_properties(pair):
    p, q = pair
    assert kl_divergence(p, q) >= 0
    g = gjs_divergence(p, q)
    assert g >= 0
    assert g == pytest.approx(gjs_divergence(q, p), rel=1e-12, abs=0)
    h = hellinger_distance(p, q)
    assert 0.0 <= h <= 1.0
    assert h == hellinger_distance(q, p) or h == pytest.approx(hellinger_distance(q, p), rel=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 7), st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_u_gjs_permutation_invariance(E, d, seed):
    rng = np.random.default_rng(seed)
    means = rng.normal(0, 3, size=(E, d))
    variances = 10 ** rng.uniform(-3, 3, size=(E, d))
    pred = EnsemblePrediction.from_arrays(means, variances)
    perm = rng.permutation(E)
    shuffled = EnsemblePrediction.from_arrays(means[perm], variances[perm])
    assert u_gjs(shuffled) == pytest.approx(u_gjs(pred), rel=1e-12, abs=0)
