import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from tiltlate.data import Dataset, make_folds
from tiltlate.errors import EmptyStratum, ValidationError, WeakInstrument
from tiltlate.learners import LearnerSpec
from tiltlate.nuisance import NuisanceFit, fit_nuisances
from tiltlate.profiling import (KERNELS, StrataQuery, defier_bounds, density_integral,
                                marginal_strata, profile_curve, profile_stratum,
                                profile_values, silverman_1d, strata_weights)
from tiltlate.simulation import (SimConfig, complier_mass_closed_form, oracle_complier_mass,
                                 simulate_dgp)

KERNEL = LearnerSpec.kernel()


@pytest.fixture(scope="module")
def big():
    sim = simulate_dgp(SimConfig(5000, seed=41))
    folds = make_folds(5000, 5, 41)
    fits = {d: fit_nuisances(sim.data, d, KERNEL, folds) for d in (0.3, 0.5, 0.7)}
    return sim, fits


@pytest.fixture(scope="module")
def big_linear(big):
    # alpha is log-linear in this design, so the linear learner keeps the complier
    # mass doubly robust; the kernel learner carries a visible smoothing bias here
    sim, _ = big
    folds = make_folds(5000, 5, 41)
    return {d: fit_nuisances(sim.data, d, LearnerSpec.linear(), folds) for d in (0.3, 0.5, 0.7)}


def test_no_treated_units():
    sim = simulate_dgp(SimConfig(300, seed=1))
    d = sim.data
    data = Dataset(d.x, d.z, np.zeros(d.n), d.y)
    fit = fit_nuisances(data, 0.5, KERNEL, make_folds(300, 5, 0))
    assert marginal_strata(data, fit).always == 0.0
    with pytest.raises(EmptyStratum):
        profile_stratum(data, fit, StrataQuery(0, 0.0, 0.5), "always")


@pytest.mark.parametrize("delta", [0.5, -0.5])
def test_constant_covariate_gives_one(delta):
    sim = simulate_dgp(SimConfig(600, seed=2))
    d = sim.data
    x = np.column_stack([d.x, np.full(d.n, 3.0)])
    data = Dataset(x, d.z, d.a, d.y)
    fit = fit_nuisances(data, delta, KERNEL, make_folds(600, 5, 0))
    for stratum in ("complier", "always", "never"):
        for weights in ("influence_function", "plain"):
            est = profile_stratum(data, fit, StrataQuery(4, 3.0, delta), stratum, weights)
            assert est.estimate == pytest.approx(1.0, abs=1e-12)
            assert est.plain_estimate == pytest.approx(1.0, abs=1e-12)


def test_complier_profile_matches_latent_oracle(big):
    sim, fits = big
    fit = fits[0.5]
    v = (sim.data.x[:, 0] > 0).astype(float)
    est, se, plain = profile_values(sim.data, fit, v, "complier")
    _, truth = oracle_complier_mass(sim.config, 0.5, 10**6, seed=99,
                                    v_fn=lambda x: x[:, 0] > 0)
    assert abs(est - truth) <= 3 * se
    assert abs(plain - truth) <= 3 * se


@pytest.mark.parametrize("weights", ["plain", "influence_function", "bad"])
def test_strata_weight_rows(big, weights):
    sim, fits = big
    if weights == "bad":
        with pytest.raises(ValidationError):
            strata_weights(sim.data, fits[0.5], weights)
        return
    total = sum(strata_weights(sim.data, fits[0.5], weights))
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_negative_tilt_if_weights_sum_to_one(sim2000, kernel_fit_neg):
    total = sum(strata_weights(sim2000.data, kernel_fit_neg))
    np.testing.assert_allclose(total, 1.0, atol=1e-12)


def test_marginal_no_compliers():
    sim = simulate_dgp(SimConfig(200, seed=3))
    d = sim.data
    fit = NuisanceFit.from_arrays(0.5, np.ones(d.n), d.y, d.a, clip=False)
    m = marginal_strata(d, fit)
    assert m.complier == 0.0
    assert (m.always, m.never) == pytest.approx((d.a.mean(), 1 - d.a.mean()), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32), delta=st.sampled_from([-0.8, -0.1, 0.2, 0.9]))
def test_marginal_simplex_any_fit(seed, delta):
    rng = np.random.default_rng(seed)
    n = 50
    a = rng.integers(0, 2, n).astype(float)
    a[:2] = (0, 1)
    data = Dataset(rng.normal(size=(n, 2)), rng.normal(size=n), a, rng.normal(size=n))
    fit = NuisanceFit.from_arrays(delta, rng.uniform(0.1, 5, n), rng.normal(size=n),
                                  rng.uniform(size=n))
    m = marginal_strata(data, fit)
    assert abs(m.complier + m.always + m.never - 1.0) <= 1e-10


def test_always_taker_delta_invariance(big):
    sim, fits = big
    q3 = StrataQuery(0, 0.0, 0.3)
    v = (sim.data.x[:, 0] > 0).astype(float)
    a3 = profile_values(sim.data, fits[0.3], v, "always")
    a7 = profile_values(sim.data, fits[0.7], v, "always")
    assert a3[0] == a7[0] and a3[2] == a7[2]
    assert marginal_strata(sim.data, fits[0.3]).always == marginal_strata(sim.data,
                                                                          fits[0.7]).always
    assert q3.delta == 0.3


def test_complier_mass_monotone_and_oracle(big, big_linear):
    sim, _ = big
    fits = big_linear
    m3 = marginal_strata(sim.data, fits[0.3])
    m7 = marginal_strata(sim.data, fits[0.7])
    assert m7.complier_if >= m3.complier_if - 3 * np.hypot(m3.complier_se, m7.complier_se)
    for d, m in ((0.3, m3), (0.7, m7)):
        truth = complier_mass_closed_form(sim.config, d)
        assert abs(m.complier_if - truth) <= 3 * m.complier_se


def test_marginal_complier_matches_oracle(big, big_linear):
    sim, _ = big
    fits = big_linear
    m = marginal_strata(sim.data, fits[0.5])
    truth = oracle_complier_mass(sim.config, 0.5, 10**6, seed=5)
    # only the IF estimate: the linear plug-in inherits the misspecified gamma_A
    assert abs(m.complier_if - truth) <= 3 * m.complier_se


def test_closed_form_matches_monte_carlo():
    cfg = SimConfig(10)
    for d in (0.3, 0.7, -0.4):
        mc = oracle_complier_mass(cfg, d, 10**6, seed=8)
        assert abs(mc - complier_mass_closed_form(cfg, d)) < 2e-3


def test_continuous_profile_integrates_to_one(big):
    sim, fits = big
    grid = np.linspace(-5, 5, 201)
    ests, h = profile_curve(sim.data, fits[0.5], "x1", grid, "complier")
    assert h == pytest.approx(silverman_1d(sim.data.x[:, 0]))
    assert 0.95 <= density_integral(grid, ests) <= 1.05


def test_negative_tilt_never_takers_need_treatment_regression(sim2000, kernel_fit_neg):
    v = (sim2000.data.x[:, 1] > 0).astype(float)
    fit = kernel_fit_neg
    bare = NuisanceFit.from_arrays(fit.delta, fit.alpha, fit.gamma_y, fit.gamma_a)
    est, se, plain = profile_values(sim2000.data, bare, v, "never")
    assert np.isnan(plain) and np.isfinite(est)
    with pytest.raises(ValidationError):
        profile_values(sim2000.data, bare, v, "never", weights="plain")
    q = StrataQuery(1, 1.0, fit.delta, "continuous", 0.5)
    full = profile_stratum(sim2000.data, fit, q, "never", weights="plain")
    assert np.isfinite(full.estimate)


def test_negative_tilt_profiles_near_each_other(sim2000, kernel_fit_neg):
    v = (sim2000.data.x[:, 0] > 0).astype(float)
    for stratum in ("complier", "always", "never"):
        lam = None
        if stratum == "never":
            from tiltlate.nuisance import treatment_regression
            lam = treatment_regression(sim2000.data, kernel_fit_neg)
        est, se, plain = profile_values(sim2000.data, kernel_fit_neg, v, stratum, lam=lam)
        assert abs(est - plain) <= 3 * se


def test_weak_complier_mass():
    sim = simulate_dgp(SimConfig(200, seed=4))
    d = sim.data
    fit = NuisanceFit.from_arrays(0.5, np.exp(0.5 * d.z), d.y, d.a, clip=False)
    with pytest.raises(WeakInstrument):
        profile_stratum(d, fit, StrataQuery(0, 0.0, 0.5), "complier")


def test_query_validation(kernel_fit, sim2000):
    with pytest.raises(ValidationError):
        StrataQuery(0, 0.0, 0.5, kind="continuous")
    with pytest.raises(ValidationError):
        StrataQuery(0, 0.0, 0.5, kind="ordinal")
    with pytest.raises(ValidationError):
        StrataQuery(0, 0.0, 0.5, kernel="box")
    with pytest.raises(ValidationError):
        profile_stratum(sim2000.data, kernel_fit, StrataQuery(0, 0.0, 0.7), "complier")
    with pytest.raises(ValidationError):
        profile_stratum(sim2000.data, kernel_fit, StrataQuery(0, 0.0, 0.5), "defier")
    with pytest.raises(ValidationError):
        profile_stratum(sim2000.data, kernel_fit, StrataQuery("nope", 0.0, 0.5), "complier")


def test_profile_interval(kernel_fit, sim2000):
    est = profile_stratum(sim2000.data, kernel_fit,
                          StrataQuery("x2", 0.0, 0.5, "continuous", 0.4, "epanechnikov"),
                          "complier")
    assert est.ci_lo < est.estimate < est.ci_hi
    assert est.to_dict()["weights"] == "influence_function"


@pytest.mark.parametrize("name", sorted(KERNELS))
def test_kernels_integrate_to_one(name):
    assert integrate.quad(KERNELS[name], -10, 10, points=[-1, 1])[0] == pytest.approx(1.0)


@pytest.mark.parametrize("c1,c2,t_range,de_range", [
    (0.3, 0.5, (0.0, 0.3), (0.0, 0.3)),
    (0.7, 0.6, (0.3, 0.6), (0.1, 0.4)),
    (0.0, 0.4, (0.0, 0.0), (0.0, 0.0)),
    (0.0, 1.0, (0.0, 0.0), (0.0, 0.0)),
])
def test_defier_bounds_hand_computed(c1, c2, t_range, de_range):
    b = defier_bounds(c1, c2)
    assert b.t_range == pytest.approx(t_range, abs=1e-15)
    assert b.defier_range == pytest.approx(de_range, abs=1e-15)


def test_defier_bounds_validation():
    with pytest.raises(ValidationError):
        defier_bounds(1.2, 0.3)
    with pytest.raises(ValidationError):
        defier_bounds(0.2, 0.3).at(0.5)


@settings(max_examples=200, deadline=None)
@given(c1=st.floats(0, 1), c2=st.floats(0, 1))
def test_defier_bounds_property(c1, c2):
    b = defier_bounds(c1, c2)
    lo, hi = b.t_range
    assert lo <= hi
    for rng in (b.t_range, b.defier_range, b.complier_range, b.never_range):
        assert -1e-12 <= rng[0] <= rng[1] <= 1 + 1e-12
    for t in (lo, hi, 0.5 * (lo + hi)):
        shares = b.at(t)
        assert abs(sum(shares.values()) - 1.0) <= 1e-12
        assert all(-1e-12 <= v <= 1 + 1e-12 for v in shares.values())
