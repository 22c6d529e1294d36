import math

import numpy as np
import pytest

from mlsae.errors import IdentifiabilityError, ShapeError, SingularityError
from mlsae.lmm import (
    LmmFit,
    LmmParams,
    VAR_FLOOR,
    blup_effects,
    design_matrix,
    fit_reml,
    fitted_unobserved,
    reml_fit_arrays,
    reml_loglik,
    simulate_population,
)

from conftest import make_frame, panel
from oracles import dense_reml_loglik, zoom_grid_reml


def twelve_rows(seed=3):
    rng = np.random.default_rng(seed)
    codes = np.repeat([0, 1, 2], 4)
    x = np.column_stack([np.ones(12), rng.uniform(0, 2, 12)])
    y = x @ [1.0, 0.5] + np.array([-1.2, 0.3, 1.1])[codes] + 0.6 * rng.standard_normal(12)
    return y, x, codes


def test_reml_matches_dense_grid_oracle():
    y, x, codes = twelve_rows()
    beta, s2u, s2e, *_ = reml_fit_arrays(y, x, codes, 3)
    su, se, b_oracle = zoom_grid_reml(y, x, codes, 5.0, 3.0)
    assert su > 0.1  # interior solution, so both components are identified
    assert s2u == pytest.approx(su, abs=1e-4)
    assert s2e == pytest.approx(se, abs=1e-4)
    np.testing.assert_allclose(beta, b_oracle, atol=1e-4)


def test_profiled_loglik_agrees_with_dense_formula():
    y, x, codes = twelve_rows(8)
    for su, se in [(0.0, 1.0), (0.7, 0.3), (2.5, 1.9)]:
        assert reml_loglik(y, x, codes, su, se) == pytest.approx(dense_reml_loglik(y, x, codes, su, se)[0], rel=1e-10)


def test_reml_optimum_dominates_local_grid():
    y, x, codes = twelve_rows(5)
    beta, s2u, s2e, _, ll, converged, _ = reml_fit_arrays(y, x, codes, 3)
    assert converged
    for su in np.geomspace(max(s2u, 1e-3) / 4, max(s2u, 1e-3) * 4, 50):
        for se in np.geomspace(s2e / 4, s2e * 4, 50):
            assert reml_loglik(y, x, codes, su, se) <= ll + 1e-9


def test_exact_linear_data():
    x = np.array([1.0, 2, 3, 4, 5, 6])
    f = make_frame(["a"] * 3 + ["b"] * 3, list("123123"), [1] * 6, x[:, None], 2 * x)
    fit = fit_reml(f)
    assert fit.beta[0] == pytest.approx(2.0, abs=1e-10)
    assert fit.sigma2_e == VAR_FLOOR
    assert fit.sigma2_u == 0.0
    assert all(v == 0.0 for v in fit.v_hat.values())


def test_location_equivariance_with_intercept(rng):
    f = panel(4, 3, 2, rng, p=1)
    a = fit_reml(f, intercept=True)
    b = fit_reml(f.with_response(f.y + 7.5), intercept=True)
    assert b.beta[0] - a.beta[0] == pytest.approx(7.5, abs=1e-6)  # optimiser tolerance
    assert b.beta[1] == pytest.approx(a.beta[1], abs=1e-6)
    assert b.sigma2_u == pytest.approx(a.sigma2_u, rel=1e-6, abs=1e-10)
    assert b.sigma2_e == pytest.approx(a.sigma2_e, rel=1e-6)


def test_ols_at_zero_between_variance():
    # domain means identical by construction: no between-domain variation
    y = np.array([1.0, 3.0, 2.0, 2.0, 3.0, 1.0, 2.0, 2.0])
    x = np.column_stack([np.ones(8), [0.1, 0.5, 0.2, 0.9, 0.5, 0.1, 0.9, 0.2]])
    codes = np.repeat([0, 1], 4)
    beta, s2u, *_ = reml_fit_arrays(y, x, codes, 2)
    assert s2u == 0.0
    np.testing.assert_allclose(beta, np.linalg.lstsq(x, y, rcond=None)[0], atol=1e-12)


def test_fit_preconditions(rng):
    f = panel(1, 5, 1, rng)
    with pytest.raises(IdentifiabilityError):
        fit_reml(f)
    g = panel(3, 3, 1, rng, p=2)
    x = np.column_stack([g.x[:, 0], 2 * g.x[:, 0]])
    collinear = make_frame(g.domain, g.unit, g.period, x, g.y)
    with pytest.raises(SingularityError):
        fit_reml(collinear)


def test_fit_serialization_round_trip(rng):
    fit = fit_reml(panel(3, 4, 2, rng))
    again = LmmFit.from_dict(fit.to_dict())
    assert again.to_dict() == fit.to_dict()


# -- BLUP and fitted values --------------------------------------------------------


def test_blup_balanced_closed_form(rng):
    sampled = {(d, i) for d in range(3) for i in range(2)}
    f = panel(3, 4, 2, rng, sd_u=2.0, sampled=sampled)
    fit = fit_reml(f)
    assert fit.sigma2_u > 0
    v = blup_effects(fit, f)
    s = f.sample_index
    resid = f.y[s] - f.x[s] @ fit.beta
    for d in f.domains:
        m = f.domain[s] == d
        n_d = m.sum()
        expected = n_d * fit.sigma2_u / (n_d * fit.sigma2_u + fit.sigma2_e) * resid[m].mean()
        assert v[d] == pytest.approx(expected, abs=1e-10)
        assert fit.v_hat[d] == pytest.approx(expected, abs=1e-10)


def test_blup_zero_variance_and_unsampled_domain():
    f = make_frame(["a", "a", "b", "b", "c"], list("12121"), [1] * 5, [[1.0], [2], [3], [4], [5]], [1.0, 2.5, 2.0, 4.5, np.nan])
    fit = LmmFit(np.array([1.0]), 0.0, 1.0, {}, 0.0, True)
    v = blup_effects(fit, f)
    assert v == {"a": 0.0, "b": 0.0}
    fit = LmmFit(np.array([1.0]), 1.0, 1.0, {"a": 0.5}, 0.0, True)
    assert fitted_unobserved(fit, f).tolist() == [5.0]  # domain c: x beta only


def test_blup_shrinks_as_residual_variance_grows():
    f = make_frame(["a"] * 3 + ["b"] * 3, list("123123"), [1] * 6, np.ones((6, 1)), [2.0, 3, 4, 0, -1, 1])
    values = [blup_effects(LmmFit(np.array([1.0]), 1.0, s2e, {}, 0.0, True), f)["a"] for s2e in (0.1, 0.5, 1, 2, 5, 20)]
    assert all(a > b > 0 for a, b in zip(values, values[1:]))


def test_fitted_unobserved_additivity():
    f = make_frame(["a", "a"], ["1", "2"], [1, 1], [[2.0], [2.0]], [3.0, np.nan])
    fit = LmmFit(np.array([1.0]), 1.0, 1.0, {"a": 0.5}, 0.0, True)
    assert fitted_unobserved(fit, f).tolist() == [2.5]


def test_fitted_unobserved_dense_oracle(rng):
    sampled = {(0, 0), (0, 1), (1, 0), (1, 2), (2, 1)}
    f = panel(4, 3, 2, rng, p=2, beta=[1.0, -0.5], sampled=sampled)
    fit = fit_reml(f)
    r = f.nonsample_index
    z = np.zeros((f.N_L, f.n_domains))
    z[np.arange(f.N_L), f.domain_codes] = 1
    v = np.array([fit.v_hat.get(d, 0.0) for d in f.domains])
    expected = f.x[r] @ fit.beta + z[r] @ v
    np.testing.assert_allclose(fitted_unobserved(fit, f), expected, atol=1e-12)


def test_fitted_unobserved_shape_error():
    f = make_frame(["a", "a"], ["1", "2"], [1, 1], [[2.0], [2.0]], [3.0, np.nan])
    fit = LmmFit(np.array([1.0, 2.0]), 1.0, 1.0, {}, 0.0, True)
    with pytest.raises(ShapeError):
        fitted_unobserved(fit, f)


# -- simulation from the model -----------------------------------------------------


def test_simulate_degenerate_and_deterministic(rng):
    f = panel(3, 4, 2, rng, p=2)
    mean = design_matrix(f) @ [1.5, -2.0]
    np.testing.assert_array_equal(simulate_population(LmmParams(np.array([1.5, -2.0]), 0.0, 0.0), f, 4), mean)
    p = LmmParams(np.array([1.5, -2.0]), 1.0, 0.5)
    np.testing.assert_array_equal(simulate_population(p, f, 4), simulate_population(p, f, 4))


def test_simulate_domain_effect_structure(rng):
    f = panel(3, 4, 2, rng)
    y = simulate_population(LmmParams(np.array([1.0]), 2.0, 0.0), f, 11)
    dev = y - f.x[:, 0]
    for d in f.domains:
        vals = dev[f.domain == d]
        assert np.ptp(vals) < 1e-12
    assert np.ptp([dev[f.domain == d][0] for d in f.domains]) > 0


def test_simulate_domain_mean_variance():
    rng = np.random.default_rng(1)
    f = panel(2, 5, 1, rng)
    s2u, s2e, K = 1.5, 2.0, 800
    params = LmmParams(np.array([0.0]), s2u, s2e)
    means = np.array([simulate_population(params, f, seed)[f.domain == "d0"].mean() for seed in range(K)])
    target = s2u + s2e / 5
    var = means.var(ddof=1)
    se = target * math.sqrt(2 / (K - 1))
    assert abs(var - target) < 3 * se
