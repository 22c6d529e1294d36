import numpy as np
import pytest

from mlsae.errors import ConfigError, EvaluationError, ShapeError
from mlsae.frame import ALL_DOMAINS
from mlsae.gbt import GbHyperparams
from mlsae.lmm import fit_reml
from mlsae.predictor import (
    FITTED,
    OBSERVED,
    ModelSetup,
    PlugInProblem,
    ThetaSpec,
    characteristic,
    compose_population,
    fit_models,
    lower_quantile,
    plug_in_predict,
)

from conftest import make_frame, panel


def test_characteristic_conventions():
    mask = np.arange(3)
    assert characteristic(ThetaSpec("mean"), np.array([1.0, 2, 3]), mask) == 2
    assert characteristic(ThetaSpec("total"), np.array([1.0, 2, 3]), mask) == 6
    assert characteristic(ThetaSpec("median"), np.array([1.0, 2, 3, 4]), np.arange(4)) == 2
    assert characteristic(ThetaSpec("quantile", p=0.75), np.array([4.0, 1, 3, 2]), np.arange(4)) == 3
    with pytest.raises(EvaluationError):
        characteristic(ThetaSpec("mean"), np.array([1.0]), np.array([], dtype=int))


def test_quantile_rank_guard():
    # 0.7 * 10 = 7.000000000000001 in floating point; the rank must still be 7
    assert lower_quantile(np.arange(1.0, 11.0), 0.7) == 7.0


def test_theta_spec_validation():
    with pytest.raises(ConfigError):
        ThetaSpec("quantile")
    with pytest.raises(ConfigError):
        ThetaSpec("mean", p=0.5)
    with pytest.raises(ConfigError):
        ThetaSpec("mode")
    t = ThetaSpec("quantile", "D1", 2, 0.9)
    assert ThetaSpec.from_dict(t.to_dict()) == t
    assert t.label == "q0.9[D1@2]"


def test_compose_layout():
    f = make_frame(["a"] * 4, list("1234"), [1] * 4, np.ones((4, 1)), [10.0, np.nan, 30.0, np.nan])
    c = compose_population(f, [20.0, 40.0])
    assert c.values.tolist() == [10.0, 20.0, 30.0, 40.0]
    assert c.source.tolist() == [OBSERVED, FITTED, OBSERVED, FITTED]
    with pytest.raises(ShapeError):
        compose_population(f, [1.0])


def test_compose_fully_sampled_and_unsampled():
    f = make_frame(["a"] * 3, list("123"), [1] * 3, np.ones((3, 1)), [1.0, 2.0, 3.0])
    c = compose_population(f, [])
    assert c.values.tolist() == [1.0, 2.0, 3.0] and (c.source == OBSERVED).all()
    g = make_frame(["a"] * 3, list("123"), [1] * 3, np.ones((3, 1)))
    assert (compose_population(g, [4.0, 5.0, 6.0]).source == FITTED).all()


def small_problem(rng):
    sampled = {(0, 0), (0, 1), (1, 0), (1, 1), (2, 2), (2, 0)}
    f = panel(4, 3, 2, rng, p=2, beta=[2.0, 1.0], sd_u=0.5, sampled=sampled)
    setup = ModelSetup(gb_params=GbHyperparams(n_rounds=20, min_leaf=1))
    return f, setup


def test_fully_sampled_cell_equals_sample_statistic(rng):
    f = panel(3, 4, 2, rng, p=1)
    flags = (f.domain == "d0") | (f.period == 1) | (f.unit == "u0")
    f = f.with_sample(flags)
    setup = ModelSetup(gb_params=GbHyperparams(n_rounds=5, min_leaf=1))
    models = fit_models(f, setup, ["lmm", "gb"], 0)
    for stat in ("mean", "median", "total"):
        spec = ThetaSpec(stat, "d0", 2)
        direct = characteristic(spec, f.y, np.flatnonzero((f.domain == "d0") & (f.period == 2)))
        for kind in ("lmm", "gb"):
            assert plug_in_predict(kind, f, spec, models[kind], setup) == direct


def test_lmm_mean_dense_oracle(rng):
    f, setup = small_problem(rng)
    fit = fit_reml(f)
    spec = ThetaSpec("mean", "d1", 2)
    z = np.zeros((f.N_L, f.n_domains))
    z[np.arange(f.N_L), f.domain_codes] = 1
    v = np.array([fit.v_hat.get(d, 0.0) for d in f.domains])
    full = np.where(f.in_sample, f.y, f.x @ fit.beta + z @ v)
    m = (f.domain == "d1") & (f.period == 2)
    assert plug_in_predict("lmm", f, spec, fit, setup) == pytest.approx(full[m].mean(), abs=1e-12)


def test_unsampled_domain_uses_fixed_part(rng):
    f, setup = small_problem(rng)
    fit = fit_reml(f)
    m = (f.domain == "d3") & (f.period == 1)
    assert not f.in_sample[m].any()
    assert plug_in_predict("lmm", f, ThetaSpec("mean", "d3", 1), fit, setup) == pytest.approx((f.x[m] @ fit.beta).mean(), abs=1e-12)


def test_problem_matches_single_predictions(rng):
    f, setup = small_problem(rng)
    thetas = [ThetaSpec("mean", "d0", 2), ThetaSpec("median", ALL_DOMAINS, 1), ThetaSpec("quantile", "d2", 2, 0.8)]
    problem = PlugInProblem(f, setup, ["lmm", "gb"], thetas)
    y = np.where(f.in_sample, f.y, np.nan)
    seed = 5
    out = problem.predict(np.nan_to_num(y), seed)
    lmm_fit = fit_reml(f)
    for j, t in enumerate(thetas):
        assert out["lmm"][j] == pytest.approx(plug_in_predict("lmm", f, t, lmm_fit, setup), abs=1e-9)
    # GB through the problem uses the fit seed directly
    from mlsae.gbt import fit_gb
    from mlsae.predictor import gb_features

    feats, names = gb_features(f, setup)
    s = f.sample_index
    model = fit_gb(feats[s], f.y[s], setup.gb_params, seed, names)
    for j, t in enumerate(thetas):
        assert out["gb"][j] == pytest.approx(plug_in_predict("gb", f, t, model, setup), abs=1e-12)


def test_shift_consistency(rng):
    f, setup = small_problem(rng)
    problem = PlugInProblem(f, setup, ["lmm"], [ThetaSpec("mean", "d0", 1), ThetaSpec("median", "d0", 1), ThetaSpec("total", "d0", 1)])
    values = rng.normal(size=f.N_L)
    base = problem.evaluate(values)
    shifted = problem.evaluate(values + 2.5)
    n = len(problem.masks[2])
    np.testing.assert_allclose(shifted - base, [2.5, 2.5, 2.5 * n], atol=1e-12)


def test_gb_features_layout(rng):
    from mlsae.predictor import gb_features

    f = panel(3, 2, 2, rng, p=2)
    feats, names = gb_features(f, ModelSetup(gb_domain_onehot=True))
    assert names == ("x1", "x2", "period", "domain=d0", "domain=d1", "domain=d2")
    assert feats.shape == (f.N_L, 6)
    assert (feats[:, 3:].sum(axis=1) == 1).all()
