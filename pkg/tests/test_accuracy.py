import json
import math

import numpy as np
import pytest

from mlsae import accuracy as acc
from mlsae.accuracy import ErrorSample
from mlsae.errors import ConfigError, ShapeError
from mlsae.gbt import GbHyperparams
from mlsae.lmm import LmmFit, fit_reml
from mlsae.predictor import ModelSetup, PlugInProblem, ThetaSpec
from mlsae.simulation import synthetic_frame

from conftest import panel
from oracles import lower_order_stat

# -- single-level estimators ---------------------------------------------------------


def test_rmse_estimate_examples():
    assert acc.rmse_estimate([0.0, 0.0]) == 0
    assert acc.rmse_estimate([3.0, 4.0]) == pytest.approx(math.sqrt(12.5), abs=1e-15)
    assert acc.rmse_estimate([-2.0, 2.0]) == 2


def test_qape_estimate_examples():
    assert acc.qape_estimate([-1.0, 2, -3, 4], 0.5) == 2
    assert acc.qape_estimate([-1.0, 2, -3, 4], 0.99) == 4
    assert acc.qape_estimate([0.0, 0, 0], 0.75) == 0


# -- double-bootstrap estimators ---------------------------------------------------------


def test_mse_db_c_examples():
    s = ErrorSample([1.0, 2.0], [[0.5], [1.0]])
    assert acc.mse_db_c(s) == pytest.approx(4.375, abs=1e-12)
    zero = ErrorSample([1.0, 2.0], [[0.0], [0.0]])
    assert acc.mse_db_c(zero) == pytest.approx(2 * acc.mse_param(zero), abs=1e-12)
    cancel = ErrorSample([1.0, 2.0], [[math.sqrt(2)], [math.sqrt(8)]])
    assert acc.mse_db_c(cancel) == pytest.approx(0.0, abs=1e-12)


def test_db_c_with_c1_equals_db1():
    rng = np.random.default_rng(0)
    for _ in range(20):
        B = int(rng.integers(2, 30))
        s = ErrorSample(rng.normal(size=B), rng.normal(size=(B, 1)))
        assert acc.mse_db_c(s) == acc.mse_db1(s)


def test_db_c_general_c_matches_two_level_form():
    rng = np.random.default_rng(1)
    s = ErrorSample(rng.normal(size=6), rng.normal(size=(6, 3)))
    assert acc.mse_db_c(s) == pytest.approx(2 * acc.mse_param(s) - acc.mse_db_2lev(s), abs=1e-12)


def test_telescoping_and_db1_examples():
    tel = ErrorSample([1.0, 1.0, 1.0], [[1.0], [1.0]], B=2)
    assert tel.telescoping and acc.mse_db_tel(tel) == 1.0
    s = ErrorSample([1.0, -3.0], [[0.0], [0.0]])
    assert acc.mse_db1(s) == pytest.approx(2 * acc.mse_param(s), abs=1e-12)
    neg = ErrorSample([1.0], [[2.0]])
    assert acc.mse_db1(neg) == -2.0
    with pytest.raises(ShapeError):
        acc.mse_db_tel(ErrorSample([1.0, 1.0], [[1.0], [1.0]]))


def test_chm_branches():
    # MSE_param = 2, MSE_db-2lev = 1 -> 2*2 - 1
    a = ErrorSample([math.sqrt(2)] * 2, [[1.0], [1.0]])
    assert acc.mse_db_chm(a) == pytest.approx(3.0, abs=1e-12)
    # MSE_param = 1, MSE_db-2lev = 2 -> exp(-0.5)
    b = ErrorSample([1.0, -1.0], [[math.sqrt(2)], [math.sqrt(2)]])
    assert acc.mse_db_chm(b) == pytest.approx(math.exp(-0.5), abs=1e-12)
    c = ErrorSample([1.5, 1.5], [[1.5], [-1.5]])
    assert acc.mse_db_chm(c) == pytest.approx(2.25, abs=1e-12)
    assert acc.mse_db_chm(ErrorSample([0.0, 0.0], [[0.0], [0.0]])) == 0.0


def test_ef_gates_at_q_077():
    q = 0.77
    gated = ErrorSample([1.0, -1.0], [[math.sqrt(0.5)], [math.sqrt(0.5)]])  # MSE_param 1, mean u**^2 0.5
    assert acc.mse_db1_ef(gated, q) == pytest.approx(0.77, abs=1e-12)
    tel_gated = ErrorSample([1.0, -1.0, 3.0], [[math.sqrt(0.5)], [math.sqrt(0.5)]], B=2)
    assert acc.mse_db_tel_ef(tel_gated, q) == pytest.approx(1.0, abs=1e-12)
    open_ = ErrorSample([1.0, -1.0, 2.0], [[1.0], [1.0]], B=2)  # ratio 1.0, no gate
    assert acc.mse_db1_ef(open_, q) == acc.mse_db1(open_)
    assert acc.mse_db_tel_ef(open_, q) == acc.mse_db_tel(open_)
    assert acc.mse_db_tel(open_) == pytest.approx((1 + 1 - 1 + 1 + 4 - 1) / 2, abs=1e-12)
    assert acc.mse_db1_ef(ErrorSample([0.0, 0.0], [[1.0], [1.0]]), q) == 0.0


def test_modified_errors_fallback_and_boundary():
    s = ErrorSample([1.0], [[math.sqrt(3)]])
    assert acc.modified_db_errors(s, "db1")[0] == pytest.approx(1.0, abs=1e-12)  # 2 - 3 < 0
    z = ErrorSample([2.0, -1.0], [[0.0], [0.0]])
    np.testing.assert_allclose(acc.modified_db_errors(z, "db1"), [2 * math.sqrt(2), math.sqrt(2)], atol=1e-12)
    b = ErrorSample([1.0, 0.0], [[1.0]], B=1)  # 1 + 0 - 1 = 0 exactly
    assert acc.modified_db_errors(b, "dbTel")[0] == 0.0
    with pytest.raises(ShapeError):
        acc.modified_db_errors(s, "dbX")


def test_qape_db_enumeration():
    u = np.array([1.0, -2.0, 0.5, 3.0])
    uu = np.array([[1.0], [3.0], [0.0], [2.0]])
    s = ErrorSample(u, uu)
    # corrected squares: 2-1=1, 8-9=-1 (fallback |-2|), 0.5-0=0.5, 18-4=14
    mods = [1.0, 2.0, math.sqrt(0.5), math.sqrt(14)]
    for p in (0.25, 0.5, 0.75, 0.99):
        assert acc.qape_db(s, p, "db1") == pytest.approx(lower_order_stat(mods, p), abs=1e-12)
    const = ErrorSample([1.0, 1.0, 1.0], [[1.0], [1.0], [1.0]])
    assert acc.qape_db(const, 0.3, "db1") == 1.0 and acc.qape_db(const, 0.9, "dbC") == 1.0


def test_qape_db_scaling_with_zero_second_level():
    u = np.array([0.3, -1.2, 2.2, 0.9, -0.1])
    s = ErrorSample(u, np.zeros((5, 1)))
    for p in (0.2, 0.5, 0.99):
        assert acc.qape_db(s, p, "db1") == pytest.approx(math.sqrt(2) * acc.qape_estimate(u, p), abs=1e-12)


def test_error_sample_shapes():
    with pytest.raises(ShapeError):
        ErrorSample([1.0, 2.0, 3.0, 4.0], [[1.0], [1.0]])
    s = ErrorSample([1.0, 2.0, 3.0], None, B=3)
    assert s.C == 0 and s.second_level is None


# -- bootstrap procedures ----------------------------------------------------------------

THETAS = (ThetaSpec("mean", "d0", 2), ThetaSpec("median", "d0", 2))
GB_FAST = GbHyperparams(n_rounds=10, min_leaf=2)


def small_problem(kinds=("lmm", "gb"), seed=3):
    rng = np.random.default_rng(seed)
    sampled = {(d, i) for d in range(4) for i in range(2)}
    f = panel(4, 5, 2, rng, p=2, beta=[2.0, 1.0], sd_u=0.7, sd_e=0.5, sampled=sampled)
    problem = PlugInProblem(f, ModelSetup(gb_params=GB_FAST), kinds, THETAS)
    return f, fit_reml(f), problem


def test_degenerate_variances_give_zero_errors():
    f, fit, problem = small_problem(kinds=("lmm",))
    exact = LmmFit(fit.beta, 0.0, 0.0, {}, 0.0, True)
    out = acc.parametric_bootstrap(exact, problem, 5, 1)
    for s in out.values():
        assert np.max(np.abs(s.first_level)) < 1e-9
    dbl = acc.double_bootstrap(exact, problem, 4, 1, 1)
    for s in dbl.values():
        assert np.max(np.abs(s.first_level)) < 1e-9
        # the first-level refit sits at the residual-variance floor (1e-10), so
        # second-level noise has sd 1e-5 rather than exactly 0
        assert np.max(np.abs(s.second_level)) < 1e-4


def test_bootstrap_determinism_and_thread_invariance():
    f, fit, problem = small_problem()
    a = acc.parametric_bootstrap(fit, problem, 6, 11)
    b = acc.parametric_bootstrap(fit, problem, 6, 11, threads=2)
    for k in a:
        np.testing.assert_array_equal(a[k].first_level, b[k].first_level)
    assert set(a) == {(k, t.label) for k in ("lmm", "gb") for t in THETAS}


def test_double_bootstrap_shapes_and_first_level():
    f, fit, problem = small_problem()
    dbl = acc.double_bootstrap(fit, problem, 5, 1, 2, telescoping=True)
    par = acc.parametric_bootstrap(fit, problem, 5, 2)
    for k, s in dbl.items():
        assert s.second_level.shape == (5, 1)
        assert len(s.first_level) == 6
        np.testing.assert_array_equal(s.u, par[k].first_level)
    plain = acc.double_bootstrap(fit, problem, 4, 2, 2)
    assert all(len(s.first_level) == 4 and s.second_level.shape == (4, 2) for s in plain.values())


def test_corrected_pools_match_reml_variances():
    f, fit, problem = small_problem()
    v, e, flags = acc.residual_pools(fit, problem, corrected=True)
    assert flags == []
    assert abs(v.mean()) < 1e-12 and abs(e.mean()) < 1e-12
    assert v.var() == pytest.approx(fit.sigma2_u, rel=1e-12)
    assert e.var() == pytest.approx(fit.sigma2_e, rel=1e-12)


def test_uncorrected_constant_pool_gives_identical_populations():
    f, fit, problem = small_problem(kinds=("lmm",))
    y = f.x @ fit.beta + 1.0  # every level-1 residual is exactly 1
    g = f.with_response(np.where(f.in_sample, y, np.nan))
    problem = PlugInProblem(g, problem.setup, ("lmm",), THETAS)
    flat = LmmFit(fit.beta, 0.0, 1.0, {}, 0.0, True)
    v, e, _ = acc.residual_pools(flat, problem, corrected=False)
    np.testing.assert_allclose(e, 1.0, atol=1e-12)
    out = acc.residual_bootstrap(flat, problem, 4, 0, corrected=False)
    for s in out.values():
        assert np.ptp(s.first_level) < 1e-9


def test_zero_spread_pool_flags_correction():
    f, fit, problem = small_problem(kinds=("lmm",))
    flat = LmmFit(fit.beta, 0.5, 1.0, {}, 0.0, True)  # no BLUPs -> v pool all zero
    with pytest.warns(RuntimeWarning):
        v, e, flags = acc.residual_pools(flat, problem, corrected=True)
    assert flags == ["v"]
    with pytest.warns(RuntimeWarning):
        out = acc.residual_bootstrap(flat, problem, 2, 0, corrected=True)
    assert all(s.correction_skipped == ("v",) for s in out.values())


def test_bootstrap_preconditions():
    f, fit, problem = small_problem()
    with pytest.raises(ConfigError):
        acc.parametric_bootstrap(fit, problem, 1, 0)
    with pytest.raises(ConfigError):
        acc.double_bootstrap(fit, problem, 3, 0, 0)
    with pytest.raises(ConfigError):
        acc.run_bootstraps(fit, problem, ["nope"], 3, 1, 0)


def desk_problem(kinds=("lmm",)):
    frame = synthetic_frame(seed=4)
    rng = np.random.default_rng(4)
    beta = np.array([0.002, 8.0, 60.0])
    y = frame.x @ beta + 300 * rng.standard_normal(frame.n_domains)[frame.domain_codes] + 250 * rng.standard_normal(frame.N_L)
    flags = np.isin(frame.unit, [f"D{d:02d}U{i:02d}" for d in range(1, 11) for i in range(1, 5)])
    f = frame.with_response(y).with_sample(flags)
    f = f.with_response(np.where(f.in_sample, y, np.nan))
    problem = PlugInProblem(f, ModelSetup(gb_params=GB_FAST), kinds, (ThetaSpec("mean", "D01", 3),))
    return f, fit_reml(f), problem


def test_parametric_errors_centered_for_lmm_mean():
    f, fit, problem = desk_problem()
    u = acc.parametric_bootstrap(fit, problem, 500, 8)[("lmm", "mean[D01@3]")].first_level
    assert abs(u.mean()) < 3 * u.std(ddof=1) / math.sqrt(len(u))


def test_corrected_residual_agrees_with_parametric():
    f, fit, problem = desk_problem()
    key = ("lmm", "mean[D01@3]")
    par = acc.rmse_estimate(acc.parametric_bootstrap(fit, problem, 500, 9)[key].first_level)
    cor = acc.rmse_estimate(acc.residual_bootstrap(fit, problem, 500, 9, corrected=True)[key].first_level)
    assert abs(cor / par - 1) < 0.10


# -- report ---------------------------------------------------------------------------------

ALL8 = ["param", "rb", "rbCor", "db1", "dbTel", "db1HM", "db1EF", "dbTelEF"]


def test_report_contains_every_requested_cell():
    f, fit, problem = small_problem()
    rep = acc.accuracy_report(fit, problem, ALL8, 2, 1, [0.5, 0.99], seed=5)
    for kind in ("lmm", "gb"):
        for t in THETAS:
            for est in ALL8:
                v = rep.value(kind, t.label, est, "RMSE")
                assert math.isfinite(v) and v >= 0
                if est in acc.QAPE_ESTIMATORS:
                    for p in (0.5, 0.99):
                        assert math.isfinite(rep.value(kind, t.label, est, "QAPE", p))
    assert "failed_iterations" in rep.metadata
    doc = json.loads(rep.to_json())
    assert len(doc["estimates"]) == len(rep.rows)
    again = acc.accuracy_report(fit, problem, ALL8, 2, 1, [0.5, 0.99], seed=5)
    assert again.to_json() == rep.to_json() and again.to_csv("x") == rep.to_csv("x")


def test_param_reuses_double_first_level():
    f, fit, problem = small_problem(kinds=("lmm",))
    runs = acc.run_bootstraps(fit, problem, ["param", "db1"], 4, 1, 3)
    alone = acc.parametric_bootstrap(fit, problem, 4, 3)
    for k in alone:
        np.testing.assert_array_equal(runs["param"][k].first_level, alone[k].first_level)
