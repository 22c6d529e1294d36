"""Bootstrap prediction errors and RMSE / QAPE estimators.

Bootstrap populations are always generated from the random-intercept model
fitted to the original sample, whatever predictor is being assessed; every
predictor is refitted on the same generated sample within an iteration.

Random streams:
    first level (parametric and double)  seed / "param" / b [/ "retry" / a]
    second level                         ... / "level2" / c [/ "retry" / a]
    residual bootstrap                   seed / "rb" or "rbCor" / b [/ "retry" / a]
The double bootstrap's first level therefore reproduces the parametric
bootstrap errors exactly for the same seed.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, FitError, IterationFailure, SaeError, ShapeError
from .lmm import LmmFit, LmmParams, draw_response, effect_vector
from .parallel import pmap
from .predictor import PlugInProblem, lower_quantile
from .rng import child_seed, stream

MAX_RETRIES = 20
DEFAULT_Q = 0.77

RMSE_ESTIMATORS = ("param", "rb", "rbCor", "dbC", "db1", "dbTel", "db1HM", "db1EF", "dbTelEF")
QAPE_ESTIMATORS = ("param", "rb", "rbCor", "dbC", "db1", "dbTel")
DOUBLE_ESTIMATORS = ("dbC", "db1", "dbTel", "db1HM", "db1EF", "dbTelEF")


@dataclass(frozen=True, eq=False)
class ErrorSample:
    """First-level errors u*(b) and optional second-level errors u**(b, c).

    ``first_level`` has B entries, or B + 1 for the telescoping estimator;
    ``second_level`` is a (B, C) matrix when C >= 1.
    """

    first_level: np.ndarray
    second_level: Optional[np.ndarray] = None
    B: int = 0
    C: int = 0
    failures: int = 0
    correction_skipped: tuple = ()

    def __post_init__(self):
        u = np.asarray(self.first_level, dtype=float).ravel()
        B = self.B or (len(u) if self.second_level is None else len(self.second_level))
        if len(u) not in (B, B + 1):
            raise ShapeError(f"first level has {len(u)} errors for B={B}")
        uu = None
        if self.second_level is not None:
            uu = np.asarray(self.second_level, dtype=float)
            if uu.ndim == 1:
                uu = uu[:, None]
            if uu.shape[0] != B or uu.shape[1] < 1:
                raise ShapeError(f"second level has shape {uu.shape}, expected ({B}, C>=1)")
        C = 0 if uu is None else uu.shape[1]
        if self.C and self.C != C:
            raise ShapeError(f"C={self.C} does not match second level with {C} columns")
        object.__setattr__(self, "first_level", u)
        object.__setattr__(self, "second_level", uu)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "C", C)

    @property
    def u(self) -> np.ndarray:
        """The B first-level errors used by every non-telescoping estimator."""
        return self.first_level[: self.B]

    @property
    def telescoping(self) -> bool:
        return len(self.first_level) == self.B + 1


# -- estimators ---------------------------------------------------------------


def _mean(values) -> float:
    values = np.asarray(values, dtype=float).ravel()
    return math.fsum(values) / values.size


def rmse_estimate(errors) -> float:
    errors = np.asarray(errors, dtype=float)
    if errors.size == 0:
        raise ValueError("no bootstrap errors")
    return math.sqrt(_mean(errors**2))


def qape_estimate(errors, p: float) -> float:
    return lower_quantile(np.abs(np.asarray(errors, dtype=float)), p)


def mse_param(sample: ErrorSample) -> float:
    return _mean(sample.u**2)


def _second(sample: ErrorSample) -> np.ndarray:
    if sample.second_level is None:
        raise ShapeError("estimator needs second-level errors (C >= 1)")
    return sample.second_level


def _second_c1(sample: ErrorSample) -> np.ndarray:
    uu = _second(sample)
    if uu.shape[1] != 1:
        raise ShapeError(f"estimator is defined for C = 1, got C = {uu.shape[1]}")
    return uu[:, 0]


def mse_db_2lev(sample: ErrorSample) -> float:
    return _mean(_second(sample) ** 2)


def corrected_squares(sample: ErrorSample, variant: str) -> np.ndarray:
    """Bias-corrected squared errors per first-level iteration.

    dbC:   2 u*(b)^2 - mean_c u**(b, c)^2
    db1:   2 u*(b)^2 - u**(b, 1)^2
    dbTel: u*(b)^2 + u*(b+1)^2 - u**(b, 1)^2
    """
    u2 = sample.u**2
    if variant == "dbC":
        return 2.0 * u2 - (_second(sample) ** 2).mean(axis=1)
    if variant == "db1":
        return 2.0 * u2 - _second_c1(sample) ** 2
    if variant == "dbTel":
        if not sample.telescoping:
            raise ShapeError(f"telescoping needs B + 1 = {sample.B + 1} first-level errors, got {len(sample.first_level)}")
        return u2 + sample.first_level[1:] ** 2 - _second_c1(sample) ** 2
    raise ShapeError(f"unknown double-bootstrap variant {variant!r}")


def mse_db_c(sample: ErrorSample) -> float:
    """Classic double-bootstrap MSE; may be negative."""
    return _mean(corrected_squares(sample, "dbC"))


def mse_db1(sample: ErrorSample) -> float:
    return _mean(corrected_squares(sample, "db1"))


def mse_db_tel(sample: ErrorSample) -> float:
    return _mean(corrected_squares(sample, "dbTel"))


def mse_db_chm(sample: ErrorSample) -> float:
    """Non-negative modification: exponential shrinkage when the correction overshoots."""
    m1 = mse_param(sample)
    m2 = mse_db_2lev(sample)
    if m1 >= m2 or m2 == 0:
        return 2.0 * m1 - m2
    return m1 * math.exp((m1 - m2) / m2)


def _ef_gate(sample: ErrorSample, q: float):
    if not 0 < q <= 1:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    m1 = mse_param(sample)
    if m1 == 0:
        return m1, None
    return m1, _mean(_second_c1(sample) ** 2) / m1 < q


def mse_db1_ef(sample: ErrorSample, q: float = DEFAULT_Q) -> float:
    m1, gated = _ef_gate(sample, q)
    if gated is None:
        return 0.0
    return q * m1 if gated else mse_db1(sample)


def mse_db_tel_ef(sample: ErrorSample, q: float = DEFAULT_Q) -> float:
    m1, gated = _ef_gate(sample, q)
    if gated is None:
        return 0.0
    return m1 if gated else mse_db_tel(sample)


def modified_db_errors(sample: ErrorSample, variant: str) -> np.ndarray:
    """sqrt of the corrected square where it is >= 0, else the first-level error."""
    sq = corrected_squares(sample, variant)
    return np.where(sq >= 0, np.sqrt(np.maximum(sq, 0.0)), sample.u)


def qape_db(sample: ErrorSample, p: float, variant: str) -> float:
    return qape_estimate(modified_db_errors(sample, variant), p)


def mse_for(estimator: str, sample: ErrorSample, q: float = DEFAULT_Q) -> float:
    if estimator in ("param", "rb", "rbCor"):
        return mse_param(sample)
    return {
        "dbC": mse_db_c,
        "db1": mse_db1,
        "dbTel": mse_db_tel,
        "db1HM": mse_db_chm,
        "db1EF": lambda s: mse_db1_ef(s, q),
        "dbTelEF": lambda s: mse_db_tel_ef(s, q),
    }[estimator](sample)


def qape_for(estimator: str, sample: ErrorSample, p: float) -> float:
    if estimator in ("param", "rb", "rbCor"):
        return qape_estimate(sample.u, p)
    return qape_db(sample, p, estimator)


# -- bootstrap generation ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _BootCtx:
    problem: PlugInProblem
    params: LmmParams
    mode: str  # "param", "rb" or "rbCor"
    seed: int
    C: int = 0
    need_lmm: bool = True
    v_pool: Optional[np.ndarray] = None
    e_pool: Optional[np.ndarray] = None


def _retry_stream(seed, keys, attempt):
    return stream(seed, *keys) if attempt == 0 else stream(seed, *keys, "retry", attempt)


def _generate(ctx: _BootCtx, rng) -> np.ndarray:
    pr = ctx.problem
    mean = pr.model_mean(ctx.params)
    if ctx.mode == "param":
        return draw_response(mean, pr.codes, pr.n_domains, ctx.params.sigma2_u, ctx.params.sigma2_e, rng)
    v = ctx.v_pool[rng.integers(len(ctx.v_pool), size=pr.n_domains)]
    e = ctx.e_pool[rng.integers(len(ctx.e_pool), size=len(mean))]
    return mean + v[pr.codes] + e


def _errors_once(problem: PlugInProblem, y: np.ndarray, seed_keys, need_lmm: bool):
    """(errors per kind, refitted LMM state) for one generated population."""
    theta = problem.evaluate(y)
    state = problem.fit_lmm(y) if need_lmm else None
    preds = problem.predict(y, child_seed(*seed_keys, "gb"), state)
    return {k: preds[k] - theta for k in problem.kinds}, state


def _replicate(ctx: _BootCtx, b: int):
    """One first-level iteration (plus C second-level ones when ctx.C > 0)."""
    failures = 0
    keys = (ctx.mode, b)
    for attempt in range(MAX_RETRIES):
        rng = _retry_stream(ctx.seed, keys, attempt)
        try:
            y = _generate(ctx, rng)
            u, state = _errors_once(ctx.problem, y, (ctx.seed, *keys, attempt), ctx.need_lmm or ctx.C > 0)
        except (SaeError, np.linalg.LinAlgError):
            failures += 1
            continue
        uu = []
        for c in range(ctx.C):
            u2, f2 = _second_level(ctx, state.params, (*keys, attempt, "level2", c))
            uu.append(u2)
            failures += f2
        return u, uu, failures
    raise IterationFailure(f"bootstrap iteration {b} failed {MAX_RETRIES} times")


def _second_level(ctx: _BootCtx, params: LmmParams, keys):
    pr = ctx.problem
    mean = pr.model_mean(params)
    for attempt in range(MAX_RETRIES):
        rng = _retry_stream(ctx.seed, keys, attempt)
        y = draw_response(mean, pr.codes, pr.n_domains, params.sigma2_u, params.sigma2_e, rng)
        try:
            u, _ = _errors_once(pr, y, (ctx.seed, *keys, attempt), ctx.need_lmm)
        except (SaeError, np.linalg.LinAlgError):
            continue
        return u, attempt
    raise IterationFailure(f"second-level iteration {keys} failed {MAX_RETRIES} times")


def _collect(problem: PlugInProblem, results, B: int, C: int, n_first: int) -> dict:
    failures = sum(r[2] for r in results)
    out = {}
    for kind in problem.kinds:
        first = np.array([r[0][kind] for r in results])  # (n_first, n_theta)
        second = None
        if C > 0:
            second = np.array([[c[kind] for c in r[1]] for r in results[:B]])  # (B, C, n_theta)
        for j, label in enumerate(problem.labels):
            out[(kind, label)] = ErrorSample(
                first_level=first[:, j],
                second_level=None if second is None else second[:, :, j],
                B=B,
                C=C,
                failures=failures,
            )
    return out


def _check_fit(fit: LmmFit, problem: PlugInProblem, B: int):
    if B < 2:
        raise ConfigError(f"B must be >= 2, got {B}")
    if not fit.converged:
        raise FitError("bootstrap requires a converged LMM fit")
    if len(fit.beta) != problem.x_lmm.shape[1]:
        raise ShapeError(f"fit has {len(fit.beta)} coefficients, problem design has {problem.x_lmm.shape[1]} columns")


def parametric_bootstrap(fit: LmmFit, problem: PlugInProblem, B: int, seed: int, threads: int = 1) -> dict:
    """Parametric bootstrap errors, keyed by (predictor kind, theta label)."""
    _check_fit(fit, problem, B)
    ctx = _BootCtx(problem, fit.params, "param", seed, need_lmm="lmm" in problem.kinds)
    return _collect(problem, pmap(_replicate, ctx, range(B), threads), B, 0, B)


def residual_pools(fit: LmmFit, problem: PlugInProblem, corrected: bool):
    """Pools of predicted domain effects and level-1 residuals.

    With ``corrected`` each pool is centred and rescaled so that its
    divisor-n variance equals the REML variance component. Returns
    ``(v_pool, e_pool, flags)``; ``flags`` names pools whose correction was
    skipped because they had zero spread.
    """
    frame = problem.frame
    v_all = effect_vector(fit, frame)
    sampled = np.unique(problem.codes_s)
    if len(sampled) < 2:
        raise ConfigError("residual bootstrap needs at least 2 domains with predicted effects")
    v_pool = v_all[sampled].copy()
    y_s = frame.y[problem.s]
    e_pool = y_s - problem.x_lmm_s @ fit.beta - v_all[problem.codes_s]
    flags = []
    if corrected:
        for name, pool, target in (("v", v_pool, fit.sigma2_u), ("e", e_pool, fit.sigma2_e)):
            sd = pool.std()
            if sd <= 0:
                flags.append(name)
                if target > 0:
                    warnings.warn(f"residual bootstrap: {name} pool has zero spread, correction skipped", RuntimeWarning)
                continue
            pool -= pool.mean()
            pool *= math.sqrt(target) / sd
    return v_pool, e_pool, flags


def residual_bootstrap(fit: LmmFit, problem: PlugInProblem, B: int, seed: int, corrected: bool, threads: int = 1) -> dict:
    _check_fit(fit, problem, B)
    v_pool, e_pool, flags = residual_pools(fit, problem, corrected)
    mode = "rbCor" if corrected else "rb"
    ctx = _BootCtx(problem, fit.params, mode, seed, need_lmm="lmm" in problem.kinds, v_pool=v_pool, e_pool=e_pool)
    out = _collect(problem, pmap(_replicate, ctx, range(B), threads), B, 0, B)
    if flags:
        out = {k: replace(s, correction_skipped=tuple(flags)) for k, s in out.items()}
    return out


def double_bootstrap(
    fit: LmmFit, problem: PlugInProblem, B: int, C: int, seed: int, telescoping: bool = False, threads: int = 1
) -> dict:
    """Two-level parametric bootstrap.

    Second-level populations for iteration b are generated from the REML
    fit to the b-th first-level sample. With ``telescoping`` one extra
    first-level iteration is run (no second level for it).
    """
    _check_fit(fit, problem, B)
    if C < 1:
        raise ConfigError(f"C must be >= 1, got {C}")
    ctx = _BootCtx(problem, fit.params, "param", seed, C=C, need_lmm="lmm" in problem.kinds)
    n_first = B + 1 if telescoping else B
    results = pmap(_replicate, ctx, range(B), threads)
    if telescoping:
        extra = _BootCtx(problem, fit.params, "param", seed, need_lmm="lmm" in problem.kinds)
        results.append(_replicate(extra, B))
    return _collect(problem, results, B, C, n_first)


# -- report -----------------------------------------------------------------------


@dataclass
class AccuracyReport:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    CSV_COLUMNS = ("predictor", "theta", "estimator", "measure", "p", "value", "B", "C", "seed")

    def value(self, predictor, theta, estimator, measure, p=None) -> float:
        for r in self.rows:
            if (r["predictor"], r["theta"], r["estimator"], r["measure"], r["p"]) == (predictor, theta, estimator, measure, p):
                return r["value"]
        raise KeyError((predictor, theta, estimator, measure, p))

    def to_json(self) -> str:
        return json.dumps({"metadata": self.metadata, "estimates": self.rows}, indent=2, sort_keys=True) + "\n"

    def to_csv(self, header_comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.CSV_COLUMNS)
        for r in self.rows:
            w.writerow(
                [
                    r["predictor"],
                    r["theta"],
                    r["estimator"],
                    r["measure"],
                    "" if r["p"] is None else repr(r["p"]),
                    repr(r["value"]),
                    self.metadata.get("B"),
                    self.metadata.get("C"),
                    self.metadata.get("seed"),
                ]
            )
        return buf.getvalue()


def run_bootstraps(
    fit: LmmFit, problem: PlugInProblem, estimators: Sequence[str], B: int, C: int, seed: int, threads: int = 1
) -> dict:
    """Run every bootstrap the estimators need; returns {"param"|"rb"|"rbCor"|"double": samples}."""
    unknown = set(estimators) - set(RMSE_ESTIMATORS)
    if unknown:
        raise ConfigError(f"unknown estimator(s): {', '.join(sorted(unknown))}")
    needs_double = [e for e in estimators if e in DOUBLE_ESTIMATORS]
    if needs_double and C < 1:
        raise ConfigError("double-bootstrap estimators need C >= 1")
    if C != 1 and any(e in ("db1", "dbTel", "db1EF", "dbTelEF") for e in estimators):
        raise ConfigError("db1, dbTel, db1EF and dbTelEF are defined for C = 1")
    runs = {}
    if needs_double:
        tel = any(e in ("dbTel", "dbTelEF") for e in estimators)
        runs["double"] = double_bootstrap(fit, problem, B, C, seed, telescoping=tel, threads=threads)
    if "param" in estimators:
        if "double" in runs:
            # the double bootstrap's first level is the parametric bootstrap
            runs["param"] = {k: ErrorSample(s.u, B=B) for k, s in runs["double"].items()}
        else:
            runs["param"] = parametric_bootstrap(fit, problem, B, seed, threads)
    if "rb" in estimators:
        runs["rb"] = residual_bootstrap(fit, problem, B, seed, corrected=False, threads=threads)
    if "rbCor" in estimators:
        runs["rbCor"] = residual_bootstrap(fit, problem, B, seed, corrected=True, threads=threads)
    return runs


def estimates_from_runs(runs: dict, estimators: Sequence[str], qape_orders: Sequence[float], q: float = DEFAULT_Q) -> list:
    """Flat estimate rows from bootstrap runs (RMSE = sqrt of MSE truncated at 0)."""
    rows = []
    keys = next(iter(runs.values())).keys() if runs else []
    for key in keys:
        kind, label = key
        for est in estimators:
            sample = runs["double" if est in DOUBLE_ESTIMATORS else est][key]
            mse = mse_for(est, sample, q)
            rows.append(
                {
                    "predictor": kind,
                    "theta": label,
                    "estimator": est,
                    "measure": "RMSE",
                    "p": None,
                    "value": math.sqrt(max(mse, 0.0)),
                    "mse": mse,
                    "negative_mse": mse < 0,
                }
            )
            if est in QAPE_ESTIMATORS:
                for p in qape_orders:
                    rows.append(
                        {
                            "predictor": kind,
                            "theta": label,
                            "estimator": est,
                            "measure": "QAPE",
                            "p": float(p),
                            "value": qape_for(est, sample, p),
                        }
                    )
    return rows


def accuracy_report(
    fit: LmmFit,
    problem: PlugInProblem,
    estimators: Sequence[str],
    B: int,
    C: int,
    qape_orders: Sequence[float],
    seed: int,
    q: float = DEFAULT_Q,
    threads: int = 1,
) -> AccuracyReport:
    runs = run_bootstraps(fit, problem, estimators, B, C, seed, threads)
    rows = estimates_from_runs(runs, estimators, qape_orders, q)
    first = {name: next(iter(s.values())) for name, s in runs.items()}
    meta = {
        "B": B,
        "C": C,
        "seed": seed,
        "q": q,
        "estimators": list(estimators),
        "qape_orders": [float(p) for p in qape_orders],
        "failed_iterations": {name: s.failures for name, s in first.items()},
        "correction_skipped": {name: list(s.correction_skipped) for name, s in first.items() if s.correction_skipped},
    }
    return AccuracyReport(rows, meta)
