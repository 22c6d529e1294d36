"""Monte Carlo studies of predictors and of bootstrap accuracy estimators.

Four data-generating scenarios share the random-intercept structure and
differ in the fixed part and the noise scale:

    LM      y = b1 x1 + b2 x4 + b3 x7 + u_d + e
    NLMa    y = b1 l1 + b2 l4 + b3 l7 + b4 l1 l4 + b5 l1 l7 + b6 l4 l7 + (v_d + e) / a
            with l = log x and a = 1, 10, 20 for NLM1, NLM10, NLM20.

Generation uses common random numbers: the standard-normal draws depend on
the seed only, so scenarios with the same seed differ exactly by their
fixed part and scale.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import accuracy
from .errors import ConfigError, IterationFailure, SaeError, ScenarioDomainError
from .frame import LongFrame, draw_panel_sample
from .lmm import LmmFit, fit_reml, reml_fit_arrays
from .parallel import pmap
from .predictor import ModelSetup, PlugInProblem, ThetaSpec, lower_quantile
from .rng import child_seed, stream

SCENARIO_SCALE = {"LM": 1, "NLM1": 1, "NLM10": 10, "NLM20": 20}
SCENARIOS = tuple(SCENARIO_SCALE)
DEFAULT_COLUMNS = ("x1", "x4", "x7")
MAX_RETRIES = 20


@dataclass(frozen=True)
class ScenarioSpec:
    kind: str
    beta_pop: tuple
    sigma2_u_pop: float
    sigma2_e_pop: float
    columns: tuple = DEFAULT_COLUMNS

    def __post_init__(self):
        if self.kind not in SCENARIO_SCALE:
            raise ConfigError(f"scenario kind must be one of {SCENARIOS}, got {self.kind!r}")
        expected = 3 if self.kind == "LM" else 6
        beta = tuple(float(b) for b in self.beta_pop)
        if len(beta) != expected:
            raise ConfigError(f"{self.kind} needs {expected} coefficients, got {len(beta)}")
        if self.sigma2_u_pop < 0 or self.sigma2_e_pop < 0:
            raise ConfigError("scenario variances must be non-negative")
        if len(self.columns) != 3:
            raise ConfigError("scenarios use exactly three auxiliary columns")
        object.__setattr__(self, "beta_pop", beta)
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def a(self) -> int:
        return SCENARIO_SCALE[self.kind]

    def with_kind(self, kind: str) -> "ScenarioSpec":
        """Same parameters under another kind of the same mean structure (NLM1 <-> NLM10/20)."""
        return replace(self, kind=kind)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "beta_pop": list(self.beta_pop),
            "sigma2_u_pop": self.sigma2_u_pop,
            "sigma2_e_pop": self.sigma2_e_pop,
            "a": self.a,
            "columns": list(self.columns),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        return cls(d["kind"], tuple(d["beta_pop"]), float(d["sigma2_u_pop"]), float(d["sigma2_e_pop"]), tuple(d.get("columns", DEFAULT_COLUMNS)))


def scenario_design(frame: LongFrame, kind: str, columns: Sequence[str] = DEFAULT_COLUMNS) -> np.ndarray:
    """Fixed-part regressors: raw columns for LM, logs and pairwise log products otherwise."""
    x = frame.columns(columns)
    if kind == "LM":
        return x
    if np.any(x <= 0):
        row, col = np.argwhere(x <= 0)[0]
        raise ScenarioDomainError(
            f"row {row}: {columns[col]}={x[row, col]!r} must be positive for the log-linear scenarios", int(row)
        )
    l1, l4, l7 = np.log(x).T
    return np.column_stack([l1, l4, l7, l1 * l4, l1 * l7, l4 * l7])


def generate_scenario(spec: ScenarioSpec, frame: LongFrame, seed: int) -> np.ndarray:
    mean = scenario_design(frame, spec.kind, spec.columns) @ np.asarray(spec.beta_pop)
    rng = stream(seed, "scenario")
    z_u = rng.standard_normal(frame.n_domains)
    z_e = rng.standard_normal(frame.N_L)
    sd_u = math.sqrt(spec.sigma2_u_pop) / spec.a
    sd_e = math.sqrt(spec.sigma2_e_pop) / spec.a
    return mean + sd_u * z_u[frame.domain_codes] + sd_e * z_e


def calibrate_params(frame: LongFrame, kind: str, columns: Sequence[str] = DEFAULT_COLUMNS) -> ScenarioSpec:
    """REML fit of the scenario's mean structure on the whole population.

    For NLM10/NLM20 the returned variances are those of the NLM1 fit; the
    generator divides the standard deviations by the scale.
    """
    if not np.all(frame.has_y):
        raise ConfigError("calibration needs the response for every population row")
    x = scenario_design(frame, kind, columns)
    beta, s2u, s2e, *_ = reml_fit_arrays(frame.y, x, frame.domain_codes, frame.n_domains)
    return ScenarioSpec(kind, tuple(beta), float(s2u), float(s2e), tuple(columns))


# -- synthetic populations ---------------------------------------------------------

# median, domain log-sd, unit log-sd, period log-sd, log-trend per period
DEFAULT_AUX = {
    "x1": (30000.0, 0.3, 0.7, 0.02, 0.005),
    "x4": (380.0, 0.05, 0.12, 0.01, 0.01),
    "x7": (3.0, 0.2, 0.5, 0.25, 0.05),
}

# Reference population used when no real data are supplied: a price-like
# response roughly proportional to x4 with mild nonlinear effects of x1 and x7.
REFERENCE_SIGMA_U = 300.0
REFERENCE_SIGMA_E = 250.0


def synthetic_frame(
    n_domains: int = 10,
    units_per_domain: int = 20,
    n_periods: int = 3,
    seed: int = 0,
    aux: Optional[dict] = None,
) -> LongFrame:
    """Balanced panel with positive log-normal auxiliaries and no responses.

    Each auxiliary is exp(log median + domain + unit + period noise + trend * t).
    """
    aux = aux or DEFAULT_AUX
    rng = stream(seed, "synthetic_frame")
    n_units = n_domains * units_per_domain
    names = list(aux)
    dom = np.repeat(np.arange(n_domains), units_per_domain)
    logs = np.empty((n_periods, n_units, len(names)))
    for j, name in enumerate(names):
        median, d_sd, u_sd, t_sd, trend = aux[name]
        base = math.log(median) + d_sd * rng.standard_normal(n_domains)[dom] + u_sd * rng.standard_normal(n_units)
        for t in range(n_periods):
            logs[t, :, j] = base + trend * t + t_sd * rng.standard_normal(n_units)
    width = len(str(n_domains))
    uwidth = len(str(units_per_domain))
    domain, unit, period, x = [], [], [], []
    for t in range(n_periods):
        for i in range(n_units):
            d = dom[i]
            domain.append(f"D{d + 1:0{width}d}")
            unit.append(f"D{d + 1:0{width}d}U{i % units_per_domain + 1:0{uwidth}d}")
            period.append(t + 1)
            x.append(np.exp(logs[t, i]))
    return LongFrame(domain, unit, period, np.array(x), np.full(len(domain), np.nan), np.zeros(len(domain), bool), names)


def reference_mean(frame: LongFrame, columns: Sequence[str] = DEFAULT_COLUMNS) -> np.ndarray:
    x = frame.columns(columns)
    if np.any(x <= 0):
        raise ScenarioDomainError("reference population needs positive auxiliaries", int(np.argwhere(x <= 0)[0, 0]))
    c1, c7 = np.log(30000.0), np.log(3.0)
    l1, l7 = np.log(x[:, 0]), np.log(x[:, 2])
    return 10.0 * x[:, 1] * np.exp(0.15 * (l1 - c1) + 0.05 * (l7 - c7) - 0.08 * (l7 - c7) ** 2)


def reference_population(frame: LongFrame, seed: int = 0, columns: Sequence[str] = DEFAULT_COLUMNS) -> LongFrame:
    """Frame with a reference response attached, used as calibration source."""
    rng = stream(seed, "reference")
    y = reference_mean(frame, columns)
    y = y + REFERENCE_SIGMA_U * rng.standard_normal(frame.n_domains)[frame.domain_codes]
    return frame.with_response(y + REFERENCE_SIGMA_E * rng.standard_normal(frame.N_L))


def calibrated_scenarios(population: LongFrame, kinds: Sequence[str] = SCENARIOS, columns=DEFAULT_COLUMNS) -> dict:
    """ScenarioSpec per kind; NLM10/NLM20 reuse the NLM1 calibration."""
    out = {}
    nlm = None
    for kind in kinds:
        if kind == "LM":
            out[kind] = calibrate_params(population, "LM", columns)
        else:
            if nlm is None:
                nlm = calibrate_params(population, "NLM1", columns)
            out[kind] = nlm.with_kind(kind)
    return out


# -- measures -----------------------------------------------------------------


def relative_bias(estimates, targets) -> float:
    """100 * mean(estimate - target) / mean(target)."""
    estimates, targets = np.asarray(estimates, float), np.asarray(targets, float)
    return 100.0 * math.fsum(estimates - targets) / math.fsum(targets)


def relative_rmse(estimates, targets) -> float:
    estimates, targets = np.asarray(estimates, float), np.asarray(targets, float)
    k = len(estimates)
    return 100.0 * math.sqrt(math.fsum((estimates - targets) ** 2) / k) / (math.fsum(targets) / k)


def empirical_rmse(errors) -> float:
    errors = np.asarray(errors, float)
    return math.sqrt(math.fsum(errors**2) / len(errors))


def empirical_qape(errors, p: float) -> float:
    return lower_quantile(np.abs(np.asarray(errors, float)), p)


@dataclass(frozen=True)
class McConfig:
    K: int = 200
    B: int = 200
    C: int = 1
    fraction: float = 0.2
    thetas: tuple = ()
    kinds: tuple = ("lmm", "gb")
    estimators: tuple = ("param", "rb", "rbCor")
    qape_orders: tuple = (0.5, 0.75, 0.99)
    seed: int = 0
    q: float = accuracy.DEFAULT_Q
    threads: int = 1

    def __post_init__(self):
        if self.K < 1 or self.B < 1:
            raise ConfigError("K and B must be >= 1")
        if self.C < 0:
            raise ConfigError("C must be >= 0")
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must lie in (0, 1], got {self.fraction}")
        object.__setattr__(self, "thetas", tuple(self.thetas))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        object.__setattr__(self, "qape_orders", tuple(float(p) for p in self.qape_orders))

    def to_dict(self) -> dict:
        return {
            "K": self.K,
            "B": self.B,
            "C": self.C,
            "fraction": self.fraction,
            "thetas": [t.to_dict() for t in self.thetas],
            "kinds": list(self.kinds),
            "estimators": list(self.estimators),
            "qape_orders": list(self.qape_orders),
            "seed": self.seed,
            "q": self.q,
        }


@dataclass
class MeasureTable:
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    COLUMNS = ("scenario", "study", "predictor", "theta", "estimator", "measure", "p", "value", "K", "B", "C")

    def get(self, **match) -> float:
        hits = [r for r in self.rows if all(r.get(k) == v for k, v in match.items())]
        if len(hits) != 1:
            raise KeyError(f"{len(hits)} rows match {match}")
        return hits[0]["value"]

    def extend(self, other: "MeasureTable"):
        self.rows.extend(other.rows)

    def to_csv(self, header_comment: Optional[str] = None) -> str:
        buf = io.StringIO()
        if header_comment:
            for line in header_comment.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow(["" if r.get(c) is None else (repr(r[c]) if isinstance(r[c], float) else r[c]) for c in self.COLUMNS])
        return buf.getvalue()


def study_sample(config: McConfig, frame: LongFrame) -> LongFrame:
    """The panel sample used throughout a study; drawn once, fixed across iterations."""
    if not np.all(frame.has_y):
        # responses are regenerated every iteration; placeholders let the sampler run
        frame = frame.with_response(np.zeros(frame.N_L))
    return draw_panel_sample(frame, config.fraction, child_seed(config.seed, "sample"))


@dataclass(frozen=True, eq=False)
class _McCtx:
    config: McConfig
    spec: ScenarioSpec
    problem: PlugInProblem
    bootstrap: bool


def _mc_iteration(ctx: _McCtx, k: int):
    cfg = ctx.config
    failures = 0
    for attempt in range(MAX_RETRIES):
        it_seed = child_seed(cfg.seed, "mc", k) if attempt == 0 else child_seed(cfg.seed, "mc", k, "retry", attempt)
        y = generate_scenario(ctx.spec, ctx.problem.frame, it_seed)
        try:
            theta = ctx.problem.evaluate(y)
            state = ctx.problem.fit_lmm(y) if ("lmm" in ctx.problem.kinds or ctx.bootstrap) else None
            preds = ctx.problem.predict(y, child_seed(it_seed, "gb"), state)
            estimates = None
            if ctx.bootstrap:
                estimates = _bootstrap_estimates(ctx, y, it_seed)
        except (SaeError, np.linalg.LinAlgError):
            failures += 1
            continue
        return theta, preds, estimates, failures
    raise IterationFailure(f"Monte Carlo iteration {k} failed {MAX_RETRIES} times")


def _bootstrap_estimates(ctx: _McCtx, y: np.ndarray, it_seed: int) -> list:
    cfg = ctx.config
    frame_k = ctx.problem.frame.with_response(np.where(ctx.problem.frame.in_sample, y, np.nan))
    problem_k = PlugInProblem(frame_k, ctx.problem.setup, ctx.problem.kinds, ctx.problem.thetas)
    fit = fit_reml(frame_k, ctx.problem.setup.lmm_columns, ctx.problem.setup.intercept)
    runs = accuracy.run_bootstraps(fit, problem_k, cfg.estimators, cfg.B, cfg.C, child_seed(it_seed, "boot"))
    return accuracy.estimates_from_runs(runs, cfg.estimators, cfg.qape_orders, cfg.q)


def _run(config: McConfig, spec: ScenarioSpec, frame: LongFrame, setup: ModelSetup, bootstrap: bool):
    if not config.thetas:
        raise ConfigError("McConfig.thetas is empty")
    sample = study_sample(config, frame)
    problem = PlugInProblem(sample, setup, config.kinds, config.thetas)
    ctx = _McCtx(config, spec, problem, bootstrap)
    results = pmap(_mc_iteration, ctx, range(config.K), config.threads)
    return problem, results


def mc_predictors(config: McConfig, spec: ScenarioSpec, frame: LongFrame, setup: Optional[ModelSetup] = None) -> MeasureTable:
    """rB, rRMSE (in %), RMSE and QAPE_p of each predictor over K generated populations."""
    setup = setup or ModelSetup(lmm_columns=spec.columns, gb_columns=spec.columns)
    problem, results = _run(config, spec, frame, setup, bootstrap=False)
    table = predictor_measures(problem, results, config, spec.kind)
    table.metadata = {"scenario": spec.to_dict(), "failed_iterations": sum(r[3] for r in results)}
    return table


def predictor_measures(problem: PlugInProblem, results, config: McConfig, scenario: str) -> MeasureTable:
    theta = np.array([r[0] for r in results])  # (K, n_theta)
    rows = []
    for kind in problem.kinds:
        pred = np.array([r[1][kind] for r in results])
        for j, t in enumerate(problem.thetas):
            err = pred[:, j] - theta[:, j]
            base = {"scenario": scenario, "study": "predictors", "predictor": kind, "theta": t.label, "estimator": None, "K": config.K, "B": None, "C": None}
            rows.append({**base, "measure": "rB", "p": None, "value": relative_bias(pred[:, j], theta[:, j])})
            rows.append({**base, "measure": "rRMSE", "p": None, "value": relative_rmse(pred[:, j], theta[:, j])})
            rows.append({**base, "measure": "RMSE", "p": None, "value": empirical_rmse(err)})
            for p in config.qape_orders:
                rows.append({**base, "measure": "QAPE", "p": p, "value": empirical_qape(err, p)})
    return MeasureTable(rows)


def mc_accuracy_estimators(
    config: McConfig, spec: ScenarioSpec, frame: LongFrame, setup: Optional[ModelSetup] = None
) -> MeasureTable:
    """rB and rRMSE (in %) of bootstrap RMSE / QAPE estimators against the Monte Carlo truth.

    The truth for a predictor is its empirical RMSE (or QAPE_p) over the K
    iterations; each iteration contributes one bootstrap estimate computed
    from that iteration's sample alone.
    """
    if config.B < 2:
        raise ConfigError("bootstrap studies need B >= 2")
    setup = setup or ModelSetup(lmm_columns=spec.columns, gb_columns=spec.columns)
    problem, results = _run(config, spec, frame, setup, bootstrap=True)
    table = accuracy_measures(problem, results, config, spec.kind)
    table.metadata = {"scenario": spec.to_dict(), "failed_iterations": sum(r[3] for r in results)}
    return table


def accuracy_measures(problem: PlugInProblem, results, config: McConfig, scenario: str) -> MeasureTable:
    theta = np.array([r[0] for r in results])
    truth = {}
    for kind in problem.kinds:
        pred = np.array([r[1][kind] for r in results])
        for j, t in enumerate(problem.thetas):
            err = pred[:, j] - theta[:, j]
            truth[(kind, t.label, "RMSE", None)] = empirical_rmse(err)
            for p in config.qape_orders:
                truth[(kind, t.label, "QAPE", p)] = empirical_qape(err, p)
    per_cell = {}
    for r in results:
        for row in r[2]:
            key = (row["predictor"], row["theta"], row["estimator"], row["measure"], row["p"])
            per_cell.setdefault(key, []).append(row["value"])
    rows = []
    for (kind, label, est, measure, p), values in per_cell.items():
        target = truth[(kind, label, measure, p)]
        targets = np.full(len(values), target)
        base = {"scenario": scenario, "study": "estimators", "predictor": kind, "theta": label, "estimator": est, "p": p, "K": config.K, "B": config.B, "C": config.C}
        rows.append({**base, "measure": f"rB_{measure}", "value": relative_bias(values, targets)})
        rows.append({**base, "measure": f"rRMSE_{measure}", "value": relative_rmse(values, targets)})
        rows.append({**base, "measure": f"truth_{measure}", "value": target})
    return MeasureTable(rows)
