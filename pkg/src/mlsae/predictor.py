"""Plug-in prediction of finite-population characteristics.

The population vector is completed with model-fitted values for the
non-sampled rows, and the target characteristic is evaluated on the
completed vector. Quantiles use the lower order statistic: the value at
rank ceil(p * m) among m sorted values, which is the empirical version of
inf{x : F(x) >= p}. The median is quantile(0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import gbt, lmm
from .errors import ConfigError, EvaluationError, FitError, ShapeError
from .frame import ALL_DOMAINS, LongFrame, subset_mask
from .rng import child_seed

STATISTICS = ("mean", "median", "quantile", "total")
KINDS = ("lmm", "gb")
OBSERVED, FITTED = 0, 1


def order_rank(p: float, m: int) -> int:
    """1-based rank ceil(p * m), guarded against p * m landing a hair above an integer."""
    return min(m, max(1, math.ceil(p * m - 1e-9)))


def lower_quantile(values, p: float) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise EvaluationError("quantile of an empty set")
    if not 0 < p < 1:
        raise EvaluationError(f"quantile order must lie in (0, 1), got {p}")
    k = order_rank(p, values.size)
    return float(np.partition(values, k - 1)[k - 1])


@dataclass(frozen=True)
class ThetaSpec:
    statistic: str
    domain: str = ALL_DOMAINS
    period: int = 1
    p: Optional[float] = None

    def __post_init__(self):
        if self.statistic not in STATISTICS:
            raise ConfigError(f"statistic must be one of {STATISTICS}, got {self.statistic!r}")
        if (self.statistic == "quantile") != (self.p is not None):
            raise ConfigError("p is required for, and only for, the quantile statistic")
        if self.p is not None and not 0 < self.p < 1:
            raise ConfigError(f"quantile order must lie in (0, 1), got {self.p}")
        object.__setattr__(self, "domain", str(self.domain))
        object.__setattr__(self, "period", int(self.period))

    @property
    def label(self) -> str:
        stat = f"q{self.p:g}" if self.statistic == "quantile" else self.statistic
        return f"{stat}[{self.domain}@{self.period}]"

    @property
    def order(self) -> Optional[float]:
        if self.statistic == "median":
            return 0.5
        return self.p

    def to_dict(self) -> dict:
        d = {"statistic": self.statistic, "domain": self.domain, "period": self.period}
        if self.p is not None:
            d["p"] = self.p
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ThetaSpec":
        return cls(d["statistic"], d.get("domain", ALL_DOMAINS), d["period"], d.get("p"))


@dataclass(frozen=True, eq=False)
class ComposedVector:
    values: np.ndarray
    source: np.ndarray  # OBSERVED or FITTED per entry


def compose_population(frame: LongFrame, fitted_r) -> ComposedVector:
    """Observed y on sampled rows, ``fitted_r`` (in non-sampled row order) elsewhere."""
    fitted_r = np.asarray(fitted_r, dtype=float)
    r = frame.nonsample_index
    if fitted_r.shape != (len(r),):
        raise ShapeError(f"expected {len(r)} fitted values, got {fitted_r.shape}")
    values = np.where(frame.in_sample, frame.y, 0.0)
    values[r] = fitted_r
    source = np.where(frame.in_sample, OBSERVED, FITTED)
    return ComposedVector(values, source)


def _evaluate(statistic: str, p: Optional[float], values: np.ndarray) -> float:
    if values.size == 0:
        raise EvaluationError("characteristic over an empty mask")
    if statistic == "mean":
        return math.fsum(values) / values.size
    if statistic == "total":
        return math.fsum(values)
    if statistic == "median":
        return lower_quantile(values, 0.5)
    return lower_quantile(values, p)


def characteristic(spec: ThetaSpec, composed, mask) -> float:
    values = composed.values if isinstance(composed, ComposedVector) else np.asarray(composed, dtype=float)
    mask = np.asarray(mask)
    if mask.size == 0:
        raise EvaluationError(f"empty mask for {spec.label}")
    return _evaluate(spec.statistic, spec.p, values[mask])


# -- model setup ---------------------------------------------------------------


@dataclass(frozen=True)
class ModelSetup:
    """Which columns each model sees.

    The GB feature set is the chosen auxiliaries plus the period index;
    domain ids are added one-hot only when ``gb_domain_onehot`` is set.
    """

    lmm_columns: Optional[tuple] = None
    intercept: bool = False
    gb_columns: Optional[tuple] = None
    gb_period: bool = True
    gb_domain_onehot: bool = False
    gb_params: gbt.GbHyperparams = field(default_factory=gbt.GbHyperparams)

    def to_dict(self) -> dict:
        return {
            "lmm_columns": list(self.lmm_columns) if self.lmm_columns is not None else None,
            "intercept": self.intercept,
            "gb_columns": list(self.gb_columns) if self.gb_columns is not None else None,
            "gb_period": self.gb_period,
            "gb_domain_onehot": self.gb_domain_onehot,
            "gb_params": self.gb_params.to_dict(),
        }


def gb_features(frame: LongFrame, setup: ModelSetup):
    """Feature matrix and names for the GB model."""
    names = list(setup.gb_columns if setup.gb_columns is not None else frame.aux_names)
    cols = [frame.columns(names)]
    if setup.gb_period:
        cols.append(frame.period.astype(float)[:, None])
        names.append("period")
    if setup.gb_domain_onehot:
        onehot = np.zeros((frame.N_L, frame.n_domains))
        onehot[np.arange(frame.N_L), frame.domain_codes] = 1.0
        cols.append(onehot)
        names.extend(f"domain={d}" for d in frame.domains)
    return np.ascontiguousarray(np.column_stack(cols)), tuple(names)


def fit_models(frame: LongFrame, setup: ModelSetup, kinds: Sequence[str], seed: int) -> dict:
    """Fit the requested model kinds on the sampled rows of ``frame``."""
    models = {}
    for kind in kinds:
        if kind == "lmm":
            models["lmm"] = lmm.fit_reml(frame, setup.lmm_columns, setup.intercept)
        elif kind == "gb":
            feats, names = gb_features(frame, setup)
            s = frame.sample_index
            models["gb"] = gbt.fit_gb(feats[s], frame.y[s], setup.gb_params, child_seed(seed, "gb_fit"), names)
        else:
            raise ConfigError(f"unknown predictor kind {kind!r}")
    return models


def fitted_values(kind: str, model, frame: LongFrame, setup: ModelSetup) -> np.ndarray:
    if kind == "lmm":
        return lmm.fitted_unobserved(model, frame)
    feats, _ = gb_features(frame, setup)
    return gbt.predict_gb(model, feats[frame.nonsample_index])


def plug_in_predict(kind: str, frame: LongFrame, spec: ThetaSpec, model, setup: Optional[ModelSetup] = None) -> float:
    setup = setup or ModelSetup()
    composed = compose_population(frame, fitted_values(kind, model, frame, setup))
    return characteristic(spec, composed, subset_mask(frame, spec.domain, spec.period))


# -- repeated prediction on regenerated responses --------------------------------


class PlugInProblem:
    """Precomputed structure for predicting many characteristics on many response draws.

    The frame fixes auxiliaries, domains and the sample; only the response
    vector changes between calls. Used by the bootstrap and Monte Carlo
    loops.
    """

    def __init__(self, frame: LongFrame, setup: ModelSetup, kinds: Sequence[str], thetas: Sequence[ThetaSpec]):
        for kind in kinds:
            if kind not in KINDS:
                raise ConfigError(f"unknown predictor kind {kind!r}")
        if not thetas:
            raise ConfigError("at least one characteristic is required")
        self.frame = frame
        self.setup = setup
        self.kinds = tuple(kinds)
        self.thetas = tuple(thetas)
        self.s = frame.sample_index
        self.r = frame.nonsample_index
        self.codes = frame.domain_codes
        self.n_domains = frame.n_domains
        self.x_lmm = lmm.design_matrix(frame, setup.lmm_columns, setup.intercept)
        self.x_lmm_s = np.ascontiguousarray(self.x_lmm[self.s])
        self.codes_s = self.codes[self.s]
        if "gb" in self.kinds:
            feats, self.gb_names = gb_features(frame, setup)
            self.f_s = np.ascontiguousarray(feats[self.s])
            self.f_r = np.ascontiguousarray(feats[self.r])
        self.masks = [subset_mask(frame, t.domain, t.period) for t in self.thetas]

    @property
    def labels(self) -> list:
        return [t.label for t in self.thetas]

    def keys(self) -> list:
        """(kind, theta label) pairs in output order."""
        return [(k, t.label) for k in self.kinds for t in self.thetas]

    def evaluate(self, values: np.ndarray) -> np.ndarray:
        return np.array([_evaluate(t.statistic, t.p, values[m]) for t, m in zip(self.thetas, self.masks)])

    def fit_lmm(self, y_full: np.ndarray) -> "_LmmState":
        """REML parameters and domain effects from the sampled part of ``y_full``.

        Raises FitError when the optimiser does not converge.
        """
        beta, s2u, s2e, v, _, converged, _ = lmm.reml_fit_arrays(y_full[self.s], self.x_lmm_s, self.codes_s, self.n_domains)
        if not converged:
            raise FitError("REML did not converge")
        return _LmmState(lmm.LmmParams(beta, s2u, s2e), v)

    def predict(self, y_full: np.ndarray, seed: int, lmm_state=None) -> dict:
        """Characteristic predictions per kind from the sampled part of ``y_full``."""
        out = {}
        for kind in self.kinds:
            values = y_full.copy()
            if kind == "lmm":
                state = lmm_state if lmm_state is not None else self.fit_lmm(y_full)
                values[self.r] = self.x_lmm[self.r] @ state.params.beta + state.v[self.codes[self.r]]
            else:
                values[self.r] = gbt.fit_predict_gb(self.f_s, y_full[self.s], self.f_r, self.setup.gb_params, seed)
            out[kind] = self.evaluate(values)
        return out

    def model_mean(self, params: lmm.LmmParams) -> np.ndarray:
        return self.x_lmm @ params.beta


@dataclass(frozen=True)
class _LmmState:
    params: lmm.LmmParams
    v: np.ndarray
