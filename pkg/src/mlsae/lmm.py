"""Random-intercept linear mixed model.

    y_i = x_i' beta + v_d(i) + e_i,   v_d ~ N(0, sigma2_u),   e_i ~ N(0, sigma2_e)

Variance components are estimated by REML. For a fixed ratio
psi = sigma2_u / sigma2_e the covariance of domain d is
sigma2_e * (I + psi 11'), whose inverse and determinant are available in
closed form, so beta and sigma2_e profile out and the restricted likelihood
becomes a one-dimensional function of log(psi). That function is scanned on
a coarse grid, refined with bounded Brent, and compared with the boundary
psi = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import IdentifiabilityError, ShapeError, SingularityError
from .frame import LongFrame
from .rng import stream

VAR_FLOOR = 1e-10
OBJ_TOL = 1e-8
MAX_ITER = 200
LOG_PSI_BOUNDS = (-23.0, 23.0)
_GRID_SIZE = 47
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class LmmParams:
    beta: np.ndarray
    sigma2_u: float
    sigma2_e: float

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).ravel()
        if not np.all(np.isfinite(beta)):
            raise ValueError("beta must be finite")
        if not (self.sigma2_u >= 0 and self.sigma2_e >= 0):
            raise ValueError("variances must be non-negative")
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class LmmFit:
    """REML fit. ``v_hat`` holds the BLUP of every sampled domain."""

    beta: np.ndarray
    sigma2_u: float
    sigma2_e: float
    v_hat: dict
    reml_loglik: float
    converged: bool
    columns: Optional[tuple] = None
    intercept: bool = False
    n_obs: int = 0
    iterations: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def params(self) -> LmmParams:
        return LmmParams(self.beta, self.sigma2_u, self.sigma2_e)

    @property
    def psi(self) -> float:
        return self.sigma2_u / self.sigma2_e

    def to_dict(self) -> dict:
        return {
            "beta": [float(b) for b in self.beta],
            "sigma2_u": float(self.sigma2_u),
            "sigma2_e": float(self.sigma2_e),
            "v_hat": {str(k): float(v) for k, v in self.v_hat.items()},
            "reml_loglik": float(self.reml_loglik),
            "converged": bool(self.converged),
            "columns": list(self.columns) if self.columns is not None else None,
            "intercept": bool(self.intercept),
            "n_obs": int(self.n_obs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmmFit":
        return cls(
            beta=np.asarray(d["beta"], dtype=float),
            sigma2_u=float(d["sigma2_u"]),
            sigma2_e=float(d["sigma2_e"]),
            v_hat=dict(d["v_hat"]),
            reml_loglik=float(d["reml_loglik"]),
            converged=bool(d["converged"]),
            columns=tuple(d["columns"]) if d.get("columns") is not None else None,
            intercept=bool(d.get("intercept", False)),
            n_obs=int(d.get("n_obs", 0)),
        )


def design_matrix(frame: LongFrame, columns: Optional[Sequence[str]] = None, intercept: bool = False) -> np.ndarray:
    x = frame.columns(columns)
    if intercept:
        x = np.column_stack([np.ones(frame.N_L), x])
    return x


# -- profiled REML on arrays -------------------------------------------------


@dataclass(frozen=True)
class _Stats:
    n: int
    p: int
    counts: np.ndarray  # (G,)
    sx: np.ndarray  # (G, p) per-domain column sums
    sy: np.ndarray  # (G,)
    xtx: np.ndarray
    xty: np.ndarray
    yty: float
    sxx: np.ndarray  # (G, p, p) outer products of the column sums
    sxy: np.ndarray  # (G, p)
    sy2: np.ndarray  # (G,)


def _stats(y, x, codes, n_groups) -> _Stats:
    counts = np.bincount(codes, minlength=n_groups).astype(float)
    sx = np.empty((n_groups, x.shape[1]))
    for j in range(x.shape[1]):
        sx[:, j] = np.bincount(codes, weights=x[:, j], minlength=n_groups)
    sy = np.bincount(codes, weights=y, minlength=n_groups)
    return _Stats(
        len(y), x.shape[1], counts, sx, sy, x.T @ x, x.T @ y, float(y @ y), sx[:, :, None] * sx[:, None, :], sx * sy[:, None], sy**2
    )


def _profile(psi: np.ndarray, st: _Stats):
    """Profiled REML pieces for a batch of ratios ``psi`` (shape (K,))."""
    psi = np.atleast_1d(psi)
    w = psi[:, None] / (1.0 + psi[:, None] * st.counts[None, :])  # (K, G)
    a = st.xtx[None] - np.tensordot(w, st.sxx, axes=1)
    b = st.xty[None] - w @ st.sxy
    c = st.yty - w @ st.sy2
    beta = np.linalg.solve(a, b[..., None])[..., 0]
    r = np.maximum(c - (b * beta).sum(axis=1), 0.0)
    sign, logdet_a = np.linalg.slogdet(a)
    logdet_h = np.log1p(psi[:, None] * st.counts[None, :]).sum(axis=1)
    dof = st.n - st.p
    s2 = np.maximum(r / dof, VAR_FLOOR)
    obj = -0.5 * (dof * np.log(s2) + logdet_h + logdet_a + r / s2 + dof * _LOG_2PI)
    obj = np.where(sign > 0, obj, -np.inf)
    return obj, beta, s2


def _check(y, x, codes, n_groups):
    n, p = x.shape
    if len(y) != n or len(codes) != n:
        raise ShapeError(f"y has {len(y)} rows, X has {n}, groups has {len(codes)}")
    if np.count_nonzero(np.bincount(codes, minlength=n_groups)) < 2:
        raise IdentifiabilityError("at least 2 sampled domains are required")
    if n <= p + 1:
        raise IdentifiabilityError(f"need more than p + 1 = {p + 1} observations, got {n}")
    if np.linalg.matrix_rank(x) < p:
        raise SingularityError(f"design matrix with {p} columns is rank deficient")


def reml_fit_arrays(y, x, codes, n_groups):
    """Core fit on arrays.

    Returns ``(beta, sigma2_u, sigma2_e, v, loglik, converged, iterations)``
    where ``v`` has length ``n_groups`` and is 0 for groups without rows.
    """
    y = np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    codes = np.asarray(codes, dtype=np.int64)
    _check(y, x, codes, n_groups)
    st = _stats(y, x, codes, n_groups)

    grid = np.linspace(*LOG_PSI_BOUNDS, _GRID_SIZE)
    obj_grid, _, _ = _profile(np.exp(grid), st)
    obj0, beta0, s20 = _profile(np.zeros(1), st)
    i = int(np.argmax(obj_grid))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, _GRID_SIZE - 1)]
    res = minimize_scalar(
        lambda t: -_profile(np.array([math.exp(t)]), st)[0][0],
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": OBJ_TOL, "maxiter": MAX_ITER},
    )
    converged = bool(res.success)
    t_best = float(res.x)
    obj_best = -float(res.fun)
    if obj_grid[i] > obj_best:
        t_best, obj_best = float(grid[i]), float(obj_grid[i])
    if obj0[0] >= obj_best or not np.isfinite(obj_best):
        psi = 0.0
        beta, s2e, loglik = beta0[0], float(s20[0]), float(obj0[0])
    else:
        psi = math.exp(t_best)
        obj, beta, s2 = _profile(np.array([psi]), st)
        beta, s2e, loglik = beta[0], float(s2[0]), float(obj[0])
    if not np.isfinite(loglik):
        converged = False
    s2u = psi * s2e
    resid_sum = st.sy - st.sx @ beta
    v = s2u / (s2e + st.counts * s2u) * resid_sum if s2u > 0 else np.zeros(n_groups)
    return beta, s2u, s2e, v, loglik, converged, int(getattr(res, "nfev", 0)) + _GRID_SIZE + 1


def reml_loglik(y, x, codes, sigma2_u: float, sigma2_e: float) -> float:
    """Restricted log-likelihood at given variance components."""
    codes = np.asarray(codes, dtype=np.int64)
    n_groups = int(codes.max()) + 1
    st = _stats(np.asarray(y, float), np.asarray(x, float), codes, n_groups)
    w = sigma2_u / (sigma2_e + sigma2_u * st.counts)
    vinv_xx = (st.xtx - (st.sx.T * w) @ st.sx) / sigma2_e
    vinv_xy = (st.xty - (st.sx.T * w) @ st.sy) / sigma2_e
    vinv_yy = (st.yty - w @ st.sy**2) / sigma2_e
    beta = np.linalg.solve(vinv_xx, vinv_xy)
    logdet_v = st.n * math.log(sigma2_e) + np.log1p(st.counts * sigma2_u / sigma2_e).sum()
    quad = vinv_yy - vinv_xy @ beta
    return float(-0.5 * (logdet_v + np.linalg.slogdet(vinv_xx)[1] + quad + (st.n - st.p) * _LOG_2PI))


# -- frame-level API ---------------------------------------------------------


def fit_reml(frame: LongFrame, columns: Optional[Sequence[str]] = None, intercept: bool = False) -> LmmFit:
    """Fit the random-intercept model to the in-sample rows of ``frame``.

    Non-convergence does not raise; the returned fit has ``converged=False``.
    """
    idx = frame.sample_index
    x = design_matrix(frame, columns, intercept)[idx]
    codes = frame.domain_codes[idx]
    beta, s2u, s2e, v, loglik, converged, iters = reml_fit_arrays(frame.y[idx], x, codes, frame.n_domains)
    sampled = set(codes.tolist())
    v_hat = {d: float(v[g]) for g, d in enumerate(frame.domains) if g in sampled}
    return LmmFit(
        beta=beta,
        sigma2_u=float(s2u),
        sigma2_e=float(s2e),
        v_hat=v_hat,
        reml_loglik=loglik,
        converged=converged,
        columns=tuple(columns) if columns is not None else tuple(frame.aux_names),
        intercept=intercept,
        n_obs=len(idx),
        iterations=iters,
    )


def blup_effects(fit: LmmFit, frame: LongFrame) -> dict:
    """BLUP of each sampled domain's effect; unsampled domains are absent."""
    idx = frame.sample_index
    x = design_matrix(frame, fit.columns, fit.intercept)[idx]
    resid = frame.y[idx] - x @ fit.beta
    codes = frame.domain_codes[idx]
    counts = np.bincount(codes, minlength=frame.n_domains)
    sums = np.bincount(codes, weights=resid, minlength=frame.n_domains)
    out = {}
    for g, d in enumerate(frame.domains):
        if counts[g] == 0:
            continue
        if fit.sigma2_u == 0:
            out[d] = 0.0
        else:
            out[d] = float(fit.sigma2_u / (fit.sigma2_e + counts[g] * fit.sigma2_u) * sums[g])
    return out


def effect_vector(fit: LmmFit, frame: LongFrame) -> np.ndarray:
    """BLUP per domain code of ``frame`` (0 for domains absent from the fit)."""
    return np.array([fit.v_hat.get(d, 0.0) for d in frame.domains])


def fitted_unobserved(fit: LmmFit, frame: LongFrame) -> np.ndarray:
    """X_r beta + v_d for every non-sampled row, in frame order."""
    x = design_matrix(frame, fit.columns, fit.intercept)
    if x.shape[1] != len(fit.beta):
        raise ShapeError(f"design has {x.shape[1]} columns, fit has {len(fit.beta)} coefficients")
    r = frame.nonsample_index
    return x[r] @ fit.beta + effect_vector(fit, frame)[frame.domain_codes[r]]


def simulate_population(
    params: LmmParams,
    frame: LongFrame,
    seed: int,
    columns: Optional[Sequence[str]] = None,
    intercept: bool = False,
) -> np.ndarray:
    """Draw a full response vector from the model with normal effects.

    Domain effects are drawn once per domain and shared by all its periods.
    """
    x = design_matrix(frame, columns, intercept)
    if x.shape[1] != len(params.beta):
        raise ShapeError(f"design has {x.shape[1]} columns, params have {len(params.beta)} coefficients")
    rng = stream(seed, "population")
    return draw_response(x @ params.beta, frame.domain_codes, frame.n_domains, params.sigma2_u, params.sigma2_e, rng)


def draw_response(mean, codes, n_domains, sigma2_u, sigma2_e, rng) -> np.ndarray:
    z_u = rng.standard_normal(n_domains)
    z_e = rng.standard_normal(len(mean))
    return mean + math.sqrt(sigma2_u) * z_u[codes] + math.sqrt(sigma2_e) * z_e
