"""Least-squares AR / VAR fitting, order selection and residual checks."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from ._parallel import pmap
from .data import HistorySpec, TimeSeriesSet, lagged_design
from .errors import InsufficientSamples, MaxLagTooSmall, SingularDesign, ValidationError

__all__ = [
    "VarModel",
    "FitDiagnostics",
    "WhitenessReport",
    "fit_var",
    "fit_ar",
    "order_criteria",
    "select_order",
    "residual_whiteness",
    "ols",
    "COND_THRESHOLD",
]

COND_THRESHOLD = 1e10


@dataclass(frozen=True)
class VarModel:
    """Fitted VAR(p).

    ``coeffs[j, l, m]`` is the influence of channel ``m`` at the ``j``-th
    history lag on channel ``l``. ``noise_cov`` uses the degrees-of-freedom
    corrected divisor ``n_obs - d*p``; ``noise_cov_ml`` divides by ``n_obs``.
    """

    coeffs: np.ndarray
    noise_cov: np.ndarray
    n_obs: int
    history: HistorySpec
    noise_cov_ml: np.ndarray | None = None
    intercept: np.ndarray | None = None
    channels: tuple = ()

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "noise_cov", np.atleast_2d(np.asarray(self.noise_cov, dtype=float)))
        if self.noise_cov_ml is None:
            object.__setattr__(self, "noise_cov_ml", self.noise_cov)
        if c.shape[0] != self.history.order:
            raise ValidationError(
                f"{c.shape[0]} coefficient lags for history of order {self.history.order}")

    @property
    def order(self) -> int:
        return self.coeffs.shape[0]

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    def to_dict(self) -> dict:
        out = {
            "order": self.order,
            "dim": self.dim,
            "coeffs": self.coeffs.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "noise_cov_ml": self.noise_cov_ml.tolist(),
            "n_obs": int(self.n_obs),
            "history": self.history.to_dict(),
        }
        if self.intercept is not None:
            out["intercept"] = np.asarray(self.intercept).tolist()
        if self.channels:
            out["channels"] = list(self.channels)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "VarModel":
        return cls(
            coeffs=np.array(d["coeffs"], dtype=float),
            noise_cov=np.array(d["noise_cov"], dtype=float),
            n_obs=int(d["n_obs"]),
            history=HistorySpec.from_dict(d["history"]),
            noise_cov_ml=(np.array(d["noise_cov_ml"], dtype=float)
                          if "noise_cov_ml" in d else None),
            intercept=np.array(d["intercept"]) if "intercept" in d else None,
            channels=tuple(d.get("channels", ())),
        )


@dataclass
class FitDiagnostics:
    residuals: np.ndarray          # (K, rows per trial, d)
    autocorrelation: np.ndarray    # (max_lag + 1, d), lag 0 first
    log_likelihood: float
    aic: float
    bic: float
    order: int
    xtx_inv: np.ndarray = field(repr=False, default=None)

    def to_dict(self) -> dict:
        return {
            "log_likelihood": self.log_likelihood,
            "aic": self.aic,
            "bic": self.bic,
            "order": self.order,
            "autocorrelation": self.autocorrelation,
        }


def ols(X: np.ndarray, Y: np.ndarray, cond_threshold: float = COND_THRESHOLD):
    """Least squares with a conditioning guard on the Gram matrix.

    Returns ``(beta, residuals, gram)``.
    """
    gram = X.T @ X
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(gram) if gram.size else np.inf
    if not np.isfinite(cond) or cond > cond_threshold:
        raise SingularDesign(f"regressor Gram matrix condition number {cond:.3g} "
                             f"exceeds {cond_threshold:.3g}", condition_number=float(cond))
    beta, *_ = np.linalg.lstsq(X, Y, rcond=None)
    return beta, Y - X @ beta, gram


def _pooled_autocorr(resid: np.ndarray, max_lag: int) -> np.ndarray:
    """Autocorrelation pooled over trials; ``resid`` is (K, n, d)."""
    denom = np.einsum("knd,knd->d", resid, resid)
    out = np.empty((max_lag + 1, resid.shape[2]))
    out[0] = 1.0
    for k in range(1, max_lag + 1):
        num = np.einsum("knd,knd->d", resid[:, k:], resid[:, :-k])
        out[k] = num / denom
    return out


def fit_var(series: TimeSeriesSet, channels: Sequence[int] | None = None,
            history: HistorySpec = HistorySpec(1), *, include_intercept: bool = False,
            start: int | None = None, autocorr_lags: int | None = None,
            cond_threshold: float = COND_THRESHOLD):
    """Fit a VAR by equation-wise OLS pooling rows over trials.

    Parameters
    ----------
    series : TimeSeriesSet
    channels : sequence of int or str, optional
        Channels entering the model, in model order. Defaults to all.
    history : HistorySpec
    include_intercept : bool
        Add a constant regressor (data are assumed demeaned otherwise).
    start : int, optional
        First usable time index; lets nested or competing fits share rows.
    autocorr_lags : int, optional
        Residual autocorrelations kept in the diagnostics (default 20).

    Returns
    -------
    (VarModel, FitDiagnostics)
    """
    if channels is None:
        channels = range(series.n_channels)
    idx = [series.channel_index(c) for c in channels]
    values = series.values[:, :, idx]
    K, T, d = values.shape
    p = history.order
    first = history.max_lag if start is None else start
    per_trial = T - first
    n = K * per_trial
    n_reg = d * p + int(include_intercept)
    if per_trial < 1 or n <= d * p + 10:
        raise InsufficientSamples(
            f"{n} usable rows for {d * p} regressors per equation (need > {d * p + 10})",
            rows=n, regressors=d * p)
    X, Y = lagged_design(values, history, start=first)
    if include_intercept:
        X = np.column_stack([X, np.ones(n)])
    beta, resid, gram = ols(X, Y, cond_threshold)

    coeffs = beta[:d * p].reshape(p, d, d).transpose(0, 2, 1)
    intercept = beta[d * p] if include_intercept else None
    cross = resid.T @ resid
    cov_df = cross / (n - n_reg)
    cov_ml = cross / n
    names = tuple(series.channel_names[i] for i in idx)
    model = VarModel(coeffs, cov_df, n, history, noise_cov_ml=cov_ml,
                     intercept=intercept, channels=names)

    resid3 = resid.reshape(K, per_trial, d)
    max_lag = min(20 if autocorr_lags is None else autocorr_lags, per_trial - 1)
    sign, logdet = np.linalg.slogdet(cov_ml)
    if sign <= 0:
        logdet = -np.inf
    loglik = -0.5 * n * (d * np.log(2 * np.pi) + logdet + d)
    aic = logdet + 2.0 * p * d * d / n
    bic = logdet + p * d * d * np.log(n) / n
    with np.errstate(all="ignore"):
        xtx_inv = np.linalg.inv(gram)
    diag = FitDiagnostics(resid3, _pooled_autocorr(resid3, max_lag), float(loglik),
                          float(aic), float(bic), p, xtx_inv)
    return model, diag


def fit_ar(series: TimeSeriesSet, channel, history: HistorySpec = HistorySpec(1), **kwargs):
    """Univariate AR fit of one channel; ``noise_cov`` is 1x1."""
    return fit_var(series, [channel], history, **kwargs)


def order_criteria(series: TimeSeriesSet, channels=None, p_max: int = 10,
                   history: HistorySpec = HistorySpec(1), **kwargs) -> dict:
    """AIC and BIC for orders 1..p_max, all fitted on the rows usable at p_max."""
    if p_max < 1:
        raise ValidationError(f"p_max must be >= 1, got {p_max}")
    start = history.with_order(p_max).max_lag

    def one(p):
        _, diag = fit_var(series, channels, history.with_order(p), start=start, **kwargs)
        return diag.aic, diag.bic

    rows = pmap(one, range(1, p_max + 1))
    return {"order": list(range(1, p_max + 1)),
            "aic": [r[0] for r in rows], "bic": [r[1] for r in rows]}


def select_order(series: TimeSeriesSet, channels=None, p_max: int = 10,
                 criterion: str = "bic", history: HistorySpec = HistorySpec(1),
                 **kwargs) -> int:
    """Order minimising AIC or BIC; ties go to the smaller order."""
    criterion = criterion.lower()
    if criterion not in ("aic", "bic"):
        raise ValidationError(f"criterion must be 'aic' or 'bic', got {criterion!r}")
    table = order_criteria(series, channels, p_max, history, **kwargs)
    values = np.asarray(table[criterion])
    return int(np.argmin(values)) + 1   # argmin keeps the first minimum


@dataclass
class WhitenessReport:
    q_stat: np.ndarray
    df: int
    p_values: np.ndarray
    max_lag: int

    def to_dict(self) -> dict:
        return {"q_stat": self.q_stat, "df": self.df,
                "p_values": self.p_values, "max_lag": self.max_lag}


def residual_whiteness(diag: FitDiagnostics, max_lag: int = 20) -> WhitenessReport:
    """Per-channel Ljung-Box portmanteau test on fitted residuals.

    The reference distribution is chi-squared with ``max_lag - p`` degrees
    of freedom.
    """
    p = diag.order
    if max_lag <= p:
        raise MaxLagTooSmall(f"max_lag={max_lag} must exceed the model order {p}")
    resid = diag.residuals
    K, n_per, _ = resid.shape
    if max_lag >= n_per:
        raise ValidationError(f"max_lag={max_lag} exceeds residual length {n_per}")
    r = _pooled_autocorr(resid, max_lag)[1:]
    n = K * n_per
    lags = np.arange(1, max_lag + 1)
    q = n * (n + 2) * np.sum(r ** 2 / (n - lags)[:, None], axis=0)
    df = max_lag - p
    return WhitenessReport(q, df, stats.chi2.sf(q, df), max_lag)
