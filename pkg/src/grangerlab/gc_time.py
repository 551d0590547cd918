"""Time-domain Granger causality: variance-ratio F, coefficient Wald, conditional F."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import HistorySpec, TimeSeriesSet, lagged_design
from .errors import ChannelOverlap, InsufficientSamples, SingularCovarianceBlock, ValidationError
from .var import COND_THRESHOLD, ols

__all__ = [
    "GcTimeResult",
    "NestedFit",
    "nested_fit",
    "granger_f_test",
    "granger_wald_test",
    "conditional_granger_f_test",
    "granger_tests",
    "wald_statistic",
]


@dataclass
class GcTimeResult:
    """Outcome of a time-domain test of ``source -> target | conditioning``.

    ``restricted_var`` and ``unrestricted_var`` are residual variances with
    the maximum-likelihood divisor, so ``f_geweke == ln(restricted/unrestricted)``.
    """

    source: int
    target: int
    conditioning: tuple
    order: int
    n_obs: int
    f_geweke: float
    restricted_var: float
    unrestricted_var: float
    f_stat: float | None = None
    f_df: tuple | None = None
    f_pvalue: float | None = None
    wald_stat: float | None = None
    wald_df: int | None = None
    wald_pvalue: float | None = None
    channel_names: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        def name(i):
            return self.channel_names[i] if self.channel_names else i
        return {
            "statistic": "gc-time",
            "source": name(self.source),
            "target": name(self.target),
            "conditioning": [name(c) for c in self.conditioning],
            "order": self.order,
            "n_obs": self.n_obs,
            "f_geweke": self.f_geweke,
            "restricted_var": self.restricted_var,
            "unrestricted_var": self.unrestricted_var,
            "f_stat": self.f_stat,
            "f_df": list(self.f_df) if self.f_df else None,
            "f_pvalue": self.f_pvalue,
            "wald_stat": self.wald_stat,
            "wald_df": self.wald_df,
            "wald_pvalue": self.wald_pvalue,
        }


@dataclass
class NestedFit:
    """Restricted and unrestricted regressions of one target on shared rows."""

    rss_restricted: float
    rss_unrestricted: float
    n_obs: int
    order: int
    n_conditioning: int
    causal_coeffs: np.ndarray      # (p,) source-lag coefficients
    causal_cov: np.ndarray         # (p, p) OLS covariance of causal_coeffs
    restricted_resid: np.ndarray
    unrestricted_resid: np.ndarray

    @property
    def f_geweke(self) -> float:
        return float(np.log(self.rss_restricted / self.rss_unrestricted))


def _resolve(series, source, target, conditioning):
    s = series.channel_index(source)
    t = series.channel_index(target)
    w = tuple(series.channel_index(c) for c in conditioning)
    if s == t:
        raise ChannelOverlap("source and target must differ")
    if len(set(w)) != len(w) or s in w or t in w:
        raise ChannelOverlap(
            f"conditioning set {list(w)} overlaps source {s} / target {t} or repeats")
    return s, t, w


def nested_fit(series: TimeSeriesSet, source, target, history: HistorySpec = HistorySpec(1),
               conditioning=(), include_intercept: bool = False,
               cond_threshold: float = COND_THRESHOLD) -> NestedFit:
    """Regress ``target`` on its own, the conditioning and the source history.

    The restricted model drops the source columns; both use the rows usable
    by the unrestricted model.
    """
    s, t, w = _resolve(series, source, target, conditioning)
    chans = [t, s, *w]
    d, p = len(chans), history.order
    X, Y = lagged_design(series.values[:, :, chans], history)
    n = X.shape[0]
    if n <= d * p + 10:
        raise InsufficientSamples(f"{n} usable rows for {d * p} regressors", rows=n)
    y = Y[:, 0]
    src_cols = np.array([j * d + 1 for j in range(p)])
    keep = np.setdiff1d(np.arange(d * p), src_cols)
    if include_intercept:
        X = np.column_stack([X, np.ones(n)])
        keep = np.append(keep, d * p)
    beta_u, res_u, gram = ols(X, y, cond_threshold)
    beta_r, res_r, _ = ols(X[:, keep], y, cond_threshold)
    rss_u = float(res_u @ res_u)
    rss_r = float(res_r @ res_r)
    k = X.shape[1]
    sigma2 = rss_u / (n - k)
    gram_inv = np.linalg.inv(gram)
    causal_cov = sigma2 * gram_inv[np.ix_(src_cols, src_cols)]
    return NestedFit(rss_r, rss_u, n, p, len(w), beta_u[src_cols], causal_cov, res_r, res_u)


def wald_statistic(coeffs: np.ndarray, cov: np.ndarray) -> float:
    """Quadratic form ``b' V^-1 b``."""
    coeffs = np.atleast_1d(np.asarray(coeffs, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.any(coeffs):
        return 0.0
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(cov)
    if not np.isfinite(cond) or cond > 1e12:
        raise SingularCovarianceBlock(f"coefficient covariance block is singular (cond={cond:.3g})")
    return float(coeffs @ np.linalg.solve(cov, coeffs))


def _result(series, fit: NestedFit, source, target, conditioning) -> GcTimeResult:
    s, t, w = _resolve(series, source, target, conditioning)
    n = fit.n_obs
    return GcTimeResult(
        source=s, target=t, conditioning=w, order=fit.order, n_obs=n,
        f_geweke=fit.f_geweke,
        restricted_var=fit.rss_restricted / n,
        unrestricted_var=fit.rss_unrestricted / n,
        channel_names=series.channel_names,
    )


def _attach_f(res: GcTimeResult, fit: NestedFit):
    m = fit.order
    df2 = fit.n_obs - (fit.n_conditioning + 2) * m - 1
    if df2 < 1:
        raise InsufficientSamples(f"F denominator degrees of freedom {df2} < 1")
    num = (fit.rss_restricted - fit.rss_unrestricted) / m
    f = num / (fit.rss_unrestricted / df2)
    res.f_stat = float(f)
    res.f_df = (m, df2)
    res.f_pvalue = float(stats.f.sf(f, m, df2)) if f > 0 else 1.0


def _attach_wald(res: GcTimeResult, fit: NestedFit):
    wstat = wald_statistic(fit.causal_coeffs, fit.causal_cov)
    res.wald_stat = wstat
    res.wald_df = fit.order
    res.wald_pvalue = float(stats.chi2.sf(wstat, fit.order)) if wstat > 0 else 1.0


def granger_f_test(series: TimeSeriesSet, source, target,
                   history: HistorySpec = HistorySpec(1), **kwargs) -> GcTimeResult:
    """Variance-ratio F test of source -> target.

    ``F = ((RSS_r - RSS_ur)/m) / (RSS_ur/(n - 2m - 1))`` with ``m = p``,
    referred to ``F(m, n - 2m - 1)``; ``n`` is the number of usable rows.
    """
    fit = nested_fit(series, source, target, history, **kwargs)
    res = _result(series, fit, source, target, ())
    _attach_f(res, fit)
    return res


def granger_wald_test(series: TimeSeriesSet, source, target,
                      history: HistorySpec = HistorySpec(1), **kwargs) -> GcTimeResult:
    """Wald test that all ``p`` source-lag coefficients of the target equation vanish."""
    fit = nested_fit(series, source, target, history, **kwargs)
    res = _result(series, fit, source, target, ())
    _attach_wald(res, fit)
    return res


def conditional_granger_f_test(series: TimeSeriesSet, source, target, conditioning,
                               history: HistorySpec = HistorySpec(1), **kwargs) -> GcTimeResult:
    """F test of source -> target controlling for the channels in ``conditioning``.

    Denominator degrees of freedom are ``n - (|W| + 2) p - 1``.
    """
    conditioning = tuple(conditioning)
    fit = nested_fit(series, source, target, history, conditioning=conditioning, **kwargs)
    res = _result(series, fit, source, target, conditioning)
    _attach_f(res, fit)
    return res


def granger_tests(series: TimeSeriesSet, source, target, history: HistorySpec = HistorySpec(1),
                  conditioning=(), **kwargs) -> GcTimeResult:
    """F and Wald tests from a single pair of nested fits."""
    conditioning = tuple(conditioning)
    fit = nested_fit(series, source, target, history, conditioning=conditioning, **kwargs)
    res = _result(series, fit, source, target, conditioning)
    _attach_f(res, fit)
    _attach_wald(res, fit)
    return res
