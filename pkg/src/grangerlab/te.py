"""Transfer entropy: Gaussian and kernel plug-in estimators, local TE, surrogates."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .data import HistorySpec, TimeSeriesSet, lagged_design
from .errors import BandwidthNonPositive, InsufficientSamples, ValidationError
from .gc_time import _resolve, nested_fit

__all__ = [
    "TeEstimate",
    "te_gaussian",
    "te_kernel",
    "te_local",
    "te_permutation_test",
    "select_embedding",
    "silverman_bandwidth",
]

MIN_KERNEL_ROWS = 500


@dataclass
class TeEstimate:
    """Transfer entropy in nats.

    ``local_values`` (when present) are per usable sample, in trial-major
    order; ``value`` is their mean over the finite entries and
    ``n_excluded`` counts entries dropped for zero density.
    """

    value: float
    estimator: str
    history: HistorySpec
    source: int
    target: int
    bandwidth: np.ndarray | None = None
    p_value: float | None = None
    local_values: np.ndarray | None = field(default=None, repr=False)
    n_excluded: int = 0
    n_surrogates: int | None = None
    channel_names: tuple = field(default=(), repr=False)

    def to_dict(self) -> dict:
        def name(i):
            return self.channel_names[i] if self.channel_names else i
        out = {
            "statistic": "te",
            "estimator": self.estimator,
            "source": name(self.source),
            "target": name(self.target),
            "value": self.value,
            "history": self.history.to_dict(),
            "p_value": self.p_value,
            "n_excluded": self.n_excluded,
        }
        if self.bandwidth is not None:
            out["bandwidth"] = np.asarray(self.bandwidth).tolist()
        if self.n_surrogates is not None:
            out["n_surrogates"] = self.n_surrogates
        return out


def te_gaussian(series: TimeSeriesSet, source, target,
                history: HistorySpec = HistorySpec(1), local: bool = False,
                **kwargs) -> TeEstimate:
    """Closed-form TE of jointly Gaussian linear processes: ``0.5 * ln(var_r / var_ur)``.

    Uses the same nested regressions as the F test, so it equals half the
    Geweke measure exactly.
    """
    s, t, _ = _resolve(series, source, target, ())
    fit = nested_fit(series, s, t, history, **kwargs)
    est = TeEstimate(0.5 * fit.f_geweke, "gaussian", history, s, t,
                     channel_names=series.channel_names)
    if local:
        n = fit.n_obs
        var_r = fit.rss_restricted / n
        var_u = fit.rss_unrestricted / n
        e_r, e_u = fit.restricted_resid, fit.unrestricted_resid
        est.local_values = (0.5 * np.log(var_r / var_u)
                            - e_u ** 2 / (2 * var_u) + e_r ** 2 / (2 * var_r))
    return est


def silverman_bandwidth(data: np.ndarray, dim: int | None = None) -> np.ndarray:
    """Per-column Silverman width ``sd * (4 / ((D + 2) n)) ** (1 / (D + 4))``."""
    n, cols = data.shape
    D = cols if dim is None else dim
    sd = data.std(axis=0, ddof=1)
    return sd * (4.0 / ((D + 2) * n)) ** (1.0 / (D + 4))


def _embedding(series, s, t, history):
    X, Y = lagged_design(series.values[:, :, [t, s]], history)
    p = history.order
    yt = Y[:, 0]
    yh = X[:, 0::2]
    xh = X[:, 1::2]
    return yt, yh.reshape(-1, p), xh.reshape(-1, p)


def _gauss_block(centres, points, buf, tmp):
    """``buf = exp(-0.5 * ||centres_i - points_j||^2)`` for scaled coordinates."""
    np.subtract.outer(centres[:, 0], points[:, 0], out=buf)
    np.square(buf, out=buf)
    for j in range(1, centres.shape[1]):
        np.subtract.outer(centres[:, j], points[:, j], out=tmp)
        np.square(tmp, out=tmp)
        buf += tmp
    buf *= -0.5
    np.exp(buf, out=buf)
    return buf


def _kernel_local_te(yt, yh, xh, h_yt, h_yh, h_xh, chunk=128, exclude_self=False):
    """Local TE ``ln f(yt,yh,xh) f(yh) / (f(yh,xh) f(yt,yh))`` from product-Gaussian KDE.

    Normalising constants cancel in the ratio, so only kernel sums are needed.
    """
    n = yt.shape[0]
    a = (yt / h_yt)[:, None]
    b = yh / h_yh
    c = xh / h_xh
    out = np.empty(n)
    m = min(chunk, n)
    e_yt, e_yh, e_xh, tmp = (np.empty((m, n)) for _ in range(4))
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        k = hi - lo
        A = _gauss_block(a[lo:hi], a, e_yt[:k], tmp[:k])
        B = _gauss_block(b[lo:hi], b, e_yh[:k], tmp[:k])
        C = _gauss_block(c[lo:hi], c, e_xh[:k], tmp[:k])
        if exclude_self:
            rows = np.arange(k)
            A[rows, lo + rows] = 0.0
            B[rows, lo + rows] = 0.0
            C[rows, lo + rows] = 0.0
        s_yh = B.sum(axis=1)
        s_yhxh = np.einsum("ij,ij->i", B, C)
        A *= B
        s_ytyh = A.sum(axis=1)
        s_full = np.einsum("ij,ij->i", A, C)
        with np.errstate(divide="ignore", invalid="ignore"):
            out[lo:hi] = np.log(s_full) + np.log(s_yh) - np.log(s_yhxh) - np.log(s_ytyh)
    return out


def _kernel_estimate(series, s, t, history, bandwidth, exclude_self):
    yt, yh, xh = _embedding(series, s, t, history)
    n = yt.shape[0]
    if n < MIN_KERNEL_ROWS:
        raise InsufficientSamples(
            f"kernel TE needs >= {MIN_KERNEL_ROWS} usable samples, got {n}", rows=n)
    p = history.order
    if isinstance(bandwidth, str):
        if bandwidth != "auto":
            raise ValidationError(f"bandwidth must be 'auto' or positive, got {bandwidth!r}")
        h = silverman_bandwidth(np.column_stack([yt, yh, xh]), dim=2 * p + 1)
    else:
        h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (2 * p + 1,)).copy()
    if np.any(~(h > 0)):
        raise BandwidthNonPositive(f"bandwidth must be positive, got {h.tolist()}")
    local = _kernel_local_te(yt, yh, xh, h[0], h[1:p + 1], h[p + 1:], exclude_self=exclude_self)
    return local, h


def _summarise(local):
    ok = np.isfinite(local)
    return float(np.mean(local[ok])) if ok.any() else float("nan"), int((~ok).sum())


def te_kernel(series: TimeSeriesSet, source, target, history: HistorySpec = HistorySpec(1),
              bandwidth="auto", local: bool = False, exclude_self: bool = True) -> TeEstimate:
    """Kernel plug-in TE evaluated at the sample points.

    Parameters
    ----------
    bandwidth : "auto", float or array of length ``2p + 1``
        Product-kernel widths ordered (target now, target history, source
        history). ``"auto"`` applies Silverman's rule to each column with
        the joint dimension ``2p + 1``.
    exclude_self : bool
        Drop each point's own kernel from its density sums (leave-one-out).
    """
    s, t, _ = _resolve(series, source, target, ())
    vals, h = _kernel_estimate(series, s, t, history, bandwidth, exclude_self)
    value, dropped = _summarise(vals)
    return TeEstimate(value, "kernel", history, s, t, bandwidth=h,
                      local_values=vals if local else None, n_excluded=dropped,
                      channel_names=series.channel_names)


def te_local(series: TimeSeriesSet, source, target, history: HistorySpec = HistorySpec(1),
             estimator: str = "gaussian", **kwargs) -> TeEstimate:
    """TE with per-sample local values; ``value`` is their mean."""
    if estimator == "gaussian":
        return te_gaussian(series, source, target, history, local=True, **kwargs)
    if estimator == "kernel":
        return te_kernel(series, source, target, history, local=True, **kwargs)
    raise ValidationError(f"unknown estimator {estimator!r}")


def te_permutation_test(series: TimeSeriesSet, source, target,
                        history: HistorySpec = HistorySpec(1), estimator: str = "gaussian",
                        n_perm: int = 199, seed: int = 0, **kwargs) -> TeEstimate:
    """Surrogate p-value for TE.

    The source is trial-shuffled when there are several trials, otherwise
    circularly shifted by at least ``p * lag_step + delay + 1`` samples.
    """
    from .resampling import SurrogateScheme, surrogate_pvalue

    if n_perm < 99:
        raise ValidationError(f"n_perm must be >= 99, got {n_perm}")
    fn = {"gaussian": te_gaussian, "kernel": te_kernel}.get(estimator)
    if fn is None:
        raise ValidationError(f"unknown estimator {estimator!r}")
    kind = "trial-shuffle" if series.n_trials > 1 else "circular-shift"
    scheme = SurrogateScheme.for_history(kind, n_perm, seed, history)
    est = fn(series, source, target, history, **kwargs)
    p, _ = surrogate_pvalue(lambda x: fn(x, source, target, history, **kwargs).value,
                            series, scheme, [source], observed=est.value)
    est.p_value = float(p)
    est.n_surrogates = n_perm
    return est


def _nn_squared_errors(values, history, start, k):
    X, Y = lagged_design(values, history, start=start)
    tree = cKDTree(X)
    _, idx = tree.query(X, k=k + 1)
    # drop the query point itself; exact duplicates may displace it from slot 0
    is_self = idx == np.arange(X.shape[0])[:, None]
    order = np.argsort(is_self, axis=1, kind="stable")
    neighbours = np.take_along_axis(idx, order, axis=1)[:, :k]
    pred = Y[neighbours, 0].mean(axis=1)
    return (Y[:, 0] - pred) ** 2


def select_embedding(series: TimeSeriesSet, target, p_max: int = 4, tau_max: int = 4,
                     n_neighbors: int | None = None) -> HistorySpec:
    """Grid search of embedding dimension and delay for one channel.

    Each candidate predicts ``y_t`` by the mean of its ``n_neighbors`` nearest
    neighbours in history space (the point itself excluded), on rows shared
    by all candidates. Among candidates ordered by ``p`` then ``tau``, the
    first whose mean squared error is within two paired standard errors of
    the best is chosen, so extra dimensions must earn their keep.
    ``n_neighbors`` defaults to the square root of the row count.
    """
    if p_max < 1 or tau_max < 1:
        raise ValidationError("p_max and tau_max must be >= 1")
    t = series.channel_index(target)
    values = series.values[:, :, [t]]
    start = 1 + (p_max - 1) * tau_max
    if n_neighbors is None:
        n_neighbors = max(4, int(np.sqrt(series.n_trials * (series.n_times - start))))
    candidates, errors = [], []
    for p in range(1, p_max + 1):
        for tau in range(1, tau_max + 1):
            if p == 1 and tau > 1:
                continue  # identical embedding to tau = 1
            h = HistorySpec(p, 0, tau)
            candidates.append(h)
            errors.append(_nn_squared_errors(values, h, start, n_neighbors))
    errors = np.array(errors)
    means = errors.mean(axis=1)
    best = int(np.argmin(means))
    n = errors.shape[1]
    for i, h in enumerate(candidates):
        diff = errors[i] - errors[best]
        se = diff.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
        if means[i] <= means[best] + 2.0 * se:
            return h
    return candidates[best]
