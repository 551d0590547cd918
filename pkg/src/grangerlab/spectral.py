"""Frequency-domain causality from a fitted VAR.

Frequencies are normalised (cycles per sample) on a uniform grid over
``[0, 0.5]``; physical frequencies are ``freq * sampling_rate``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .data import HistorySpec, TimeSeriesSet
from .errors import (
    CorrelatedInnovations,
    SingularTheta,
    ValidationError,
    ZeroColumn,
    ZeroRow,
)
from .var import VarModel, fit_var

__all__ = [
    "SpectralDecomposition",
    "SpectralCausalityResult",
    "frequency_grid",
    "frequency_average",
    "spectral_decompose",
    "geweke_spectral_gc",
    "spectral_gc_f_test",
    "dtf",
    "pdc",
    "dtf_matrix",
    "pdc_matrix",
    "innovation_correlation",
    "spectral_statistic",
    "spectral_significance_surrogate",
]

DEFAULT_N_FREQS = 512
UNIT_CIRCLE_TOL = 1e-6
THETA_COND_LIMIT = 1e12


def frequency_grid(n_freqs: int = DEFAULT_N_FREQS) -> np.ndarray:
    if n_freqs < 2:
        raise ValidationError(f"n_freqs must be >= 2, got {n_freqs}")
    return np.linspace(0.0, 0.5, n_freqs)


def frequency_average(values: np.ndarray, axis: int = -1) -> np.ndarray:
    """Mean over the full circle of a real, even function sampled on ``[0, 0.5]``.

    Uses trapezoid weights on the uniform half-grid, which is the plain
    average over the symmetric extension to ``[-0.5, 0.5)``.
    """
    values = np.moveaxis(np.asarray(values), axis, -1)
    w = np.ones(values.shape[-1])
    w[0] = w[-1] = 0.5
    return values @ w / w.sum()


@dataclass
class SpectralDecomposition:
    freqs: np.ndarray       # (N_f,)
    theta: np.ndarray       # (N_f, d, d) complex
    transfer: np.ndarray    # (N_f, d, d) complex
    spectrum: np.ndarray    # (N_f, d, d) complex
    source_model: VarModel = field(repr=False)


@dataclass
class SpectralCausalityResult:
    source: int
    target: int
    kind: str
    freqs: np.ndarray
    values: np.ndarray
    sampling_rate: float = 1.0
    p_values: np.ndarray | None = None
    df: tuple | None = None
    extra: dict = field(default_factory=dict)
    channel_names: tuple = field(default=(), repr=False)

    @property
    def freq_hz(self) -> np.ndarray:
        return self.freqs * self.sampling_rate

    def to_dict(self) -> dict:
        def name(i):
            return self.channel_names[i] if self.channel_names else i
        points = []
        for i, (f, v) in enumerate(zip(self.freq_hz, self.values)):
            pt = {"freq_hz": float(f), "value": float(v)}
            if self.p_values is not None:
                pt["p_value"] = float(self.p_values[i])
            points.append(pt)
        out = {
            "statistic": self.kind,
            "source": name(self.source),
            "target": name(self.target),
            "points": points,
        }
        if self.df is not None:
            out["df"] = list(self.df)
        for key, val in self.extra.items():
            out[key] = val
        return out


def _lag_polynomial_roots(model: VarModel) -> np.ndarray:
    """Eigenvalues of the companion matrix of the fitted lag polynomial."""
    d = model.dim
    L = model.history.max_lag
    full = np.zeros((L, d, d))
    for j, lag in enumerate(model.history.lags):
        full[lag - 1] += model.coeffs[j]
    comp = np.zeros((d * L, d * L))
    comp[:d, :] = np.concatenate(list(full), axis=1)
    if L > 1:
        comp[d:, :-d] = np.eye(d * (L - 1))
    return np.linalg.eigvals(comp)


def spectral_decompose(model: VarModel, n_freqs: int = DEFAULT_N_FREQS,
                       freqs: np.ndarray | None = None) -> SpectralDecomposition:
    """Coefficient transform, transfer matrix and spectral matrix on a grid.

    ``theta(f) = I - sum_j A_j exp(-2 pi i f lag_j)``, ``H = theta^-1`` and
    ``S = H Sigma H*`` with ``Sigma = model.noise_cov``.

    Raises
    ------
    SingularTheta
        If a root of the lag polynomial lies on (or outside) the unit
        circle, or theta is numerically singular at a grid point.
    """
    if freqs is None:
        freqs = frequency_grid(n_freqs)
    freqs = np.asarray(freqs, dtype=float)
    d = model.dim
    if model.order and np.any(model.coeffs):
        roots = _lag_polynomial_roots(model)
        mags = np.abs(roots)
        i = int(np.argmax(mags))
        if mags[i] >= 1.0 - UNIT_CIRCLE_TOL:
            f0 = abs(float(np.angle(roots[i]))) / (2 * np.pi)
            raise SingularTheta(
                f"lag polynomial root of modulus {mags[i]:.9g} at frequency {f0:.6g} "
                f"(cycles/sample): model is at or beyond nonstationarity",
                frequency=f0, modulus=float(mags[i]))
    phase = np.exp(-2j * np.pi * np.outer(freqs, model.history.lags))   # (N_f, p)
    theta = np.eye(d)[None] - np.einsum("fj,jlm->flm", phase, model.coeffs)
    with np.errstate(all="ignore"):
        cond = np.linalg.cond(theta)
    bad = ~np.isfinite(cond) | (cond > THETA_COND_LIMIT)
    if bad.any():
        f0 = float(freqs[np.argmax(bad)])
        raise SingularTheta(f"theta is singular at frequency {f0:.6g}", frequency=f0)
    H = np.linalg.inv(theta)
    S = H @ model.noise_cov @ np.conj(np.swapaxes(H, -1, -2))
    return SpectralDecomposition(freqs, theta, H, S, model)


def innovation_correlation(model: VarModel, a: int = 0, b: int = 1) -> float:
    c = model.noise_cov
    return float(c[a, b] / np.sqrt(c[a, a] * c[b, b]))


def _names(decomp):
    return decomp.source_model.channels


def _rate(decomp, sampling_rate):
    return 1.0 if sampling_rate is None else sampling_rate


def geweke_spectral_gc(decomp: SpectralDecomposition, source: int, target: int,
                       max_innovation_corr: float = 0.1,
                       sampling_rate: float | None = None) -> SpectralCausalityResult:
    """Geweke spectral causality ``ln(S_tt / (H_tt Sigma_tt H_tt*))``.

    Needs a bivariate model with near-uncorrelated innovations. The plain
    power ratio is kept in ``extra["ratio"]``.
    """
    model = decomp.source_model
    if model.dim != 2:
        raise ValidationError(f"spectral GGC needs a bivariate model, got dim {model.dim}")
    if source == target or {source, target} != {0, 1}:
        raise ValidationError("source and target must be the two model channels")
    rho = innovation_correlation(model, target, source)
    if abs(rho) >= max_innovation_corr:
        raise CorrelatedInnovations(
            f"innovation correlation {rho:.4f} exceeds {max_innovation_corr}",
            correlation=rho, threshold=max_innovation_corr)
    total = decomp.spectrum[:, target, target].real
    h = decomp.transfer[:, target, target]
    intrinsic = (h * model.noise_cov[target, target] * np.conj(h)).real
    ratio = total / intrinsic
    return SpectralCausalityResult(
        source, target, "ggc", decomp.freqs, np.log(ratio),
        sampling_rate=_rate(decomp, sampling_rate),
        extra={"ratio": ratio.tolist()}, channel_names=_names(decomp))


def spectral_gc_f_test(result: SpectralCausalityResult, model: VarModel) -> SpectralCausalityResult:
    """Approximate pointwise p-values: ``n * f / p`` against ``F(p, n - 2p)``.

    The mapping is a large-sample approximation; surrogates are the
    reference method.
    """
    p, n = model.order, model.n_obs
    df = (p, n - 2 * p)
    stat = n * np.asarray(result.values) / p
    pv = np.where(stat > 0, stats.f.sf(np.maximum(stat, 0.0), *df), 1.0)
    result.p_values = pv
    result.df = df
    result.extra = {**result.extra, "p_value_method": "approx-f"}
    return result


def dtf_matrix(decomp: SpectralDecomposition, normalized: bool = True) -> np.ndarray:
    """DTF for every (target, source) pair, shape ``(N_f, d, d)``.

    Normalised rows are divided by the total inflow to the target, so each
    row's squares sum to one.
    """
    mag2 = np.abs(decomp.transfer) ** 2
    if not normalized:
        return np.sqrt(mag2)
    inflow = mag2.sum(axis=2, keepdims=True)
    if np.any(inflow <= 0):
        raise ZeroRow("transfer matrix row with zero total inflow")
    return np.sqrt(mag2 / inflow)


def pdc_matrix(decomp: SpectralDecomposition, printed_form: bool = False) -> np.ndarray:
    """PDC magnitude for every (target, source) pair, shape ``(N_f, d, d)``.

    Columns are normalised by the total outflow from the source. With
    ``printed_form`` the denominator is the squared column norm (no square
    root), kept for compatibility.
    """
    theta = decomp.theta
    col2 = (np.abs(theta) ** 2).sum(axis=1, keepdims=True)
    if np.any(col2 <= 0):
        raise ZeroColumn("coefficient-transform column with zero outflow")
    denom = col2 if printed_form else np.sqrt(col2)
    return np.abs(theta) / denom


def dtf(decomp: SpectralDecomposition, source: int, target: int, normalized: bool = True,
        sampling_rate: float | None = None) -> SpectralCausalityResult:
    if decomp.source_model.dim < 2:
        raise ValidationError("DTF needs at least two channels")
    vals = dtf_matrix(decomp, normalized)[:, target, source]
    return SpectralCausalityResult(
        source, target, "dtf" if normalized else "dtf-raw", decomp.freqs, vals,
        sampling_rate=_rate(decomp, sampling_rate), channel_names=_names(decomp))


def pdc(decomp: SpectralDecomposition, source: int, target: int, printed_form: bool = False,
        sampling_rate: float | None = None) -> SpectralCausalityResult:
    if decomp.source_model.dim < 2:
        raise ValidationError("PDC needs at least two channels")
    vals = pdc_matrix(decomp, printed_form)[:, target, source]
    return SpectralCausalityResult(
        source, target, "pdc-printed" if printed_form else "pdc", decomp.freqs, vals,
        sampling_rate=_rate(decomp, sampling_rate), channel_names=_names(decomp))


_STATISTICS = ("ggc", "dtf", "pdc")


def spectral_statistic(series: TimeSeriesSet, source, target, history: HistorySpec,
                       statistic: str = "dtf", n_freqs: int = DEFAULT_N_FREQS,
                       channels=None, max_innovation_corr: float = 0.1,
                       warn: bool = True) -> SpectralCausalityResult:
    """Fit a VAR on ``channels`` and evaluate one spectral statistic.

    ``source`` and ``target`` are series channels; ``channels`` defaults to
    ``(target, source)``.
    """
    statistic = statistic.lower()
    if statistic not in _STATISTICS:
        raise ValidationError(f"statistic must be one of {_STATISTICS}, got {statistic!r}")
    s, t = series.channel_index(source), series.channel_index(target)
    if channels is None:
        channels = (t, s)
    channels = [series.channel_index(c) for c in channels]
    if s not in channels or t not in channels:
        raise ValidationError("source and target must be among the model channels")
    model, _ = fit_var(series, channels, history)
    decomp = spectral_decompose(model, n_freqs)
    si, ti = channels.index(s), channels.index(t)
    if statistic == "ggc":
        res = geweke_spectral_gc(decomp, si, ti, max_innovation_corr, series.sampling_rate)
    else:
        if warn and model.dim == 2 and abs(innovation_correlation(model)) >= max_innovation_corr:
            warnings.warn("innovations are correlated; DTF/PDC ignore the noise covariance",
                          RuntimeWarning, stacklevel=2)
        fn = dtf if statistic == "dtf" else pdc
        res = fn(decomp, si, ti, sampling_rate=series.sampling_rate)
    res.source, res.target = s, t
    res.channel_names = series.channel_names
    return res


def spectral_significance_surrogate(series: TimeSeriesSet, source, target,
                                    history: HistorySpec = HistorySpec(1),
                                    statistic: str = "dtf", n_surrogates: int = 199,
                                    strategy: str = "circular-shift", seed: int = 0,
                                    n_freqs: int = DEFAULT_N_FREQS, channels=None,
                                    max_innovation_corr: float = 0.1,
                                    return_null: bool = False):
    """Pointwise surrogate p-values for a spectral statistic.

    The source channel is trial-shuffled or circularly shifted to break its
    link with the target; the VAR is refitted on every surrogate and
    ``p(f) = (1 + #{null(f) >= observed(f)}) / (1 + n_surrogates)``.
    """
    from .resampling import SurrogateScheme, surrogate_pvalue

    scheme = SurrogateScheme.for_history(strategy, n_surrogates, seed, history)

    def stat(x):
        return spectral_statistic(x, source, target, history, statistic, n_freqs,
                                  channels, max_innovation_corr, warn=False).values

    observed = spectral_statistic(series, source, target, history, statistic, n_freqs,
                                  channels, max_innovation_corr)
    pv, null = surrogate_pvalue(stat, series, scheme, [source], observed=observed.values)
    observed.p_values = pv
    observed.extra = {**observed.extra, "p_value_method": f"surrogate:{strategy}",
                      "n_surrogates": n_surrogates}
    if return_null:
        return observed, null
    return observed
