"""Time-varying VAR estimation and per-time causality.

Coefficient states are ``phi = coeffs.ravel()`` with ``coeffs`` shaped
``(p, d, d)``, i.e. element ``j*d*d + l*d + m`` is the lag-``j`` influence of
channel ``m`` on channel ``l``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.interpolate import BSpline

from .data import HistorySpec, TimeSeriesSet, lagged_design
from .errors import (
    CovarianceBlowup,
    Divergence,
    InsufficientSamples,
    LikelihoodDecrease,
    MissingStateCov,
    SingularDesign,
    SingularExpandedDesign,
    SingularTheta,
    ValidationError,
    VariantTrialMismatch,
    WindowTooShort,
)
from .spectral import (
    DEFAULT_N_FREQS,
    dtf_matrix,
    frequency_grid,
    geweke_spectral_gc,
    pdc_matrix,
    spectral_decompose,
)
from .var import COND_THRESHOLD, VarModel, fit_var, ols

__all__ = [
    "KalmanConfig",
    "TvVarTrajectory",
    "TvCausalityResult",
    "R_VARIANTS",
    "Q_VARIANTS",
    "update_r",
    "observation_matrices",
    "tv_var_window",
    "tv_var_kalman",
    "tv_var_adaptive",
    "kalman_em",
    "tv_var_basis",
    "basis_matrix",
    "tv_causality",
]

R_VARIANTS = ("schack", "milde_multitrial", "constant_1", "constant_1_minus_UC",
              "jazwinski", "penny", "zero", "fixed")
Q_VARIANTS = ("akay_haykin", "isaksson", "jazwinski_penny", "fixed")
EXPERIMENTAL = ("jazwinski", "penny", "jazwinski_penny")

COV_BOUND = 1e6
INNOVATION_RATIO_BOUND = 5.0


@dataclass(frozen=True)
class KalmanConfig:
    """Settings for the state-space VAR filter.

    ``A`` defaults to the identity. ``Q`` / ``R`` are used by the ``fixed``
    variants; ``R0`` seeds the adaptive R rules (default identity).
    ``init_state_cov`` defaults to the identity.
    """

    uc: float = 0.01
    q_variant: str = "isaksson"
    r_variant: str = "schack"
    A: np.ndarray | None = None
    Q: np.ndarray | None = None
    R: np.ndarray | None = None
    R0: np.ndarray | None = None
    init_state: np.ndarray | None = None
    init_state_cov: np.ndarray | None = None
    cov_bound: float = COV_BOUND
    average_trials: bool = False

    def __post_init__(self):
        if not 0.0 < self.uc < 1.0:
            raise ValidationError(f"UC must lie in (0, 1), got {self.uc}")
        if self.q_variant not in Q_VARIANTS:
            raise ValidationError(f"q_variant must be one of {Q_VARIANTS}, got {self.q_variant!r}")
        if self.r_variant not in R_VARIANTS:
            raise ValidationError(f"r_variant must be one of {R_VARIANTS}, got {self.r_variant!r}")
        if self.init_state_cov is not None:
            P0 = np.atleast_2d(np.asarray(self.init_state_cov, dtype=float))
            if not np.allclose(P0, P0.T) or np.linalg.eigvalsh(P0).min() < -1e-12:
                raise ValidationError("init_state_cov must be symmetric positive semidefinite")

    @property
    def experimental(self) -> bool:
        return self.q_variant in EXPERIMENTAL or self.r_variant in EXPERIMENTAL

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.asarray(a).tolist()
        return {
            "uc": self.uc, "q_variant": self.q_variant, "r_variant": self.r_variant,
            "A": arr(self.A), "Q": arr(self.Q), "R": arr(self.R), "R0": arr(self.R0),
            "init_state": arr(self.init_state), "init_state_cov": arr(self.init_state_cov),
            "cov_bound": self.cov_bound, "average_trials": self.average_trials,
        }


@dataclass
class TvVarTrajectory:
    times: np.ndarray                 # (n,) sample indices (window centres for windows)
    states: np.ndarray                # (n, d*d*p)
    history: HistorySpec
    dim: int
    method: str
    state_cov: np.ndarray | None = None     # (n, D, D)
    innovations: np.ndarray | None = None   # (K, n, d)
    noise_cov: np.ndarray | None = None     # (n, d, d)
    config: dict = field(default_factory=dict)
    channels: tuple = ()
    sampling_rate: float = 1.0
    warnings: list = field(default_factory=list)
    log_likelihood: float | None = None

    @property
    def order(self) -> int:
        return self.history.order

    @property
    def n_times(self) -> int:
        return len(self.times)

    def coeff_path(self) -> np.ndarray:
        return self.states.reshape(-1, self.order, self.dim, self.dim)

    def coeffs_at(self, i: int) -> np.ndarray:
        return self.states[i].reshape(self.order, self.dim, self.dim)

    def causal_index(self, source: int, target: int) -> np.ndarray:
        d = self.dim
        return np.array([j * d * d + target * d + source for j in range(self.order)])

    def to_dict(self, include_cov: bool = False) -> dict:
        out = {
            "method": self.method,
            "dim": self.dim,
            "history": self.history.to_dict(),
            "channels": list(self.channels),
            "config": self.config,
            "times": self.times,
            "states": self.states,
            "warnings": list(self.warnings),
            "log_likelihood": self.log_likelihood,
        }
        if include_cov and self.state_cov is not None:
            out["state_cov"] = self.state_cov
        return out

    def table_rows(self):
        """Rows ``(time_s, lag, target, source, value)`` for long-format export."""
        path = self.coeff_path()
        for i, t in enumerate(self.times):
            for j in range(self.order):
                for l in range(self.dim):
                    for m in range(self.dim):
                        yield (float(t) / self.sampling_rate, j + 1,
                               self._name(l), self._name(m), float(path[i, j, l, m]))

    def _name(self, i):
        return self.channels[i] if self.channels else i


def _channels(series, channels):
    if channels is None:
        channels = range(series.n_channels)
    return [series.channel_index(c) for c in channels]


def observation_matrices(X: np.ndarray, d: int, p: int) -> np.ndarray:
    """Map lagged regressor rows ``(..., d*p)`` to ``C_t`` of shape ``(..., d, d*d*p)``."""
    lead = X.shape[:-1]
    Xj = X.reshape(*lead, p, d)                       # [.., j, m]
    eye = np.eye(d)
    C = np.einsum("lk,...jm->...ljkm", eye, Xj)       # [.., l, j, k, m]
    return C.reshape(*lead, d, p * d * d)


def _coef_covariance(noise_cov: np.ndarray, xtx_inv: np.ndarray, p: int, d: int) -> np.ndarray:
    """Covariance of ``coeffs.ravel()`` for OLS: ``Sigma[l,l'] * (X'X)^-1[jm, j'm']``."""
    G = xtx_inv[:d * p, :d * p].reshape(p, d, p, d)
    cov = np.einsum("LM,jmkn->jLmkMn", noise_cov, G)
    D = p * d * d
    return cov.reshape(D, D)


# --- sliding windows ----------------------------------------------------------

def tv_var_window(series: TimeSeriesSet, channels=None, history: HistorySpec = HistorySpec(1),
                  window_len: int | None = None, step: int | None = None,
                  **fit_kwargs) -> TvVarTrajectory:
    """Stationary VAR fits in sliding windows, pooling trials within each window.

    States are stamped at the window centre. Defaults: ``window_len =
    max(10*d*p, 100)`` and ``step = window_len // 4``.
    """
    idx = _channels(series, channels)
    d, p = len(idx), history.order
    if window_len is None:
        window_len = max(10 * d * p, 100)
    if step is None:
        step = max(1, window_len // 4)
    if window_len < 3 * d * p:
        raise WindowTooShort(f"window_len={window_len} < 3*d*p={3 * d * p}")
    if step < 1:
        raise ValidationError("step must be >= 1")
    T = series.n_times
    if window_len > T:
        raise WindowTooShort(f"window_len={window_len} exceeds series length {T}")
    starts = range(0, T - window_len + 1, step)
    times, states, covs, noise = [], [], [], []
    for s in starts:
        sub = series.replace(series.values[:, s:s + window_len])
        model, diag = fit_var(sub, idx, history, **fit_kwargs)
        times.append(s + (window_len - 1) / 2.0)
        states.append(model.coeffs.ravel())
        covs.append(_coef_covariance(model.noise_cov, diag.xtx_inv, p, d))
        noise.append(model.noise_cov)
    return TvVarTrajectory(
        np.array(times), np.array(states), history, d, "window",
        state_cov=np.array(covs), noise_cov=np.array(noise),
        config={"window_len": window_len, "step": step},
        channels=tuple(series.channel_names[i] for i in idx),
        sampling_rate=series.sampling_rate)


# --- Kalman filtering ---------------------------------------------------------

def update_r(variant: str, R_prev, e, uc: float, q=None, n_trials: int | None = None):
    """One step of an adaptive observation-noise rule.

    Returns ``(R_state, R_gain)``: the carried-over estimate and the value
    used in the current gain. ``e`` is the prior innovation (``(d,)``, or
    ``(K, d)`` for ``milde_multitrial``); ``q = C P_pred C'`` feeds the
    Jazwinski/Penny rules.
    """
    R_prev = np.atleast_2d(np.asarray(R_prev, dtype=float))
    e = np.asarray(e, dtype=float)
    if variant == "schack":
        e = e.reshape(-1)
        new = (1 - uc) * R_prev + uc * np.outer(e, e)
        return new, new
    if variant == "milde_multitrial":
        E = e.reshape(n_trials, -1)
        new = (1 - uc) * R_prev + uc * (E.T @ E) / (n_trials - 1)
        return new, new
    if variant in ("jazwinski", "penny"):
        e = e.reshape(-1)
        q = np.atleast_2d(q)
        if e @ e > np.trace(q):
            new = (1 - uc) * R_prev + uc * (np.outer(e, e) - q)
        else:
            new = R_prev
        return new, (new if variant == "jazwinski" else R_prev)
    raise ValidationError(f"{variant!r} is not an adaptive R rule")


def _pinv_sym(S):
    w, V = np.linalg.eigh(S)
    floor = np.maximum(1e-12 * np.abs(w).max(axis=-1, keepdims=True), 1e-200)
    keep = w > floor
    winv = np.divide(1.0, w, out=np.zeros_like(w), where=keep)
    return (V * winv[..., None, :]) @ np.swapaxes(V, -1, -2)


def _inv(S):
    """Batched inverse; near-singular members fall back to a pseudo-inverse."""
    try:
        Si = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        return _pinv_sym(S)
    with np.errstate(all="ignore"):
        err = np.abs(S @ Si - np.eye(S.shape[-1])).max(axis=(-2, -1))
    bad = ~(err < 1e-6)
    if np.any(bad):
        Si[bad] = _pinv_sym(S[bad])
    return Si


def _forward(Z, C, cfg: KalmanConfig, x0, P0, A, Q_fixed, R_fixed, R0, shared_trials=None):
    """Batched Kalman filter over ``B`` independent sequences.

    ``Z`` is ``(B, n, dz)`` and ``C`` is ``(B, n, dz, D)``. With
    ``shared_trials=K`` the observation stacks ``K`` trials on one state and
    R is the per-trial block of the Milde rule.
    """
    B, n, dz = Z.shape
    D = C.shape[-1]
    uc = cfg.uc
    x = np.broadcast_to(x0, (B, D)).copy()
    P = np.broadcast_to(P0, (B, D, D)).copy()
    bound = max(cfg.cov_bound, 10.0 * float(np.trace(P0)))
    eyeD = np.eye(D)
    d_r = R0.shape[0]
    Rs = np.broadcast_to(R0, (B, d_r, d_r)).copy()
    qv, rv = cfg.q_variant, cfg.r_variant
    if qv == "isaksson":
        Q = np.broadcast_to(uc ** 2 * eyeD, (B, D, D)).copy()
    elif qv == "akay_haykin":
        Q = uc * P
    elif qv == "jazwinski_penny":
        Q = np.zeros((B, D, D))
    else:
        Q = np.broadcast_to(Q_fixed, (B, D, D)).copy()
    L = np.zeros(B)
    static_r = {"fixed": R_fixed, "zero": np.zeros((dz, dz)), "constant_1": np.eye(dz),
                "constant_1_minus_UC": (1 - uc) * np.eye(dz)}.get(rv)
    identity_A = np.array_equal(A, eyeD)
    At = A.T
    Ct = np.swapaxes(C, -1, -2)
    eye_k = np.eye(shared_trials) if shared_trials else None

    xf = np.empty((B, n, D))
    Pf = np.empty((B, n, D, D))
    xp = np.empty((B, n, D))
    Pp = np.empty((B, n, D, D))
    innov = np.empty((B, n, dz))
    Ss = np.empty((B, n, dz, dz))
    for i in range(n):
        if identity_A:
            x_pred, P_pred = x, P + Q
        else:
            x_pred, P_pred = x @ At, A @ P @ At + Q
        Ci = C[:, i]
        e = Z[:, i] - (Ci @ x_pred[..., None])[..., 0]
        CP = Ci @ P_pred
        q = CP @ Ct[:, i]
        if static_r is not None:
            S = q + static_r
        else:
            R_gain = np.empty((B, dz, dz))
            for b in range(B):
                Rs[b], rg = update_r(rv, Rs[b], e[b], uc, q[b], shared_trials)
                R_gain[b] = np.kron(eye_k, rg) if shared_trials else rg
            S = q + R_gain
        Kt = np.swapaxes(_inv(S) @ CP, -1, -2)          # P_pred C' S^-1
        x = x_pred + (Kt @ e[..., None])[..., 0]
        P = P_pred - Kt @ CP
        P = 0.5 * (P + np.swapaxes(P, -1, -2))
        xf[:, i], Pf[:, i], xp[:, i], Pp[:, i], innov[:, i], Ss[:, i] = x, P, x_pred, P_pred, e, S
        tr = np.trace(P, axis1=-2, axis2=-1)
        if not (np.all(np.isfinite(tr)) and np.all(np.isfinite(x))):
            raise Divergence(f"Kalman recursion produced non-finite values at step {i}", step=i)
        if not np.all(tr <= bound):
            raise CovarianceBlowup(
                f"state covariance trace {float(np.max(tr)):.3g} exceeds {bound:.3g} at step {i}",
                step=i)
        if qv == "akay_haykin":
            Q = uc * P
        elif qv == "jazwinski_penny":
            cc = np.einsum("bkD,bkD->b", Ci, Ci)
            with np.errstate(divide="ignore", invalid="ignore"):
                inc = np.where(cc > 0, (np.einsum("bk,bk->b", e, e)
                                        - np.trace(S, axis1=-2, axis2=-1)) / cc, 0.0)
            L = (1 - uc) * L + uc * inc
            Q = np.maximum(L, 0.0)[:, None, None] * eyeD
    _, logdet = np.linalg.slogdet(Ss)
    quad = np.einsum("btk,btk->bt", innov, (_inv(Ss) @ innov[..., None])[..., 0])
    loglik = float(np.sum(-0.5 * (logdet + quad + dz * np.log(2 * np.pi))))
    return xf, Pf, xp, Pp, innov, loglik


def _smooth(xf, Pf, xp, Pp, A, lag_one=False):
    """Rauch-Tung-Striebel pass; optionally lag-one covariances ``Cov(x_t, x_{t-1} | all)``."""
    B, n, D = xf.shape
    xs = xf.copy()
    Ps = Pf.copy()
    # G_t = Pf_t A' Pp_{t+1}^-1, all t at once
    G = Pf[:, :-1] @ A.T @ _inv(Pp[:, 1:])
    Gt = np.swapaxes(G, -1, -2)
    for i in range(n - 2, -1, -1):
        xs[:, i] += (G[:, i] @ (xs[:, i + 1] - xp[:, i + 1])[..., None])[..., 0]
        Ps[:, i] += G[:, i] @ (Ps[:, i + 1] - Pp[:, i + 1]) @ Gt[:, i]
    Ps = 0.5 * (Ps + np.swapaxes(Ps, -1, -2))
    lag = None
    if lag_one:
        lag = np.zeros((B, n, D, D))
        lag[:, 1:] = Ps[:, 1:] @ Gt
    return xs, Ps, lag


def _state_space_inputs(series, idx, history):
    d, p = len(idx), history.order
    values = series.values[:, :, idx]
    K = values.shape[0]
    Xs, Zs = [], []
    for k in range(K):
        X, Y = lagged_design(values[k], history)
        Xs.append(X)
        Zs.append(Y)
    X = np.stack(Xs)
    Z = np.stack(Zs)
    if X.shape[1] < 1:
        raise InsufficientSamples("no usable samples for the chosen history")
    C = observation_matrices(X, d, p)
    times = np.arange(history.max_lag, series.n_times, dtype=float)
    return Z, C, times


def _defaults(cfg: KalmanConfig, D: int, d: int):
    A = np.eye(D) if cfg.A is None else np.asarray(cfg.A, dtype=float)
    Q = np.zeros((D, D)) if cfg.Q is None else np.asarray(cfg.Q, dtype=float)
    R = np.eye(d) if cfg.R is None else np.atleast_2d(np.asarray(cfg.R, dtype=float))
    R0 = np.eye(d) if cfg.R0 is None else np.atleast_2d(np.asarray(cfg.R0, dtype=float))
    x0 = np.zeros(D) if cfg.init_state is None else np.asarray(cfg.init_state, dtype=float)
    P0 = np.eye(D) if cfg.init_state_cov is None else np.asarray(cfg.init_state_cov, dtype=float)
    return A, Q, R, R0, x0, P0


def tv_var_kalman(series: TimeSeriesSet, channels=None, history: HistorySpec = HistorySpec(1),
                  config: KalmanConfig = KalmanConfig(), smooth: bool = False) -> TvVarTrajectory:
    """Kalman filter (optionally RTS smoother) on the random-walk coefficient model.

    Observation noise R and state noise Q follow the selected adaptive
    variants. ``milde_multitrial`` shares one state across all trials; the
    other variants need a single trial unless ``config.average_trials`` is
    set, in which case each trial is filtered on its own and the states
    are averaged (an approximation).
    """
    idx = _channels(series, channels)
    d, p = len(idx), history.order
    D = d * d * p
    K = series.n_trials
    cfg = config
    if cfg.r_variant == "milde_multitrial":
        if K < 2:
            raise VariantTrialMismatch("milde_multitrial needs at least two trials")
    elif K > 1 and not cfg.average_trials:
        raise VariantTrialMismatch(
            f"R variant {cfg.r_variant!r} is single-trial; got {K} trials "
            "(set average_trials to filter trials separately)")
    A, Q, R, R0, x0, P0 = _defaults(cfg, D, d)
    Z, C, times = _state_space_inputs(series, idx, history)
    shared = None
    if cfg.r_variant == "milde_multitrial":
        n = Z.shape[1]
        Z = np.swapaxes(Z, 0, 1).reshape(1, n, K * d)
        C = np.swapaxes(C, 0, 1).reshape(1, n, K * d, D)
        R = np.kron(np.eye(K), R)
        shared = K
    xf, Pf, xp, Pp, innov, ll = _forward(Z, C, cfg, x0, P0, A, Q, R, R0, shared)
    if smooth:
        xs, Ps, _ = _smooth(xf, Pf, xp, Pp, A)
    else:
        xs, Ps = xf, Pf
    B = xs.shape[0]
    states = xs.mean(axis=0)
    cov = Ps.mean(axis=0) / B
    innovations = innov.reshape(1, -1, K, d).swapaxes(0, 2)[:, :, 0] if shared else innov
    warn = []
    if cfg.experimental:
        warn.append(f"experimental variant (Q={cfg.q_variant}, R={cfg.r_variant})")
    if B > 1:
        warn.append("trials filtered independently and averaged")
    return TvVarTrajectory(
        times, states, history, d, "kalman", state_cov=cov, innovations=innovations,
        config={**cfg.to_dict(), "smooth": smooth},
        channels=tuple(series.channel_names[i] for i in idx),
        sampling_rate=series.sampling_rate, warnings=warn, log_likelihood=ll)


# --- LMS / RLS ----------------------------------------------------------------

def tv_var_adaptive(series: TimeSeriesSet, channels=None, history: HistorySpec = HistorySpec(1),
                    method: str = "rls", uc: float = 0.01,
                    init_cov: float = 1e3) -> TvVarTrajectory:
    """LMS gradient or exponentially weighted RLS tracking of VAR coefficients.

    LMS: ``phi <- phi + UC * C' e``. RLS uses forgetting factor ``1 - UC``.
    Trials are processed separately and their states averaged. A
    trajectory whose innovation variance exceeds 5x the data variance is
    flagged in ``warnings``; non-finite or exploding innovations raise
    :class:`Divergence`.
    """
    if method not in ("lms", "rls"):
        raise ValidationError(f"method must be 'lms' or 'rls', got {method!r}")
    if not 0.0 < uc < 1.0:
        raise ValidationError(f"UC must lie in (0, 1), got {uc}")
    idx = _channels(series, channels)
    d, p = len(idx), history.order
    D = d * d * p
    Z, C, times = _state_space_inputs(series, idx, history)
    B, n, _ = Z.shape
    scale = float(np.sqrt(np.mean(Z ** 2))) or 1.0
    limit = 1e6 * scale
    lam = 1.0 - uc
    phi = np.zeros((B, D))
    P = np.broadcast_to(init_cov * np.eye(D), (B, D, D)).copy()
    s2 = np.full(B, scale ** 2)
    states = np.empty((B, n, D))
    covs = np.empty((B, n, D, D)) if method == "rls" else None
    innov = np.empty((B, n, d))
    eye_d = np.eye(d)
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n):
            Ci = C[:, i]
            e = Z[:, i] - np.einsum("bkD,bD->bk", Ci, phi)
            if not np.all(np.isfinite(e)) or np.max(np.abs(e)) > limit:
                raise Divergence(f"{method.upper()} innovations diverged at step {i} (UC={uc})",
                                 step=i, uc=uc)
            if method == "lms":
                phi = phi + uc * np.einsum("bkD,bk->bD", Ci, e)
            else:
                CP = Ci @ P
                S = lam * eye_d + CP @ np.swapaxes(Ci, -1, -2)
                Kt = np.swapaxes(np.linalg.solve(S, CP), -1, -2)
                phi = phi + np.einsum("bDk,bk->bD", Kt, e)
                P = (P - Kt @ CP) / lam
                P = 0.5 * (P + np.swapaxes(P, -1, -2))
                s2 = lam * s2 + (1 - lam) * np.einsum("bk,bk->b", e, e) / d
                if not np.all(np.isfinite(P)):
                    raise Divergence(f"RLS gain matrix diverged at step {i} (UC={uc})",
                                     step=i, uc=uc)
                covs[:, i] = P * (s2 / (1 + lam))[:, None, None]
            states[:, i] = phi
            innov[:, i] = e
    warn = []
    ratio = float(np.mean(innov ** 2) / np.mean(Z ** 2))
    if ratio > INNOVATION_RATIO_BOUND:
        warn.append(f"noisy trajectory: innovation variance is {ratio:.3g}x the data variance")
    if B > 1:
        warn.append("trials processed independently and averaged")
    return TvVarTrajectory(
        times, states.mean(axis=0), history, d, method,
        state_cov=None if covs is None else covs.mean(axis=0) / B,
        innovations=innov, config={"uc": uc, "init_cov": init_cov},
        channels=tuple(series.channel_names[i] for i in idx),
        sampling_rate=series.sampling_rate, warnings=warn)


# --- EM for Q and R -----------------------------------------------------------

def kalman_em(series: TimeSeriesSet, channels=None, history: HistorySpec = HistorySpec(1),
              n_iter: int = 50, fix_A_identity: bool = True, Q0=None, R0=None,
              init_state=None, init_state_cov=None, tol: float = 1e-8):
    """Maximum-likelihood Q, R (and optionally A) by EM on the state-space VAR.

    E-step: Kalman filter and RTS smoother with lag-one covariances, shared
    parameters across trials. M-step: closed-form updates of A (unless fixed
    to the identity), Q, R and the initial state mean; the initial state
    covariance stays fixed. The log-likelihood must not drop by more than
    ``tol`` (relative) between iterations. Defaults: ``Q0 = 1e-4 I``, ``R0``
    from the stationary fit, zero initial state with identity covariance.

    Returns
    -------
    (KalmanConfig, TvVarTrajectory)
        The trajectory holds the smoothed states under the final parameters
        and ``config["log_likelihood_path"]``.
    """
    if n_iter < 1:
        raise ValidationError("n_iter must be >= 1")
    idx = _channels(series, channels)
    d, p = len(idx), history.order
    D = d * d * p
    Z, C, times = _state_space_inputs(series, idx, history)
    B, n, _ = Z.shape
    if R0 is None:
        model, _ = fit_var(series, idx, history)
        R = model.noise_cov_ml.copy()
    else:
        R = np.atleast_2d(np.asarray(R0, dtype=float))
    Q = 1e-4 * np.eye(D) if Q0 is None else np.asarray(Q0, dtype=float)
    A = np.eye(D)
    x0 = np.zeros(D) if init_state is None else np.asarray(init_state, dtype=float)
    P0 = np.eye(D) if init_state_cov is None else np.asarray(init_state_cov, dtype=float)
    cfg_fixed = KalmanConfig(q_variant="fixed", r_variant="fixed", cov_bound=np.inf)
    Ct = np.swapaxes(C, -1, -2)
    path = []
    for it in range(n_iter + 1):
        xf, Pf, xp, Pp, _, ll = _forward(Z, C, cfg_fixed, x0, P0, A, Q, R, R)
        if path and ll < path[-1] - tol * max(1.0, abs(path[-1])):
            raise LikelihoodDecrease(
                f"EM log-likelihood fell from {path[-1]:.10g} to {ll:.10g} at iteration {it}",
                iteration=it)
        path.append(ll)
        xs, Ps, lag = _smooth(xf, Pf, xp, Pp, A, lag_one=True)
        if it == n_iter:
            break
        outer = Ps + np.einsum("bti,btj->btij", xs, xs)
        S11 = outer[:, 1:].sum(axis=(0, 1))
        S00 = outer[:, :-1].sum(axis=(0, 1))
        S10 = (lag[:, 1:] + np.einsum("bti,btj->btij", xs[:, 1:], xs[:, :-1])).sum(axis=(0, 1))
        m = B * (n - 1)
        if not fix_A_identity:
            A = np.linalg.solve(S00.T, S10.T).T
        Q = (S11 - A @ S10.T - S10 @ A.T + A @ S00 @ A.T) / m
        Q = 0.5 * (Q + Q.T)
        resid = Z - np.einsum("btkD,btD->btk", C, xs)
        R = (np.einsum("btk,btl->kl", resid, resid)
             + np.einsum("btkD,btDE,btEl->kl", C, Ps, Ct)) / (B * n)
        R = 0.5 * (R + R.T)
        x0 = xs[:, 0].mean(axis=0)
    cfg = KalmanConfig(q_variant="fixed", r_variant="fixed", A=A, Q=Q, R=R,
                       init_state=x0, init_state_cov=P0)
    traj = TvVarTrajectory(
        times, xs.mean(axis=0), history, d, "kalman-em",
        state_cov=Ps.mean(axis=0) / B, innovations=None,
        config={**cfg.to_dict(), "smooth": True, "n_iter": n_iter,
                "fix_A_identity": fix_A_identity, "log_likelihood_path": path},
        channels=tuple(series.channel_names[i] for i in idx),
        sampling_rate=series.sampling_rate, log_likelihood=path[-1])
    return cfg, traj


# --- basis expansion ----------------------------------------------------------

def basis_matrix(n_times: int, n_basis: int, kind: str = "spline") -> np.ndarray:
    """Time basis evaluated at samples ``0..n_times-1``, shape ``(n_times, n_basis)``.

    ``spline``: clamped B-splines of degree ``min(3, n_basis - 1)`` with
    uniform interior knots. ``wavelet``: Haar system (constant, then
    wavelets ordered by scale and shift), truncated to ``n_basis``.
    """
    if n_basis < 1:
        raise ValidationError("n_basis must be >= 1")
    t = np.arange(n_times, dtype=float)
    if n_basis == 1:
        return np.ones((n_times, 1))
    if kind == "spline":
        k = min(3, n_basis - 1)
        n_inner = n_basis - k - 1
        lo, hi = 0.0, float(n_times - 1)
        inner = np.linspace(lo, hi, n_inner + 2)[1:-1]
        knots = np.concatenate([np.full(k + 1, lo), inner, np.full(k + 1, hi)])
        return BSpline.design_matrix(t, knots, k).toarray()
    if kind in ("wavelet", "wavelet-like", "haar"):
        u = t / n_times
        cols = [np.ones(n_times)]
        j = 0
        while len(cols) < n_basis:
            for s in range(2 ** j):
                if len(cols) == n_basis:
                    break
                a, mid, b = s / 2 ** j, (s + 0.5) / 2 ** j, (s + 1) / 2 ** j
                cols.append(np.where((u >= a) & (u < mid), 1.0,
                                     np.where((u >= mid) & (u < b), -1.0, 0.0)))
            j += 1
        return np.column_stack(cols)
    raise ValidationError(f"unknown basis {kind!r}")


def tv_var_basis(series: TimeSeriesSet, channels=None, history: HistorySpec = HistorySpec(1),
                 n_basis: int = 8, basis: str = "spline", max_iter: int = 20,
                 tol: float = 1e-6) -> TvVarTrajectory:
    """Dynamic VAR with coefficients expanded on a time basis.

    Each coefficient is ``sum_k beta_k b_k(t)``. After an OLS start, each
    round regresses squared residuals on the basis to get a time-varying
    noise variance per equation and refits by weighted least squares with
    weights ``1 / var(t)``, until coefficients move less than ``tol`` or
    ``max_iter`` rounds have run.
    """
    idx = _channels(series, channels)
    d, p = len(idx), history.order
    T, L = series.n_times, history.max_lag
    Bfull = basis_matrix(T, n_basis, basis)
    values = series.values[:, :, idx]
    K = values.shape[0]
    X, Y = lagged_design(values, history)
    Bt = np.tile(Bfull[L:], (K, 1))                       # basis at each row
    n = X.shape[0]
    ncol = d * p * n_basis
    if ncol >= n:
        raise SingularExpandedDesign(f"{ncol} expanded regressors for {n} rows")
    Xe = (X[:, :, None] * Bt[:, None, :]).reshape(n, ncol)  # column c*n_basis + k
    try:
        beta, resid, _ = ols(Xe, Y)
    except SingularDesign as exc:
        raise SingularExpandedDesign(str(exc), **exc.details) from None
    var_t = np.empty((n, d))
    gram_inv = [None] * d
    for it in range(max_iter):
        new = np.empty_like(beta)
        for l in range(d):
            g, *_ = np.linalg.lstsq(Bt, resid[:, l] ** 2, rcond=None)
            v = Bt @ g
            floor = 1e-3 * np.mean(resid[:, l] ** 2)
            var_t[:, l] = np.maximum(v, floor)
            w = 1.0 / np.sqrt(var_t[:, l])
            new[:, l], *_ = np.linalg.lstsq(Xe * w[:, None], Y[:, l] * w, rcond=None)
        change = float(np.max(np.abs(new - beta)))
        beta = new
        resid = Y - Xe @ beta
        if change < tol:
            break
    for l in range(d):
        Xw = Xe / np.sqrt(var_t[:, l])[:, None]
        gram_inv[l] = np.linalg.inv(Xw.T @ Xw)

    Bu = Bfull[L:]                                        # (n_t, n_basis)
    beta4 = beta.reshape(d * p, n_basis, d)               # [c, k, l]
    coef = np.einsum("tk,ckl->tlc", Bu, beta4)            # [t, l, c] with c = j*d + m
    coef = coef.reshape(-1, d, p, d).transpose(0, 2, 1, 3)  # [t, j, l, m]
    states = coef.reshape(len(Bu), -1)
    n_t = len(Bu)
    D = d * d * p
    cov = np.zeros((n_t, D, D))
    for l in range(d):
        cb = gram_inv[l].reshape(d * p, n_basis, d * p, n_basis)
        block = np.einsum("tk,ckel,tl->tce", Bu, cb, Bu)  # (n_t, dp, dp)
        pos = np.array([j * d * d + l * d + m for j in range(p) for m in range(d)])
        cov[:, pos[:, None], pos[None, :]] = block
    # time-varying noise variance per equation, first trial's rows
    noise = np.zeros((n_t, d, d))
    noise[:, np.arange(d), np.arange(d)] = var_t[:n_t]
    innov = resid.reshape(K, n_t, d)
    return TvVarTrajectory(
        np.arange(L, T, dtype=float), states, history, d, "basis", state_cov=cov,
        innovations=innov, noise_cov=noise,
        config={"n_basis": n_basis, "basis": basis, "iterations": it + 1},
        channels=tuple(series.channel_names[i] for i in idx),
        sampling_rate=series.sampling_rate)


# --- per-time causality -------------------------------------------------------

@dataclass
class TvCausalityResult:
    source: int
    target: int
    kind: str
    times: np.ndarray
    values: np.ndarray                 # (n,) or (n, N_f)
    freqs: np.ndarray | None = None
    p_values: np.ndarray | None = None
    df: int | None = None
    sampling_rate: float = 1.0
    channel_names: tuple = field(default=(), repr=False)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        def name(i):
            return self.channel_names[i] if self.channel_names else i
        out = {
            "statistic": f"tv-{self.kind}",
            "source": name(self.source),
            "target": name(self.target),
            "time_s": self.times / self.sampling_rate,
            "values": self.values,
            "warnings": list(self.warnings),
        }
        if self.freqs is not None:
            out["freq_hz"] = self.freqs * self.sampling_rate
        if self.p_values is not None:
            out["p_values"] = self.p_values
            out["df"] = self.df
        return out

    def long_rows(self):
        """``(time_s, value)`` or ``(time_s, freq_hz, value)`` rows."""
        t_s = self.times / self.sampling_rate
        if self.freqs is None:
            for t, v in zip(t_s, self.values):
                yield (float(t), float(v))
        else:
            f_hz = self.freqs * self.sampling_rate
            for t, row in zip(t_s, self.values):
                for f, v in zip(f_hz, row):
                    yield (float(t), float(f), float(v))


def _windowed_noise_cov(traj: TvVarTrajectory, window: int) -> np.ndarray:
    if traj.innovations is None:
        raise MissingStateCov("trajectory carries neither noise covariance nor innovations")
    E = traj.innovations                              # (K, n, d)
    n = E.shape[1]
    outer = np.einsum("kti,ktj->tij", E, E)
    csum = np.concatenate([np.zeros((1, *outer.shape[1:])), np.cumsum(outer, axis=0)])
    half = window // 2
    lo = np.clip(np.arange(n) - half, 0, n)
    hi = np.clip(np.arange(n) - half + window, 0, n)
    counts = (hi - lo) * E.shape[0]
    return (csum[hi] - csum[lo]) / counts[:, None, None]


def tv_causality(traj: TvVarTrajectory, source: int, target: int, statistic: str = "wald",
                 n_freqs: int = 64, noise_window: int | None = None,
                 max_innovation_corr: float = 0.1, stride: int = 1) -> TvCausalityResult:
    """Per-time causality from a coefficient trajectory.

    ``wald``: ``W_t = b' V^-1 b`` over the source-lag coefficients of the
    target equation, against chi-squared with ``p`` degrees of freedom.
    ``spectral_ggc``/``dtf``/``pdc``: the frequency statistic of the VAR
    snapshot at each time, giving a time-frequency map. The snapshot noise
    covariance is the trajectory's own when available, otherwise a centred
    moving average of innovation outer products (``noise_window`` samples,
    default ``max(10*d*p, 100)``). Snapshots at or beyond a unit root give
    NaN rows and a warning.
    """
    statistic = statistic.lower()
    sel = np.arange(0, traj.n_times, stride)
    times = traj.times[sel]
    ci = traj.causal_index(source, target)
    if statistic == "wald":
        if traj.state_cov is None:
            raise MissingStateCov(f"{traj.method} trajectory has no state covariance")
        b = traj.states[sel][:, ci]
        V = traj.state_cov[sel][:, ci[:, None], ci[None, :]]
        W = np.zeros(len(sel))
        nz = np.any(b != 0, axis=1)
        if nz.any():
            sol = np.linalg.solve(V[nz], b[nz][..., None])[..., 0]
            W[nz] = np.einsum("ti,ti->t", b[nz], sol)
        pv = stats.chi2.sf(W, traj.order)
        return TvCausalityResult(source, target, "wald", times, W, p_values=pv,
                                 df=traj.order, sampling_rate=traj.sampling_rate,
                                 channel_names=traj.channels)
    if statistic not in ("spectral_ggc", "ggc", "dtf", "pdc"):
        raise ValidationError(f"unknown statistic {statistic!r}")
    if traj.noise_cov is not None:
        noise = traj.noise_cov
    else:
        w = noise_window or max(10 * traj.dim * traj.order, 100)
        noise = _windowed_noise_cov(traj, w)
    freqs = frequency_grid(n_freqs)
    out = np.full((len(sel), n_freqs), np.nan)
    bad = 0
    for r, i in enumerate(sel):
        model = VarModel(traj.coeffs_at(i), noise[i], n_obs=1, history=traj.history)
        try:
            dec = spectral_decompose(model, freqs=freqs)
        except SingularTheta:
            bad += 1
            continue
        if statistic in ("spectral_ggc", "ggc"):
            out[r] = geweke_spectral_gc(dec, source, target, max_innovation_corr).values
        elif statistic == "dtf":
            out[r] = dtf_matrix(dec)[:, target, source]
        else:
            out[r] = pdc_matrix(dec)[:, target, source]
    warn = []
    if bad:
        warn.append(f"{bad} snapshots at or beyond a unit root were left as NaN")
        warnings.warn(warn[-1], RuntimeWarning, stacklevel=2)
    kind = "ggc" if statistic == "spectral_ggc" else statistic
    return TvCausalityResult(source, target, kind, times, out, freqs=freqs,
                             sampling_rate=traj.sampling_rate, channel_names=traj.channels,
                             warnings=warn)
