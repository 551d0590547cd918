"""Ground-truth generators: stationary and time-varying Gaussian VARs."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .data import TimeSeriesSet
from .errors import UnstableSpec, ValidationError

__all__ = [
    "GeneratorSpec",
    "simulate",
    "builtin_scenarios",
    "scenario",
    "companion_radius",
    "SCENARIO_VERSION",
]

SCENARIO_VERSION = "1"
KINDS = ("stationary-var", "step-coupling", "sinusoidal-coupling", "chain-trivariate")


def companion_radius(coeffs: np.ndarray) -> np.ndarray:
    """Spectral radius of the companion matrix.

    ``coeffs`` is ``(p, d, d)`` or a stack ``(..., p, d, d)``; lags are 1..p.
    """
    coeffs = np.asarray(coeffs, dtype=float)
    *batch, p, d, _ = coeffs.shape
    comp = np.zeros((*batch, d * p, d * p))
    comp[..., :d, :] = np.concatenate([coeffs[..., j, :, :] for j in range(p)], axis=-1)
    if p > 1:
        comp[..., d:, :-d] = np.eye(d * (p - 1))
    return np.max(np.abs(np.linalg.eigvals(comp)), axis=-1)


@dataclass(frozen=True)
class GeneratorSpec:
    """Recipe for a simulated multi-trial VAR data set.

    ``coeffs`` is the ``(p, d, d)`` base coefficient array. For the
    time-varying kinds, ``schedule`` names the entry that moves:
    ``{"lag": j, "row": l, "col": m, ...}`` plus ``before/after/onset`` for a
    step or ``amplitude`` (and optional ``period``, in samples) for a sine.
    """

    kind: str
    coeffs: np.ndarray
    noise_cov: np.ndarray
    n_times: int
    n_trials: int = 1
    seed: int = 0
    burn_in: int = 500
    schedule: dict = field(default_factory=dict)
    channel_names: tuple = ()
    name: str = ""
    version: str = SCENARIO_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown generator kind {self.kind!r}")
        c = np.asarray(self.coeffs, dtype=float)
        if c.ndim == 2:
            c = c[None]
        object.__setattr__(self, "coeffs", c)
        object.__setattr__(self, "noise_cov", np.atleast_2d(np.asarray(self.noise_cov, dtype=float)))
        if self.seed is None:
            raise ValidationError("a seed is required")

    @property
    def dim(self) -> int:
        return self.coeffs.shape[1]

    @property
    def order(self) -> int:
        return self.coeffs.shape[0]

    def replace(self, **changes) -> "GeneratorSpec":
        return dataclasses.replace(self, **changes)

    @property
    def time_varying(self) -> bool:
        return self.kind in ("step-coupling", "sinusoidal-coupling")

    def schedule_values(self, t: np.ndarray) -> np.ndarray:
        """Value of the moving coefficient at sample indices ``t``."""
        s = self.schedule
        t = np.asarray(t, dtype=float)
        if self.kind == "step-coupling":
            onset = s.get("onset", 0.5) * self.n_times
            return np.where(t < onset, s.get("before", 0.0), s.get("after", 0.5))
        if self.kind == "sinusoidal-coupling":
            period = s.get("period", self.n_times)
            return s.get("amplitude", 0.4) * np.sin(2 * np.pi * t / period)
        raise ValidationError(f"{self.kind} has no coefficient schedule")

    def coefficient_path(self) -> np.ndarray:
        """Coefficients at every output sample, shape ``(T, p, d, d)``."""
        path = np.broadcast_to(self.coeffs, (self.n_times, *self.coeffs.shape)).copy()
        if self.time_varying:
            s = self.schedule
            path[:, s.get("lag", 0), s["row"], s["col"]] = self.schedule_values(
                np.arange(self.n_times))
        return path

    def truth(self) -> dict:
        out = {
            "name": self.name,
            "kind": self.kind,
            "version": self.version,
            "seed": self.seed,
            "n_times": self.n_times,
            "n_trials": self.n_trials,
            "burn_in": self.burn_in,
            "channel_names": list(self.channel_names),
            "coeffs": self.coeffs.tolist(),
            "noise_cov": self.noise_cov.tolist(),
            "schedule": dict(self.schedule),
        }
        if self.time_varying:
            out["coefficient_path"] = self.coefficient_path().tolist()
        return out


def _check_stable(spec: GeneratorSpec):
    if spec.time_varying:
        # a step has two regimes; a sine is checked on its full sampled path
        if spec.kind == "step-coupling":
            s = spec.schedule
            probes = np.array([0.0, spec.n_times])
            path = np.broadcast_to(spec.coeffs, (2, *spec.coeffs.shape)).copy()
            path[:, s.get("lag", 0), s["row"], s["col"]] = spec.schedule_values(probes)
        else:
            path = spec.coefficient_path()
        radius = companion_radius(path)
    else:
        radius = np.atleast_1d(companion_radius(spec.coeffs))
    worst = float(np.max(radius))
    if worst >= 1.0:
        raise UnstableSpec(f"companion spectral radius {worst:.6g} >= 1",
                           spectral_radius=worst)


def simulate(spec: GeneratorSpec) -> TimeSeriesSet:
    """Draw ``spec.n_trials`` independent trials.

    Innovations are Gaussian with covariance ``spec.noise_cov``; each trial
    runs ``burn_in`` extra samples under the initial coefficients, which are
    discarded. Trial ``k`` uses the ``k``-th child of ``SeedSequence(seed)``,
    so output is bit-identical for a fixed spec.
    """
    _check_stable(spec)
    p, d = spec.order, spec.dim
    T, B = spec.n_times, spec.burn_in
    chol = np.linalg.cholesky(spec.noise_cov) if np.any(spec.noise_cov) else np.zeros((d, d))
    # stacked (d, d*p) coefficient row: column block j multiplies z[t-1-j]
    flat0 = np.concatenate(list(spec.coeffs), axis=1)
    if spec.time_varying:
        path = spec.coefficient_path()
        flat_path = np.concatenate([path[:, j] for j in range(p)], axis=2)
    children = np.random.SeedSequence(spec.seed).spawn(spec.n_trials)
    out = np.empty((spec.n_trials, T, d))
    for k, child in enumerate(children):
        rng = np.random.default_rng(child)
        noise = rng.standard_normal((B + T, d)) @ chol.T
        z = np.zeros((p + B + T, d))
        for i in range(B + T):
            t = p + i
            hist = z[t - p:t][::-1].ravel()
            if spec.time_varying and i >= B:
                a = flat_path[i - B]
            else:
                a = flat0
            z[t] = a @ hist + noise[i]
        out[k] = z[p + B:]
    names = spec.channel_names or tuple(f"ch{i}" for i in range(d))
    return TimeSeriesSet(out, channel_names=names)


def builtin_scenarios() -> dict:
    """Named generator specs used by the acceptance suite.

    Channel order follows the (target, source) layout where relevant:
    in ``unidir-var1`` channel 0 is Y and channel 1 is X, and X drives Y.
    """
    eye2 = np.eye(2)
    unidir = np.array([[[0.5, 0.4], [0.0, 0.7]]])
    null_pair = np.array([[[0.5, 0.0], [0.0, 0.7]]])
    chain = np.array([[[0.5, 0.0, 0.0],
                       [0.6, 0.5, 0.0],
                       [0.0, 0.6, 0.5]]])
    return {
        "unidir-var1": GeneratorSpec(
            "stationary-var", unidir, eye2, n_times=1000, channel_names=("Y", "X"),
            name="unidir-var1"),
        "null-ar-pair": GeneratorSpec(
            "stationary-var", null_pair, eye2, n_times=500, channel_names=("Y", "X"),
            name="null-ar-pair"),
        "step-onset": GeneratorSpec(
            "step-coupling", null_pair, eye2, n_times=2000, channel_names=("Y", "X"),
            schedule={"lag": 0, "row": 0, "col": 1, "before": 0.0, "after": 0.5, "onset": 0.5},
            name="step-onset"),
        "sinusoidal-coupling": GeneratorSpec(
            "sinusoidal-coupling", null_pair, eye2, n_times=2000, n_trials=20,
            channel_names=("Y", "X"),
            schedule={"lag": 0, "row": 0, "col": 1, "amplitude": 0.4},
            name="sinusoidal-coupling"),
        "chain-xwy": GeneratorSpec(
            "chain-trivariate", chain, np.eye(3), n_times=2000,
            channel_names=("X", "W", "Y"), name="chain-xwy"),
    }


def scenario(name: str, **overrides) -> GeneratorSpec:
    catalog = builtin_scenarios()
    if name not in catalog:
        raise ValidationError(f"unknown scenario {name!r}; choose from {sorted(catalog)}")
    spec = catalog[name]
    return spec.replace(**overrides) if overrides else spec
