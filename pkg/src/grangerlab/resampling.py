"""Surrogate null distributions and multiple-comparison corrections."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from ._parallel import pmap
from .data import HistorySpec, TimeSeriesSet
from .errors import OutOfRangeP, SchemeInfeasible, TooFewTrialsForShuffle, ValidationError

__all__ = [
    "SurrogateScheme",
    "make_surrogate",
    "surrogate_pvalue",
    "empirical_pvalue",
    "correct_multiplicity",
    "write_null_csv",
]

KINDS = ("trial-shuffle", "circular-shift", "block-permutation")


@dataclass(frozen=True)
class SurrogateScheme:
    """How surrogate data sets are drawn.

    ``min_shift`` bounds circular offsets away from 0 and T so that shifted
    histories never realign with the original. ``block_len`` applies to
    block permutation only.
    """

    kind: str
    n_surrogates: int = 199
    seed: int = 0
    block_len: int | None = None
    min_shift: int = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"surrogate kind must be one of {KINDS}, got {self.kind!r}")
        if self.seed is None:
            raise ValidationError("a seed is required")
        if self.n_surrogates < 1:
            raise ValidationError("n_surrogates must be >= 1")
        if self.block_len is not None and self.block_len < 1:
            raise ValidationError("block_len must be >= 1")

    @classmethod
    def for_history(cls, kind: str, n_surrogates: int, seed: int,
                    history: HistorySpec, block_len: int | None = None) -> "SurrogateScheme":
        """Scheme with the shift floor and block length derived from a history."""
        p, tau, delay = history.order, history.lag_step, history.delay
        if kind == "block-permutation" and block_len is None:
            block_len = 10 * p
        return cls(kind, n_surrogates, seed, block_len, min_shift=p * tau + delay + 1)


def _derangement(k: int, rng: np.random.Generator) -> np.ndarray:
    while True:
        perm = rng.permutation(k)
        if not np.any(perm == np.arange(k)):
            return perm


def make_surrogate(values: np.ndarray, scheme: SurrogateScheme, channels,
                   rng: np.random.Generator) -> np.ndarray:
    """Resample ``channels`` of a ``(K, T, d)`` array; other channels are untouched."""
    out = np.array(values, dtype=float, copy=True)
    K, T, _ = out.shape
    ch = list(channels)
    if scheme.kind == "trial-shuffle":
        if K < 2:
            raise TooFewTrialsForShuffle("trial shuffling needs at least two trials", trials=K)
        perm = _derangement(K, rng)
        out[:, :, ch] = values[perm][:, :, ch]
    elif scheme.kind == "circular-shift":
        lo, hi = scheme.min_shift, T - scheme.min_shift
        if hi < lo:
            raise SchemeInfeasible(
                f"series of length {T} too short for circular shifts >= {scheme.min_shift}")
        shifts = rng.integers(lo, hi + 1, size=K)
        for k in range(K):
            out[k][:, ch] = np.roll(values[k][:, ch], shifts[k], axis=0)
    else:
        L = scheme.block_len or 1
        n_blocks = -(-T // L)
        if n_blocks < 2:
            raise SchemeInfeasible(f"block length {L} leaves fewer than two blocks")
        for k in range(K):
            order = rng.permutation(n_blocks)
            idx = np.concatenate([np.arange(b * L, min((b + 1) * L, T)) for b in order])
            out[k][:, ch] = values[k][idx][:, ch]
    return out


def empirical_pvalue(observed, null: np.ndarray) -> np.ndarray:
    """``(1 + #{null >= observed}) / (1 + n)`` elementwise over the statistic shape."""
    null = np.asarray(null, dtype=float)
    count = np.sum(null >= np.asarray(observed, dtype=float), axis=0)
    return (1.0 + count) / (1.0 + null.shape[0])


def surrogate_pvalue(statistic_fn, series: TimeSeriesSet, scheme: SurrogateScheme,
                     channels, observed=None):
    """Surrogate test of ``statistic_fn`` (larger = more evidence).

    Surrogate ``i`` draws from the ``i``-th child of ``SeedSequence(seed)``,
    so the p-value and null samples are reproducible whatever the thread
    count. The statistic may be scalar or array-valued; p-values follow its
    shape.

    Returns
    -------
    (p, null_samples)
    """
    ch = [series.channel_index(c) for c in channels]
    if observed is None:
        observed = statistic_fn(series)
    children = np.random.SeedSequence(scheme.seed).spawn(scheme.n_surrogates)
    # fail fast on infeasible schemes before spawning work
    make_surrogate(series.values, scheme, ch, np.random.default_rng(0))

    def one(child):
        rng = np.random.default_rng(child)
        return np.asarray(statistic_fn(series.replace(make_surrogate(series.values, scheme, ch, rng))),
                          dtype=float)

    null = np.array(pmap(one, children))
    p = empirical_pvalue(observed, null)
    if p.ndim == 0:
        p = float(p)
    return p, null


def correct_multiplicity(p_values, method: str = "bonferroni") -> np.ndarray:
    """Adjust p-values for multiple comparisons (Bonferroni or Benjamini-Hochberg)."""
    p = np.asarray(p_values, dtype=float)
    if p.size and (np.any(~np.isfinite(p)) or p.min() < 0 or p.max() > 1):
        raise OutOfRangeP("p-values must lie in [0, 1]")
    n = p.size
    if n == 0:
        return p.copy()
    method = method.lower()
    flat = p.ravel()
    if method == "bonferroni":
        adj = np.minimum(1.0, n * flat)
    elif method in ("benjamini-hochberg", "bh", "fdr_bh"):
        order = np.argsort(flat, kind="stable")
        ranked = flat[order] * n / np.arange(1, n + 1)
        ranked = np.minimum.accumulate(ranked[::-1])[::-1]
        adj = np.empty(n)
        adj[order] = np.minimum(1.0, ranked)
    else:
        raise ValidationError(f"unknown correction {method!r}")
    return adj.reshape(p.shape)


def write_null_csv(path, null: np.ndarray, observed=None):
    """One row per surrogate; columns are statistic components."""
    null = np.asarray(null, dtype=float).reshape(len(null), -1)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["surrogate", *[f"stat_{i}" for i in range(null.shape[1])]])
        if observed is not None:
            w.writerow(["observed", *(repr(float(x)) for x in np.ravel(observed))])
        for i, row in enumerate(null):
            w.writerow([i, *(repr(float(x)) for x in row)])
