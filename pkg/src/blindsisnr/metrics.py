"""Oracle SI-SNR, permutation resolution and evaluation statistics."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .audio import AudioSignal, as_samples, check_same_rate
from .errors import DegenerateSignalError, DegenerateStatisticsError, ShapeError

# residual energy below this fraction of the target energy counts as a perfect estimate
PERFECT_RATIO = 1e-12


def _centered_pair(reference, estimate) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(reference, AudioSignal) and isinstance(estimate, AudioSignal):
        check_same_rate(reference, estimate)
    s = as_samples(reference)
    s_hat = as_samples(estimate)
    if s.shape != s_hat.shape:
        raise ShapeError(f"length mismatch: reference {s.shape[0]} vs estimate {s_hat.shape[0]}")
    if s.shape[0] < 2:
        raise ShapeError("SI-SNR needs at least 2 samples")
    return s - s.mean(), s_hat - s_hat.mean()


def si_snr(reference, estimate) -> float:
    """Scale-invariant SNR of ``estimate`` against ``reference`` in dB.

    Both inputs are mean-subtracted, the estimate is projected onto the
    reference, and the ratio of projected to residual energy is returned.
    Returns ``math.inf`` when the residual is negligible and ``-math.inf``
    when the estimate has no component along the reference.
    """
    s, s_hat = _centered_pair(reference, estimate)
    ref_energy = float(np.dot(s, s))
    raw = as_samples(reference)
    if ref_energy <= 1e-24 * max(float(np.dot(raw, raw)), np.finfo(np.float64).tiny):
        raise DegenerateSignalError("reference signal is constant")

    alpha = float(np.dot(s_hat, s)) / ref_energy
    target = alpha * s
    noise = s_hat - target
    target_energy = float(np.dot(target, target))
    noise_energy = float(np.dot(noise, noise))
    if noise_energy < PERFECT_RATIO * target_energy:
        return math.inf
    if target_energy == 0.0:
        return -math.inf
    return 10.0 * math.log10(target_energy / noise_energy)


@dataclass(frozen=True)
class PermutationAssignment:
    """Winning truth→estimate assignment (0-based indices) and its SI-SNRs."""

    mapping: tuple[tuple[int, int], ...]
    per_pair_sisnr: tuple[float, ...]

    def estimate_for(self, truth_index: int) -> int:
        return dict(self.mapping)[truth_index]

    def sisnr_for_estimate(self, estimate_index: int) -> float:
        for (_, e), value in zip(self.mapping, self.per_pair_sisnr):
            if e == estimate_index:
                return value
        raise KeyError(estimate_index)


def _score_key(values: Sequence[float]) -> tuple[int, int, float]:
    # +inf dominates any finite total; -inf is worse than any finite total
    pos = sum(1 for v in values if v == math.inf)
    neg = sum(1 for v in values if v == -math.inf)
    finite = math.fsum(v for v in values if math.isfinite(v))
    return (pos, -neg, finite)


def resolve_permutation(truths: Sequence, estimates: Sequence) -> PermutationAssignment:
    """Choose the truth/estimate assignment with the largest mean SI-SNR.

    All K! assignments are enumerated (K = 2 in practice). Ties go to the
    first assignment in lexicographic order, i.e. the identity.
    """
    if len(truths) != len(estimates):
        raise ShapeError(f"{len(truths)} truths vs {len(estimates)} estimates")
    k = len(truths)
    table = [[si_snr(truths[i], estimates[j]) for j in range(k)] for i in range(k)]

    best_perm = None
    best_key = None
    for perm in itertools.permutations(range(k)):
        key = _score_key([table[i][perm[i]] for i in range(k)])
        if best_key is None or key > best_key:
            best_perm, best_key = perm, key
    return PermutationAssignment(
        mapping=tuple((i, best_perm[i]) for i in range(k)),
        per_pair_sisnr=tuple(table[i][best_perm[i]] for i in range(k)),
    )


def _as_vector(xs, name: str) -> np.ndarray:
    arr = np.asarray(xs, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DegenerateStatisticsError(f"{name} contains non-finite values")
    return arr


def pearson(xs, ys) -> float:
    """Sample Pearson correlation coefficient."""
    x = _as_vector(xs, "xs")
    y = _as_vector(ys, "ys")
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] < 2:
        raise DegenerateStatisticsError("pearson needs at least 2 points")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx <= 1e-24 * max(float(np.dot(x, x)), 1e-300) or syy <= 1e-24 * max(float(np.dot(y, y)), 1e-300):
        raise DegenerateStatisticsError("pearson is undefined for a constant sequence")
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


def mean_absolute_error(xs, ys) -> float:
    x = np.asarray(xs, dtype=np.float64).reshape(-1)
    y = np.asarray(ys, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ShapeError(f"length mismatch: {x.shape[0]} vs {y.shape[0]}")
    if x.shape[0] == 0:
        raise ShapeError("mean_absolute_error needs at least one pair")
    return float(np.mean(np.abs(x - y)))


def clip_db(value: float, lo: float = 0.0, hi: float = 10.0) -> float:
    """Clamp an SI-SNR (possibly ±inf) into ``[lo, hi]``."""
    return float(min(hi, max(lo, value)))
