import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from blindsisnr.audio import AudioSignal
from blindsisnr.errors import DegenerateSignalError, DegenerateStatisticsError, RateError, ShapeError
from blindsisnr.metrics import clip_db, mean_absolute_error, pearson, resolve_permutation, si_snr


def sisnr_bruteforce(ref, est):
    """Least-squares route: fit est ~ a*ref + b, compare fitted and residual energy."""
    ref = [float(v) for v in ref]
    est = [float(v) for v in est]
    design = np.column_stack([ref, np.ones(len(ref))])
    (a, b), *_ = np.linalg.lstsq(design, est, rcond=None)
    mr = sum(ref) / len(ref)
    fitted = [a * (r - mr) for r in ref]
    resid = [e - (a * r + b) for e, r in zip(est, ref)]
    return 10 * math.log10(sum(f * f for f in fitted) / sum(r * r for r in resid))


def test_hand_case():
    value = si_snr([1, -1, 1, -1], [1, -1, 1, 1])
    assert value == pytest.approx(-10 * math.log10(2), abs=5e-4)
    assert value == pytest.approx(-3.0103, abs=5e-4)
    assert sisnr_bruteforce([1, -1, 1, -1], [1, -1, 1, 1]) == pytest.approx(value, abs=1e-9)


def test_identity_is_infinite():
    s = np.random.default_rng(0).standard_normal(100)
    assert si_snr(s, s) == math.inf
    assert si_snr(s, -2.5 * s + 3.0) == math.inf


def test_scale_exact():
    rng = np.random.default_rng(1)
    s, e = rng.standard_normal(64), rng.standard_normal(64)
    assert si_snr(s, 3 * e) == pytest.approx(si_snr(s, e), abs=1e-12)


def test_matches_bruteforce():
    rng = np.random.default_rng(2)
    for _ in range(50):
        s = rng.standard_normal(50)
        e = s + rng.uniform(0.1, 3) * rng.standard_normal(50)
        assert si_snr(s, e) == pytest.approx(sisnr_bruteforce(s, e), abs=1e-8)


def test_errors():
    with pytest.raises(ShapeError):
        si_snr([1, 2, 3], [1, 2])
    with pytest.raises(DegenerateSignalError):
        si_snr([2, 2, 2], [1, 2, 3])
    with pytest.raises(RateError):
        si_snr(AudioSignal([1, 2], 8000), AudioSignal([1, 2], 16000))


def test_zero_estimate_is_minus_infinity():
    assert si_snr([1.0, -1.0, 2.0], [0.0, 0.0, 0.0]) == -math.inf


@settings(max_examples=100, deadline=None)
@given(
    st.integers(0, 2**31 - 1),
    st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3),
    st.floats(-10, 10),
)
def test_scale_and_shift_invariance(seed, alpha, shift):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal(128)
    e = s + rng.uniform(0.05, 5) * rng.standard_normal(128)
    base = si_snr(s, e)
    assert si_snr(s, alpha * e) == pytest.approx(base, abs=1e-6)
    assert si_snr(s, e + shift) == pytest.approx(base, abs=1e-6)


def _orthogonal_pair(n=400):
    t = np.arange(n)
    return np.sin(2 * np.pi * 5 * t / n), np.cos(2 * np.pi * 11 * t / n)


def test_permutation_swapped():
    a, b = _orthogonal_pair()
    res = resolve_permutation([a, b], [b, a])
    assert res.mapping == ((0, 1), (1, 0))
    assert res.per_pair_sisnr == (math.inf, math.inf)


def test_permutation_identity():
    a, b = _orthogonal_pair()
    res = resolve_permutation([a, b], [a, b])
    assert res.mapping == ((0, 0), (1, 1))
    assert res.per_pair_sisnr == (math.inf, math.inf)


def test_permutation_tie_prefers_identity():
    a, _ = _orthogonal_pair()
    res = resolve_permutation([a, a], [a, a])
    assert res.mapping == ((0, 0), (1, 1))


def test_permutation_inf_beats_finite():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal(200), rng.standard_normal(200)
    # assignment (0->0, 1->1) has one perfect pair; the swap has two good but finite pairs
    est0 = a
    est1 = a + 0.01 * b
    res = resolve_permutation([a, b], [est0, est1])
    assert res.per_pair_sisnr[0] == math.inf


def exhaustive(truths, estimates):
    best = None
    for perm in itertools.permutations(range(len(truths))):
        vals = [sisnr_bruteforce(truths[i], estimates[perm[i]]) for i in range(len(truths))]
        total = sum(vals)
        if best is None or total > best[0]:
            best = (total, perm, vals)
    return best


def test_permutation_matches_exhaustive_search():
    rng = np.random.default_rng(4)
    for _ in range(100):
        truths = [rng.standard_normal(60) for _ in range(2)]
        noisy = [t + rng.uniform(0.2, 2) * rng.standard_normal(60) for t in truths]
        swap = rng.random() < 0.5
        estimates = noisy[::-1] if swap else noisy
        _, perm, vals = exhaustive(truths, estimates)
        res = resolve_permutation(truths, estimates)
        assert res.mapping == tuple(enumerate(perm))
        np.testing.assert_allclose(res.per_pair_sisnr, vals, atol=1e-8)
        assert res.estimate_for(0) == (1 if swap else 0)


def test_pearson_cases():
    xs = np.array([1.0, 2.0, 3.0, 4.0])
    assert pearson(xs, 2 * xs + 1) == pytest.approx(1.0, abs=1e-9)
    assert pearson(xs, -xs) == pytest.approx(-1.0, abs=1e-9)
    assert pearson([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-12)
    assert stats.pearsonr([1, 2, 3, 4], [1, 3, 2, 4])[0] == pytest.approx(0.8, abs=1e-12)


def test_pearson_degenerate():
    with pytest.raises(DegenerateStatisticsError):
        pearson([1, 1, 1], [1, 2, 3])
    with pytest.raises(DegenerateStatisticsError):
        pearson([1], [2])
    with pytest.raises(ShapeError):
        pearson([1, 2, 3], [1, 2])


@settings(max_examples=80, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-3, 1e3), st.floats(-1e3, 1e3))
def test_pearson_properties(seed, a, b):
    rng = np.random.default_rng(seed)
    xs, ys = rng.standard_normal(30), rng.standard_normal(30)
    r = pearson(xs, ys)
    assert r == pytest.approx(stats.pearsonr(xs, ys)[0], abs=1e-12)
    assert pearson(ys, xs) == pytest.approx(r, abs=1e-12)
    assert pearson(a * xs + b, ys) == pytest.approx(r, abs=1e-9)


def test_mae():
    assert mean_absolute_error([1, 2, 3], [1, 2, 3]) == 0.0
    assert mean_absolute_error([0, 0], [1, 3]) == 2.0
    rng = np.random.default_rng(5)
    x, y = rng.standard_normal(40), rng.standard_normal(40)
    assert mean_absolute_error(x, y) == pytest.approx(sum(abs(a - b) for a, b in zip(x, y)) / 40, abs=1e-12)
    with pytest.raises(ShapeError):
        mean_absolute_error([1, 2], [1])


def test_clip_db():
    assert clip_db(math.inf) == 10.0
    assert clip_db(-math.inf) == 0.0
    assert clip_db(4.5) == 4.5
