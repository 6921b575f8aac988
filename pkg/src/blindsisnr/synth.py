"""On-the-fly creation of training examples with exactly known oracle SI-SNR.

A training example is built in three stages:

1. two clean sources are (optionally) reverberated, power-balanced at a
   relative SNR in [0, 5] dB, summed, and corrupted with noise;
2. a *degrader* drawn from a pool turns the reverberant source images into
   two "separated" estimates, standing in for a pretrained separator;
3. the permutation between truths and estimates is resolved and the oracle
   SI-SNR of every estimate is computed and clipped to [0, 10] dB.

Degraders build a raw corrupted signal, split it into a part along the truth
and an orthogonal residual, and rescale the residual so that the SI-SNR hits
a target drawn uniformly from the degrader's severity range.
"""

from __future__ import annotations

import math
import os
import queue
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np
from scipy import signal as sps
from scipy.ndimage import gaussian_filter1d

from .audio import AudioSignal, check_same_rate
from .errors import DataError, DegenerateSignalError, ParameterError
from .metrics import clip_db, resolve_permutation, si_snr

DEFAULT_SAMPLE_RATE = 8000
PEAK_LEVEL = 0.9

KINDS = ("residual-interference", "additive-noise", "lowpass-smear", "combined")
STAGES = ("early", "middle", "late")
POOL_KINDS = ("residual-interference", "additive-noise", "lowpass-smear")

# target SI-SNR ranges (dB, before clipping to [0, 10]); later checkpoints separate better
STAGE_SEVERITY = {
    "early": (-2.0, 6.0),
    "middle": (1.0, 9.0),
    "late": (4.0, 14.0),
}

TARGET_MIN_DB = 0.0
TARGET_MAX_DB = 10.0

# largest Gaussian smoothing width (samples) the smear degrader will search
_MAX_SMEAR_SIGMA = 12.0


def _power(x: np.ndarray) -> float:
    c = x - x.mean()
    return float(np.dot(c, c)) / len(c)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def _child_seeds(seed: int, n: int) -> list[int]:
    ss = np.random.SeedSequence(seed)
    return [int(s.generate_state(1, dtype=np.uint64)[0]) for s in ss.spawn(n)]


# --------------------------------------------------------------------------
# specs and examples


@dataclass(frozen=True)
class MixSpec:
    """How two clean sources are combined into one mixture.

    ``noise_snr_db=None`` disables noise and ``rir_seconds=0`` disables reverb.
    """

    relative_snr_db: float
    noise_snr_db: float | None = None
    rir_seconds: float = 0.0
    rt60: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.relative_snr_db <= 5.0:
            raise ParameterError(f"relative_snr_db must lie in [0, 5], got {self.relative_snr_db}")
        if not 0.0 <= self.rir_seconds <= 1.0:
            raise ParameterError(f"rir_seconds must lie in [0, 1], got {self.rir_seconds}")
        if self.noise_snr_db is not None and not math.isfinite(self.noise_snr_db):
            raise ParameterError("noise_snr_db must be finite or None")

    @classmethod
    def draw(
        cls,
        rng: np.random.Generator,
        noise_snr_range: tuple[float, float] | None = (5.0, 20.0),
        reverb_probability: float = 0.5,
        rt60_range: tuple[float, float] = (0.15, 0.6),
    ) -> "MixSpec":
        rel = float(rng.uniform(0.0, 5.0))
        noise = None if noise_snr_range is None else float(rng.uniform(*noise_snr_range))
        rt60 = float(rng.uniform(*rt60_range))
        rir_seconds = min(1.0, rt60) if rng.random() < reverb_probability else 0.0
        seed = int(rng.integers(0, 2**63 - 1))
        return cls(rel, noise, rir_seconds, rt60, seed)


@dataclass(frozen=True)
class DegraderSpec:
    """One member of the separator stand-in pool."""

    kind: str
    severity_range: tuple[float, float]
    stage: str = "middle"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown degrader kind {self.kind!r}")
        if self.stage not in STAGES:
            raise ParameterError(f"unknown degrader stage {self.stage!r}")
        lo, hi = self.severity_range
        if not (-5.0 <= lo < hi <= 15.0):
            raise ParameterError(f"severity_range must satisfy -5 <= min < max <= 15, got {self.severity_range}")

    @property
    def name(self) -> str:
        return f"{self.kind}/{self.stage}"

    @classmethod
    def from_name(cls, name: str) -> "DegraderSpec":
        kind, _, stage = name.partition("/")
        stage = stage or "middle"
        if stage not in STAGE_SEVERITY:
            raise ParameterError(f"unknown degrader stage {stage!r}")
        return cls(kind, STAGE_SEVERITY[stage], stage)


def default_pool(kinds: Sequence[str] = POOL_KINDS, stages: Sequence[str] = STAGES) -> list[DegraderSpec]:
    """The 3 kinds x 3 stages pool used in place of nine separator checkpoints."""
    return [DegraderSpec(k, STAGE_SEVERITY[s], s) for k in kinds for s in stages]


@dataclass(frozen=True)
class TrainingExample:
    mixture: AudioSignal
    estimates: tuple[AudioSignal, AudioSignal]
    truths: tuple[AudioSignal, AudioSignal]
    oracle_snr_db: tuple[float, float]
    oracle_snr_raw_db: tuple[float, float]
    degrader: DegraderSpec | None = None
    seed: int = 0


# --------------------------------------------------------------------------
# reverberation


def rir_envelope(t, rt60: float) -> np.ndarray:
    """Amplitude envelope decaying by 60 dB after ``rt60`` seconds."""
    return 10.0 ** (-3.0 * np.asarray(t, dtype=np.float64) / rt60)


def synth_rir(rir_seconds: float, rt60: float, sample_rate: int, seed, drr_db: float = 3.0) -> np.ndarray:
    """Unit-energy synthetic impulse response.

    A unit delta at t=0 is followed by white Gaussian noise under an
    exponential envelope; the tail is scaled so that the direct path carries
    ``drr_db`` more energy than the tail before the whole response is
    normalized to unit energy.
    """
    if not 0.0 < rir_seconds <= 1.0:
        raise ParameterError(f"rir_seconds must lie in (0, 1], got {rir_seconds}")
    if not 0.05 <= rt60 <= 1.0:
        raise ParameterError(f"rt60 must lie in [0.05, 1.0], got {rt60}")
    if sample_rate <= 0:
        raise ParameterError("sample_rate must be positive")
    n = max(2, int(round(rir_seconds * sample_rate)))
    t = np.arange(n) / sample_rate
    tail = _rng(seed).standard_normal(n) * rir_envelope(t, rt60)
    tail[0] = 0.0
    tail_energy = float(np.dot(tail, tail))
    h = tail * math.sqrt(10.0 ** (-drr_db / 10.0) / tail_energy) if tail_energy > 0 else tail
    h[0] = 1.0
    return h / math.sqrt(float(np.dot(h, h)))


def _reverberate(x: np.ndarray, h: np.ndarray) -> np.ndarray:
    return sps.fftconvolve(x, h)[: len(x)]


# --------------------------------------------------------------------------
# mixing


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) >= n:
        return x[:n]
    return np.concatenate([x, np.zeros(n - len(x))])


def mix_sources(
    s1: AudioSignal,
    s2: AudioSignal,
    spec: MixSpec,
    noise: AudioSignal | None = None,
    rirs: Sequence[np.ndarray] | None = None,
) -> tuple[AudioSignal, tuple[AudioSignal, AudioSignal]]:
    """Mix two sources; return the mixture and the two scaled source images.

    The images are the reverberant (if enabled), noise-free contributions of
    each source, so that ``mixture = image1 + image2 + noise``. ``noise`` and
    ``rirs`` replace the built-in white noise and synthetic responses.
    """
    rate = check_same_rate(s1, s2, *( [noise] if noise is not None else []))
    n = max(len(s1), len(s2))
    x1 = _fit_length(s1.samples, n)
    x2 = _fit_length(s2.samples, n)
    for x in (x1, x2):
        # a constant source has no defined SI-SNR downstream
        if np.ptp(x) <= 1e-12 * max(float(np.max(np.abs(x))), 1e-300):
            raise DegenerateSignalError("cannot mix a silent or constant source")

    seeds = _child_seeds(spec.seed, 3)
    if rirs is not None:
        x1 = _reverberate(x1, np.asarray(rirs[0], dtype=np.float64))
        x2 = _reverberate(x2, np.asarray(rirs[1], dtype=np.float64))
    elif spec.rir_seconds > 0.0:
        x1 = _reverberate(x1, synth_rir(spec.rir_seconds, spec.rt60, rate, seeds[0]))
        x2 = _reverberate(x2, synth_rir(spec.rir_seconds, spec.rt60, rate, seeds[1]))

    img1 = x1 / math.sqrt(_power(x1))
    img2 = x2 / math.sqrt(_power(x2)) * 10.0 ** (-spec.relative_snr_db / 20.0)
    speech = img1 + img2
    mixture = speech.copy()

    if spec.noise_snr_db is not None:
        if noise is not None:
            nz = np.resize(noise.samples, n)  # loops short noise files
        else:
            nz = _rng(seeds[2]).standard_normal(n)
        p = _power(nz)
        if p == 0.0:
            raise DegenerateSignalError("noise signal is silent")
        nz = nz * math.sqrt(_power(speech) / p * 10.0 ** (-spec.noise_snr_db / 10.0))
        mixture = mixture + nz

    peak = float(np.max(np.abs(mixture)))
    gain = PEAK_LEVEL / peak
    return (
        AudioSignal(mixture * gain, rate),
        (AudioSignal(img1 * gain, rate), AudioSignal(img2 * gain, rate)),
    )


# --------------------------------------------------------------------------
# degraders


def _orthogonal_residual(raw: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Part of ``raw`` orthogonal to ``truth`` (both mean-removed), per unit of truth gain."""
    s0 = truth - truth.mean()
    z0 = raw - raw.mean()
    gain = float(np.dot(z0, s0)) / float(np.dot(s0, s0))
    resid = z0 - gain * s0
    if abs(gain) > 1e-6:
        resid = resid / gain
    return resid


def _smear(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0.0:
        return x.copy()
    return gaussian_filter1d(x, sigma, mode="constant", truncate=3.0)


def _smear_for_target(truth: np.ndarray, target_db: float, iters: int = 14) -> np.ndarray:
    """Smoothing whose own SI-SNR lands near ``target_db`` (bisection on width)."""
    lo, hi = 0.0, _MAX_SMEAR_SIGMA
    if si_snr(truth, _smear(truth, hi)) > target_db:
        return _smear(truth, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if si_snr(truth, _smear(truth, mid)) > target_db:
            lo = mid
        else:
            hi = mid
    return _smear(truth, 0.5 * (lo + hi))


def _with_target(truth: np.ndarray, raw: np.ndarray, target_db: float) -> np.ndarray:
    """Rescale the residual of ``raw`` so that si_snr(truth, result) == target_db."""
    if target_db == math.inf:
        return truth.copy()
    resid = _orthogonal_residual(raw, truth)
    s0 = truth - truth.mean()
    r_energy = float(np.dot(resid, resid))
    if r_energy == 0.0:
        return truth.copy()
    scale = math.sqrt(float(np.dot(s0, s0)) / r_energy * 10.0 ** (-target_db / 10.0))
    return truth + scale * resid


def degrade_source(
    truth: np.ndarray,
    other: np.ndarray,
    kind: str,
    target_db: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Corrupt ``truth`` so that its SI-SNR equals ``target_db`` (``inf`` = untouched)."""
    truth = np.asarray(truth, dtype=np.float64)
    other = np.asarray(other, dtype=np.float64)
    if target_db == math.inf:
        return truth.copy()
    if kind == "residual-interference":
        raw = truth + other
    elif kind == "additive-noise":
        raw = truth + rng.standard_normal(len(truth)) * math.sqrt(_power(truth))
    elif kind == "lowpass-smear":
        raw = _smear_for_target(truth, target_db)
    elif kind == "combined":
        shares = rng.dirichlet(np.ones(3))
        budget = 10.0 ** (-target_db / 10.0)  # residual / target energy
        p = _power(truth)
        smeared = _smear_for_target(truth, -10.0 * math.log10(max(shares[0] * budget, 1e-6)))
        leak = _orthogonal_residual(truth + other, truth)
        hiss = rng.standard_normal(len(truth))
        raw = (
            smeared
            + leak * math.sqrt(shares[1] * budget * p / max(_power(leak), 1e-30))
            + hiss * math.sqrt(shares[2] * budget * p)
        )
    else:
        raise ParameterError(f"unknown degrader kind {kind!r}")
    return _with_target(truth, raw, target_db)


def apply_degrader(
    truths: Sequence[AudioSignal],
    mixture: AudioSignal,
    spec: DegraderSpec,
    seed,
) -> tuple[AudioSignal, AudioSignal]:
    """Produce two separated-source stand-ins from the true source images.

    Each estimate's target SI-SNR is drawn uniformly from
    ``spec.severity_range``; the output order is shuffled the way a real
    separator's would be.
    """
    rate = check_same_rate(mixture, *truths)
    if any(len(t) != len(mixture) for t in truths):
        raise DataError("truths and mixture must have equal length")
    rng = _rng(seed)
    lo, hi = spec.severity_range
    out = []
    for k in range(2):
        target = float(rng.uniform(lo, hi))
        est = degrade_source(truths[k].samples, truths[1 - k].samples, spec.kind, target, rng)
        out.append(AudioSignal(est, rate))
    if rng.random() < 0.5:
        out.reverse()
    return out[0], out[1]


def generate_example(
    s1: AudioSignal,
    s2: AudioSignal,
    mix_spec: MixSpec,
    degrader_spec: DegraderSpec | None,
    seed,
    noise: AudioSignal | None = None,
    rirs: Sequence[np.ndarray] | None = None,
) -> TrainingExample:
    """Mix, degrade, resolve the permutation and compute clipped oracle targets.

    ``degrader_spec=None`` returns the true images as the estimates.
    """
    mixture, truths = mix_sources(s1, s2, mix_spec, noise=noise, rirs=rirs)
    if degrader_spec is None:
        estimates = truths
    else:
        estimates = apply_degrader(truths, mixture, degrader_spec, seed)
    assignment = resolve_permutation(truths, estimates)
    raw = tuple(assignment.sisnr_for_estimate(k) for k in range(2))
    clipped = tuple(clip_db(v, TARGET_MIN_DB, TARGET_MAX_DB) for v in raw)
    return TrainingExample(
        mixture=mixture,
        estimates=tuple(estimates),
        truths=tuple(truths),
        oracle_snr_db=clipped,
        oracle_snr_raw_db=raw,
        degrader=degrader_spec,
        seed=int(seed) if seed is not None else 0,
    )


# --------------------------------------------------------------------------
# speech-like test material


_VOWELS = (
    (730, 1090, 2440),
    (270, 2290, 3010),
    (300, 870, 2240),
    (530, 1840, 2480),
    (570, 840, 2410),
    (440, 1020, 2240),
    (660, 1720, 2410),
)


def _resonator(x: np.ndarray, freq: float, bw: float, rate: int) -> np.ndarray:
    r = math.exp(-math.pi * bw / rate)
    theta = 2.0 * math.pi * freq / rate
    a = [1.0, -2.0 * r * math.cos(theta), r * r]
    return sps.lfilter([1.0 - r], a, x)


def speechlike_source(seconds: float, sample_rate: int = DEFAULT_SAMPLE_RATE, seed=0) -> AudioSignal:
    """A crude speech surrogate: formant-filtered voiced syllables, fricatives and pauses.

    Used as clean source material when no speech corpus is at hand.
    """
    rng = _rng(seed)
    n = int(round(seconds * sample_rate))
    out = np.zeros(n)
    f0_base = rng.uniform(90.0, 240.0)
    pos = int(rng.uniform(0.0, 0.1) * sample_rate)
    while pos < n:
        dur = int(rng.uniform(0.12, 0.35) * sample_rate)
        seg_len = min(dur, n - pos)
        if seg_len < 16:
            break
        t = np.arange(seg_len) / sample_rate
        env = np.sin(np.pi * np.arange(seg_len) / seg_len) ** 0.6
        if rng.random() < 0.78:
            contour = f0_base * (1.0 + 0.12 * rng.uniform(-1, 1) * t / max(t[-1], 1e-9))
            contour *= 1.0 + 0.01 * rng.standard_normal(seg_len).cumsum() / math.sqrt(seg_len)
            phase = 2.0 * math.pi * np.cumsum(contour) / sample_rate
            excitation = sps.sawtooth(phase) + 0.05 * rng.standard_normal(seg_len)
            formants = _VOWELS[rng.integers(len(_VOWELS))]
            voiced = np.zeros(seg_len)
            for i, f in enumerate(formants):
                f = min(f * rng.uniform(0.9, 1.1), 0.45 * sample_rate)
                voiced += _resonator(excitation, f, rng.uniform(60, 140), sample_rate) / (i + 1)
            seg = voiced * env * rng.uniform(0.5, 1.0)
        else:
            b, a = sps.butter(4, min(2000.0, 0.4 * sample_rate) / (sample_rate / 2), btype="high")
            seg = sps.lfilter(b, a, rng.standard_normal(seg_len)) * env * rng.uniform(0.05, 0.2)
        out[pos : pos + seg_len] += seg
        pos += seg_len
        if rng.random() < 0.3:
            pos += int(rng.uniform(0.03, 0.2) * sample_rate)
    out += 1e-3 * rng.standard_normal(n) * max(np.std(out), 1e-3)
    out *= 0.5 / max(float(np.max(np.abs(out))), 1e-9)
    return AudioSignal(out, sample_rate)


# --------------------------------------------------------------------------
# sampling streams


@dataclass
class ExampleSampler:
    """Draws fully determined training examples from a bank of clean sources.

    ``example(seed)`` is a pure function of the seed and the sampler's
    configuration, so examples can be generated in any order or in parallel.
    """

    sources: Sequence[AudioSignal]
    pool: Sequence[DegraderSpec]
    segment_seconds: float = 2.0
    sample_rate: int = DEFAULT_SAMPLE_RATE
    noise_snr_range: tuple[float, float] | None = (5.0, 20.0)
    reverb_probability: float = 0.5
    noise_bank: Sequence[AudioSignal] = field(default_factory=tuple)
    rir_bank: Sequence[np.ndarray] = field(default_factory=tuple)

    def __post_init__(self):
        if len(self.sources) < 2:
            raise DataError("at least two clean sources are required")
        if not self.pool:
            raise DataError("degrader pool is empty")
        for s in list(self.sources) + list(self.noise_bank):
            if s.sample_rate != self.sample_rate:
                raise DataError(f"source at {s.sample_rate} Hz, expected {self.sample_rate} Hz")

    @property
    def segment_length(self) -> int:
        return int(round(self.segment_seconds * self.sample_rate))

    def _crop(self, src: AudioSignal, rng: np.random.Generator) -> AudioSignal:
        n = self.segment_length
        x = src.samples
        if len(x) > n:
            start = int(rng.integers(0, len(x) - n + 1))
            x = x[start : start + n]
        return AudioSignal(_fit_length(x, n), self.sample_rate)

    def example(self, seed: int) -> TrainingExample:
        rng = _rng(seed)
        i, j = rng.choice(len(self.sources), size=2, replace=False)
        s1 = self._crop(self.sources[i], rng)
        s2 = self._crop(self.sources[j], rng)
        mix = MixSpec.draw(rng, self.noise_snr_range, self.reverb_probability)
        spec = self.pool[int(rng.integers(len(self.pool)))]
        noise = None
        if self.noise_bank and mix.noise_snr_db is not None:
            src = self.noise_bank[int(rng.integers(len(self.noise_bank)))]
            noise = self._crop(src, rng)
        rirs = None
        if self.rir_bank and mix.rir_seconds > 0.0:
            picks = rng.integers(len(self.rir_bank), size=2)
            rirs = [self.rir_bank[k] for k in picks]
        return generate_example(s1, s2, mix, spec, int(rng.integers(0, 2**63 - 1)), noise=noise, rirs=rirs)


def worker_count() -> int:
    """Worker cap from BLINDSISNR_THREADS (default: CPU count)."""
    raw = os.environ.get("BLINDSISNR_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise ParameterError(f"BLINDSISNR_THREADS must be an integer, got {raw!r}") from None
    return os.cpu_count() or 1


def iter_examples(
    sampler: ExampleSampler,
    seeds: Iterable[int],
    workers: int | None = None,
    max_queued: int = 16,
) -> Iterator[TrainingExample]:
    """Yield ``sampler.example(seed)`` for each seed, in seed order.

    Producers run in a thread pool and feed a bounded queue, so at most
    ``max_queued`` finished examples wait for the consumer.
    """
    workers = worker_count() if workers is None else max(1, workers)
    if workers == 1:
        for seed in seeds:
            yield sampler.example(seed)
        return

    q: queue.Queue = queue.Queue(maxsize=max_queued)
    done = object()
    stop = threading.Event()

    def produce():
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pending = []
            try:
                for seed in seeds:
                    if stop.is_set():
                        break
                    pending.append(pool.submit(sampler.example, seed))
                    if len(pending) >= workers:
                        q.put(pending.pop(0))
                for fut in pending:
                    q.put(fut)
            finally:
                q.put(done)

    thread = threading.Thread(target=produce, daemon=True)
    thread.start()
    try:
        while True:
            item = q.get()
            if item is done:
                break
            yield item.result()
    finally:
        stop.set()
        # drain so a blocked producer can finish
        while thread.is_alive():
            try:
                q.get(timeout=0.05)
            except queue.Empty:
                pass
