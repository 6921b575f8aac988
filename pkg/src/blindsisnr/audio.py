"""Mono audio container, RIFF/WAVE I/O and zero-mean/unit-variance normalization.

Only two encodings are supported: 16-bit integer PCM (format tag 1) and
32-bit IEEE float (format tag 3). Integer samples are scaled by 1/32768 on
read; writing applies the inverse scaling with clipping.
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass
from typing import Literal

import numpy as np

from .errors import (
    DegenerateSignalError,
    FormatError,
    ParameterError,
    RateError,
    UnsupportedChannelsError,
)

logger = logging.getLogger(__name__)

PCM16_SCALE = 32768.0

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE

Encoding = Literal["pcm16", "float32"]


@dataclass(frozen=True)
class AudioSignal:
    """A mono waveform and its sample rate.

    ``samples`` is stored as a read-only float64 array; construct a new signal
    instead of mutating one.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64, copy=True).reshape(-1)
        if not np.all(np.isfinite(samples)):
            raise ParameterError("audio samples must be finite")
        rate = int(self.sample_rate)
        if rate != self.sample_rate or rate <= 0:
            raise ParameterError(f"sample_rate must be a positive integer, got {self.sample_rate!r}")
        samples.flags.writeable = False
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", rate)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "AudioSignal":
        return AudioSignal(samples, self.sample_rate)


@dataclass(frozen=True)
class WavWriteInfo:
    path: str
    encoding: str
    num_samples: int
    clipped: int = 0


def check_same_rate(*signals: AudioSignal) -> int:
    rates = {s.sample_rate for s in signals}
    if len(rates) != 1:
        raise RateError(f"sample rates differ: {sorted(rates)}")
    return rates.pop()


def as_samples(x) -> np.ndarray:
    """Float64 view of an AudioSignal or any 1-D array-like."""
    if isinstance(x, AudioSignal):
        return x.samples
    return np.asarray(x, dtype=np.float64).reshape(-1)


# --------------------------------------------------------------------------
# WAV reading


def _iter_chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            # truncated trailing chunk; hand back what exists so the caller can decide
            yield cid, body, True
            return
        yield cid, body, False
        pos += 8 + size + (size & 1)


def read_wav(path) -> AudioSignal:
    """Read a mono 16-bit PCM or 32-bit float WAV file."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[0:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise FormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    for cid, body, truncated in _iter_chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise FormatError(f"{path}: fmt chunk too short")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", body)
            if tag == _WAVE_FORMAT_EXTENSIBLE:
                if len(body) < 40:
                    raise FormatError(f"{path}: truncated WAVE_FORMAT_EXTENSIBLE header")
                tag = struct.unpack_from("<H", body, 24)[0]
            fmt = (tag, channels, rate, block_align, bits)
        elif cid == b"data":
            if fmt is None:
                raise FormatError(f"{path}: data chunk precedes fmt chunk")
            if truncated:
                raise FormatError(f"{path}: data chunk truncated")
            pcm = body
            break
    if fmt is None:
        raise FormatError(f"{path}: missing fmt chunk")
    if pcm is None:
        raise FormatError(f"{path}: missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels != 1:
        raise UnsupportedChannelsError(f"{path}: {channels} channels; only mono is supported")
    if rate <= 0:
        raise FormatError(f"{path}: invalid sample rate {rate}")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        usable = len(pcm) - len(pcm) % 2
        samples = np.frombuffer(pcm[:usable], dtype="<i2").astype(np.float64) / PCM16_SCALE
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        usable = len(pcm) - len(pcm) % 4
        samples = np.frombuffer(pcm[:usable], dtype="<f4").astype(np.float64)
        if not np.all(np.isfinite(samples)):
            raise FormatError(f"{path}: non-finite float samples")
    else:
        raise FormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")
    return AudioSignal(samples, rate)


def read_wav_header(path) -> tuple[int, int]:
    """Return ``(sample_rate, num_samples)`` of a WAV file."""
    sig = read_wav(path)
    return sig.sample_rate, len(sig)


# --------------------------------------------------------------------------
# WAV writing


def write_wav(signal: AudioSignal, path, encoding: Encoding = "float32") -> WavWriteInfo:
    """Write a canonical 44-byte-header mono WAV file.

    Under ``pcm16`` any sample outside [-1, 1] is clipped and counted in the
    returned ``WavWriteInfo.clipped``.
    """
    x = signal.samples
    clipped = 0
    if encoding == "pcm16":
        out_of_range = np.abs(x) > 1.0
        clipped = int(np.count_nonzero(out_of_range))
        if clipped:
            logger.warning("%s: clipped %d sample(s) to [-1, 1]", path, clipped)
        q = np.round(np.clip(x, -1.0, 1.0) * PCM16_SCALE)
        payload = np.clip(q, -32768, 32767).astype("<i2").tobytes()
        tag, bits = _WAVE_FORMAT_PCM, 16
    elif encoding == "float32":
        payload = x.astype("<f4").tobytes()
        tag, bits = _WAVE_FORMAT_IEEE_FLOAT, 32
    else:
        raise ParameterError(f"unknown encoding {encoding!r}")

    block_align = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        tag,
        1,
        signal.sample_rate,
        signal.sample_rate * block_align,
        block_align,
        bits,
        b"data",
        len(payload),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        if len(payload) & 1:
            fh.write(b"\x00")
    return WavWriteInfo(os.fspath(path), encoding, len(x), clipped)


# --------------------------------------------------------------------------
# normalization


def zmuv(x: np.ndarray, axis: int = -1) -> np.ndarray:
    """Zero-mean / unit population-variance along ``axis``.

    Raises DegenerateSignalError if any slice has zero variance.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[axis] < 2:
        raise DegenerateSignalError("normalization needs at least 2 samples")
    centered = x - x.mean(axis=axis, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=axis, keepdims=True))
    scale = np.max(np.abs(x), axis=axis, keepdims=True)
    # a constant slice can leave rounding residue in `centered`
    if np.any(std <= 1e-12 * np.maximum(scale, np.finfo(np.float64).tiny)):
        raise DegenerateSignalError("cannot normalize a constant signal")
    return centered / std


def normalize_zmuv(signal: AudioSignal) -> AudioSignal:
    return AudioSignal(zmuv(signal.samples), signal.sample_rate)
