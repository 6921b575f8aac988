import math

import numpy as np
import pytest

from blindsisnr.audio import AudioSignal, write_wav
from blindsisnr.synth import speechlike_source


def sisnr_oracle(ref, est) -> float:
    """SI-SNR via explicit least squares, independent of blindsisnr.metrics."""
    ref = np.asarray(ref, dtype=np.float64)
    est = np.asarray(est, dtype=np.float64)
    design = np.column_stack([ref, np.ones(len(ref))])
    coef, *_ = np.linalg.lstsq(design, est, rcond=None)
    fitted = coef[0] * (ref - ref.mean())
    resid = est - design @ coef
    r = float(np.dot(resid, resid))
    if r <= 1e-12 * float(np.dot(fitted, fitted)):
        return math.inf
    return 10 * math.log10(float(np.dot(fitted, fitted)) / r)


@pytest.fixture(scope="session")
def speech_bank():
    return [speechlike_source(2.5, 8000, seed=100 + i) for i in range(6)]


@pytest.fixture
def write_manifest(tmp_path):
    """Write clean sources as WAVs and a manifest CSV; returns the manifest path."""

    def _write(signals, name="manifest.csv", pair=True):
        rows = ["id,source1_path,source2_path,sample_rate,duration_seconds,transcript"]
        paths = []
        for i, sig in enumerate(signals):
            p = tmp_path / f"src{i:03d}.wav"
            write_wav(sig, p, "float32")
            paths.append((p.name, sig))
        step = 2 if pair else 1
        for r in range(0, len(paths) - (step - 1), step):
            name1, sig = paths[r]
            name2 = paths[r + 1][0] if pair else ""
            rows.append(f"utt{r:03d},{name1},{name2},{sig.sample_rate},{sig.duration:.6f},")
        path = tmp_path / name
        path.write_text("\n".join(rows) + "\n")
        return path

    return _write


def kink_free_input(network, rng, shape, margin=1e-4, tries=200):
    """Draw inputs until every ReLU pre-activation is at least ``margin`` from zero.

    Central differences are only meaningful where the network is smooth, so
    gradient checks use a point whose ReLU masks cannot flip under the step.
    """
    from blindsisnr.nn import ReLU

    for _ in range(tries):
        x = rng.standard_normal(shape)
        h, ok = x, True
        for layer in network.layers:
            if isinstance(layer, ReLU) and np.abs(h).min() < margin:
                ok = False
                break
            h = layer.forward(h)
        if ok:
            return x
    raise RuntimeError("no kink-free input found")


def random_signal(rng, n=800, rate=8000):
    return AudioSignal(rng.standard_normal(n), rate)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"CRITERION {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
