"""Blind SI-SNR estimator: network assembly, training, persistence and evaluation.

The network maps a (mixture, estimate) pair, each normalized to zero mean
and unit variance and stacked as two input channels, to a sigmoid output
that is read as an SI-SNR between ``snr_min_db`` and ``snr_max_db``.
"""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .audio import AudioSignal, check_same_rate, zmuv
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    ConfigError,
    DataError,
    DegenerateStatisticsError,
    RateError,
    ShapeError,
)
from .metrics import mean_absolute_error, pearson
from .nn import Adam, AdamState, Conv1d, Linear, ReLU, Sequential, Sigmoid, StatPool
from .synth import ExampleSampler, TrainingExample, iter_examples

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimatorConfig:
    conv_layers: int = 5
    kernel: int = 4
    channels: int = 128
    stride: int = 1
    fc_width: int = 256
    input_channels: int = 2
    snr_min_db: float = 0.0
    snr_max_db: float = 10.0
    sample_rate: int = 8000
    segment_seconds: float = 2.0

    def __post_init__(self):
        for name in ("conv_layers", "kernel", "channels", "stride", "fc_width", "input_channels", "sample_rate"):
            value = getattr(self, name)
            if int(value) != value or value <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.stride != 1:
            raise ConfigError("only stride 1 is supported")
        if self.input_channels != 2:
            raise ConfigError("input_channels must be 2 (mixture and estimate)")
        if not self.snr_min_db < self.snr_max_db:
            raise ConfigError("snr_min_db must be below snr_max_db")
        if not self.segment_seconds > 0:
            raise ConfigError("segment_seconds must be positive")

    @property
    def snr_span(self) -> float:
        return self.snr_max_db - self.snr_min_db


def parameter_count(config: EstimatorConfig) -> int:
    """Closed-form trainable parameter count for ``config``."""
    c, k = config.channels, config.kernel
    conv = (config.input_channels * k * c + c) + (config.conv_layers - 1) * (c * k * c + c)
    fc = (2 * c * config.fc_width + config.fc_width) + (config.fc_width + 1)
    return conv + fc


@dataclass
class EstimatorModel:
    config: EstimatorConfig
    network: Sequential

    @property
    def parameters(self):
        return self.network.parameters()

    @property
    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters)

    @property
    def output_layer(self) -> Linear:
        return self.network.layers[-2]


def build_model(config: EstimatorConfig | None = None, seed=0, dtype=np.float32) -> EstimatorModel:
    """Five conv+ReLU layers, statistical pooling, FC+ReLU, FC to one unit, sigmoid.

    Layers that feed a ReLU get He-uniform weights and zero biases; the output
    layer keeps the small +-sqrt(1/fan_in) range so the sigmoid starts unsaturated.
    """
    config = config or EstimatorConfig()
    seeds = np.random.SeedSequence(seed).spawn(config.conv_layers + 2)
    layers = []
    in_ch = config.input_channels
    for i in range(config.conv_layers):
        layers += [Conv1d(in_ch, config.channels, config.kernel, rng=np.random.default_rng(seeds[i]), dtype=dtype, init="he"), ReLU()]
        in_ch = config.channels
    layers += [
        StatPool(),
        Linear(2 * config.channels, config.fc_width, rng=np.random.default_rng(seeds[-2]), dtype=dtype, init="he"),
        ReLU(),
        Linear(config.fc_width, 1, rng=np.random.default_rng(seeds[-1]), dtype=dtype),
        Sigmoid(),
    ]
    model = EstimatorModel(config, Sequential(layers))
    assert model.parameter_count == parameter_count(config)
    return model


# --------------------------------------------------------------------------
# inference


@dataclass(frozen=True)
class EstimateResult:
    snr_hat_db: float
    raw_sigmoid: float


def prepare_inputs(mixtures: np.ndarray, estimates: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Stack per-row ZMUV-normalized mixtures and estimates into (batch, 2, time)."""
    mixtures = np.atleast_2d(mixtures)
    estimates = np.atleast_2d(estimates)
    if mixtures.shape != estimates.shape:
        raise ShapeError(f"mixture {mixtures.shape} and estimate {estimates.shape} shapes differ")
    return np.stack([zmuv(mixtures), zmuv(estimates)], axis=1).astype(dtype)


def predict_sigmoid(model: EstimatorModel, mixtures: np.ndarray, estimates: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Raw sigmoid outputs for rows of equal-length mixture/estimate arrays."""
    mixtures = np.atleast_2d(mixtures)
    estimates = np.atleast_2d(estimates)
    dtype = model.parameters[0].data.dtype
    out = []
    for start in range(0, mixtures.shape[0], batch_size):
        x = prepare_inputs(mixtures[start : start + batch_size], estimates[start : start + batch_size], dtype)
        out.append(model.network.forward(x)[:, 0])
    return np.concatenate(out) if out else np.zeros(0)


def to_db(model: EstimatorModel, raw) -> np.ndarray:
    cfg = model.config
    return np.clip(cfg.snr_min_db + np.asarray(raw, dtype=np.float64) * cfg.snr_span, cfg.snr_min_db, cfg.snr_max_db)


def forward_estimate(model: EstimatorModel, mixture: AudioSignal, estimate: AudioSignal) -> EstimateResult:
    """Blind SI-SNR estimate (dB) of ``estimate`` given its ``mixture``."""
    rate = check_same_rate(mixture, estimate)
    if rate != model.config.sample_rate:
        raise RateError(f"audio at {rate} Hz but the model expects {model.config.sample_rate} Hz")
    if len(mixture) != len(estimate):
        raise ShapeError(f"mixture has {len(mixture)} samples, estimate {len(estimate)}")
    raw = float(predict_sigmoid(model, mixture.samples[None], estimate.samples[None])[0])
    return EstimateResult(float(to_db(model, raw)), raw)


# --------------------------------------------------------------------------
# loss


def l1_pair_loss(pred: np.ndarray, target: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-example ``|t1 - p1| + |t2 - p2|`` and its gradient w.r.t. ``pred``.

    ``pred`` and ``target`` have shape (batch, 2).
    """
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return np.abs(diff).sum(axis=1), np.sign(diff)


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    train_examples: int = 2000
    val_examples: int = 300
    learning_rate: float = 1e-4
    lr_decay: float = 1.0  # per-epoch multiplicative factor
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    dynamic_mixing: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("epochs", "batch_size", "train_examples"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.val_examples < 0:
            raise ConfigError("val_examples must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError("lr_decay must be in (0, 1]")


@dataclass
class TrainingState:
    epoch: int
    adam: AdamState = field(repr=False)
    running_train_loss: float  # L1 loss summed over both sources, dB
    validation_mae_db: float
    validation_pearson: float
    rng_seed: int
    skipped_steps: int = 0

    def log_record(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss_db": self.running_train_loss,
            "val_mae_db": self.validation_mae_db,
            "val_pearson": self.validation_pearson,
        }


@dataclass
class TrainingResult:
    history: list[TrainingState]
    best: TrainingState | None
    best_parameters: list[np.ndarray] = field(repr=False)


@dataclass(frozen=True)
class LabeledSet:
    """Parallel arrays of items to score: one row per (mixture, estimate)."""

    mixtures: np.ndarray
    estimates: np.ndarray
    oracle_db: np.ndarray
    source_index: np.ndarray

    def __len__(self):
        return self.oracle_db.shape[0]

    @classmethod
    def from_examples(cls, examples: Iterable[TrainingExample], dtype=np.float32) -> "LabeledSet":
        mix, est, orc, src = [], [], [], []
        for ex in examples:
            for k in range(2):
                mix.append(ex.mixture.samples.astype(dtype))
                est.append(ex.estimates[k].samples.astype(dtype))
                orc.append(ex.oracle_snr_db[k])
                src.append(k)
        if not orc:
            return cls(np.zeros((0, 0), dtype), np.zeros((0, 0), dtype), np.zeros(0), np.zeros(0, dtype=int))
        return cls(np.stack(mix), np.stack(est), np.asarray(orc, dtype=np.float64), np.asarray(src))


def example_seeds(seed: int, purpose: int, count: int, epoch: int = 0) -> np.ndarray:
    rng = np.random.default_rng([int(seed), purpose, epoch])
    return rng.integers(0, 2**62, size=count)


def _batches(items: Sequence, size: int):
    for start in range(0, len(items), size):
        yield items[start : start + size]


def train_step(model: EstimatorModel, optimizer: Adam, batch: Sequence[TrainingExample]) -> tuple[float, bool]:
    """One ADAM step on a batch; returns (loss in dB, step applied)."""
    cfg = model.config
    dtype = model.parameters[0].data.dtype
    mixtures = np.stack([ex.mixture.samples for ex in batch for _ in range(2)])
    estimates = np.stack([ex.estimates[k].samples for ex in batch for k in range(2)])
    targets = np.array([ex.oracle_snr_db for ex in batch], dtype=np.float64)
    targets = (targets - cfg.snr_min_db) / cfg.snr_span

    optimizer.zero_grad()
    x = prepare_inputs(mixtures, estimates, dtype)
    pred = model.network.forward(x)[:, 0].reshape(len(batch), 2)
    per_example, grad = l1_pair_loss(pred, targets)
    loss_db = float(per_example.mean()) * cfg.snr_span
    if not math.isfinite(loss_db):
        optimizer.state.skipped_steps += 1
        return loss_db, False
    model.network.backward((grad / len(batch)).reshape(-1, 1).astype(dtype))
    return loss_db, optimizer.step()


def validate(model: EstimatorModel, data: LabeledSet) -> tuple[float, float]:
    """(MAE in dB, pooled Pearson) on a labeled set."""
    if len(data) == 0:
        return float("nan"), float("nan")
    pred = to_db(model, predict_sigmoid(model, data.mixtures, data.estimates))
    mae = mean_absolute_error(data.oracle_db, pred)
    try:
        r = pearson(data.oracle_db, pred)
    except DegenerateStatisticsError:
        r = 0.0
    return mae, r


def _improves(new: float, old: float) -> bool:
    if not math.isfinite(new):
        return False
    return not math.isfinite(old) or new < old


def train(
    model: EstimatorModel,
    sampler: ExampleSampler,
    config: TrainConfig = TrainConfig(),
    on_epoch: Callable[[TrainingState], None] | None = None,
    workers: int | None = None,
) -> TrainingResult:
    """Fit ``model`` to oracle targets from ``sampler``'s degrader pool.

    Training examples come from a fixed list of seeds (fresh seeds per epoch
    when ``dynamic_mixing`` is set); the validation set is generated once
    from disjoint seeds. The parameters with the lowest validation MAE are
    loaded back into ``model`` before returning.
    """
    optimizer = Adam(model.parameters, config.learning_rate, config.beta1, config.beta2, config.epsilon)
    val_seeds = example_seeds(config.seed, 2, config.val_examples)
    val_set = LabeledSet.from_examples(iter_examples(sampler, val_seeds, workers), dtype=model.parameters[0].data.dtype)
    base_seeds = example_seeds(config.seed, 1, config.train_examples)
    order_rng = np.random.default_rng([config.seed, 3])

    history: list[TrainingState] = []
    best: TrainingState | None = None
    best_params = [p.data.copy() for p in model.parameters]
    for epoch in range(1, config.epochs + 1):
        optimizer.state.learning_rate = config.learning_rate * config.lr_decay ** (epoch - 1)
        seeds = example_seeds(config.seed, 4, config.train_examples, epoch) if config.dynamic_mixing else base_seeds
        seeds = seeds[order_rng.permutation(len(seeds))]
        losses = []
        batch: list[TrainingExample] = []
        for ex in iter_examples(sampler, seeds, workers):
            batch.append(ex)
            if len(batch) == config.batch_size:
                loss, ok = train_step(model, optimizer, batch)
                if ok:
                    losses.append(loss)
                batch = []
        if batch:
            loss, ok = train_step(model, optimizer, batch)
            if ok:
                losses.append(loss)

        mae, r = validate(model, val_set)
        state = TrainingState(
            epoch=epoch,
            adam=replace(optimizer.state),  # snapshot of the scalar counters
            running_train_loss=float(np.mean(losses)) if losses else float("nan"),
            validation_mae_db=mae,
            validation_pearson=r,
            rng_seed=config.seed,
            skipped_steps=optimizer.state.skipped_steps,
        )
        history.append(state)
        logger.info("epoch %d: train %.4f dB, val mae %.4f dB, val r %.4f", epoch, state.running_train_loss, mae, r)
        if best is None or len(val_set) == 0 or _improves(mae, best.validation_mae_db):
            best = state
            best_params = [p.data.copy() for p in model.parameters]
        if on_epoch is not None:
            on_epoch(state)

    for p, saved in zip(model.parameters, best_params):
        p.data = saved.copy()
    return TrainingResult(history, best, best_params)


# --------------------------------------------------------------------------
# evaluation


@dataclass
class Report:
    pearson_pooled: float
    pearson_per_source_avg: float
    mae_db: float
    n_items: int
    scatter: list[tuple[float, float]]
    source_index: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scatter"] = [list(p) for p in self.scatter]
        return d


def report_from_pairs(oracle_db: Sequence[float], estimate_db: Sequence[float], source_index: Sequence[int] | None = None) -> Report:
    """Pooled and per-source-averaged Pearson plus MAE for (oracle, estimate) pairs."""
    oracle = np.asarray(oracle_db, dtype=np.float64)
    est = np.asarray(estimate_db, dtype=np.float64)
    if oracle.shape[0] == 0:
        raise DataError("cannot evaluate an empty set")
    src = np.zeros(len(oracle), dtype=int) if source_index is None else np.asarray(source_index, dtype=int)
    try:
        pooled = pearson(oracle, est)
    except DegenerateStatisticsError as exc:
        raise DegenerateStatisticsError(f"pooled correlation over {len(oracle)} items: {exc}") from exc
    per_source = []
    for k in np.unique(src):
        sel = src == k
        try:
            per_source.append(pearson(oracle[sel], est[sel]))
        except DegenerateStatisticsError as exc:
            raise DegenerateStatisticsError(f"correlation for source {k} ({sel.sum()} items): {exc}") from exc
    return Report(
        pearson_pooled=pooled,
        pearson_per_source_avg=float(np.mean(per_source)),
        mae_db=mean_absolute_error(oracle, est),
        n_items=len(oracle),
        scatter=[(float(a), float(b)) for a, b in zip(oracle, est)],
        source_index=[int(k) for k in src],
    )


def evaluate(model: EstimatorModel, data: LabeledSet) -> Report:
    if len(data) == 0:
        raise DataError("cannot evaluate an empty set")
    if not np.all(np.isfinite(data.oracle_db)):
        raise DataError("oracle values must be finite (clip before evaluating)")
    pred = to_db(model, predict_sigmoid(model, data.mixtures, data.estimates))
    return report_from_pairs(data.oracle_db, pred, data.source_index)


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   8s   magic b"BSISNRCK"
#   u32  format version
#   config: u32 conv_layers, kernel, channels, stride, fc_width, input_channels, sample_rate;
#           f64 snr_min_db, snr_max_db, segment_seconds
#   state:  u8 has_state; u32 epoch; u64 adam_step; u64 skipped; u64 rng_seed;
#           f64 lr, beta1, beta2, epsilon, train_loss_db, val_mae_db, val_pearson
#   u32  tensor count, then per tensor: u32 ndim, u32 dims..., f32 data (C order)
#   u32  CRC-32 of every preceding byte

MAGIC = b"BSISNRCK"
FORMAT_VERSION = 1
_CONFIG_FMT = "<7I3d"
_STATE_FMT = "<BIQQQ7d"


def _expected_shapes(config: EstimatorConfig) -> list[tuple[int, ...]]:
    return [p.shape for p in build_model(config, seed=0).parameters]


def save_checkpoint(model: EstimatorModel, state: TrainingState | None, path) -> None:
    cfg = model.config
    parts = [
        MAGIC,
        struct.pack("<I", FORMAT_VERSION),
        struct.pack(
            _CONFIG_FMT,
            cfg.conv_layers, cfg.kernel, cfg.channels, cfg.stride, cfg.fc_width, cfg.input_channels, cfg.sample_rate,
            cfg.snr_min_db, cfg.snr_max_db, cfg.segment_seconds,
        ),
    ]
    if state is None:
        parts.append(struct.pack(_STATE_FMT, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0))
    else:
        a = state.adam
        parts.append(
            struct.pack(
                _STATE_FMT, 1, state.epoch, a.step_count, state.skipped_steps, state.rng_seed % 2**64,
                a.learning_rate, a.beta1, a.beta2, a.epsilon,
                state.running_train_loss, state.validation_mae_db, state.validation_pearson,
            )
        )
    params = model.parameters
    parts.append(struct.pack("<I", len(params)))
    for p in params:
        parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    body = b"".join(parts)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", zlib.crc32(body)))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return out

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path, expected_config: EstimatorConfig | None = None) -> tuple[EstimatorModel, TrainingState | None]:
    """Load a checkpoint; with ``expected_config`` any shape disagreement is an error."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < len(MAGIC) + 8 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    r = _Reader(body)
    r.raw(len(MAGIC))
    (version,) = r.take("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupt)")
    c = r.take(_CONFIG_FMT)
    try:
        config = EstimatorConfig(
            conv_layers=c[0], kernel=c[1], channels=c[2], stride=c[3], fc_width=c[4], input_channels=c[5],
            sample_rate=c[6], snr_min_db=c[7], snr_max_db=c[8], segment_seconds=c[9],
        )
    except ConfigError as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    s = r.take(_STATE_FMT)
    (count,) = r.take("<I")
    tensors = []
    for _ in range(count):
        (ndim,) = r.take("<I")
        shape = r.take(f"<{ndim}I")
        n = int(np.prod(shape)) if shape else 1
        tensors.append(np.frombuffer(r.raw(4 * n), dtype="<f4").reshape(shape).astype(np.float32))
    if r.pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensors")

    if expected_config is not None:
        want = _expected_shapes(expected_config)
        got = [t.shape for t in tensors]
        if want != got:
            raise CheckpointShapeError(f"{path}: tensor shapes {got} do not match expected config shapes {want}")
    model = build_model(config, seed=0)
    want = [p.shape for p in model.parameters]
    got = [t.shape for t in tensors]
    if want != got:
        raise CheckpointShapeError(f"{path}: tensor shapes {got} disagree with stored config {want}")
    for p, t in zip(model.parameters, tensors):
        p.data = t.copy()

    state = None
    if s[0]:
        adam = AdamState(
            first_moment=[], second_moment=[], step_count=s[2], learning_rate=s[5], beta1=s[6], beta2=s[7],
            epsilon=s[8], skipped_steps=s[3],
        )
        state = TrainingState(
            epoch=s[1], adam=adam, running_train_loss=s[9], validation_mae_db=s[10], validation_pearson=s[11],
            rng_seed=s[4], skipped_steps=s[3],
        )
    return model, state
