"""``blindsisnr`` command line: synth, train, estimate and eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .audio import AudioSignal, read_wav, read_wav_header, write_wav
from .errors import (
    BlindSISNRError,
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateSignalError,
    DegenerateStatisticsError,
    FormatError,
    RateError,
    ShapeError,
)
from .estimator import (
    EstimatorConfig,
    LabeledSet,
    Report,
    TrainConfig,
    build_model,
    evaluate,
    example_seeds,
    forward_estimate,
    load_checkpoint,
    report_from_pairs,
    save_checkpoint,
    train,
)
from .synth import DegraderSpec, ExampleSampler, default_pool, iter_examples

logger = logging.getLogger("blindsisnr")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

LABELS_HEADER = ["id", "oracle_snr_raw_1", "oracle_snr_raw_2", "clipped_1", "clipped_2", "degrader_kind", "seed"]
SCATTER_HEADER = ["oracle_db", "estimate_db", "source_index"]
MANIFEST_REQUIRED = ["id", "source1_path", "source2_path", "sample_rate", "duration_seconds"]
SYNTH_PURPOSE = 5  # seed stream for materialized examples, disjoint from training streams


class UsageError(BlindSISNRError):
    pass


# --------------------------------------------------------------------------
# manifests


@dataclass(frozen=True)
class ManifestRow:
    id: str
    source1_path: Path
    source2_path: Path | None
    sample_rate: int
    duration_seconds: float
    transcript: str = ""
    mixture_path: Path | None = None


@dataclass(frozen=True)
class Manifest:
    rows: tuple[ManifestRow, ...]
    sample_rate: int

    def source_paths(self) -> list[Path]:
        """Unique clean-source paths in manifest order."""
        seen: dict[Path, None] = {}
        for r in self.rows:
            for p in (r.source1_path, r.source2_path):
                if p is not None:
                    seen.setdefault(p, None)
        return list(seen)

    def load_sources(self) -> list[AudioSignal]:
        return [read_wav(p) for p in self.source_paths()]


def _resolve(base: Path, value: str) -> Path | None:
    value = value.strip()
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_manifest(path, require_pairs: bool = True) -> Manifest:
    """Parse a manifest CSV; paths are relative to the manifest's directory.

    Checks unique ids, that files exist and that every WAV header matches the
    declared rate (and all rows share one rate).
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    reader = csv.DictReader(text.splitlines())
    missing = [c for c in MANIFEST_REQUIRED if c not in (reader.fieldnames or [])]
    if missing:
        raise DataError(f"{path}: manifest lacks column(s) {', '.join(missing)}")
    base = path.parent
    rows, ids, rates = [], set(), set()
    for line_no, rec in enumerate(reader, start=2):
        where = f"{path}:{line_no}"
        rid = (rec["id"] or "").strip()
        if not rid:
            raise DataError(f"{where}: empty id")
        if rid in ids:
            raise DataError(f"{where}: duplicate id {rid!r}")
        ids.add(rid)
        try:
            rate = int(rec["sample_rate"])
            duration = float(rec["duration_seconds"])
        except (TypeError, ValueError) as exc:
            raise DataError(f"{where}: bad sample_rate/duration_seconds") from exc
        s1 = _resolve(base, rec["source1_path"] or "")
        s2 = _resolve(base, rec["source2_path"] or "")
        mix = _resolve(base, rec.get("mixture_path") or "")
        if s1 is None or (require_pairs and s2 is None):
            raise DataError(f"{where}: source path missing")
        for p in (s1, s2, mix):
            if p is None:
                continue
            if not p.is_file():
                raise DataError(f"{where}: file not found: {p}")
            try:
                header_rate, _ = read_wav_header(p)
            except FormatError as exc:
                raise DataError(f"{where}: {p}: {exc}") from exc
            if header_rate != rate:
                raise DataError(f"{where}: {p} is {header_rate} Hz but the manifest declares {rate} Hz")
        rates.add(rate)
        rows.append(ManifestRow(rid, s1, s2, rate, duration, (rec.get("transcript") or "").strip(), mix))
    if not rows:
        raise DataError(f"{path}: manifest has no rows")
    if len(rates) > 1:
        raise DataError(f"{path}: mixed sample rates {sorted(rates)}")
    return Manifest(tuple(rows), rates.pop())


def _load_dir(directory) -> list[AudioSignal]:
    if directory is None:
        return []
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"not a directory: {d}")
    files = sorted(d.glob("*.wav"))
    if not files:
        raise DataError(f"no .wav files in {d}")
    return [read_wav(p) for p in files]


# --------------------------------------------------------------------------
# config files

_MODEL_KEYS = {f.name: f.type for f in fields(EstimatorConfig)}
_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}
_EXTRA_KEYS = {
    "model_seed": "int",
    "pool": "str",
    "noise_snr_min": "float",
    "noise_snr_max": "float",
    "reverb_probability": "float",
}
CONFIG_KEYS = sorted(set(_MODEL_KEYS) | set(_TRAIN_KEYS) | set(_EXTRA_KEYS))


def _convert(kind, raw: str):
    kind = getattr(kind, "__name__", kind)
    if kind == "bool":
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{line_no}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        kind = _MODEL_KEYS.get(key) or _TRAIN_KEYS.get(key) or _EXTRA_KEYS.get(key)
        if kind is None:
            raise ConfigError(f"{source}:{line_no}: unknown key {key!r} (known: {', '.join(CONFIG_KEYS)})")
        if key in out:
            raise ConfigError(f"{source}:{line_no}: duplicate key {key!r}")
        try:
            out[key] = _convert(kind, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{line_no}: bad value for {key!r}: {exc}") from exc
    return out


def split_config(values: dict) -> tuple[EstimatorConfig, TrainConfig, dict]:
    model = {k: v for k, v in values.items() if k in _MODEL_KEYS}
    trn = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    extra = {k: v for k, v in values.items() if k in _EXTRA_KEYS}
    return EstimatorConfig(**model), TrainConfig(**trn), extra


def _pool_from(value: str | None) -> list[DegraderSpec]:
    if not value:
        return default_pool()
    try:
        return [DegraderSpec.from_name(name.strip()) for name in value.split(",") if name.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad pool entry: {exc}") from exc


# --------------------------------------------------------------------------
# labeled directories


def _fmt(x: float) -> str:
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(float(x))


def example_paths(out_dir: Path, ex_id: str) -> dict[str, Path]:
    return {
        "mixture": out_dir / f"{ex_id}_mix.wav",
        "estimate1": out_dir / f"{ex_id}_est1.wav",
        "estimate2": out_dir / f"{ex_id}_est2.wav",
        "truth1": out_dir / f"{ex_id}_truth1.wav",
        "truth2": out_dir / f"{ex_id}_truth2.wav",
    }


def read_labels(path) -> list[dict]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"labels file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != LABELS_HEADER:
            raise DataError(f"{path}: unexpected header {reader.fieldnames}")
        rows = []
        for rec in reader:
            try:
                rows.append(
                    {
                        "id": rec["id"],
                        "raw": (float(rec["oracle_snr_raw_1"]), float(rec["oracle_snr_raw_2"])),
                        "clipped": (float(rec["clipped_1"]), float(rec["clipped_2"])),
                        "degrader_kind": rec["degrader_kind"],
                        "seed": int(rec["seed"]),
                    }
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{reader.line_num}: malformed row") from exc
    return rows


def write_scatter(report: Report, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SCATTER_HEADER)
        for (o, e), k in zip(report.scatter, report.source_index):
            w.writerow([repr(o), repr(e), k])


def read_scatter(path) -> Report:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"scatter file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or reader.fieldnames[:2] != SCATTER_HEADER[:2]:
            raise DataError(f"{path}: expected header starting {SCATTER_HEADER[:2]}")
        oracle, est, src = [], [], []
        for rec in reader:
            try:
                oracle.append(float(rec["oracle_db"]))
                est.append(float(rec["estimate_db"]))
                src.append(int(rec.get("source_index") or 0))
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{reader.line_num}: malformed row") from exc
    return report_from_pairs(oracle, est, src)


def scatter_svg(points: Sequence[tuple[float, float]], title: str = "", size: int = 400) -> str:
    """Static SVG scatter over [0, 10] x [0, 10] dB with axes and a diagonal."""
    m = 40
    span = size - 2 * m

    def px(v):
        return m + min(max(v, 0.0), 10.0) / 10.0 * span

    def py(v):
        return size - m - min(max(v, 0.0), 10.0) / 10.0 * span

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(10)}" y2="{py(0)}" stroke="black"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(0)}" y2="{py(10)}" stroke="black"/>',
        f'<line x1="{px(0)}" y1="{py(0)}" x2="{px(10)}" y2="{py(10)}" stroke="#bbb" stroke-dasharray="4 4"/>',
    ]
    for t in range(0, 11, 2):
        out.append(f'<text x="{px(t):.1f}" y="{size - m + 16}" font-size="11" text-anchor="middle">{t}</text>')
        out.append(f'<text x="{m - 8}" y="{py(t) + 4:.1f}" font-size="11" text-anchor="end">{t}</text>')
    out.append(f'<text x="{size / 2}" y="{size - 6}" font-size="12" text-anchor="middle">oracle SI-SNR (dB)</text>')
    out.append(
        f'<text x="12" y="{size / 2}" font-size="12" text-anchor="middle" transform="rotate(-90 12 {size / 2})">estimated SI-SNR (dB)</text>'
    )
    if title:
        out.append(f'<text x="{size / 2}" y="20" font-size="13" text-anchor="middle">{title}</text>')
    for o, e in points:
        out.append(f'<circle cx="{px(o):.2f}" cy="{py(e):.2f}" r="2" fill="steelblue" fill-opacity="0.6"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------------------
# commands


def _sampler(args, manifest: Manifest, pool, segment_seconds: float, extra: dict | None = None) -> ExampleSampler:
    extra = extra or {}
    rate = args.sample_rate or manifest.sample_rate
    if rate != manifest.sample_rate:
        raise RateError(f"manifest audio is {manifest.sample_rate} Hz but --sample-rate is {rate}")
    noise_range = (extra.get("noise_snr_min", 5.0), extra.get("noise_snr_max", 20.0))
    return ExampleSampler(
        sources=manifest.load_sources(),
        pool=pool,
        segment_seconds=segment_seconds,
        sample_rate=rate,
        noise_snr_range=noise_range,
        reverb_probability=extra.get("reverb_probability", 0.5),
        noise_bank=_load_dir(args.noise_dir),
        rir_bank=[s.samples for s in _load_dir(args.rir_dir)],
    )


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    return out


def cmd_synth(args) -> int:
    if args.manifest is None:
        raise UsageError("synth needs --manifest")
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    manifest = load_manifest(args.manifest)
    out = _out_dir(args.out)
    pool = _pool_from(args.pool)
    sampler = _sampler(args, manifest, pool, args.segment_seconds)
    seeds = example_seeds(args.seed, SYNTH_PURPOSE, args.count) if args.count else []
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LABELS_HEADER)
        for i, ex in enumerate(iter_examples(sampler, seeds)):
            ex_id = f"ex{i:05d}"
            paths = example_paths(out, ex_id)
            write_wav(ex.mixture, paths["mixture"])
            for k in range(2):
                write_wav(ex.estimates[k], paths[f"estimate{k + 1}"])
                write_wav(ex.truths[k], paths[f"truth{k + 1}"])
            w.writerow(
                [ex_id, *(_fmt(v) for v in ex.oracle_snr_raw_db), *(_fmt(v) for v in ex.oracle_snr_db), ex.degrader.name, int(seeds[i])]
            )
    print(f"wrote {args.count} examples to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    if args.manifest is None or args.out is None:
        raise UsageError("train needs --manifest and --out (checkpoint path)")
    values: dict = {}
    if args.config is not None:
        cfg_path = Path(args.config)
        try:
            text = cfg_path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config {cfg_path}: {exc}") from exc
        values = parse_config(text, str(cfg_path))
    if args.seed is not None:
        values["seed"] = args.seed
    if args.segment_seconds is not None:
        values["segment_seconds"] = args.segment_seconds
    manifest = load_manifest(args.manifest)
    values.setdefault("sample_rate", args.sample_rate or manifest.sample_rate)
    model_cfg, train_cfg, extra = split_config(values)
    sampler = _sampler(args, manifest, _pool_from(extra.get("pool")), model_cfg.segment_seconds, extra)
    if sampler.sample_rate != model_cfg.sample_rate:
        raise RateError(f"config sample_rate {model_cfg.sample_rate} differs from data rate {sampler.sample_rate}")

    model = build_model(model_cfg, seed=extra.get("model_seed", train_cfg.seed))
    print(f"parameters: {model.parameter_count}")
    ckpt = Path(args.out)
    log_path = Path(args.log) if args.log else ckpt.with_suffix(".log.jsonl")
    for p in (ckpt, log_path):
        p.parent.mkdir(parents=True, exist_ok=True)
    with open(log_path, "w", encoding="utf-8") as log:

        def on_epoch(state):
            rec = state.log_record()
            log.write(json.dumps(rec) + "\n")
            log.flush()
            print(json.dumps(rec))

        result = train(model, sampler, train_cfg, on_epoch=on_epoch)
    if not all(p.data.size and np.all(np.isfinite(p.data)) for p in model.parameters):
        raise FloatingPointError("training produced non-finite parameters")
    save_checkpoint(model, result.best, ckpt)
    print(f"best epoch {result.best.epoch}; checkpoint written to {ckpt}")
    return EXIT_OK


def _estimate_jobs(args) -> list[tuple[Path, list[Path]]]:
    if args.manifest is not None:
        if args.files:
            raise UsageError("give either --manifest or WAV paths, not both")
        manifest = load_manifest(args.manifest, require_pairs=False)
        jobs = []
        for row in manifest.rows:
            if row.mixture_path is None:
                raise DataError(f"manifest row {row.id!r} has no mixture_path")
            jobs.append((row.mixture_path, [p for p in (row.source1_path, row.source2_path) if p is not None]))
        return jobs
    if len(args.files) not in (2, 3):
        raise UsageError("estimate needs MIXTURE.wav ESTIMATE.wav [ESTIMATE2.wav]")
    paths = [Path(p) for p in args.files]
    return [(paths[0], paths[1:])]


def cmd_estimate(args) -> int:
    if args.checkpoint is None:
        raise UsageError("estimate needs --checkpoint")
    jobs = _estimate_jobs(args)
    model, _ = load_checkpoint(args.checkpoint)
    for mix_path, est_paths in jobs:
        mixture = read_wav(mix_path)
        if args.sample_rate is not None and mixture.sample_rate != args.sample_rate:
            raise RateError(f"{mix_path} is {mixture.sample_rate} Hz, expected {args.sample_rate}")
        for p in est_paths:
            est = read_wav(p)
            if est.sample_rate != mixture.sample_rate:
                raise RateError(f"{p} is {est.sample_rate} Hz but {mix_path} is {mixture.sample_rate} Hz")
            if len(est) != len(mixture):
                raise ShapeError(f"{p} has {len(est)} samples but {mix_path} has {len(mixture)}")
            res = forward_estimate(model, mixture, est)
            print(f"{p}\t{res.snr_hat_db:.2f}")
    return EXIT_OK


def load_labeled_dir(directory, dtype=np.float32) -> LabeledSet:
    d = Path(directory)
    rows = read_labels(d / "labels.csv")
    if not rows:
        raise DataError(f"{d}: labels file has no examples")
    mix, est, orc, src = [], [], [], []
    for row in rows:
        paths = example_paths(d, row["id"])
        m = read_wav(paths["mixture"])
        for k in range(2):
            e = read_wav(paths[f"estimate{k + 1}"])
            if len(e) != len(m) or e.sample_rate != m.sample_rate:
                raise DataError(f"{row['id']}: estimate {k + 1} does not match its mixture")
            mix.append(m.samples.astype(dtype))
            est.append(e.samples.astype(dtype))
            orc.append(row["clipped"][k])
            src.append(k)
    lengths = {len(x) for x in mix}
    if len(lengths) != 1:
        raise DataError(f"{d}: examples have different lengths {sorted(lengths)}")
    return LabeledSet(np.stack(mix), np.stack(est), np.asarray(orc), np.asarray(src))


def cmd_eval(args) -> int:
    if args.scatter_in is not None:
        report = read_scatter(args.scatter_in)
    else:
        if args.checkpoint is None or args.labeled_dir is None:
            raise UsageError("eval needs --checkpoint and --labeled-dir (or --scatter-in)")
        model, _ = load_checkpoint(args.checkpoint)
        report = evaluate(model, load_labeled_dir(args.labeled_dir))
    out = _out_dir(args.out)
    summary = {k: v for k, v in report.to_dict().items() if k not in ("scatter", "source_index")}
    summary["format"] = "blindsisnr-report/1"
    (out / "report.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    write_scatter(report, out / "scatter.csv")
    if args.svg:
        Path(args.svg).write_text(scatter_svg(report.scatter, title=f"r = {report.pearson_pooled:.3f}"), encoding="utf-8")
    print(json.dumps(summary))
    return EXIT_OK


# --------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="blindsisnr", description="Blind SI-SNR estimation for separated speech.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--sample-rate", type=int, default=None, help="expected sample rate in Hz")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("synth", help="materialize labeled synthetic examples")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--segment-seconds", type=float, default=2.0)
    p.add_argument("--pool", default=None, help="comma-separated kind/stage names (default: 9-spec pool)")
    p.add_argument("--noise-dir")
    p.add_argument("--rir-dir")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train an estimator")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--config", help="key = value file")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="JSON-lines log path (default: next to the checkpoint)")
    p.add_argument("--segment-seconds", type=float, default=None)
    p.add_argument("--noise-dir")
    p.add_argument("--rir-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("estimate", help="estimate SI-SNR of separated signals")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", help="batch mode: rows with mixture_path and one or two estimate paths")
    p.add_argument("files", nargs="*", help="MIXTURE.wav ESTIMATE.wav [ESTIMATE2.wav]")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("eval", help="score a checkpoint on a labeled directory")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--labeled-dir")
    p.add_argument("--scatter-in", help="recompute the report from an existing scatter CSV")
    p.add_argument("--out", required=True, help="output directory for report.json and scatter.csv")
    p.add_argument("--svg", help="also write a scatter plot to this SVG path")
    p.set_defaults(func=cmd_eval)
    return parser


_DATA_ERRORS = (DataError, FormatError, RateError, ShapeError, CheckpointError, OSError)
_NUMERIC_ERRORS = (DegenerateSignalError, DegenerateStatisticsError, FloatingPointError)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "synth" and args.seed is None:
        args.seed = 0
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"blindsisnr: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _NUMERIC_ERRORS as exc:
        print(f"blindsisnr: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except _DATA_ERRORS as exc:
        print(f"blindsisnr: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
