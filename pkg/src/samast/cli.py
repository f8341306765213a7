"""Command-line entry point: synth, preprocess, train, evaluate, ablation, embed, print-config."""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import numpy as np

from .data import (
    CLASS_NAMES,
    load_icbhi_dir,
    load_synthetic,
    parse_split_file,
    split_records,
    synth_manifest,
    write_synthetic_dataset,
)
from .dsp import MelConfig, preprocess, spectrogram_from_bytes, spectrogram_to_bytes
from .errors import ConfigError, DataError, IngestionError, SamastError
from .metrics import emit_report, evaluate_predictions
from .model import ModelCheckpoint, ModelConfig, extract_embedding, load_checkpoint, predict, save_checkpoint
from .optim import OptimizerConfig
from .train import TrainSettings, predict_logits, train
from .tsne import TsneConfig, coords_csv, kl_csv, tsne_run

log = logging.getLogger("samast")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"  # synthetic | icbhi-dir
    path: str = "data/synth/manifest.csv"
    cache: str = ""  # defaults to <out>/cache


@dataclass(frozen=True)
class SplitSection:
    mode: str = "official-file"  # official-file | subject-stratified
    file: str = ""  # defaults to split.txt next to the data source
    ratio: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class SynthSection:
    out: str = "data/synth"
    train_counts: tuple[int, ...] = (200, 50, 25, 25)
    test_counts: tuple[int, ...] = (25, 25, 25, 25)
    seed: int = 0
    min_duration: float = 1.5
    max_duration: float = 4.0


@dataclass(frozen=True)
class EmbedSection:
    split: str = "test"
    checkpoint: str = ""  # defaults to <out>/checkpoints/final.astc
    tsne: TsneConfig = TsneConfig()


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = DataSection()
    split: SplitSection = SplitSection()
    mel: MelConfig = MelConfig()
    model: ModelConfig = ModelConfig()
    optim: OptimizerConfig = OptimizerConfig(sam=True)
    epochs: int = 20
    batch_size: int = 8
    sampler: str = "weighted"
    seed: int = 0
    out: str = "runs/default"
    strict_metrics: bool = False
    duration: float = 8.0
    synth: SynthSection = SynthSection()
    embed: EmbedSection = EmbedSection()

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))

    @property
    def settings(self) -> TrainSettings:
        return TrainSettings(self.epochs, self.batch_size, self.sampler, self.seed)

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def cache_dir(self) -> Path:
        return Path(self.data.cache) if self.data.cache else self.out_dir / "cache"

    @property
    def split_file(self) -> Path:
        return Path(self.split.file) if self.split.file else Path(self.data.path).parent / "split.txt"

    def validate(self, needs_data: bool = False) -> "RunConfig":
        self.mel.validate()
        self.model.validate()
        self.optim.validate()
        self.settings.validate()
        self.embed.tsne.validate()
        if self.data.source not in ("synthetic", "icbhi-dir"):
            raise ConfigError(f"data.source must be 'synthetic' or 'icbhi-dir', got {self.data.source!r}")
        if self.split.mode not in ("official-file", "subject-stratified"):
            raise ConfigError(f"split.mode must be 'official-file' or 'subject-stratified', got {self.split.mode!r}")
        if self.embed.split not in ("train", "test"):
            raise ConfigError(f"embed.split must be 'train' or 'test', got {self.embed.split!r}")
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        frames = 1 + (int(round(self.duration * self.mel.sample_rate)) - self.mel.window) // self.mel.hop
        frames += (-frames) % self.mel.pad_multiple
        if (self.model.input_bins, self.model.input_frames) != (self.mel.mel_bins, frames):
            raise ConfigError(
                f"model input {self.model.input_bins}x{self.model.input_frames} does not match the "
                f"{self.mel.mel_bins}x{frames} spectrograms this mel config produces"
            )
        s = self.synth
        if len(s.train_counts) != 4 or len(s.test_counts) != 4 or min(*s.train_counts, *s.test_counts) < 0:
            raise ConfigError("synth counts must be four nonnegative integers per split")
        if not 0 < s.min_duration <= s.max_duration:
            raise ConfigError("synth durations must satisfy 0 < min_duration <= max_duration")
        if needs_data:
            path = Path(self.data.path)
            if self.data.source == "synthetic" and not path.is_file():
                raise ConfigError(f"synthetic manifest {path} does not exist")
            if self.data.source == "icbhi-dir" and not path.is_dir():
                raise ConfigError(f"ICBHI directory {path} does not exist")
            if self.split.mode == "official-file" and not self.split_file.is_file():
                raise ConfigError(f"split file {self.split_file} does not exist")
        return self


_SECTIONS = {
    "data": DataSection,
    "split": SplitSection,
    "mel": MelConfig,
    "model": ModelConfig,
    "optim": OptimizerConfig,
    "synth": SynthSection,
    "embed": EmbedSection,
    "tsne": TsneConfig,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _coerce(cls, name: str, value, where: str):
    """Type-check one field against its default so config typos fail early."""
    default = getattr(cls(), name)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple) and not default:
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of numbers, got {value!r}")
        return tuple(float(v) for v in value)
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{where}: expected a list of integers, got {value!r}")
        return tuple(value)
    return value


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key {path}")
        default = getattr(defaults, key)
        if type(default) in _SECTIONS.values():
            kwargs[key] = _build(type(default), value, path)
        else:
            kwargs[key] = _coerce(cls, key, value, path)
    return cls(**kwargs)


def _merge(base: dict, extra: dict) -> dict:
    out = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: str | None = None, overrides=(), seed: int | None = None, out: str | None = None) -> RunConfig:
    """Defaults, then the JSON file, then ``--set key=value`` overrides, then ``--seed``/``--out``."""
    data = RunConfig().to_dict()
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        try:
            user = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {p}: invalid JSON ({exc})") from None
        data = _merge(data, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        node = data
        parts = key.split(".")
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config key {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key}")
        node[parts[-1]] = _parse_value(raw)
    if seed is not None:
        data["seed"] = seed
    if out is not None:
        data["out"] = out
    return _build(RunConfig, data, "")


def config_json(config: RunConfig) -> str:
    return json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n"


# ---------------------------------------------------------------------------
# dataset and cache


def _load_records(config: RunConfig):
    if config.data.source == "synthetic":
        records, failures = load_synthetic(config.data.path)
    else:
        records, failures = load_icbhi_dir(config.data.path)
    if config.split.mode == "official-file":
        official = parse_split_file(config.split_file.read_text())
        records = split_records(records, "official-file", official=official)
    else:
        records = split_records(records, "subject-stratified", ratio=config.split.ratio, seed=config.split.seed)
    return records, failures


INDEX_FIELDS = ("id", "label", "split", "subject", "bins", "frames")


def cmd_preprocess(config: RunConfig) -> dict:
    """Write one SPG1 file per cycle plus ``index.csv`` and ``mel.json``; rewrites are byte-identical."""
    config.validate(needs_data=True)
    records, failures = _load_records(config)
    cache = config.cache_dir
    cache.mkdir(parents=True, exist_ok=True)
    rows = []
    for rec in records:
        try:
            spec = preprocess(rec.clip, config.mel, config.duration)
        except DataError as exc:
            log.warning("skipping %s: %s", rec.record_id, exc)
            failures.append(f"{rec.record_id}: {exc}")
            continue
        (cache / f"{rec.record_id}.spg").write_bytes(spectrogram_to_bytes(spec))
        rows.append((rec.record_id, rec.label, rec.split, rec.subject_id, spec.bins, spec.frames))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(INDEX_FIELDS)
    w.writerows(rows)
    (cache / "index.csv").write_text(buf.getvalue())
    (cache / "mel.json").write_text(json.dumps({**config.mel.to_dict(), "duration": config.duration}, sort_keys=True) + "\n")
    log.info("preprocessed %d records, %d skipped", len(rows), len(failures))
    return {"written": len(rows), "skipped": len(failures), "failures": failures}


@dataclass
class CachedSplit:
    ids: list[str]
    labels: np.ndarray
    values: np.ndarray


def load_cache(config: RunConfig, split: str) -> CachedSplit:
    """Read one split from the cache after checking it was built with this mel config."""
    cache = config.cache_dir
    index, mel_file = cache / "index.csv", cache / "mel.json"
    if not index.is_file() or not mel_file.is_file():
        raise ConfigError(f"no spectrogram cache at {cache}; run preprocess first")
    built = json.loads(mel_file.read_text())
    wanted = {**config.mel.to_dict(), "duration": config.duration}
    if built != wanted:
        raise ConfigError(f"cache {cache} was built with a different mel config: {built} vs {wanted}")
    ids, labels, values = [], [], []
    with open(index, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["split"] != split:
                continue
            shape = (int(row["bins"]), int(row["frames"]))
            if shape != (config.model.input_bins, config.model.input_frames):
                raise ConfigError(
                    f"cached {row['id']} is {shape[0]}x{shape[1]}, model expects "
                    f"{config.model.input_bins}x{config.model.input_frames}"
                )
            spec = spectrogram_from_bytes((cache / f"{row['id']}.spg").read_bytes())
            ids.append(row["id"])
            labels.append(int(row["label"]))
            values.append(spec.values)
    if not ids:
        raise IngestionError(f"cache {cache} has no {split} records")
    return CachedSplit(ids, np.asarray(labels, dtype=np.int64), np.stack(values))


# ---------------------------------------------------------------------------
# commands


def _structure(config: ModelConfig) -> ModelConfig:
    return replace(config, norm_mean=(), norm_std=())


def cmd_train(config: RunConfig, out: Path | None = None) -> dict:
    """Train on the cached train split; writes ``train.log``, per-epoch and final checkpoints."""
    config.validate()
    out = out or config.out_dir
    data = load_cache(config, "train")
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    result = train(
        data.values, data.labels, config.model, config.optim, config.settings, ckpt_dir, on_line=log.debug
    )
    (out / "train.log").write_text("\n".join(result.log_lines) + "\n")
    final = ModelCheckpoint(
        result.config,
        result.params,
        result.state.to_arrays(),
        {"epoch": config.epochs, "seed": config.seed, "step": result.state.step},
    )
    save_checkpoint(final, ckpt_dir / "final.astc")
    log.info("trained %d steps, train accuracy %.4f", result.state.step, result.train_accuracy)
    return {"train_accuracy": result.train_accuracy, "checkpoint": ckpt_dir / "final.astc", "steps": result.state.step}


def _load_model(config: RunConfig, path: Path) -> ModelCheckpoint:
    if not path.is_file():
        raise ConfigError(f"checkpoint {path} does not exist")
    ckpt = load_checkpoint(path)
    if _structure(ckpt.config) != _structure(config.model):
        raise ConfigError(f"checkpoint architecture {_structure(ckpt.config)} differs from config {_structure(config.model)}")
    return ckpt


def predictions_csv(ids, labels, logits: np.ndarray, preds: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "true", "predicted"] + [f"logit_{n.lower()}" for n in CLASS_NAMES])
    for rid, t, p, row in zip(ids, labels, preds, logits):
        w.writerow([rid, int(t), int(p)] + [repr(float(v)) for v in row])
    return buf.getvalue()


def cmd_evaluate(config: RunConfig, checkpoint: Path | None = None, out: Path | None = None):
    """Predict the test split; writes ``predictions.csv`` and the report files."""
    config.validate()
    out = out or config.out_dir
    ckpt = _load_model(config, checkpoint or out / "checkpoints" / "final.astc")
    data = load_cache(config, "test")
    logits = predict_logits(data.values, ckpt.params, ckpt.config)
    preds = predict(logits)
    out.mkdir(parents=True, exist_ok=True)
    (out / "predictions.csv").write_text(predictions_csv(data.ids, data.labels, logits, preds))
    report = evaluate_predictions(data.labels, preds, strict=config.strict_metrics)
    emit_report(report, out)
    log.info("Se %s Sp %s Score %s", report.sensitivity, report.specificity, report.score)
    return report


ABLATION = (
    ("baseline", "uniform", False),
    ("weighted", "weighted", False),
    ("weighted_sam", "weighted", True),
)


def cmd_ablation(config: RunConfig) -> list:
    """Baseline, +weighted sampling, +SAM: same seed, same cache, same test split."""
    config.validate()
    rows, reports = [], []
    for name, sampler, sam in ABLATION:
        run = replace(config, sampler=sampler, optim=replace(config.optim, sam=sam))
        run_dir = config.out_dir / "ablation" / name
        cmd_train(run, run_dir)
        report = cmd_evaluate(run, out=run_dir)
        reports.append(report)
        rows.append([name] + [f"{v:.4f}" if v is not None else "undefined" for v in (report.sensitivity, report.specificity, report.score)])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["config", "Se", "Sp", "Score"])
    w.writerows(rows)
    (config.out_dir / "ablation.csv").write_text(buf.getvalue())
    return reports


def cmd_embed(config: RunConfig, checkpoint: Path | None = None):
    """CLS embeddings of one split, then t-SNE; writes ``embeddings.csv``, ``tsne.csv``, ``kl.csv``."""
    config.validate()
    out = config.out_dir
    path = checkpoint or (Path(config.embed.checkpoint) if config.embed.checkpoint else out / "checkpoints" / "final.astc")
    ckpt = _load_model(config, path)
    data = load_cache(config, config.embed.split)
    emb = np.concatenate(
        [extract_embedding(data.values[i : i + 16], ckpt.params, ckpt.config) for i in range(0, len(data.ids), 16)]
    )
    tcfg = config.embed.tsne
    n = len(data.ids)
    if tcfg.perplexity >= (n - 1) / 3:
        # keep the calibration well posed on small splits
        reduced = max((n - 1) / 3 - 1.0, 1.5)
        log.warning("perplexity %.1f too large for %d points, using %.3f", tcfg.perplexity, n, reduced)
        tcfg = replace(tcfg, perplexity=reduced)
    result = tsne_run(emb, tcfg)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"] + [f"e{j}" for j in range(emb.shape[1])])
    for rid, lab, row in zip(data.ids, data.labels, emb):
        w.writerow([rid, int(lab)] + [repr(float(v)) for v in row])
    (out / "embeddings.csv").write_text(buf.getvalue())
    (out / "tsne.csv").write_text(coords_csv(data.ids, [int(v) for v in data.labels], result.coords))
    (out / "kl.csv").write_text(kl_csv(result.kl_trace))
    return result, data


def cmd_synth(config: RunConfig) -> Path:
    config.validate()
    s = config.synth
    rows, split = synth_manifest(s.train_counts, s.test_counts, s.seed, (s.min_duration, s.max_duration))
    path = write_synthetic_dataset(s.out, rows, split, config.mel.sample_rate)
    log.info("wrote %d synthetic records to %s", len(rows), s.out)
    return path


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="samast", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; omitted fields take defaults")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--out", help="override the output directory")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one field, e.g. optim.lr=1e-3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true", help="log every training step")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("synth", "generate a seeded synthetic dataset"),
        ("preprocess", "build the spectrogram cache"),
        ("train", "train on the cached train split"),
        ("evaluate", "score a checkpoint on the test split"),
        ("ablation", "run the three-configuration ablation"),
        ("embed", "extract embeddings and run t-SNE"),
        ("print-config", "print the effective config as JSON"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        if name in ("evaluate", "embed"):
            p.add_argument("--checkpoint", help="checkpoint path (default <out>/checkpoints/final.astc)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s", stream=sys.stderr
    )
    try:
        config = load_config(args.config, args.overrides, args.seed, args.out)
        checkpoint = Path(args.checkpoint) if getattr(args, "checkpoint", None) else None
        if args.command == "print-config":
            config.validate()
            sys.stdout.write(config_json(config))
        elif args.command == "synth":
            cmd_synth(config)
        elif args.command == "preprocess":
            summary = cmd_preprocess(config)
            print(f"written={summary['written']} skipped={summary['skipped']}")
        elif args.command == "train":
            summary = cmd_train(config)
            print(f"train_accuracy={summary['train_accuracy']:.4f}")
        elif args.command == "evaluate":
            report = cmd_evaluate(config, checkpoint)
            sys.stdout.write((config.out_dir / "report_summary.txt").read_text())
        elif args.command == "ablation":
            cmd_ablation(config)
            sys.stdout.write((config.out_dir / "ablation.csv").read_text())
        elif args.command == "embed":
            cmd_embed(config, checkpoint)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except SamastError as exc:
        log.error("error: %s", exc)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to the runtime exit code
        log.error("unexpected error: %s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
