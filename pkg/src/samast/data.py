"""Respiratory-cycle datasets: ICBHI ingestion, splits, class-balanced sampling, synthetic audio."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .dsp import AudioClip, MelConfig, decode_wav, encode_wav, log_mel, resample
from .errors import ConfigError, DataError, IngestionError, ParseError, RangeError

log = logging.getLogger(__name__)

NORMAL, CRACKLE, WHEEZE, BOTH = 0, 1, 2, 3
CLASS_NAMES = ("Normal", "Crackle", "Wheeze", "Both")
MIN_CYCLE_SECONDS = 0.025  # one 400-sample STFT window at 16 kHz


class AnnotationRow(NamedTuple):
    start: float
    end: float
    crackle: bool
    wheeze: bool


@dataclass(frozen=True, eq=False)
class CycleRecord:
    record_id: str
    clip: AudioClip
    label: int
    subject_id: str
    recording_id: str
    split: str | None = None
    start: float = 0.0
    end: float = 0.0


def parse_annotation(text: str) -> list[AnnotationRow]:
    """Parse ICBHI ``start end crackle wheeze`` lines, tab or space separated."""
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ParseError(f"line {lineno}: expected 4 fields, got {len(parts)}")
        try:
            start, end = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"line {lineno}: start/end are not decimals: {line.strip()!r}") from None
        if parts[2] not in ("0", "1") or parts[3] not in ("0", "1"):
            raise ParseError(f"line {lineno}: crackle/wheeze flags must be 0 or 1, got {parts[2]!r} {parts[3]!r}")
        if not start < end:
            raise RangeError(f"line {lineno}: start {start} is not before end {end}")
        rows.append(AnnotationRow(start, end, parts[2] == "1", parts[3] == "1"))
    return rows


def label_of(crackle: bool, wheeze: bool) -> int:
    return int(bool(crackle)) + 2 * int(bool(wheeze))


def class_index(name_or_index: str | int) -> int:
    if isinstance(name_or_index, str) and not name_or_index.strip().isdigit():
        lowered = [n.lower() for n in CLASS_NAMES]
        key = name_or_index.strip().lower()
        if key not in lowered:
            raise ParseError(f"unknown class {name_or_index!r}")
        return lowered.index(key)
    idx = int(name_or_index)
    if not 0 <= idx < len(CLASS_NAMES):
        raise ParseError(f"class index {idx} outside 0..3")
    return idx


def slice_cycles(
    clip: AudioClip,
    rows: Sequence[AnnotationRow],
    subject_id: str = "",
    recording_id: str = "",
    min_duration: float = MIN_CYCLE_SECONDS,
) -> list[CycleRecord]:
    """Cut one record per annotation row, samples ``[round(start*sr), round(end*sr))``."""
    rate = clip.sample_rate
    n = len(clip)
    recording_id = recording_id or clip.source_id
    out = []
    for i, row in enumerate(rows):
        lo, hi = int(round(row.start * rate)), int(round(row.end * rate))
        if row.start < 0 or lo < 0 or hi > n + 1:
            raise RangeError(f"{recording_id} row {i}: cycle {row.start}-{row.end}s outside the {n / rate:.3f}s clip")
        hi = min(hi, n)
        if (hi - lo) / rate < min_duration:
            log.warning("%s row %d: %.4fs cycle is shorter than one STFT window, dropped", recording_id, i, (hi - lo) / rate)
            continue
        piece = AudioClip(clip.samples[lo:hi], rate, f"{recording_id}#{i:03d}")
        out.append(
            CycleRecord(
                record_id=f"{recording_id}_c{i:03d}",
                clip=piece,
                label=label_of(row.crackle, row.wheeze),
                subject_id=subject_id,
                recording_id=recording_id,
                start=row.start,
                end=row.end,
            )
        )
    return out


def subject_of(name: str) -> str:
    return Path(name).stem.split("_")[0]


def load_icbhi_dir(root, min_duration: float = MIN_CYCLE_SECONDS) -> tuple[list[CycleRecord], list[str]]:
    """Read paired ``<name>.wav``/``<name>.txt`` files. Returns records and per-recording failures."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"ICBHI directory {root} does not exist")
    records, failures = [], []
    for wav in sorted(root.glob("*.wav")):
        txt = wav.with_suffix(".txt")
        try:
            if not txt.exists():
                raise IngestionError(f"{wav.name}: missing annotation file {txt.name}")
            clip = decode_wav(wav.read_bytes(), wav.stem)
            rows = parse_annotation(txt.read_text())
            records.extend(slice_cycles(clip, rows, subject_of(wav.stem), wav.stem, min_duration))
        except DataError as exc:
            log.warning("skipping %s: %s", wav.name, exc)
            failures.append(f"{wav.stem}: {exc}")
    return records, failures


# ---------------------------------------------------------------------------
# splits


def parse_split_file(text: str) -> dict[str, str]:
    """``<name>\\t<train|test>`` lines to a mapping."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise ParseError(f"split line {lineno}: expected '<name> <train|test>', got {line.strip()!r}")
        out[parts[0]] = parts[1]
    return out


def split_records(
    records: Sequence[CycleRecord],
    mode: str,
    official: dict[str, str] | None = None,
    ratio: float = 0.8,
    seed: int = 0,
) -> list[CycleRecord]:
    """Tag each record ``train`` or ``test``.

    ``official-file`` looks the recording up in ``official``;
    ``subject-stratified`` assigns whole subjects, ``round(ratio * subjects)``
    of them to train, chosen by a seeded permutation of the sorted ids.
    """
    if mode == "official-file":
        if official is None:
            raise ConfigError("official-file split needs the split list")
        out = []
        for r in records:
            if r.recording_id not in official:
                raise IngestionError(f"recording {r.recording_id} is missing from the official split list")
            out.append(replace(r, split=official[r.recording_id]))
        return out
    if mode == "subject-stratified":
        if not 0.0 < ratio < 1.0:
            raise ConfigError(f"split ratio must lie in (0, 1), got {ratio}")
        subjects = sorted({r.subject_id for r in records})
        order = np.random.default_rng(seed).permutation(len(subjects))
        n_train = int(round(ratio * len(subjects)))
        train = {subjects[i] for i in order[:n_train]}
        return [replace(r, split="train" if r.subject_id in train else "test") for r in records]
    raise ConfigError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------------------
# class-balanced sampling


def make_weights(labels: Iterable[int], num_classes: int = 4) -> np.ndarray:
    """Per-record draw probabilities giving every class total mass ``1 / num_classes``."""
    labels = np.asarray([r.label if isinstance(r, CycleRecord) else r for r in labels], dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    missing = np.flatnonzero(counts == 0)
    if missing.size:
        raise ConfigError(f"class {CLASS_NAMES[missing[0]] if num_classes == 4 else missing[0]} has no training records")
    weights = 1.0 / (num_classes * counts[labels])
    return weights / weights.sum()


def weighted_sample(weights: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """I.i.d. indices drawn with replacement, ``P(i) = weights[i] / sum(weights)``."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0 or (w < 0).any() or w.sum() <= 0:
        raise ConfigError("weights must be a nonempty nonnegative vector with positive sum")
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.searchsorted(cdf, rng.random(size), side="right")


# ---------------------------------------------------------------------------
# synthetic respiratory sounds


def _band_noise(rng: np.random.Generator, n: int, rate: int, lo: float, hi: float) -> np.ndarray:
    spectrum = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.arange(n // 2 + 1) * rate / n
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    x = np.fft.irfft(spectrum, n)
    return x / (np.sqrt(np.mean(x**2)) + 1e-300)


def synth_generate(
    label: int, duration: float, rng: np.random.Generator | int, sample_rate: int = 16000, source_id: str = ""
) -> AudioClip:
    """One seeded synthetic respiratory cycle.

    Normal: 100-1000 Hz band noise at low level. Crackle adds 5-20
    exponentially damped broadband bursts (2-10 ms decay) at least 40 ms
    apart. Wheeze adds a 200-800 Hz tone with slow frequency drift and two
    weaker harmonics, covering 60-90% of the cycle. Both superposes the two.
    """
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")
    label = class_index(label)
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n = max(int(round(duration * sample_rate)), 1)
    t = np.arange(n) / sample_rate
    level = rng.uniform(0.01, 0.03)
    x = level * _band_noise(rng, n, sample_rate, 100.0, 1000.0)
    if label in (WHEEZE, BOTH):
        f0 = rng.uniform(200.0, 800.0)
        drift = 1.0 + rng.uniform(0.02, 0.06) * np.sin(2 * np.pi * rng.uniform(0.2, 1.0) * t + rng.uniform(0, 2 * np.pi))
        phase = 2 * np.pi * np.cumsum(f0 * drift) / sample_rate
        span = rng.uniform(0.6, 0.9)
        length = int(span * n)
        onset = int(rng.integers(0, n - length + 1))
        ramp = max(min(int(0.02 * sample_rate), length // 4), 1)
        env = np.zeros(n)
        env[onset : onset + length] = 1.0
        fade = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
        env[onset : onset + ramp] = fade
        env[onset + length - ramp : onset + length] = fade[::-1]
        amp = level * rng.uniform(3.0, 5.0)
        # voiced wheezes carry weaker harmonics above the fundamental
        tone = sum(w * np.sin(k * phase) for k, w in ((1, 1.0), (2, 0.5), (3, 0.25)) if k * f0 * 1.1 < sample_rate / 2)
        x = x + amp * env * tone
    if label in (CRACKLE, BOTH):
        slot = int(0.04 * sample_rate)
        slots = max(n // slot - 1, 1)
        count = min(int(rng.integers(5, 21)), slots)
        chosen = np.sort(rng.choice(slots, size=count, replace=False))
        for s in chosen:
            start = int(s * slot + rng.integers(0, slot // 4))
            tau = rng.uniform(0.002, 0.010)
            m = min(int(6 * tau * sample_rate), n - start)
            burst = rng.standard_normal(m) * np.exp(-np.arange(m) / (tau * sample_rate))
            x[start : start + m] += level * rng.uniform(25.0, 50.0) * burst
    peak = np.max(np.abs(x))
    if peak > 0.99:
        x *= 0.99 / peak
    return AudioClip(x, sample_rate, source_id)


def burst_count(clip: AudioClip, frame: float = 0.005, factor: float = 4.0) -> int:
    """Number of runs of short-time frames whose energy exceeds ``factor`` x the median frame energy."""
    size = max(int(round(frame * clip.sample_rate)), 1)
    n = len(clip) // size
    if n == 0:
        return 0
    energy = np.sum(clip.samples[: n * size].reshape(n, size) ** 2, axis=1)
    above = energy > factor * np.median(energy)
    return int(np.sum(above[1:] & ~above[:-1]) + above[0])


def ridge_ratio(clip: AudioClip, band: tuple[float, float] = (100.0, 1000.0), mel: MelConfig = MelConfig()) -> float:
    """Max over median time-averaged mel energy, over bins centered inside ``band``."""
    from .dsp import mel_centers

    clip = resample(clip, mel.sample_rate)
    spec = log_mel(clip, mel)
    energy = np.exp(spec.values).mean(axis=1)
    centers = mel_centers(mel)[1:-1]
    inside = (centers >= band[0]) & (centers <= band[1])
    sel = energy[inside]
    return float(sel.max() / np.median(sel))


def oracle_label(clip: AudioClip, min_bursts: int = 5, ridge: float = 3.0) -> int:
    """Rule-based classifier built from the burst and ridge detectors."""
    return label_of(burst_count(clip) >= min_bursts, ridge_ratio(clip) > ridge)


# ---------------------------------------------------------------------------
# synthetic datasets on disk

MANIFEST_FIELDS = ("id", "class", "seed", "duration")


@dataclass(frozen=True)
class ManifestRow:
    record_id: str
    label: int
    seed: int
    duration: float


def synth_manifest(
    train_counts: Sequence[int],
    test_counts: Sequence[int],
    seed: int = 0,
    duration_range: tuple[float, float] = (1.5, 4.0),
) -> tuple[list[ManifestRow], dict[str, str]]:
    """Rows plus an official-style split list for a seeded synthetic dataset."""
    rng = np.random.default_rng(seed)
    rows, split = [], {}
    idx = 0
    for part, counts in (("train", train_counts), ("test", test_counts)):
        if len(counts) != 4 or min(counts) < 0:
            raise ConfigError(f"{part} counts must be four nonnegative integers, got {counts}")
        for label, count in enumerate(counts):
            for _ in range(int(count)):
                rid = f"s{idx:05d}_{CLASS_NAMES[label].lower()}"
                dur = round(float(rng.uniform(*duration_range)), 3)
                rows.append(ManifestRow(rid, label, int(seed) * 1_000_003 + idx, dur))
                split[rid] = part
                idx += 1
    return rows, split


def write_synthetic_dataset(
    out_dir, rows: Sequence[ManifestRow], split: dict[str, str], sample_rate: int = 16000
) -> Path:
    """Render every manifest row to ``<id>.wav``; write ``manifest.csv`` and ``split.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for row in rows:
        clip = synth_generate(row.label, row.duration, row.seed, sample_rate, row.record_id)
        (out / f"{row.record_id}.wav").write_bytes(encode_wav(clip))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for row in rows:
            w.writerow([row.record_id, CLASS_NAMES[row.label], row.seed, f"{row.duration:.3f}"])
    (out / "split.txt").write_text("".join(f"{rid}\t{split[rid]}\n" for rid in sorted(split)))
    return out / "manifest.csv"


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames[:4]) != MANIFEST_FIELDS:
            raise ParseError(f"{path.name}: header must be {','.join(MANIFEST_FIELDS)}")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.append(ManifestRow(rec["id"], class_index(rec["class"]), int(rec["seed"]), float(rec["duration"])))
            except (ValueError, TypeError) as exc:
                raise ParseError(f"{path.name} line {lineno}: {exc}") from None
    return rows


def load_synthetic(manifest_path, min_duration: float = MIN_CYCLE_SECONDS) -> tuple[list[CycleRecord], list[str]]:
    """Decode the WAV behind every manifest row; each file is one cycle."""
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise ConfigError(f"manifest {manifest_path} does not exist")
    records, failures = [], []
    for row in read_manifest(manifest_path):
        wav = manifest_path.parent / f"{row.record_id}.wav"
        try:
            if not wav.exists():
                raise IngestionError(f"{wav.name}: file missing")
            clip = decode_wav(wav.read_bytes(), row.record_id)
            if clip.duration < min_duration:
                raise RangeError(f"{row.record_id}: {clip.duration:.4f}s is shorter than one STFT window")
        except DataError as exc:
            log.warning("skipping %s: %s", row.record_id, exc)
            failures.append(f"{row.record_id}: {exc}")
            continue
        records.append(CycleRecord(row.record_id, clip, row.label, subject_of(row.record_id), row.record_id))
    return records, failures
