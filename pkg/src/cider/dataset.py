"""Dataset manifests, per-participant instance grouping and synthetic corpora.

A manifest is a CSV file with header
``recording_id,participant_id,modality,audio_path,label,split``. Relative audio
paths resolve against the manifest's directory.
"""
from __future__ import annotations

import csv
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.fft import next_fast_len

from .dsp import Waveform, load_audio, write_wav
from .errors import (
    AudioError,
    ConfigError,
    ConsistencyError,
    ManifestParseError,
    ManifestValidationError,
)

log = logging.getLogger(__name__)

MODALITIES = ("cough", "breath", "vowel", "counting", "speech")
LABELS = ("positive", "negative", "blind")
SPLITS = ("train", "val", "test")
HEADER = ("recording_id", "participant_id", "modality", "audio_path", "label", "split")
POLICIES = ("drop-incomplete", "zero-fill")


@dataclass(frozen=True)
class RecordingEntry:
    recording_id: str
    participant_id: str
    modality: str
    audio_path: str
    label: str
    split: str

    def row(self):
        return [getattr(self, k) for k in HEADER]


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    entries: tuple[RecordingEntry, ...]
    modality_set: tuple[str, ...]
    root: Path = field(default=Path("."), compare=False)

    def resolve(self, entry: RecordingEntry) -> Path:
        p = Path(entry.audio_path)
        return p if p.is_absolute() else self.root / p

    def split_entries(self, split: str) -> list[RecordingEntry]:
        return [e for e in self.entries if e.split == split]

    def counts(self) -> dict:
        """Recording counts per split and label, e.g. ``{"train": {"positive": 71, ...}}``."""
        out = {s: {lab: 0 for lab in LABELS} for s in SPLITS}
        for e in self.entries:
            out[e.split][e.label] += 1
        return out


@dataclass(frozen=True)
class InstanceGroup:
    """One network input: the recordings of one participant, or a single recording."""

    instance_id: str
    participant_id: str
    recordings: tuple[RecordingEntry | None, ...]  # aligned with modality_set
    modality_set: tuple[str, ...]
    label: str
    split: str

    def recording(self, modality: str) -> RecordingEntry | None:
        return self.recordings[self.modality_set.index(modality)]


@dataclass
class Instance:
    """An instance group with its audio loaded; ``waveforms`` follow ``modality_set``."""

    instance_id: str
    label: int | None
    waveforms: tuple[Waveform | None, ...]
    modality_set: tuple[str, ...]


def label_to_int(label: str) -> int | None:
    return {"positive": 1, "negative": 0}.get(label)


# -- manifest I/O ----------------------------------------------------------------

def _ordered_modalities(found: Iterable[str]) -> tuple[str, ...]:
    found = set(found)
    return tuple(m for m in MODALITIES if m in found)


def parse_manifest(text: str, name: str = "manifest", root: Path = Path("."),
                   modality_set: Sequence[str] | None = None) -> DatasetManifest:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestParseError("empty manifest", line=1) from None
    if tuple(h.strip() for h in header) != HEADER:
        raise ManifestParseError(f"header must be {','.join(HEADER)}", line=1)

    entries = []
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(HEADER):
            raise ManifestParseError(f"expected {len(HEADER)} fields, got {len(row)}", line=line)
        e = RecordingEntry(*row)
        for attr, allowed in (("modality", MODALITIES), ("label", LABELS), ("split", SPLITS)):
            value = getattr(e, attr)
            if value not in allowed:
                raise ManifestParseError(f"unknown {attr} {value!r}", line=line)
        if not e.recording_id or not e.participant_id:
            raise ManifestParseError("empty recording_id or participant_id", line=line)
        entries.append(e)

    if modality_set is None:
        modality_set = _ordered_modalities(e.modality for e in entries)
    return DatasetManifest(name, tuple(entries), tuple(modality_set), Path(root))


def validate_manifest(manifest: DatasetManifest, check_audio: bool = True) -> None:
    seen = set()
    for e in manifest.entries:
        if e.recording_id in seen:
            raise ManifestValidationError(f"duplicate recording_id {e.recording_id!r}")
        seen.add(e.recording_id)
    bad = [e.recording_id for e in manifest.entries if e.label == "blind" and e.split != "test"]
    if bad:
        raise ManifestValidationError(f"blind labels outside the test split: {bad}")
    stray = sorted({e.modality for e in manifest.entries} - set(manifest.modality_set))
    if stray:
        raise ManifestValidationError(f"modalities {stray} not in modality_set")
    splits_of = {}
    for e in manifest.entries:
        splits_of.setdefault(e.participant_id, set()).add(e.split)
    leaked = sorted(p for p, s in splits_of.items() if len(s) > 1)
    if leaked:
        raise ManifestValidationError(f"participants appear in several splits: {leaked}")
    if check_audio:
        missing = [str(manifest.resolve(e)) for e in manifest.entries if not manifest.resolve(e).is_file()]
        if missing:
            raise ManifestValidationError("missing audio files: " + ", ".join(missing))


def load_manifest(path, check_audio: bool = True,
                  modality_set: Sequence[str] | None = None) -> DatasetManifest:
    """Read and validate a manifest CSV; entry order follows the file."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    # a generic file name says nothing about the dataset; use its folder instead
    name = path.parent.resolve().name if path.stem == "manifest" else path.stem
    manifest = parse_manifest(text, name=name, root=path.parent, modality_set=modality_set)
    validate_manifest(manifest, check_audio=check_audio)
    return manifest


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADER)
    for e in manifest.entries:
        writer.writerow(e.row())
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(format_manifest(manifest), encoding="utf-8")


# -- grouping ----------------------------------------------------------------------

def group_instances(manifest: DatasetManifest, split: str, policy: str = "drop-incomplete",
                    counter: Counter | None = None) -> list[InstanceGroup]:
    """Group a split's recordings into network instances.

    Single-modality manifests give one instance per recording. Otherwise each
    participant becomes one instance holding one recording per modality;
    incomplete participants are dropped (counted under ``"dropped_incomplete"``)
    or, with ``policy="zero-fill"``, kept with ``None`` for the absent ones.
    """
    if policy not in POLICIES:
        raise ConfigError(f"unknown missing-modality policy {policy!r}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    mods = manifest.modality_set
    entries = manifest.split_entries(split)

    if len(mods) == 1:
        return [
            InstanceGroup(e.recording_id, e.participant_id, (e,), mods, e.label, split)
            for e in sorted(entries, key=lambda e: (e.participant_id, e.recording_id))
        ]

    by_participant: dict[str, dict[str, RecordingEntry]] = {}
    for e in entries:
        slot = by_participant.setdefault(e.participant_id, {})
        if e.modality in slot:
            raise ConsistencyError(
                f"participant {e.participant_id!r} has several {e.modality} recordings"
            )
        slot[e.modality] = e

    groups = []
    for pid in sorted(by_participant):
        slot = by_participant[pid]
        labels = {e.label for e in slot.values()}
        if len(labels) > 1:
            raise ConsistencyError(f"participant {pid!r} has conflicting labels {sorted(labels)}")
        if len(slot) < len(mods) and policy == "drop-incomplete":
            log.warning("dropping incomplete participant %s (has %s)", pid, sorted(slot))
            if counter is not None:
                counter["dropped_incomplete"] += 1
            continue
        groups.append(InstanceGroup(pid, pid, tuple(slot.get(m) for m in mods), mods,
                                    labels.pop(), split))
    return groups


def load_instances(manifest: DatasetManifest, split: str, sample_rate: int,
                   policy: str = "drop-incomplete") -> list[Instance]:
    out = []
    for g in group_instances(manifest, split, policy):
        waves = tuple(
            None if e is None else load_audio(manifest.resolve(e), sample_rate)
            for e in g.recordings
        )
        out.append(Instance(g.instance_id, label_to_int(g.label), waves, g.modality_set))
    return out


# -- synthetic corpora ------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    """Recipe for a synthetic corpus.

    ``counts`` maps split -> (n_positive, n_negative) participants. Positive
    recordings carry extra band-limited noise in ``signature_band`` whose
    level relative to the base signal is ``separation``. With
    ``negative_band`` set, negatives carry the same level of noise in that
    band instead of none, so the class cue is specific to the band pair.
    """

    name: str = "synthetic"
    counts: dict = field(default_factory=lambda: {"train": (60, 60), "val": (20, 20), "test": (20, 20)})
    modality_set: tuple[str, ...] = ("breath", "vowel", "counting")
    sample_rate: int = 16000
    duration_range: tuple[float, float] = (3.0, 9.0)
    separation: float = 1.0
    signature_band: tuple[float, float] = (1500.0, 2500.0)
    blind_test: bool = False
    negative_band: tuple[float, float] | None = None

    def __post_init__(self):
        train = self.counts.get("train", (0, 0))
        if min(train) < 1:
            raise ConfigError("synthetic train split needs at least one participant per class")
        if any(m not in MODALITIES for m in self.modality_set):
            raise ConfigError(f"unknown modality in {self.modality_set}")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ConfigError("duration_range must satisfy 0 < low <= high")
        if self.separation < 0:
            raise ConfigError("separation must be >= 0")
        for band in filter(None, (self.signature_band, self.negative_band)):
            if not 0 < band[0] < band[1] < self.sample_rate / 2:
                raise ConfigError("signature and negative bands must lie inside (0, sample_rate / 2)")


def _band_noise(rng, n, sr, band):
    n_fft = next_fast_len(n, real=True)
    spec = np.fft.rfft(rng.standard_normal(n_fft))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sr)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spec, n_fft)[:n]
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)


def _harmonic(t, f0, n_harm, rng):
    vib = 1.0 + 0.01 * np.sin(2 * np.pi * rng.uniform(3, 6) * t)
    z = np.exp(2j * np.pi * f0 * vib * t)
    zh = np.ones_like(z)
    x = np.zeros_like(t)
    for h in range(1, n_harm + 1):
        zh *= z  # exp(i * h * phase) by recurrence
        x += (zh * np.exp(1j * rng.uniform(0, 2 * np.pi))).imag / h
    return x


def _base_signal(modality, rng, n, sr, f0):
    t = np.arange(n) / sr
    if modality == "cough":
        x = np.zeros(n)
        for start in rng.uniform(0, max(n / sr - 0.4, 0.01), size=rng.integers(1, 4)):
            i0 = int(start * sr)
            seg = min(int(0.35 * sr), n - i0)
            env = np.exp(-np.arange(seg) / (0.06 * sr))
            x[i0 : i0 + seg] += env * _band_noise(rng, seg, sr, (200.0, 4000.0))
    elif modality == "breath":
        x = _band_noise(rng, n, sr, (100.0, 1200.0))
        x *= 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 0.4) * t) ** 2
    elif modality == "vowel":
        x = _harmonic(t, f0, 8, rng)
    else:  # counting / speech: voiced syllables with gaps
        rate = rng.uniform(2.0, 4.0)
        env = np.clip(np.sin(2 * np.pi * rate * t + rng.uniform(0, np.pi)), 0, None)
        x = env * _harmonic(t, f0 * rng.uniform(0.9, 1.1), 6, rng)
    return x / (np.sqrt(np.mean(x**2)) + 1e-12)


def synth_waveform(spec: SynthSpec, modality: str, positive: bool, rng, f0: float) -> Waveform:
    sr = spec.sample_rate
    n = int(rng.uniform(*spec.duration_range) * sr)
    x = _base_signal(modality, rng, n, sr, f0)
    x = x + 0.05 * rng.standard_normal(n)
    # draw the signature noise for both classes so that separation=0 yields
    # identically distributed audio
    sig = _band_noise(rng, n, sr, spec.signature_band)
    if positive:
        x = x + spec.separation * sig
    if spec.negative_band is not None:
        neg = _band_noise(rng, n, sr, spec.negative_band)
        if not positive:
            x = x + spec.separation * neg
    peak = np.max(np.abs(x)) + 1e-12
    return Waveform(x / peak * rng.uniform(0.3, 0.8), sr)


def generate_synthetic_corpus(spec: SynthSpec, seed: int, out_dir) -> DatasetManifest:
    """Write WAV files and ``manifest.csv`` under ``out_dir``; a pure function of (spec, seed)."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    entries = []
    index = 0
    for split in SPLITS:
        n_pos, n_neg = spec.counts.get(split, (0, 0))
        for k, positive in enumerate([True] * n_pos + [False] * n_neg):
            pid = f"{spec.name}-{split}-p{k:04d}"
            rng = np.random.default_rng([seed, index])
            index += 1
            f0 = rng.uniform(90.0, 250.0)
            label = "positive" if positive else "negative"
            if split == "test" and spec.blind_test:
                label = "blind"
            for modality in spec.modality_set:
                rid = f"{pid}-{modality}"
                w = synth_waveform(spec, modality, positive, rng, f0)
                rel = f"audio/{rid}.wav"
                write_wav(out_dir / rel, w)
                entries.append(RecordingEntry(rid, pid, modality, rel, label, split))
    manifest = DatasetManifest(spec.name, tuple(entries), tuple(spec.modality_set), out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


# -- converters for challenge layouts (best effort) ----------------------------------

def convert_compare(root, modality: str = "cough") -> DatasetManifest:
    """ComParE layout: ``wav/*.wav`` plus ``lab/{train,devel,test}.csv`` (filename,label)."""
    root = Path(root)
    split_files = {"train": "train.csv", "val": "devel.csv", "test": "test.csv"}
    entries = []
    for split, fname in split_files.items():
        path = root / "lab" / fname
        if not path.is_file():
            continue
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                wav = row.get("filename") or row.get("file_name")
                raw = (row.get("label") or "").strip().lower()
                label = {"positive": "positive", "negative": "negative"}.get(raw, "blind")
                if label == "blind" and split != "test":
                    raise ManifestValidationError(f"{path}: unlabeled training row {wav}")
                rid = Path(wav).stem
                entries.append(RecordingEntry(rid, rid, modality, f"wav/{wav}", label, split))
    if not entries:
        raise AudioError(f"{root}: no ComParE label files found under lab/")
    return DatasetManifest(root.name, tuple(entries), (modality,), root)


def convert_dicova(root, modality: str = "cough", fold: int = 1) -> DatasetManifest:
    """DiCOVA layout: ``AUDIO/<id>.wav``, ``metadata.csv`` (File_name,Covid_status),
    ``LISTS/train_fold_<k>.txt``, ``LISTS/val_fold_<k>.txt`` and optional ``LISTS/test.txt``."""
    root = Path(root)
    status = {}
    with open(root / "metadata.csv", newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            status[row["File_name"]] = {"p": "positive", "n": "negative"}.get(
                row["Covid_status"].strip().lower(), "blind")
    lists = {"train": f"train_fold_{fold}.txt", "val": f"val_fold_{fold}.txt", "test": "test.txt"}
    entries = []
    for split, fname in lists.items():
        path = root / "LISTS" / fname
        if not path.is_file():
            continue
        for rid in path.read_text().split():
            label = status.get(rid, "blind")
            entries.append(RecordingEntry(rid, rid, modality, f"AUDIO/{rid}.wav", label, split))
    return DatasetManifest(root.name, tuple(entries), (modality,), root)
