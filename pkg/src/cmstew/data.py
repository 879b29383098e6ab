"""Datasets of time-aligned multimodal clips: CSV/JSON IO, label shifting,
sliding windows, standardisation and a synthetic two-modality generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import ConfigError

SPLITS = ("train", "dev", "test")


class DatasetError(ValueError):
    pass


@dataclass
class SegmentClip:
    clip_id: str
    features: dict[str, np.ndarray]
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float32).reshape(-1)
        lengths = {m: x.shape[0] for m, x in self.features.items()}
        if len(set(lengths.values())) > 1:
            raise DatasetError(f"clip {self.clip_id}: modality lengths differ {lengths}")
        if lengths and self.labels.shape[0] != next(iter(lengths.values())):
            raise DatasetError(
                f"clip {self.clip_id}: {self.labels.shape[0]} labels for "
                f"{next(iter(lengths.values()))} segments")

    @property
    def n_segments(self) -> int:
        return self.labels.shape[0]


@dataclass
class Dataset:
    task: str
    modalities: dict[str, int]
    splits: dict[str, list[SegmentClip]] = field(default_factory=dict)

    def split(self, name: str) -> list[SegmentClip]:
        if name not in self.splits:
            raise DatasetError(f"unknown split {name!r}; available: {sorted(self.splits)}")
        return self.splits[name]

    def check_disjoint(self) -> None:
        seen: dict[str, str] = {}
        for split, clips in self.splits.items():
            for clip in clips:
                if clip.clip_id in seen:
                    raise DatasetError(
                        f"clip {clip.clip_id} appears in both {seen[clip.clip_id]} and {split}")
                seen[clip.clip_id] = split


# -- CSV / manifest IO ---------------------------------------------------------

def _read_matrix(path: Path, width: int | None) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            if width is not None and len(row) != width:
                raise DatasetError(f"{path}: row {i} has {len(row)} columns, expected {width}")
            try:
                rows.append([float(cell) for cell in row])
            except ValueError:
                raise DatasetError(f"{path}: row {i} has a non-numeric cell") from None
            if width is None:
                width = len(row)
    return np.asarray(rows, dtype=np.float32).reshape(len(rows), width or 0)


def _write_matrix(path: Path, values: np.ndarray) -> None:
    values = np.asarray(values, dtype=np.float32)
    if values.ndim == 1:
        values = values[:, None]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in values:
            writer.writerow(["%.9g" % v for v in row])


def load_dataset(manifest_path: str | Path, modalities: list[str] | None = None) -> Dataset:
    """Read a JSON manifest and its per-clip CSVs.

    ``modalities`` restricts which feature files are read, so a weak model can
    be evaluated where only its own modality is available.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise DatasetError(f"manifest not found: {manifest_path}") from None
    root = manifest_path.parent
    dims = {m: int(d) for m, d in manifest["modalities"].items()}
    wanted = dims if modalities is None else {m: dims[m] for m in modalities}
    dataset = Dataset(manifest["task"], wanted, {})
    for split, entries in manifest.get("splits", {}).items():
        clips = []
        for entry in entries:
            features = {}
            for m in wanted:
                if m not in entry["features"]:
                    raise DatasetError(f"clip {entry['clip_id']}: modality {m} missing")
                path = root / entry["features"][m]
                if not path.exists():
                    raise DatasetError(f"clip {entry['clip_id']}: missing file {path}")
                features[m] = _read_matrix(path, dims[m])
            label_path = root / entry["labels"]
            if not label_path.exists():
                raise DatasetError(f"clip {entry['clip_id']}: missing file {label_path}")
            labels = _read_matrix(label_path, 1)[:, 0]
            n = next(iter(features.values())).shape[0] if features else labels.shape[0]
            if labels.shape[0] == 1 and n > 1:
                labels = np.repeat(labels, n)  # one utterance label for every segment
            clips.append(SegmentClip(entry["clip_id"], features, labels))
        clips.sort(key=lambda c: c.clip_id)
        dataset.splits[split] = clips
    dataset.check_disjoint()
    return dataset


def save_dataset(dataset: Dataset, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"task": dataset.task, "modalities": dict(dataset.modalities), "splits": {}}
    for split, clips in dataset.splits.items():
        entries = []
        for clip in clips:
            features = {}
            for m, x in clip.features.items():
                rel = f"{split}/{clip.clip_id}.{m}.csv"
                (directory / split).mkdir(exist_ok=True)
                _write_matrix(directory / rel, x)
                features[m] = rel
            rel = f"{split}/{clip.clip_id}.labels.csv"
            _write_matrix(directory / rel, clip.labels)
            entries.append({"clip_id": clip.clip_id, "features": features, "labels": rel})
        manifest["splits"][split] = entries
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


# -- preprocessing ---------------------------------------------------------------

def _frames(seconds: float, frame_seconds: float, what: str) -> int:
    k = seconds / frame_seconds
    if abs(k - round(k)) > 1e-9:
        raise ConfigError(f"{what} {seconds}s is not a whole number of {frame_seconds}s frames")
    return int(round(k))


def shift_labels(labels, shift_seconds: float, frame_seconds: float = 0.04) -> np.ndarray:
    """Move labels earlier by a fixed delay, repeating the last value at the end."""
    labels = np.asarray(labels)
    k = _frames(shift_seconds, frame_seconds, "shift")
    if k == 0:
        return labels.copy()
    if k >= labels.shape[0]:
        raise ConfigError(f"shift of {k} frames does not fit {labels.shape[0]} labels")
    return np.concatenate([labels[k:], np.repeat(labels[-1:], k, axis=0)])


def window_clips(recording, labels, win_seconds: float = 3.0, hop_seconds: float = 1.0,
                 frame_seconds: float = 0.04, prefix: str = "clip") -> list[SegmentClip]:
    """Cut a recording into full-length windows. ``recording`` is one
    ``[T, d]`` array or a mapping of modality name to such arrays."""
    if not isinstance(recording, Mapping):
        recording = {"x": recording}
    labels = np.asarray(labels)
    total = labels.shape[0]
    win = _frames(win_seconds, frame_seconds, "window")
    hop = _frames(hop_seconds, frame_seconds, "hop")
    if win > total:
        raise ConfigError(f"window of {win} frames is longer than the recording ({total})")
    for m, x in recording.items():
        if x.shape[0] != total:
            raise DatasetError(f"modality {m} has {x.shape[0]} frames, labels have {total}")
    count = (total - win) // hop + 1
    clips = []
    for i in range(count):
        s = i * hop
        clips.append(SegmentClip(f"{prefix}_{i:04d}",
                                 {m: np.asarray(x[s:s + win]) for m, x in recording.items()},
                                 labels[s:s + win]))
    return clips


@dataclass
class Standardizer:
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]

    @classmethod
    def fit(cls, clips: list[SegmentClip], floor: float = 1e-8) -> "Standardizer":
        if not clips:
            raise DatasetError("standardisation needs a non-empty train split")
        mean, std = {}, {}
        for m in clips[0].features:
            stacked = np.concatenate([c.features[m] for c in clips]).astype(np.float64)
            mean[m] = stacked.mean(axis=0)
            std[m] = np.maximum(stacked.std(axis=0), floor)
        return cls(mean, std)

    def apply(self, clip: SegmentClip) -> SegmentClip:
        features = {m: ((x - self.mean[m]) / self.std[m]).astype(np.float32)
                    if m in self.mean else x for m, x in clip.features.items()}
        return SegmentClip(clip.clip_id, features, clip.labels)


def standardize(dataset: Dataset) -> Dataset:
    """Z-score every modality with statistics from the train split only."""
    scaler = Standardizer.fit(dataset.split("train"))
    return replace(dataset, splits={s: [scaler.apply(c) for c in clips]
                                    for s, clips in dataset.splits.items()})


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int = 8
    clip_len: int = 40
    train_clips: int = 200
    dev_clips: int = 50
    test_clips: int = 0
    strong_dim: int = 12
    weak_dim: int = 32
    weak_visible: int = 5
    sigma_s: float = 0.5
    sigma_w: float = 2.0
    ar_coef: float = 0.9
    label_rule: str = "sign"  # sign -> classification, tanh -> regression
    strong_name: str = "strong"
    weak_name: str = "weak"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.weak_visible < self.latent_dim:
            raise ConfigError("weak_visible must be positive and smaller than latent_dim")
        if self.label_rule not in ("sign", "tanh"):
            raise ConfigError(f"unknown label rule {self.label_rule!r}")

    @property
    def task(self) -> str:
        return "classification" if self.label_rule == "sign" else "regression"

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticSpec":
        raw = json.loads(Path(path).read_text())
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic spec keys: {sorted(unknown)}")
        return cls(**raw)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Two views of one AR(1) latent walk: the strong view mixes every latent
    dimension with little noise, the weak view only a subset with more noise.
    Labels come from a fixed projection of the latent walk."""
    rng = np.random.default_rng(spec.seed)
    k = spec.latent_dim
    mix_s = rng.standard_normal((k, spec.strong_dim)) / math.sqrt(k)
    mix_w = rng.standard_normal((spec.weak_visible, spec.weak_dim)) / math.sqrt(spec.weak_visible)
    visible = np.sort(rng.permutation(k)[:spec.weak_visible])
    # equal weight on every latent dimension, so the weak view always misses
    # (k - weak_visible) / k of the label variance
    direction = np.full(k, 1.0 / math.sqrt(k))
    innovation = math.sqrt(1 - spec.ar_coef ** 2)  # keeps unit stationary variance

    def make_clip(cid: str) -> SegmentClip:
        z = np.empty((spec.clip_len, k))
        z[0] = rng.standard_normal(k)
        for t in range(1, spec.clip_len):
            z[t] = spec.ar_coef * z[t - 1] + innovation * rng.standard_normal(k)
        xs = z @ mix_s + spec.sigma_s * rng.standard_normal((spec.clip_len, spec.strong_dim))
        xw = z[:, visible] @ mix_w + spec.sigma_w * rng.standard_normal((spec.clip_len, spec.weak_dim))
        score = z @ direction
        if spec.label_rule == "sign":
            labels = np.full(spec.clip_len, float(score.mean() >= 0))
        else:
            labels = np.tanh(score)
        return SegmentClip(cid, {spec.strong_name: xs.astype(np.float32),
                                 spec.weak_name: xw.astype(np.float32)}, labels)

    splits = {}
    for split, count in (("train", spec.train_clips), ("dev", spec.dev_clips),
                         ("test", spec.test_clips)):
        splits[split] = [make_clip(f"{split}_{i:04d}") for i in range(count)]
    return Dataset(spec.task, {spec.strong_name: spec.strong_dim, spec.weak_name: spec.weak_dim},
                   splits)
