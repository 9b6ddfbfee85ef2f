"""Scene datasets: DCASE-style metadata and a synthetic feature-space generator.

The synthetic generator plants class-specific ("distinct") events and
class-agnostic ("common") events into noise, and records which instances
(stride-8 frame windows) overlap the distinct events. That gives exact
instance-level ground truth for checking what the MIL model localises.
"""
from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import INSTANCE_STRIDE, Prediction, classify

log = logging.getLogger(__name__)

FOLDS = {"train": 0, "val": 1, "test": 1}


class MetaError(ValueError):
    """Malformed or inconsistent metadata file."""


@dataclass
class SceneDataset:
    clip_ids: list[str]
    labels: np.ndarray
    class_names: list[str]
    fold: str = "train"
    features: np.ndarray | None = None
    audio_paths: list[Path] | None = None
    missing: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.clip_ids):
            raise ValueError("clip_ids and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label index out of range")

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self):
        return len(self.clip_ids)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


def _is_header(cols: list[str]) -> bool:
    return cols[0].lower() in {"filename", "file", "path", "clip_id"} or \
        (len(cols) > 1 and cols[1].lower() in {"scene_label", "label", "scene"})


def load_dcase_meta(meta_path, audio_root=None, class_names: list[str] | None = None,
                    fold: str = "train", device_pattern: str | None = None) -> SceneDataset:
    """Read a tab-separated ``path<TAB>label[<TAB>...]`` file.

    Classes are the sorted unique labels unless ``class_names`` is given, in
    which case unseen labels are an error (use this for test folds).
    ``device_pattern`` is a regex; only paths matching it are kept.
    """
    meta_path = Path(meta_path)
    rows: list[tuple[str, str]] = []
    with open(meta_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) < 2 or not cols[0] or not cols[1]:
                raise MetaError(f"{meta_path}:{lineno}: expected 'path<TAB>label', got {line!r}")
            if not rows and lineno == 1 and _is_header(cols):
                continue
            rows.append((cols[0], cols[1]))
    if device_pattern:
        pat = re.compile(device_pattern)
        rows = [r for r in rows if pat.search(r[0])]
    if not rows:
        raise MetaError(f"{meta_path}: no entries")
    dupes = sorted(p for p, count in Counter(p for p, _ in rows).items() if count > 1)
    if dupes:
        raise MetaError(f"{meta_path}: duplicate entries: {dupes[:10]}"
                        + (f" (+{len(dupes) - 10} more)" if len(dupes) > 10 else ""))
    labels = [lab for _, lab in rows]
    if class_names is None:
        class_names = sorted(set(labels))
    else:
        unknown = sorted(set(labels) - set(class_names))
        if unknown:
            raise MetaError(f"{meta_path}: labels not in training classes: {unknown}")
    index = {name: i for i, name in enumerate(class_names)}
    ds = SceneDataset([p for p, _ in rows], [index[lab] for lab in labels], list(class_names),
                      fold)
    if audio_root is not None:
        root = Path(audio_root)
        ds.audio_paths = [root / p for p, _ in rows]
        ds.missing = [p for p, path in zip(ds.clip_ids, ds.audio_paths) if not path.exists()]
        if ds.missing:
            log.warning("%d of %d audio files missing under %s", len(ds.missing), len(ds), root)
    return ds


@dataclass
class SyntheticSpec:
    n_classes: int = 4
    events_per_class: int = 1
    bands: int = 40
    frames: int = 100
    distinct_per_clip: tuple[int, int] = (1, 1)
    common_per_clip: tuple[int, int] = (1, 2)
    n_common: int = 3
    event_frames: tuple[int, int] = (16, 24)
    noise: float = 1.0
    gain: float = 3.0
    overlap: bool = False
    n_train: int = 160
    n_val: int = 80
    seed: int = 0

    def __post_init__(self):
        self.distinct_per_clip = tuple(int(v) for v in self.distinct_per_clip)
        self.common_per_clip = tuple(int(v) for v in self.common_per_clip)
        self.event_frames = tuple(int(v) for v in self.event_frames)

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("synthetic task needs at least 2 classes")
        if self.events_per_class not in (1, 2):
            raise ValueError("events_per_class must be 1 or 2")
        lo, hi = self.distinct_per_clip
        if lo < 1 or hi < lo:
            raise ValueError("every clip needs at least one distinct event (distinct_per_clip >= 1)")
        clo, chi = self.common_per_clip
        if clo < 0 or chi < clo or (chi > 0 and self.n_common < 1):
            raise ValueError("invalid common_per_clip / n_common")
        dlo, dhi = self.event_frames
        if dlo < INSTANCE_STRIDE or dhi < dlo:
            raise ValueError(f"event_frames must be >= {INSTANCE_STRIDE} and ordered")
        usable = (self.frames // INSTANCE_STRIDE) * INSTANCE_STRIDE
        if dhi > usable:
            raise ValueError(f"events of {dhi} frames do not fit in {usable} usable frames")
        if not self.overlap and (hi + chi) * dhi > usable:
            raise ValueError("non-overlapping events cannot all fit in the clip")
        if self.n_templates > self.bands:
            raise ValueError("more event templates than frequency bands")

    @property
    def n_templates(self) -> int:
        return self.n_classes * self.events_per_class + self.n_common

    @property
    def n_instances(self) -> int:
        return self.frames // INSTANCE_STRIDE

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Event:
    template: int
    cls: int  # -1 for common events
    start: int
    length: int


@dataclass
class InstanceGroundTruth:
    """``positive[i, l, j]``: instance j of clip i overlaps a distinct event of class l."""

    positive: np.ndarray
    events: list[list[Event]]

    def rows(self, clip_ids: list[str]):
        for i, cid in enumerate(clip_ids):
            for l, j in zip(*np.nonzero(self.positive[i])):
                yield cid, int(l), int(j)


def template_centres(spec: SyntheticSpec) -> np.ndarray:
    """Fractional band index of each template's peak: evenly spaced, in
    random order."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 7]))
    n = spec.n_templates
    centres = (np.arange(n) + 0.5) * spec.bands / n
    return centres[rng.permutation(n)]


def event_templates(spec: SyntheticSpec) -> np.ndarray:
    """Spectral profiles (n_templates, bands): Gaussian bumps at distinct
    centre bands."""
    n = spec.n_templates
    centres = template_centres(spec)
    width = max(0.6, 0.35 * spec.bands / n)
    b = np.arange(spec.bands)[None, :]
    return np.exp(-0.5 * ((b - centres[:, None]) / width) ** 2)


def template_index(spec: SyntheticSpec, cls: int, which: int) -> int:
    return cls * spec.events_per_class + which


def instance_mask(start: int, length: int, m: int) -> np.ndarray:
    """Instances whose window [8j, 8j+8) is covered by the event or overlaps
    it by at least half the event length."""
    j = np.arange(m)
    lo, hi = j * INSTANCE_STRIDE, (j + 1) * INSTANCE_STRIDE
    ov = np.clip(np.minimum(hi, start + length) - np.maximum(lo, start), 0, None)
    return (ov >= 0.5 * length) | (ov == INSTANCE_STRIDE)


def _layout(rng, lengths: list[int], limit: int, overlap: bool) -> list[int]:
    """Start frames for events inside [0, limit)."""
    if overlap:
        return [int(rng.integers(0, limit - n + 1)) for n in lengths]
    slack = limit - sum(lengths)
    if slack < 0:
        raise ValueError("non-overlapping events do not fit in the clip")
    cuts = np.sort(rng.integers(0, slack + 1, size=len(lengths)))
    gaps = np.diff(np.concatenate([[0], cuts]))
    order = rng.permutation(len(lengths))
    starts = [0] * len(lengths)
    pos = 0
    for gap, k in zip(gaps, order):
        pos += int(gap)
        starts[k] = pos
        pos += lengths[k]
    return starts


def synth_clip(spec: SyntheticSpec, templates: np.ndarray, label: int,
               rng: np.random.Generator) -> tuple[np.ndarray, list[Event]]:
    x = spec.noise * rng.standard_normal((spec.bands, spec.frames))
    # events stay inside the frames that instances cover
    usable = spec.n_instances * INSTANCE_STRIDE
    n_distinct = int(rng.integers(spec.distinct_per_clip[0], spec.distinct_per_clip[1] + 1))
    n_common = int(rng.integers(spec.common_per_clip[0], spec.common_per_clip[1] + 1))
    plan = [(template_index(spec, label, int(rng.integers(spec.events_per_class))), label)
            for _ in range(n_distinct)]
    common_base = spec.n_classes * spec.events_per_class
    plan += [(common_base + int(rng.integers(spec.n_common)), -1) for _ in range(n_common)]
    lengths = [int(rng.integers(spec.event_frames[0], spec.event_frames[1] + 1)) for _ in plan]
    starts = _layout(rng, lengths, usable, spec.overlap)
    events: list[Event] = []
    for (tmpl, cls), start, length in zip(plan, starts, lengths):
        amp = spec.gain * rng.uniform(0.75, 1.25)
        x[:, start:start + length] += amp * templates[tmpl][:, None]
        events.append(Event(tmpl, cls, start, length))
    return x, events


def generate_synthetic(spec: SyntheticSpec, fold: str = "train"):
    """Return ``(SceneDataset, InstanceGroundTruth)`` for one fold.

    Templates depend only on ``spec.seed``; clip ``i`` of a fold depends
    only on ``(seed, fold, i)``. Labels cycle through the classes, so class
    counts differ by at most one.
    """
    spec.validate()
    n = spec.n_train if fold == "train" else spec.n_val
    fold_id = FOLDS[fold]
    templates = event_templates(spec)
    m = spec.n_instances
    feats = np.empty((n, spec.bands, spec.frames))
    positive = np.zeros((n, spec.n_classes, m), dtype=bool)
    events = []
    labels = np.arange(n) % spec.n_classes
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, fold_id, i]))
        feats[i], evs = synth_clip(spec, templates, int(labels[i]), rng)
        for ev in evs:
            if ev.cls >= 0:
                positive[i, ev.cls] |= instance_mask(ev.start, ev.length, m)
        if not positive[i, labels[i]].any():
            raise AssertionError(f"clip {i} has no positive instance")
        events.append(evs)
    names = [f"scene{c}" for c in range(spec.n_classes)]
    ids = [f"{fold}-{i:05d}" for i in range(n)]
    return SceneDataset(ids, labels, names, fold, features=feats), \
        InstanceGroundTruth(positive, events)


def render_audio(spec: SyntheticSpec, events: list[Event], rng: np.random.Generator,
                 rate: int | None = None, noise: float = 1e-3):
    """Audio counterpart of a synthetic clip, for front-end integration tests.

    Each event becomes a tone burst at the centre frequency of its
    template's peak band, spanning the event's frames; the background is
    faint white noise. ``log_mel`` of the result has ``spec.frames`` frames.
    """
    from .frontend import SAMPLE_RATE, AudioClip, frame_params, hz_to_mel, mel_to_hz

    rate = rate or SAMPLE_RATE
    _, hop = frame_params(rate)
    n = spec.frames * hop
    x = noise * rng.standard_normal(n)
    band_hz = mel_to_hz(np.linspace(0.0, hz_to_mel(rate / 2.0), spec.bands + 2))[1:-1]
    centres = template_centres(spec)
    for ev in events:
        freq = np.interp(centres[ev.template], np.arange(spec.bands), band_hz)
        lo, hi = ev.start * hop, (ev.start + ev.length) * hop
        t = np.arange(hi - lo) / rate
        x[lo:hi] += 0.25 * np.sin(2.0 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    return AudioClip(x, rate)


@dataclass
class LocalizationScore:
    per_class: np.ndarray
    pooled: float
    n_correct: int


def localization_score(pred: Prediction, truth: InstanceGroundTruth, y_true) -> LocalizationScore:
    """Among correctly classified clips, the fraction whose true-class argmax
    instance is a ground-truth positive (per class and pooled)."""
    y_true = np.asarray(y_true)
    if pred.instance_scores.shape[-1] != truth.positive.shape[-1]:
        raise ValueError(f"instance count mismatch: prediction has "
                         f"{pred.instance_scores.shape[-1]}, truth has {truth.positive.shape[-1]}")
    if len(pred) != truth.positive.shape[0]:
        raise ValueError("prediction and truth cover different numbers of clips")
    n_classes = truth.positive.shape[1]
    correct = classify(pred) == y_true
    rows = np.arange(len(y_true))
    hit = truth.positive[rows, y_true, pred.argmax[rows, y_true]]
    per_class = np.full(n_classes, np.nan)
    for c in range(n_classes):
        sel = correct & (y_true == c)
        if sel.any():
            per_class[c] = hit[sel].mean()
    pooled = float(hit[correct].mean()) if correct.any() else float("nan")
    return LocalizationScore(per_class, pooled, int(correct.sum()))


INDEX_NAME = "index.tsv"
FEATURES_NAME = "features.mla"
TRUTH_NAME = "ground_truth.csv"
EVENTS_NAME = "events.csv"


def save_dataset(out_dir, datasets: list[SceneDataset],
                 truths: list[InstanceGroundTruth] | None = None, meta: dict | None = None) -> Path:
    """Write features, ``index.tsv`` (clip_id, label, fold) and, for
    synthetic data, the instance ground truth and planted events."""
    from .io import write_container

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    lines = ["clip_id\tlabel\tfold"]
    for ds in datasets:
        for i, cid in enumerate(ds.clip_ids):
            arrays[cid] = ds.features[i]
            lines.append(f"{cid}\t{ds.class_names[ds.labels[i]]}\t{ds.fold}")
    write_container(out / FEATURES_NAME, arrays, meta)
    (out / INDEX_NAME).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if truths is not None:
        gt = ["clip_id,class,instance_index"]
        ev = ["clip_id,class,template,start_frame,length"]
        for ds, truth in zip(datasets, truths):
            gt += [f"{cid},{ds.class_names[c]},{j}" for cid, c, j in truth.rows(ds.clip_ids)]
            for cid, evs in zip(ds.clip_ids, truth.events):
                ev += [f"{cid},{ds.class_names[e.cls] if e.cls >= 0 else 'common'},"
                       f"{e.template},{e.start},{e.length}" for e in evs]
        (out / TRUTH_NAME).write_text("\n".join(gt) + "\n", encoding="utf-8")
        (out / EVENTS_NAME).write_text("\n".join(ev) + "\n", encoding="utf-8")
    return out


def read_index(index_path) -> list[tuple[str, str, str]]:
    """Rows of (clip_id, label, fold); fold is empty when the file has none."""
    rows = []
    with open(index_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.rstrip("\r\n").split("\t")
            if not cols[0]:
                continue
            if lineno == 1 and _is_header(cols):
                continue
            if len(cols) < 2:
                raise MetaError(f"{index_path}:{lineno}: expected clip_id<TAB>label")
            rows.append((cols[0], cols[1], cols[2] if len(cols) > 2 else ""))
    return rows


def load_dataset(path, fold: str | None = None, class_names: list[str] | None = None) -> SceneDataset:
    """Load a featurized dataset from a directory (or its ``index.tsv``).

    With ``fold`` only matching rows are kept. ``class_names`` fixes the
    label order (required when loading an evaluation fold).
    """
    from .io import read_container

    path = Path(path)
    index = path / INDEX_NAME if path.is_dir() else path
    rows = read_index(index)
    if fold:
        rows = [r for r in rows if r[2] == fold]
    if not rows:
        raise MetaError(f"{index}: no clips" + (f" in fold {fold!r}" if fold else ""))
    arrays, _ = read_container(index.parent / FEATURES_NAME)
    missing = [cid for cid, _, _ in rows if cid not in arrays]
    if missing:
        raise MetaError(f"{index}: {len(missing)} clips have no features, e.g. {missing[:3]}")
    labels = [lab for _, lab, _ in rows]
    if class_names is None:
        class_names = sorted(set(labels))
    unknown = sorted(set(labels) - set(class_names))
    if unknown:
        raise MetaError(f"{index}: labels not in the model's classes: {unknown}")
    lut = {c: i for i, c in enumerate(class_names)}
    feats = np.stack([arrays[cid] for cid, _, _ in rows])
    return SceneDataset([cid for cid, _, _ in rows], [lut[lab] for lab in labels],
                        list(class_names), fold or "", features=feats)


def load_ground_truth(directory) -> dict[str, set[tuple[str, int]]]:
    """clip_id -> {(class_name, instance_index)} from ``ground_truth.csv``."""
    out: dict[str, set[tuple[str, int]]] = {}
    path = Path(directory) / TRUTH_NAME
    with open(path, encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            cid, cls, j = line.strip().split(",")
            out.setdefault(cid, set()).add((cls, int(j)))
    return out
