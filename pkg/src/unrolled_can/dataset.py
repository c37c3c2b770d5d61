"""Corpus ingestion: MIDI directories to labeled, normalized roll tensors."""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from . import container
from .errors import BatchTooLarge, EmptyCorpus, MidiError, SingleClass
from .midi_codec import (
    ROLL_SIZE,
    PianoRoll,
    ValueDomain,
    default_step_ticks,
    parse_midi,
    quantize,
    segment,
)

log = logging.getLogger(__name__)

MIDI_SUFFIXES = {".mid", ".midi"}


class Layout(enum.Enum):
    FLAT = "flat"
    PER_CLASS = "per-class"


@dataclass(frozen=True)
class LabeledSample:
    roll: PianoRoll
    class_id: int
    source: str = ""
    window: int = 0


@dataclass(frozen=True)
class DatasetMeta:
    K: int
    class_names: tuple[str, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if self.K < 1 or self.K != len(self.class_names) or len(self.counts) != self.K:
            raise ValueError("inconsistent dataset metadata")


@dataclass(frozen=True)
class TrainingSet:
    """Plain arrays handed to the training loop.

    ``x`` is ``(N, 128, 128)`` Signed11 rolls for music corpora or ``(N, 2)``
    points for the toy benchmark.
    """

    x: np.ndarray
    labels: np.ndarray
    K: int

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class Corpus:
    samples: list[LabeledSample]
    meta: DatasetMeta
    split_seed: int = 0
    holdout_sources: frozenset[str] = frozenset()
    skipped: list[tuple[str, str]] = field(default_factory=list)

    @property
    def train_samples(self) -> list[LabeledSample]:
        return [s for s in self.samples if s.source not in self.holdout_sources]

    @property
    def holdout_samples(self) -> list[LabeledSample]:
        return [s for s in self.samples if s.source in self.holdout_sources]

    def training_set(self, holdout: bool = False) -> TrainingSet:
        chosen = self.holdout_samples if holdout else self.train_samples
        x = np.stack([s.roll.grid for s in chosen]) if chosen else np.zeros((0, ROLL_SIZE, ROLL_SIZE), np.float32)
        labels = np.array([s.class_id for s in chosen], dtype=np.int64)
        return TrainingSet(x.astype(np.float32), labels, self.meta.K)


def normalize(roll: PianoRoll) -> PianoRoll:
    """Map a Binary01 roll onto the generator's [-1, 1] range (0 -> -1, 1 -> +1)."""
    if roll.value_domain is not ValueDomain.BINARY01:
        raise ValueError("normalize expects a Binary01 roll")
    return PianoRoll(roll.grid * 2.0 - 1.0, ValueDomain.SIGNED11, roll.step_ticks)


def _split_holdout(sources: list[str], fraction: float, seed: int) -> frozenset[str]:
    n_hold = int(len(sources) * fraction)
    if n_hold == 0:
        return frozenset()
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(sources), size=n_hold, replace=False)
    return frozenset(sources[i] for i in sorted(picked))


def scan_corpus(
    root: str | Path,
    layout: Layout | str = Layout.PER_CLASS,
    *,
    step_div: int = 4,
    split_seed: int = 0,
    holdout_fraction: float = 0.1,
    min_classes: int = 1,
    include_drums: bool = False,
) -> Corpus:
    """Read every MIDI file below ``root`` into labeled Signed11 windows.

    With the per-class layout each immediate subdirectory is one class, labels
    following the sorted subdirectory names. Files that fail to parse are
    logged and listed in ``Corpus.skipped``. The holdout split is drawn over
    files, so all windows of one piece land on the same side.
    """
    root = Path(root)
    layout = Layout(layout)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} is not a directory")

    if layout is Layout.PER_CLASS:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
        groups = [(d.name, sorted(p for p in d.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES)) for d in class_dirs]
    else:
        groups = [(root.name or "all", sorted(p for p in root.rglob("*") if p.suffix.lower() in MIDI_SUFFIXES))]

    samples: list[LabeledSample] = []
    skipped: list[tuple[str, str]] = []
    used_sources: list[str] = []
    for class_id, (_, files) in enumerate(groups):
        for path in files:
            rel = path.relative_to(root).as_posix()
            try:
                song = parse_midi(path.read_bytes(), include_drums=include_drums)
            except (MidiError, ValueError) as exc:
                log.warning("skipping %s: %s", rel, exc)
                skipped.append((rel, str(exc)))
                continue
            step = default_step_ticks(song.ppq, step_div)
            rolls = segment(quantize(song, step), step)
            for w, roll in enumerate(rolls):
                samples.append(LabeledSample(normalize(roll), class_id, rel, w))
            if rolls:
                used_sources.append(rel)

    if not samples:
        raise EmptyCorpus(f"no usable piano-roll windows under {root}")
    names = tuple(name for name, _ in groups)
    counts = tuple(sum(1 for s in samples if s.class_id == c) for c in range(len(names)))
    meta = DatasetMeta(len(names), names, counts)
    if meta.K < min_classes:
        raise SingleClass(f"need at least {min_classes} classes, found {meta.K}")
    holdout = _split_holdout(used_sources, holdout_fraction, split_seed)
    return Corpus(samples, meta, split_seed, holdout, skipped)


def batches(data: Corpus | TrainingSet, batch_size: int, epoch_seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """One epoch of shuffled minibatches; the trailing partial batch is dropped."""
    if isinstance(data, Corpus):
        data = data.training_set()
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if batch_size > len(data):
        raise BatchTooLarge(f"batch size {batch_size} exceeds {len(data)} training samples")
    order = np.random.default_rng(epoch_seed).permutation(len(data))
    for start in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[start:start + batch_size]
        yield data.x[idx], data.labels[idx]


# ---------------------------------------------------------------------------
# cache file


def corpus_to_bytes(corpus: Corpus) -> bytes:
    grids = np.stack([s.roll.grid for s in corpus.samples])
    labels = np.array([s.class_id for s in corpus.samples], dtype=np.float32)
    meta = {
        "kind": "corpus",
        "class_names": list(corpus.meta.class_names),
        "split_seed": corpus.split_seed,
        "holdout_sources": sorted(corpus.holdout_sources),
        "sources": [s.source for s in corpus.samples],
        "windows": [s.window for s in corpus.samples],
        "step_ticks": [s.roll.step_ticks for s in corpus.samples],
        "skipped": [list(x) for x in corpus.skipped],
    }
    return container.dumps({"rolls": grids, "labels": labels}, meta)


def corpus_from_bytes(data: bytes) -> Corpus:
    entries, meta = container.loads(data)
    if meta.get("kind") != "corpus":
        raise ValueError("container does not hold a corpus")
    names = tuple(meta["class_names"])
    labels = entries["labels"].astype(np.int64)
    samples = [
        LabeledSample(PianoRoll(g, ValueDomain.SIGNED11, int(st)), int(c), src, int(w))
        for g, c, src, w, st in zip(entries["rolls"], labels, meta["sources"], meta["windows"], meta["step_ticks"])
    ]
    counts = tuple(int((labels == c).sum()) for c in range(len(names)))
    return Corpus(
        samples,
        DatasetMeta(len(names), names, counts),
        int(meta["split_seed"]),
        frozenset(meta["holdout_sources"]),
        [tuple(x) for x in meta.get("skipped", [])],
    )


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    container.write_atomic(path, corpus_to_bytes(corpus))


def load_corpus(path: str | Path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# resolution changes for reduced image profiles


def to_profile(grids: np.ndarray, size: int) -> np.ndarray:
    """``(N, 128, 128)`` rolls to ``(N, 1, size, size)`` by block max-pooling."""
    grids = np.asarray(grids, dtype=np.float32)
    if grids.shape[-2:] != (ROLL_SIZE, ROLL_SIZE):
        raise ValueError(f"expected (N, {ROLL_SIZE}, {ROLL_SIZE}) rolls, got {grids.shape}")
    f = ROLL_SIZE // size
    if f * size != ROLL_SIZE:
        raise ValueError(f"profile size {size} does not divide {ROLL_SIZE}")
    n = grids.shape[0]
    pooled = grids.reshape(n, size, f, size, f).max(axis=(2, 4)) if f > 1 else grids
    return pooled.reshape(n, 1, size, size)


def from_profile(images: np.ndarray) -> np.ndarray:
    """``(N, 1, S, S)`` network outputs back to ``(N, 128, 128)`` by nearest-neighbour repetition."""
    images = np.asarray(images, dtype=np.float32)
    images = images.reshape(images.shape[0], images.shape[-2], images.shape[-1])
    f = ROLL_SIZE // images.shape[-1]
    if f > 1:
        images = images.repeat(f, axis=1).repeat(f, axis=2)
    return images
