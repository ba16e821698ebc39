"""Synthetic scene-labelled image-text corpora and dataset file I/O.

Each scene class gets a distinct blocky colour motif. Every image perturbs its
class motif with three systematic attributes (channel tint, marker-corner
position, brightness level) plus mild pixel jitter, and an optional fraction
of patch cells is replaced with random clutter. Captions always name the scene
class; in fine granularity they also name the three attributes, which makes
them near-unique per image and, because the attributes are rendered into the
pixels, learnable on held-out images. Filler tokens come from one shared pool,
so coarse captions overlap heavily across classes.

Dataset files are line-delimited JSON: a header object with a schema version
and corpus metadata, then one record per line with fixed field names
(``id``, ``scene_label``, ``pixels`` as a flat array, ``captions`` as arrays
of token ids).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InputError, ParseError
from .rng import child

SCHEMA_VERSION = 1

GRANULARITIES = ("coarse", "fine")

TINT_LEVELS = 3
CORNER_LEVELS = 4
BRIGHTNESS_LEVELS = 3
ATTRIBUTE_TOKENS = TINT_LEVELS + CORNER_LEVELS + BRIGHTNESS_LEVELS
MIN_FILLER_TOKENS = 4

_TINT_GAIN = 0.65  # off-channel damping
_BRIGHTNESS = (0.7, 0.85, 1.0)


@dataclass
class CorpusSpec:
    num_classes: int
    images_per_class: int
    captions_per_image: int = 5
    image_size: int = 16
    vocab_size: int = 64
    caption_len_min: int = 6
    caption_len_max: int = 10
    granularity: str = "fine"
    noise: float = 0.0
    seed: int = 0
    motif_seed: int | None = None  # shared class appearance across corpora

    def __post_init__(self):
        for name in ("num_classes", "images_per_class", "captions_per_image", "image_size", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"granularity must be one of {GRANULARITIES}")
        if not 0.0 <= self.noise < 1.0:
            raise ConfigError(f"noise fraction must lie in [0, 1), got {self.noise}")
        # fine captions carry the class token plus one token per attribute slot
        core = 1 + (3 if self.granularity == "fine" else 0)
        if not core <= self.caption_len_min <= self.caption_len_max:
            raise ConfigError(
                f"caption length range [{self.caption_len_min}, {self.caption_len_max}] "
                f"cannot hold the {core} core tokens"
            )
        if self.image_size % 4 != 0:
            raise ConfigError("image size must be a multiple of the 4-pixel motif cell")
        if self.vocab_size < self.num_classes + ATTRIBUTE_TOKENS + MIN_FILLER_TOKENS:
            raise ConfigError(
                f"vocabulary of {self.vocab_size} too small for class separation: needs at least "
                f"{self.num_classes + ATTRIBUTE_TOKENS + MIN_FILLER_TOKENS}"
            )


def token_layout(spec: CorpusSpec) -> dict:
    """Fixed vocabulary layout: class tokens, attribute tokens, shared fillers."""
    c = spec.num_classes
    return {
        "class": list(range(c)),
        "tint": list(range(c, c + TINT_LEVELS)),
        "corner": list(range(c + TINT_LEVELS, c + TINT_LEVELS + CORNER_LEVELS)),
        "brightness": list(range(c + TINT_LEVELS + CORNER_LEVELS, c + ATTRIBUTE_TOKENS)),
        "filler": list(range(c + ATTRIBUTE_TOKENS, spec.vocab_size)),
    }


@dataclass
class DatasetRecord:
    id: int
    scene_label: int
    pixels: np.ndarray  # (3, H, W)
    captions: list = field(default_factory=list)  # list of token-id lists

    def __eq__(self, other):
        return (
            isinstance(other, DatasetRecord)
            and self.id == other.id
            and self.scene_label == other.scene_label
            and np.array_equal(self.pixels, other.pixels)
            and self.captions == other.captions
        )


@dataclass
class DatasetMeta:
    schema_version: int
    num_classes: int
    image_size: int
    vocab_size: int
    captions_per_image: int
    granularity: str
    seed: int
    motif_seed: int
    num_records: int


@dataclass
class Dataset:
    meta: DatasetMeta
    records: list


def _class_motif(motif_seed: int, label: int, size: int) -> np.ndarray:
    rng = child(motif_seed, "motif", label)
    cells = size // 4
    coarse = rng.uniform(0.15, 0.85, size=(3, cells, cells))
    return np.kron(coarse, np.ones((4, 4)))


def _render_image(spec: CorpusSpec, label: int, index: int, motif: np.ndarray):
    rng = child(spec.seed, "image", label, index)
    tint = int(rng.integers(0, TINT_LEVELS))
    corner = int(rng.integers(0, CORNER_LEVELS))
    brightness = int(rng.integers(0, BRIGHTNESS_LEVELS))

    img = motif.copy()
    gains = np.full(3, _TINT_GAIN)
    gains[tint] = 1.0
    img *= gains[:, None, None]
    img *= _BRIGHTNESS[brightness]

    half = spec.image_size // 2
    row = 0 if corner in (0, 1) else half
    col = 0 if corner in (0, 2) else half
    checker = np.indices((4, 4)).sum(axis=0) % 2
    img[:, row : row + 4, col : col + 4] = 0.05 + 0.9 * checker

    img += rng.uniform(-0.02, 0.02, size=img.shape)

    if spec.noise > 0.0:
        cells = spec.image_size // 4
        total = cells * cells
        n_clutter = int(round(spec.noise * total))
        chosen = rng.choice(total, size=n_clutter, replace=False)
        for cell in chosen:
            r, c = (cell // cells) * 4, (cell % cells) * 4
            img[:, r : r + 4, c : c + 4] = rng.random((3, 4, 4))

    img = np.round(np.clip(img, 0.0, 1.0), 4)
    return img, (tint, corner, brightness)


def _make_captions(spec: CorpusSpec, layout: dict, label: int, index: int, attrs) -> list:
    rng = child(spec.seed, "captions", label, index)
    tint, corner, brightness = attrs
    core = [layout["class"][label]]
    if spec.granularity == "fine":
        core += [layout["tint"][tint], layout["corner"][corner], layout["brightness"][brightness]]
    captions = []
    for _ in range(spec.captions_per_image):
        length = int(rng.integers(spec.caption_len_min, spec.caption_len_max + 1))
        fillers = rng.choice(layout["filler"], size=length - len(core), replace=True).tolist()
        tokens = np.array(core + fillers, dtype=np.int64)
        rng.shuffle(tokens)
        captions.append([int(t) for t in tokens])
    return captions


def generate_corpus(spec: CorpusSpec) -> Dataset:
    """Deterministic corpus: records ordered by (class, image index)."""
    layout = token_layout(spec)
    motif_seed = spec.motif_seed if spec.motif_seed is not None else spec.seed
    records = []
    next_id = 0
    for label in range(spec.num_classes):
        motif = _class_motif(motif_seed, label, spec.image_size)
        for index in range(spec.images_per_class):
            pixels, attrs = _render_image(spec, label, index, motif)
            captions = _make_captions(spec, layout, label, index, attrs)
            records.append(DatasetRecord(next_id, label, pixels, captions))
            next_id += 1
    meta = DatasetMeta(
        schema_version=SCHEMA_VERSION,
        num_classes=spec.num_classes,
        image_size=spec.image_size,
        vocab_size=spec.vocab_size,
        captions_per_image=spec.captions_per_image,
        granularity=spec.granularity,
        seed=spec.seed,
        motif_seed=motif_seed,
        num_records=len(records),
    )
    return Dataset(meta, records)


# -- file I/O -------------------------------------------------------------------


def write_dataset(dataset: Dataset, path) -> None:
    meta = dict(dataset.meta.__dict__)
    meta["num_records"] = len(dataset.records)
    lines = [json.dumps(meta, sort_keys=True)]
    for rec in dataset.records:
        lines.append(
            json.dumps(
                {
                    "id": rec.id,
                    "scene_label": rec.scene_label,
                    "pixels": [float(p) for p in rec.pixels.reshape(-1)],
                    "captions": rec.captions,
                },
                sort_keys=True,
            )
        )
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}:1: empty dataset file")
    try:
        header = json.loads(lines[0])
        meta = DatasetMeta(**header)
    except (json.JSONDecodeError, TypeError) as exc:
        raise ParseError(f"{path}:1: bad dataset header: {exc}") from exc
    if meta.schema_version != SCHEMA_VERSION:
        raise ParseError(f"{path}:1: unsupported schema version {meta.schema_version}")
    records = []
    size = meta.image_size
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
            pixels = np.array(raw["pixels"], dtype=np.float64).reshape(3, size, size)
            records.append(
                DatasetRecord(
                    id=int(raw["id"]),
                    scene_label=int(raw["scene_label"]),
                    pixels=pixels,
                    captions=[[int(t) for t in cap] for cap in raw["captions"]],
                )
            )
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ParseError(f"{path}:{lineno}: bad dataset record: {exc}") from exc
    if len(records) != meta.num_records:
        raise ParseError(f"{path}: header promises {meta.num_records} records, found {len(records)}")
    return Dataset(meta, records)


# -- batching -------------------------------------------------------------------


@dataclass
class PairBatch:
    images: np.ndarray  # (B, 3, H, W)
    captions: list  # B token-id lists
    labels: np.ndarray  # (B,)
    record_ids: np.ndarray  # (B,)
    epoch: int
    step_in_epoch: int


def epoch_batches(records, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Batches covering every record exactly once; the final partial batch is kept.

    The permutation and per-record caption picks are functions of
    (seed, epoch), so any position in the stream can be reconstructed.
    """
    if batch_size < 1:
        raise ConfigError("batch size must be at least 1")
    n = len(records)
    if n == 0:
        raise InputError("cannot iterate over an empty record list")
    rng = child(seed, "epoch", epoch)
    order = rng.permutation(n) if shuffle else np.arange(n)
    caption_pick = child(seed, "caption-pick", epoch)
    picks = {
        rec.id: int(caption_pick.integers(0, len(rec.captions))) for rec in records
    }
    for step, start in enumerate(range(0, n, batch_size)):
        chosen = [records[i] for i in order[start : start + batch_size]]
        yield PairBatch(
            images=np.stack([rec.pixels for rec in chosen]),
            captions=[rec.captions[picks[rec.id]] for rec in chosen],
            labels=np.array([rec.scene_label for rec in chosen], dtype=np.int64),
            record_ids=np.array([rec.id for rec in chosen], dtype=np.int64),
            epoch=epoch,
            step_in_epoch=step,
        )


def batch_iterator(records, batch_size: int, seed: int, shuffle: bool = True, epochs: int = 1):
    """Stream of PairBatch over ``epochs`` seeded epochs."""
    for epoch in range(epochs):
        yield from epoch_batches(records, batch_size, seed, epoch, shuffle)
