"""Similarity tables and the bidirectional recall@K protocol.

Images retrieve captions (each image owns a set of ground-truth captions) and
captions retrieve images (each caption has exactly one ground-truth image).
Ranking is by descending similarity with ties broken toward the lower
candidate index, and mean recall averages the six R@{1,5,10} values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateInputError, InputError

DIRECTIONS = ("i2t", "t2i")
REPORT_KEYS = ("i2t_r1", "i2t_r5", "i2t_r10", "t2i_r1", "t2i_r5", "t2i_r10", "mr")


@dataclass
class RetrievalTable:
    sim: np.ndarray  # (N_img, N_txt)
    img2txt: dict  # image index -> set of caption indices
    txt2img: dict  # caption index -> single image index

    def __post_init__(self):
        self.sim = np.asarray(self.sim, dtype=np.float64)
        if self.sim.ndim != 2:
            raise InputError(f"similarity matrix must be 2-d, got shape {self.sim.shape}")
        if not np.isfinite(self.sim).all():
            raise InputError("similarity matrix contains non-finite values")
        n_img, n_txt = self.sim.shape
        if set(self.txt2img) != set(range(n_txt)):
            raise InputError("every caption needs exactly one ground-truth image")
        claimed = set()
        for img, captions in self.img2txt.items():
            if not 0 <= img < n_img:
                raise InputError(f"image index {img} out of range")
            if not captions:
                raise InputError(f"image {img} has no ground-truth captions")
            for cap in captions:
                if self.txt2img[cap] != img:
                    raise InputError(f"caption {cap} maps to a different image than {img}")
                claimed.add(cap)
        if set(self.img2txt) != set(range(n_img)):
            raise InputError("every image needs at least one caption")
        if claimed != set(range(n_txt)):
            raise InputError("caption maps are inconsistent between directions")


def similarity_matrix(v_rows: np.ndarray, t_rows: np.ndarray) -> np.ndarray:
    """Cosine similarities between image rows and caption rows."""
    v = np.asarray(v_rows, dtype=np.float64)
    t = np.asarray(t_rows, dtype=np.float64)
    vn = np.linalg.norm(v, axis=-1, keepdims=True)
    tn = np.linalg.norm(t, axis=-1, keepdims=True)
    if not (vn > 0).all() or not (tn > 0).all():
        raise DegenerateInputError("similarity_matrix received a zero-norm embedding")
    return (v / vn) @ (t / tn).T


def _ranking(scores: np.ndarray) -> np.ndarray:
    # descending similarity, ties broken toward the lower candidate index
    return np.argsort(-scores, kind="stable")


def recall_at_k(table: RetrievalTable, k: int, direction: str) -> float:
    """Percentage of queries whose ground truth appears in the top-k candidates."""
    if direction not in DIRECTIONS:
        raise ConfigError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    n_img, n_txt = table.sim.shape
    candidates = n_txt if direction == "i2t" else n_img
    if k > candidates:
        raise ConfigError(f"K={k} exceeds the {candidates} available candidates")
    if direction == "i2t":
        hits = sum(
            1
            for i in range(n_img)
            if table.img2txt[i] & set(_ranking(table.sim[i])[:k].tolist())
        )
        return 100.0 * hits / n_img
    hits = sum(
        1
        for j in range(n_txt)
        if table.txt2img[j] in _ranking(table.sim[:, j])[:k].tolist()
    )
    return 100.0 * hits / n_txt


def mean_recall(recalls) -> float:
    """Arithmetic mean of the six R@{1,5,10} percentages (both directions)."""
    values = [float(r) for r in recalls]
    if len(values) != 6:
        raise InputError(f"mean recall averages exactly six values, got {len(values)}")
    return sum(values) / 6.0


@dataclass
class RecallReport:
    i2t_r1: float
    i2t_r5: float
    i2t_r10: float
    t2i_r1: float
    t2i_r5: float
    t2i_r10: float
    mr: float

    def __post_init__(self):
        for name in REPORT_KEYS:
            value = getattr(self, name)
            if not 0.0 <= value <= 100.0:
                raise InputError(f"{name}={value} outside [0, 100]")
        if not (self.i2t_r1 <= self.i2t_r5 <= self.i2t_r10):
            raise InputError("image-to-text recalls must be nondecreasing in K")
        if not (self.t2i_r1 <= self.t2i_r5 <= self.t2i_r10):
            raise InputError("text-to-image recalls must be nondecreasing in K")

    @classmethod
    def from_table(cls, table: RetrievalTable) -> "RecallReport":
        values = [recall_at_k(table, k, d) for d in DIRECTIONS for k in (1, 5, 10)]
        return cls(*values, mr=mean_recall(values))

    def to_dict(self) -> dict:
        return {key: float(getattr(self, key)) for key in REPORT_KEYS}

    @classmethod
    def from_dict(cls, data: dict) -> "RecallReport":
        extra = set(data) - set(REPORT_KEYS)
        missing = set(REPORT_KEYS) - set(data)
        if extra or missing:
            raise InputError(f"bad recall report keys: extra {sorted(extra)}, missing {sorted(missing)}")
        return cls(**{key: float(data[key]) for key in REPORT_KEYS})
