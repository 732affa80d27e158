"""Shared domain types and metric primitives."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PART_NAMES = (
    "front-head", "front-torso", "front-legs", "front-feet", "front-whole",
    "back-head", "back-torso", "back-legs", "back-feet", "back-whole",
)
N_PARTS = len(PART_NAMES)
D_RAW = 32
FRONT = tuple(range(0, 5))
BACK = tuple(range(5, 10))


class ReIDError(Exception):
    """Base class for all package errors."""


class DistanceUndefinedError(ReIDError):
    pass


class NumericError(ReIDError):
    pass


class ConfigError(ReIDError, ValueError):
    pass


@dataclass(frozen=True)
class PartScheme:
    names: tuple = PART_NAMES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ConfigError("part names must be unique")

    @property
    def N(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


DEFAULT_SCHEME = PartScheme()


def as_vis(bits, n_parts: int = N_PARTS) -> np.ndarray:
    vis = np.asarray(bits, dtype=bool).reshape(-1)
    if vis.shape[0] != n_parts:
        raise ValueError(f"visibility mask needs {n_parts} bits, got {vis.shape[0]}")
    return vis


@dataclass(frozen=True)
class BBox:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite bbox {vals}")
        if self.w <= 0 or self.h <= 0:
            raise ValueError(f"bbox size must be positive, got w={self.w}, h={self.h}")

    def as_list(self) -> list:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True, eq=False)
class Observation:
    """One tracked person in one frame.

    ``raw`` rows of invisible parts are zeroed on construction so that
    buffer contents always satisfy the masking invariant.
    """

    track_id: int
    raw: np.ndarray
    vis: np.ndarray
    bbox: BBox
    label: int = 0
    frame: int = 0

    def __post_init__(self):
        raw = np.array(self.raw, dtype=np.float64)
        if raw.ndim != 2:
            raise ValueError("raw must be an N x D matrix")
        vis = as_vis(self.vis, raw.shape[0])
        if not np.all(np.isfinite(raw)):
            raise NumericError("non-finite raw descriptor")
        raw[~vis] = 0.0
        raw.setflags(write=False)
        vis = vis.copy()
        vis.setflags(write=False)
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "vis", vis)
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label}")

    def with_label(self, label: int) -> "Observation":
        return Observation(self.track_id, self.raw, self.vis, self.bbox, int(label), self.frame)

    def to_record(self) -> dict:
        return {
            "frame": int(self.frame),
            "track_id": int(self.track_id),
            "label": int(self.label),
            "bbox": self.bbox.as_list(),
            "vis": [int(b) for b in self.vis],
            "raw": self.raw.reshape(-1).tolist(),
        }

    @classmethod
    def from_record(cls, rec: dict, n_parts: int = N_PARTS) -> "Observation":
        raw = np.asarray(rec["raw"], dtype=np.float64).reshape(n_parts, -1)
        return cls(
            track_id=int(rec["track_id"]),
            raw=raw,
            vis=np.asarray(rec["vis"], dtype=bool),
            bbox=BBox(*rec["bbox"]),
            label=int(rec["label"]),
            frame=int(rec["frame"]),
        )

    def same_as(self, other: "Observation") -> bool:
        return (
            self.track_id == other.track_id
            and self.frame == other.frame
            and self.label == other.label
            and self.bbox == other.bbox
            and np.array_equal(self.vis, other.vis)
            and np.array_equal(self.raw, other.raw)
        )


@dataclass(frozen=True, eq=False)
class PartFeatures:
    F: np.ndarray
    vis: np.ndarray = field(default=None)

    def __post_init__(self):
        F = np.array(self.F, dtype=np.float64)
        vis = np.ones(F.shape[0], dtype=bool) if self.vis is None else as_vis(self.vis, F.shape[0])
        if not np.all(np.isfinite(F)):
            raise NumericError("non-finite part features")
        F[~vis] = 0.0
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "vis", vis.copy())


def part_distance(a: PartFeatures, b: PartFeatures) -> float:
    """Mean L2 distance over the parts visible in both inputs."""
    if a.F.shape != b.F.shape:
        raise ValueError(f"shape mismatch {a.F.shape} vs {b.F.shape}")
    both = a.vis & b.vis
    if not both.any():
        raise DistanceUndefinedError("no mutually visible part")
    diff = a.F[both] - b.F[both]
    return float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))


def pairwise_part_distance(F: np.ndarray, vis: np.ndarray):
    """Batched part distance.

    Args:
        F: (B, N, C) masked part features.
        vis: (B, N) boolean visibility.

    Returns:
        ``(dist, norms, mutual, count)`` where ``dist`` is (B, B) with NaN for
        pairs sharing no visible part, ``norms`` the (B, B, N) per-part
        distances, ``mutual`` the (B, B, N) co-visibility mask and ``count``
        the number of co-visible parts.
    """
    diff = F[:, None, :, :] - F[None, :, :, :]
    norms = np.sqrt(np.einsum("ijkc,ijkc->ijk", diff, diff))
    mutual = vis[:, None, :] & vis[None, :, :]
    count = mutual.sum(axis=2)
    with np.errstate(invalid="ignore", divide="ignore"):
        dist = np.where(count > 0, (norms * mutual).sum(axis=2) / count, np.nan)
    return dist, norms, mutual, count


def bbox_center_distance(a: BBox, b: BBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


def write_records(path, observations: Sequence[Observation]) -> None:
    with open(path, "w") as fh:
        for obs in observations:
            fh.write(json.dumps(obs.to_record()) + "\n")


def read_records(path, n_parts: int = N_PARTS) -> list:
    with open(path) as fh:
        return [Observation.from_record(json.loads(line), n_parts) for line in fh if line.strip()]
