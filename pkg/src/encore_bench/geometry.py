"""Image-plane geometry: boxes, samples, corpora and the boundary adjustment."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from . import kernels
from .errors import InvalidBox, NoVisibleBoxes, ZeroArea

DEFAULT_RATIO = 0.34
DEFAULT_EDGE_EPS = 1.0

# Column layout of ego arrays.
EGO_FIELDS = ("speed_kmh", "accel_ms2", "yaw_deg", "yaw_rate_dps", "lat", "lon")
SPEED, ACCEL, YAW, YAW_RATE, LAT, LON = range(6)


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite coordinate in {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise InvalidBox(f"inverted box {vals}")

    @classmethod
    def from_array(cls, a) -> "BoundingBox":
        return cls(*(float(v) for v in a))

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True)
class ImageGeometry:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")


class PedestrianState(enum.Enum):
    WALKING = "walking"
    STANDING = "standing"

    @property
    def short(self) -> str:
        return "W" if self is PedestrianState.WALKING else "S"


@dataclass(frozen=True)
class EgoState:
    speed: float  # km/h
    acceleration: float  # m/s^2
    yaw: float  # degrees, unwrapped
    angular_velocity: float  # deg/s
    gps: tuple[float, float]  # (lat, lon)

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError("speed must be non-negative")

    def as_row(self) -> np.ndarray:
        return np.array(
            [self.speed, self.acceleration, self.yaw, self.angular_velocity, self.gps[0], self.gps[1]],
            dtype=np.float64,
        )


@dataclass(frozen=True, eq=False)
class TrajectorySample:
    """One observation/future window.

    Boxes are ``(n, 4)`` float64 arrays, states are boolean "walking" masks,
    ego arrays follow :data:`EGO_FIELDS`.
    """

    sample_id: str
    video_id: str
    ped_id: str
    obs_boxes: np.ndarray
    fut_boxes: np.ndarray
    obs_walking: np.ndarray
    fut_walking: np.ndarray
    obs_ego: np.ndarray
    fut_ego: np.ndarray
    geometry: ImageGeometry
    start_frame: int = 0
    truth: dict[str, Any] | None = None

    def __post_init__(self):
        o, tau = len(self.obs_boxes), len(self.fut_boxes)
        if self.obs_boxes.shape != (o, 4) or self.fut_boxes.shape != (tau, 4):
            raise ValueError(f"{self.sample_id}: boxes must be (n, 4)")
        if len(self.obs_walking) != o or len(self.obs_ego) != o:
            raise ValueError(f"{self.sample_id}: observation sequences disagree in length")
        if len(self.fut_walking) != tau or len(self.fut_ego) != tau:
            raise ValueError(f"{self.sample_id}: future sequences disagree in length")

    @property
    def obs_len(self) -> int:
        return len(self.obs_boxes)

    @property
    def fut_len(self) -> int:
        return len(self.fut_boxes)

    def ego_window(self) -> np.ndarray:
        return np.concatenate([self.obs_ego, self.fut_ego], axis=0)


class Split(enum.Enum):
    TRAIN = "train"
    TEST = "test"


@dataclass(frozen=True, eq=False)
class Corpus:
    samples: tuple[TrajectorySample, ...]
    split: Split = Split.TRAIN
    fps: float = 30.0
    visible_aspect_ratio: float = DEFAULT_RATIO
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.fps <= 0:
            raise ValueError("fps must be positive")
        if not 0 < self.visible_aspect_ratio < 1:
            raise ValueError("visible_aspect_ratio must lie in (0, 1)")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def n_pedestrians(self) -> int:
        return len({(s.video_id, s.ped_id) for s in self.samples})


def box_center(b: BoundingBox) -> tuple[float, float]:
    return (b.x1 + b.x2) / 2, (b.y1 + b.y2) / 2


def box_dims(b: BoundingBox) -> tuple[float, float]:
    return b.x2 - b.x1, b.y2 - b.y1


def adjusted_dims_array(boxes, widths, heights, ratio=DEFAULT_RATIO, eps=DEFAULT_EDGE_EPS):
    """Vectorized truncation-aware (w, h) plus truncation codes (bit0 horizontal, bit1 vertical)."""
    boxes = np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    widths = np.broadcast_to(np.asarray(widths, dtype=np.float64), (n,)).copy()
    heights = np.broadcast_to(np.asarray(heights, dtype=np.float64), (n,)).copy()
    return kernels.adjusted_dims(boxes, widths, heights, float(ratio), float(eps))


def adjusted_areas(boxes, widths, heights, ratio=DEFAULT_RATIO, eps=DEFAULT_EDGE_EPS) -> np.ndarray:
    dims, _ = adjusted_dims_array(boxes, widths, heights, ratio, eps)
    return dims[:, 0] * dims[:, 1]


def is_truncated(b: BoundingBox, g: ImageGeometry, eps: float = DEFAULT_EDGE_EPS) -> bool:
    return (
        b.x1 <= eps or b.x2 >= g.width - eps or b.y1 <= eps or b.y2 >= g.height - eps
    )


def adjusted_area(
    b: BoundingBox, g: ImageGeometry, ratio: float = DEFAULT_RATIO, eps: float = DEFAULT_EDGE_EPS
) -> float:
    """Box area with truncated extents rebuilt from the visible aspect ratio.

    A side within ``eps`` pixels of the image border counts as truncated.
    Width truncation rebuilds the width as ``ratio * h``; height truncation
    rebuilds the height as ``w / ratio``; truncation on both axes keeps the
    largest of the three candidate areas.
    """
    if ratio <= 0:
        raise ValueError("ratio must be positive")
    w, h = box_dims(b)
    if w == 0 and h == 0:
        raise ZeroArea(f"box {b} has zero width and height")
    return float(adjusted_areas(b.as_array(), g.width, g.height, ratio, eps)[0])


def visible_ratios(corpus: Corpus, eps: float = DEFAULT_EDGE_EPS) -> np.ndarray:
    chunks = []
    for s in corpus.samples:
        boxes = np.concatenate([s.obs_boxes, s.fut_boxes], axis=0)
        _, code = adjusted_dims_array(boxes, s.geometry.width, s.geometry.height, DEFAULT_RATIO, eps)
        h = boxes[:, 3] - boxes[:, 1]
        keep = (code == 0) & (h > 0)
        chunks.append((boxes[keep, 2] - boxes[keep, 0]) / h[keep])
    return np.concatenate(chunks) if chunks else np.empty(0)


def measure_visible_aspect_ratio(corpus: Corpus, eps: float = DEFAULT_EDGE_EPS) -> float:
    ratios = visible_ratios(corpus, eps)
    if ratios.size == 0:
        raise NoVisibleBoxes("corpus has no fully visible boxes")
    return float(np.mean(ratios))


def stack_boxes(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.empty((0, 4))
    return np.stack([b.as_array() for b in boxes])
