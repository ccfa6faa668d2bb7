"""Model inputs and regression targets built from trajectory samples."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..dataset import EARTH_RADIUS_M
from ..geometry import ACCEL, LAT, LON, SPEED, YAW, YAW_RATE, TrajectorySample, adjusted_dims_array

# fixed feature scales: km/h, m/s^2, deg/s, m/frame, m/frame
EGO_SCALE = np.array([1 / 30.0, 1.0, 1 / 10.0, 2.0, 2.0])


@dataclass
class ModalityBundle:
    location: np.ndarray  # (o, 4) normalized, offset by the first observed box
    state: np.ndarray  # (o, 2) one-hot [walking, standing]
    velocity: np.ndarray  # (o, 4)
    ego: np.ndarray  # (o, 5)
    future_ego: np.ndarray  # (tau, 5)
    first_box: np.ndarray  # (4,) normalized, absolute
    image_scale: np.ndarray  # (4,) [W, H, W, H]


def _gps_deltas(ego: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    """Frame-to-frame displacement in the ego heading frame: (lateral, forward) metres."""
    rows = ego if prev is None else np.concatenate([prev[None], ego], axis=0)
    lat = np.radians(rows[:, LAT])
    lon = np.radians(rows[:, LON])
    dn = np.diff(lat) * EARTH_RADIUS_M
    de = np.diff(lon) * EARTH_RADIUS_M * np.cos(lat[:-1])
    th = np.radians(rows[:-1, YAW])
    fwd = de * np.sin(th) + dn * np.cos(th)
    lateral = de * np.cos(th) - dn * np.sin(th)
    out = np.stack([lateral, fwd], axis=1)
    if prev is None:
        out = np.concatenate([np.zeros((1, 2)), out], axis=0)
    return out


def _ego_features(ego: np.ndarray, prev: np.ndarray | None) -> np.ndarray:
    feats = np.concatenate(
        [ego[:, [SPEED, ACCEL, YAW_RATE]], _gps_deltas(ego, prev)], axis=1
    )
    return feats * EGO_SCALE


def build_bundle(sample: TrajectorySample) -> ModalityBundle:
    g = sample.geometry
    scale = np.array([g.width, g.height, g.width, g.height], dtype=np.float64)
    norm = sample.obs_boxes / scale
    first = norm[0].copy()
    location = norm - first
    velocity = np.zeros_like(location)
    velocity[1:] = location[1:] - location[:-1]
    walking = np.asarray(sample.obs_walking, dtype=np.float64)
    state = np.stack([walking, 1.0 - walking], axis=1)
    return ModalityBundle(
        location=location,
        state=state,
        velocity=velocity,
        ego=_ego_features(sample.obs_ego, None),
        future_ego=_ego_features(sample.fut_ego, sample.obs_ego[-1]),
        first_box=first,
        image_scale=scale,
    )


def mean_adjusted_dims(sample: TrajectorySample, ratio: float, eps: float) -> np.ndarray:
    """Mean truncation-adjusted (w, h, w, h) of the ground-truth future boxes, normalized."""
    g = sample.geometry
    dims, _ = adjusted_dims_array(sample.fut_boxes, g.width, g.height, ratio, eps)
    w, h = dims.mean(axis=0)
    out = np.array([w / g.width, h / g.height, w / g.width, h / g.height])
    return np.where(out > 0, out, 1.0)


@dataclass
class Batch:
    location: np.ndarray  # (b, o, 4)
    state: np.ndarray  # (b, o, 2)
    velocity: np.ndarray  # (b, o, 4)
    ego: np.ndarray  # (b, o, 5)
    future_ego: np.ndarray  # (b, tau, 5)
    first_box: np.ndarray  # (b, 4)
    image_scale: np.ndarray  # (b, 4)
    target: np.ndarray | None = None  # (b, tau, 4) normalized offsets
    scaled_target: np.ndarray | None = None  # (b, tau, 4)

    def __len__(self) -> int:
        return len(self.location)

    def modality(self, name: str) -> np.ndarray:
        return getattr(self, name)

    def take(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch(**{
            k: (None if v is None else v[idx]) for k, v in self.__dict__.items()
        })


def make_batch(samples: Sequence[TrajectorySample], ratio: float = 0.34, eps: float = 1.0,
               with_targets: bool = True) -> Batch:
    bundles = [build_bundle(s) for s in samples]
    batch = Batch(
        location=np.stack([b.location for b in bundles]),
        state=np.stack([b.state for b in bundles]),
        velocity=np.stack([b.velocity for b in bundles]),
        ego=np.stack([b.ego for b in bundles]),
        future_ego=np.stack([b.future_ego for b in bundles]),
        first_box=np.stack([b.first_box for b in bundles]),
        image_scale=np.stack([b.image_scale for b in bundles]),
    )
    if with_targets:
        target = np.stack(
            [s.fut_boxes / b.image_scale - b.first_box for s, b in zip(samples, bundles)]
        )
        dims = np.stack([mean_adjusted_dims(s, ratio, eps) for s in samples])
        batch.target = target
        batch.scaled_target = target / dims[:, None, :]
    return batch


def to_pixels(pred: np.ndarray, first_box: np.ndarray, image_scale: np.ndarray) -> np.ndarray:
    """Map normalized offsets ``(..., b, t, 4)`` back to ordered pixel boxes."""
    px = (pred + first_box[:, None, :]) * image_scale[:, None, :]
    out = px.copy()
    out[..., 0] = np.minimum(px[..., 0], px[..., 2])
    out[..., 2] = np.maximum(px[..., 0], px[..., 2])
    out[..., 1] = np.minimum(px[..., 1], px[..., 3])
    out[..., 3] = np.maximum(px[..., 1], px[..., 3])
    return out

