"""Scenario labels and corpus partitioning."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyFactors, LabelError, TieError
from .geometry import ACCEL, SPEED, YAW, Corpus, PedestrianState, TrajectorySample


class ScaleBin(enum.Enum):
    S0_50 = "0-50"
    S50_80 = "50-80"
    S80_100 = "80-100"
    S100_150 = "100-150"
    S150_200 = "150-200"
    S200_300 = "200-300"
    S300p = "300+"


class SpeedBin(enum.Enum):
    Z0 = "0"
    V0_5 = "0-5"
    V5_10 = "5-10"
    V10_20 = "10-20"
    V20_30 = "20-30"
    V30p = "30+"


class EgoAction(enum.Enum):
    STRAIGHT = "straight"
    TURN = "turn"


class EgoMotion(enum.Enum):
    CONSTANT = "constant"
    CHANGE = "change"


class StateTransition(enum.Enum):
    WW = "W-W"
    SS = "S-S"
    WoSp = "Wo-Sp"
    SoWp = "So-Wp"


SCALE_EDGES = (50.0, 80.0, 100.0, 150.0, 200.0, 300.0)
SPEED_EDGES = (5.0, 10.0, 20.0, 30.0)


@dataclass(frozen=True)
class LabelConfig:
    yaw_threshold_deg: float = 5.0
    accel_threshold: float = 0.3
    zero_speed_kmh: float = 0.1
    # "window" judges yaw/accel over obs+fut, "obs" over the observation only
    horizon: str = "window"
    # "any": a single frame at/over the threshold flags a change; "mean": mean |a|
    accel_rule: str = "any"


DEFAULT_LABELS = LabelConfig()


@dataclass(frozen=True)
class ScenarioKey:
    scale_bin: ScaleBin
    obs_state: PedestrianState
    fut_state: PedestrianState
    speed_bin: SpeedBin
    ego_action: EgoAction
    ego_motion: EgoMotion
    state_transition: StateTransition

    def __post_init__(self):
        if self.state_transition is not transition_of(self.obs_state, self.fut_state):
            raise ValueError("state_transition inconsistent with obs/fut states")


def scale_bin(sample: TrajectorySample) -> ScaleBin:
    heights = sample.obs_boxes[:, 3] - sample.obs_boxes[:, 1]
    mean_h = float(np.mean(heights))
    idx = 0
    for edge in SCALE_EDGES:
        if mean_h >= edge:
            idx += 1
    return list(ScaleBin)[idx]


def state_label(walking: Sequence[bool]) -> PedestrianState:
    """Majority vote over a horizon; even-length ties raise :class:`TieError`."""
    walking = np.asarray(walking, dtype=bool)
    if walking.size == 0:
        raise ValueError("state sequence is empty")
    n_walk = int(walking.sum())
    n_stand = walking.size - n_walk
    if n_walk == n_stand:
        raise TieError(f"{n_walk} walking vs {n_stand} standing frames")
    return PedestrianState.WALKING if n_walk > n_stand else PedestrianState.STANDING


def _window_ego(sample: TrajectorySample, cfg: LabelConfig) -> np.ndarray:
    if cfg.horizon == "obs":
        return sample.obs_ego
    return sample.ego_window()


def speed_bin(sample: TrajectorySample, cfg: LabelConfig = DEFAULT_LABELS) -> SpeedBin:
    speeds = sample.ego_window()[:, SPEED]
    if np.all(speeds < cfg.zero_speed_kmh):
        return SpeedBin.Z0
    mean_v = float(np.mean(speeds))
    if mean_v <= 5.0:
        return SpeedBin.V0_5
    if mean_v <= 10.0:
        return SpeedBin.V5_10
    if mean_v <= 20.0:
        return SpeedBin.V10_20
    if mean_v <= 30.0:
        return SpeedBin.V20_30
    return SpeedBin.V30p


def ego_action_label(sample: TrajectorySample, cfg: LabelConfig = DEFAULT_LABELS) -> EgoAction:
    yaw = _window_ego(sample, cfg)[:, YAW]
    return EgoAction.TURN if yaw.max() - yaw.min() >= cfg.yaw_threshold_deg else EgoAction.STRAIGHT


def ego_motion_label(sample: TrajectorySample, cfg: LabelConfig = DEFAULT_LABELS) -> EgoMotion:
    acc = np.abs(_window_ego(sample, cfg)[:, ACCEL])
    if cfg.accel_rule == "mean":
        hit = acc.mean() >= cfg.accel_threshold
    else:
        hit = bool(np.any(acc >= cfg.accel_threshold))
    return EgoMotion.CHANGE if hit else EgoMotion.CONSTANT


def transition_of(obs: PedestrianState, fut: PedestrianState) -> StateTransition:
    W = PedestrianState.WALKING
    if obs is W:
        return StateTransition.WW if fut is W else StateTransition.WoSp
    return StateTransition.SoWp if fut is W else StateTransition.SS


def state_transition_label(sample: TrajectorySample) -> StateTransition:
    return transition_of(state_label(sample.obs_walking), state_label(sample.fut_walking))


def label_sample(sample: TrajectorySample, cfg: LabelConfig = DEFAULT_LABELS) -> ScenarioKey:
    try:
        obs = state_label(sample.obs_walking)
        fut = state_label(sample.fut_walking)
        return ScenarioKey(
            scale_bin=scale_bin(sample),
            obs_state=obs,
            fut_state=fut,
            speed_bin=speed_bin(sample, cfg),
            ego_action=ego_action_label(sample, cfg),
            ego_motion=ego_motion_label(sample, cfg),
            state_transition=transition_of(obs, fut),
        )
    except (TieError, ValueError) as exc:
        raise LabelError(sample.sample_id, exc) from exc


# factor name -> (ScenarioKey attribute, enum type)
FACTORS = {
    "scale": ("scale_bin", ScaleBin),
    "state": ("obs_state", PedestrianState),
    "fut_state": ("fut_state", PedestrianState),
    "speed": ("speed_bin", SpeedBin),
    "action": ("ego_action", EgoAction),
    "motion": ("ego_motion", EgoMotion),
    "transition": ("state_transition", StateTransition),
}
ALIASES = {
    "scale_bin": "scale",
    "obs_state": "state",
    "speed_bin": "speed",
    "ego_action": "action",
    "ego_motion": "motion",
    "state_transition": "transition",
}


def canonical_factor(name: str) -> str:
    name = name.strip()
    name = ALIASES.get(name, name)
    if name not in FACTORS:
        raise ValueError(f"unknown factor {name!r}; choose from {sorted(FACTORS)}")
    return name


def factor_value(key: ScenarioKey, factor: str) -> enum.Enum:
    return getattr(key, FACTORS[factor][0])


def cell_name(factors: Sequence[str], values: Sequence[enum.Enum]) -> str:
    return ",".join(f"{f}={v.value}" for f, v in zip(factors, values))


@dataclass
class Partition:
    factors: tuple[str, ...]
    cells: dict[tuple, list[int]]  # value tuple -> sample indices (ascending)
    sample_ids: tuple[str, ...] = field(repr=False, default=())

    def names(self) -> dict[str, list[int]]:
        return {cell_name(self.factors, k): v for k, v in self.cells.items()}

    def counts(self) -> dict[str, int]:
        return {name: len(idx) for name, idx in self.names().items()}

    def to_json(self) -> dict:
        return {
            "factors": list(self.factors),
            "n_samples": len(self.sample_ids),
            "cells": {
                name: {"count": len(idx), "sample_ids": [self.sample_ids[i] for i in idx]}
                for name, idx in self.names().items()
            },
        }


def label_corpus(corpus: Corpus, cfg: LabelConfig = DEFAULT_LABELS) -> list[ScenarioKey]:
    return [label_sample(s, cfg) for s in corpus.samples]


def partition(
    corpus: Corpus,
    factors: Sequence[str],
    cfg: LabelConfig = DEFAULT_LABELS,
    keys: Sequence[ScenarioKey] | None = None,
) -> Partition:
    """Assign every sample to exactly one cell of the requested factor cross-product.

    Cells are ordered by the declaration order of each factor's values, so
    the output never depends on sample order.
    """
    if not factors:
        raise EmptyFactors("at least one factor is required")
    factors = tuple(canonical_factor(f) for f in factors)
    if len(set(factors)) != len(factors):
        raise ValueError(f"duplicate factors in {factors}")
    if keys is None:
        keys = label_corpus(corpus, cfg)
    cells: dict[tuple, list[int]] = {}
    for i, key in enumerate(keys):
        cells.setdefault(tuple(factor_value(key, f) for f in factors), []).append(i)

    orders = [{v: j for j, v in enumerate(FACTORS[f][1])} for f in factors]
    ordered = dict(
        sorted(cells.items(), key=lambda kv: tuple(o[v] for o, v in zip(orders, kv[0])))
    )
    return Partition(
        factors=factors, cells=ordered, sample_ids=tuple(s.sample_id for s in corpus.samples)
    )
