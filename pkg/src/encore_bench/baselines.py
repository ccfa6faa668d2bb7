"""Deterministic kinematic predictors used as sanity references."""

from __future__ import annotations

import enum

import numpy as np

from .geometry import Corpus, TrajectorySample


class BaselineKind(enum.Enum):
    CONSTANT_POSITION = "constant_position"
    CONSTANT_VELOCITY = "constant_velocity"
    LINEAR_FIT = "linear_fit"


ALIASES = {"cp": "constant_position", "cv": "constant_velocity", "lf": "linear_fit"}


def parse_kind(name: str | BaselineKind) -> BaselineKind:
    if isinstance(name, BaselineKind):
        return name
    key = name.strip().lower().replace("-", "_")
    key = ALIASES.get(key, key)
    # accept CamelCase names too
    key = {"constantposition": "constant_position", "constantvelocity": "constant_velocity",
           "linearfit": "linear_fit"}.get(key.replace("_", ""), key)
    return BaselineKind(key)


def _order_coords(boxes: np.ndarray) -> np.ndarray:
    out = boxes.copy()
    out[:, 0] = np.minimum(boxes[:, 0], boxes[:, 2])
    out[:, 2] = np.maximum(boxes[:, 0], boxes[:, 2])
    out[:, 1] = np.minimum(boxes[:, 1], boxes[:, 3])
    out[:, 3] = np.maximum(boxes[:, 1], boxes[:, 3])
    return out


def predict(kind: str | BaselineKind, sample: TrajectorySample, tau: int | None = None) -> np.ndarray:
    """Return a ``(tau, 4)`` pixel trajectory."""
    kind = parse_kind(kind)
    obs = sample.obs_boxes
    tau = sample.fut_len if tau is None else tau
    steps = np.arange(1, tau + 1, dtype=np.float64)[:, None]
    if kind is BaselineKind.CONSTANT_POSITION:
        return np.repeat(obs[-1:], tau, axis=0)
    if kind is BaselineKind.CONSTANT_VELOCITY:
        vel = np.mean(np.diff(obs, axis=0), axis=0) if len(obs) > 1 else np.zeros(4)
        return _order_coords(obs[-1] + steps * vel)
    # least-squares line per coordinate over observed frame indices
    o = len(obs)
    if o == 1:
        return np.repeat(obs, tau, axis=0)
    t = np.arange(o, dtype=np.float64)
    design = np.stack([np.ones(o), t], axis=1)
    coef, *_ = np.linalg.lstsq(design, obs, rcond=None)
    future_t = (o - 1) + steps[:, 0]
    return _order_coords(coef[0] + future_t[:, None] * coef[1])


def predict_corpus(kind: str | BaselineKind, corpus: Corpus) -> np.ndarray:
    """``(n, 1, tau, 4)`` prediction set for the whole corpus."""
    if not len(corpus):
        return np.empty((0, 1, 0, 4))
    return np.stack([predict(kind, s)[None] for s in corpus.samples])
