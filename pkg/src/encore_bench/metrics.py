"""MSE-family trajectory metrics, their scale-normalized variants and per-cell reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import EmptyCell, LengthMismatch, ZeroArea
from .geometry import DEFAULT_EDGE_EPS, DEFAULT_RATIO, Corpus, TrajectorySample, adjusted_areas
from .scenarios import FACTORS, Partition

REPORT_SCHEMA = "encore-bench/metric-report/v1"
METRIC_NAMES = ("B_MSE", "C_MSE", "CF_MSE", "sB_MSE", "sC_MSE", "sCF_MSE")
HORIZON_SECONDS = (0.5, 1.0, 1.5)

# Recorded in every report so numbers can be compared with other tools.
CONVENTIONS = {
    "coordinate_reduction": "mean over the 4 box coordinates (2 for centers)",
    "scale_denominator": "mean adjusted area of the ground-truth future boxes",
    "scaled_aggregation": "scale per sample, then average",
    "best_of_k": "minimum over k predictions, per metric",
    "truncation": "side within edge_eps px of the image border",
    "scale_bins": "mean observed box height, left-inclusive",
    "speed_bins": "mean speed over obs+fut, right-inclusive; '0' iff every frame < 0.1 km/h",
    "ego_action": "yaw range over the window >= 5 deg",
    "ego_motion": "any frame |accel| >= 0.3 m/s^2",
    "empty_cells": "omitted",
}


def _check(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 4:
        raise LengthMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def _horizon(horizon, tau):
    if horizon is None:
        return tau
    if not 1 <= horizon <= tau:
        raise ValueError(f"horizon must lie in [1, {tau}], got {horizon}")
    return int(horizon)


def b_mse(pred, gt, horizon: int | None = None) -> float:
    pred, gt = _check(pred, gt)
    h = _horizon(horizon, len(gt))
    return float(kernels.box_mse(pred[None], gt[None], h)[0])


def c_mse(pred, gt, horizon: int | None = None) -> float:
    pred, gt = _check(pred, gt)
    h = _horizon(horizon, len(gt))
    return float(kernels.center_mse(pred[None], gt[None], h)[0][0])


def cf_mse(pred, gt) -> float:
    pred, gt = _check(pred, gt)
    return float(kernels.center_mse(pred[None], gt[None], len(gt))[1][0])


def mean_gt_area(sample: TrajectorySample, ratio: float = DEFAULT_RATIO,
                 eps: float = DEFAULT_EDGE_EPS, adjust: bool = True) -> float:
    boxes = sample.fut_boxes
    if adjust:
        areas = adjusted_areas(boxes, sample.geometry.width, sample.geometry.height, ratio, eps)
    else:
        areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return float(np.mean(areas))


def scaled(metric_value: float, sample: TrajectorySample, ratio: float = DEFAULT_RATIO,
           eps: float = DEFAULT_EDGE_EPS, adjust: bool = True) -> float:
    if len(sample.fut_boxes) == 0:
        raise ValueError("sample has no ground-truth future boxes")
    area = mean_gt_area(sample, ratio, eps, adjust)
    if area == 0:
        raise ZeroArea(f"{sample.sample_id}: mean ground-truth area is zero")
    return metric_value / area


def best_of_k_metric(preds, gt, metric: Callable = b_mse) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    if preds.ndim == 2:
        preds = preds[None]
    if len(preds) < 1:
        raise ValueError("k must be >= 1")
    return min(metric(p, gt) for p in preds)


@dataclass
class SampleMetrics:
    """Per-sample metric columns, aligned with ``sample_ids``."""

    sample_ids: tuple[str, ...]
    values: dict[str, np.ndarray]

    def __len__(self) -> int:
        return len(self.sample_ids)

    def take(self, idx) -> "SampleMetrics":
        idx = np.asarray(idx, dtype=np.int64)
        return SampleMetrics(
            tuple(self.sample_ids[i] for i in idx), {k: v[idx] for k, v in self.values.items()}
        )

    def to_json(self) -> dict:
        return {
            "sample_ids": list(self.sample_ids),
            "values": {k: [float(x) for x in v] for k, v in self.values.items()},
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SampleMetrics":
        return cls(
            tuple(obj["sample_ids"]),
            {k: np.asarray(v, dtype=np.float64) for k, v in obj["values"].items()},
        )


def horizon_frames(fps: float, tau: int) -> dict[str, int]:
    out = {}
    for sec in HORIZON_SECONDS:
        n = int(round(sec * fps))
        if 1 <= n <= tau:
            out[f"B_MSE_{sec:g}s"] = n
    return out


def evaluate(
    corpus: Corpus,
    predictions,
    ratio: float | None = None,
    eps: float = DEFAULT_EDGE_EPS,
    adjust: bool = True,
) -> SampleMetrics:
    """Score a prediction set against a corpus.

    ``predictions`` has shape ``(n_samples, k, tau, 4)`` (or ``(n, tau, 4)``
    for k=1), in pixels. Every metric takes its own best of k.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 3:
        preds = preds[:, None]
    n, k, tau = preds.shape[0], preds.shape[1], preds.shape[2]
    if n != len(corpus):
        raise LengthMismatch(f"{n} predictions for {len(corpus)} samples")
    if n == 0:
        return SampleMetrics((), {m: np.empty(0) for m in METRIC_NAMES})
    gt = np.stack([s.fut_boxes for s in corpus.samples])
    if gt.shape[1] != tau:
        raise LengthMismatch(f"prediction horizon {tau} vs ground truth {gt.shape[1]}")
    ratio = corpus.visible_aspect_ratio if ratio is None else ratio

    flat_pred = np.ascontiguousarray(preds.reshape(n * k, tau, 4))
    flat_gt = np.ascontiguousarray(np.repeat(gt, k, axis=0))
    b = kernels.box_mse(flat_pred, flat_gt, tau).reshape(n, k).min(axis=1)
    c, cf = kernels.center_mse(flat_pred, flat_gt, tau)
    c = c.reshape(n, k).min(axis=1)
    cf = cf.reshape(n, k).min(axis=1)

    areas = np.array([mean_gt_area(s, ratio, eps, adjust) for s in corpus.samples])
    if np.any(areas == 0):
        bad = corpus.samples[int(np.flatnonzero(areas == 0)[0])].sample_id
        raise ZeroArea(f"{bad}: mean ground-truth area is zero")
    values = {
        "B_MSE": b,
        "C_MSE": c,
        "CF_MSE": cf,
        "sB_MSE": b / areas,
        "sC_MSE": c / areas,
        "sCF_MSE": cf / areas,
    }
    for name, h in horizon_frames(corpus.fps, tau).items():
        values[name] = kernels.box_mse(flat_pred, flat_gt, h).reshape(n, k).min(axis=1)
    return SampleMetrics(tuple(s.sample_id for s in corpus.samples), values)


def aggregate(per_sample: SampleMetrics, indices: Sequence[int]) -> dict[str, float]:
    """Unweighted mean of every metric column over one cell."""
    if len(indices) == 0:
        raise EmptyCell("cell has no samples")
    idx = np.asarray(indices, dtype=np.int64)
    row: dict[str, float] = {"n_samples": int(len(idx))}
    for name, col in per_sample.values.items():
        row[name] = float(np.mean(col[idx]))
    return row


@dataclass
class MetricReport:
    factors: tuple[str, ...]
    rows: dict[str, dict[str, float]]
    meta: dict = field(default_factory=dict)

    @property
    def columns(self) -> list[str]:
        cols = ["n_samples", *METRIC_NAMES]
        extra = sorted({c for r in self.rows.values() for c in r} - set(cols))
        return cols + extra

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        cols = self.columns
        writer.writerow(["cell", *cols])
        for name, row in self.rows.items():
            writer.writerow([name, *(repr(row[c]) if c != "n_samples" else row[c] for c in cols)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "factors": list(self.factors),
            "columns": self.columns,
            "rows": self.rows,
            "meta": self.meta,
        }

    def heatmap(self, metric: str = "sB_MSE") -> dict:
        """Dense grid for a two-factor report; missing cells are ``None``."""
        if len(self.factors) != 2:
            raise ValueError("heatmaps need exactly two factors")
        f_row, f_col = self.factors
        row_vals = [v.value for v in FACTORS[f_row][1]]
        col_vals = [v.value for v in FACTORS[f_col][1]]
        grid = []
        for rv in row_vals:
            line = []
            for cv in col_vals:
                row = self.rows.get(f"{f_row}={rv},{f_col}={cv}")
                line.append(None if row is None else row[metric])
            grid.append(line)
        return {
            "schema": REPORT_SCHEMA + "/heatmap",
            "metric": metric,
            "row_factor": f_row,
            "col_factor": f_col,
            "rows": row_vals,
            "cols": col_vals,
            "grid": grid,
        }


def build_report(per_sample: SampleMetrics, part: Partition, meta: dict | None = None) -> MetricReport:
    rows = {}
    for name, idx in part.names().items():
        if idx:
            rows[name] = aggregate(per_sample, idx)
    all_idx = list(range(len(per_sample)))
    if all_idx:
        rows["all"] = aggregate(per_sample, all_idx)
    m = {"conventions": CONVENTIONS}
    m.update(meta or {})
    return MetricReport(factors=part.factors, rows=rows, meta=m)


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
