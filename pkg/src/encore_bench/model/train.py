"""Objective, training loop and prediction for ENCORE."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import tensor as T
from ..autodiff.optim import AdamState, adam_step
from ..autodiff.tensor import Tape, Tensor
from ..errors import EmptyCorpus
from ..geometry import Corpus
from .bundle import Batch, make_batch, to_pixels
from .config import ModelConfig
from .encore import Encore, Outputs

log = logging.getLogger(__name__)

LOSS_PARTS = ("L_FT", "L_sFT", "L_ROT", "KLD")


def per_sample_logcosh(pred: Tensor, target: np.ndarray) -> Tensor:
    """Sum over steps of the coordinate-mean LogCosh; reduces the last two axes."""
    lc = T.logcosh(T.sub(pred, target))
    return T.sum(T.mean(lc, axis=-1), axis=-1)


def best_of_many(pred: Tensor, target: np.ndarray) -> tuple[Tensor, np.ndarray]:
    """Batch mean of min over k of the per-sample loss; gradient flows via the argmin only.

    ``pred`` is ``(k, b, t, 4)``. Also returns the ``(k, b)`` loss matrix.
    """
    per = per_sample_logcosh(pred, np.broadcast_to(target, pred.shape))
    vals = per.data
    best = np.argmin(vals, axis=0)
    chosen = T.getitem(per, (best, np.arange(vals.shape[1])))
    return T.mean(chosen), vals


def total_loss(out: Outputs, batch: Batch, config: ModelConfig) -> tuple[Tensor, dict]:
    """L_FT + alpha*L_sFT + beta*L_ROT + gamma*KLD.

    The auxiliary slot holds observation reconstruction or, in the POFT
    ablation, the partial-observation future prediction.
    """
    l_ft, ft_matrix = best_of_many(out.trajectory, batch.target)
    total = l_ft
    parts = {"L_FT": float(l_ft.data), "L_sFT": 0.0, "L_ROT": 0.0, "KLD": 0.0}
    if out.scaled is not None and config.use_sft:
        l_sft, _ = best_of_many(out.scaled, batch.scaled_target)
        parts["L_sFT"] = float(l_sft.data)
        total = T.add(total, T.mul(l_sft, config.alpha))
    if out.aux is not None:
        aux_target = batch.location if config.use_rot else batch.target
        l_aux = T.mean(per_sample_logcosh(out.aux, aux_target))
        parts["L_ROT"] = float(l_aux.data)
        total = T.add(total, T.mul(l_aux, config.beta))
    if out.kld is not None:
        kld = T.mean(out.kld)
        parts["KLD"] = float(kld.data)
        total = T.add(total, T.mul(kld, config.gamma))
    parts["total"] = float(total.data)
    parts["L_FT_mean_over_k"] = float(ft_matrix.mean(axis=0).mean())
    return total, parts


@dataclass
class TrainResult:
    model: Encore
    history: list[dict] = field(default_factory=list)  # one row per epoch
    step_losses: list[float] = field(default_factory=list)

    def history_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", *LOSS_PARTS, "total"])
        for row in self.history:
            w.writerow([row["epoch"], *(repr(row[p]) for p in LOSS_PARTS), repr(row["total"])])
        return buf.getvalue()


def train_step(model: Encore, batch: Batch, state: AdamState, rng: np.random.Generator) -> dict:
    params = model.parameters()
    model.zero_grad()
    with Tape() as tape:
        out = model.forward(batch, rng=rng, training=True)
        loss, parts = total_loss(out, batch, model.config)
    tape.backward(loss)
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
    adam_step(params, state)
    return parts


def train(corpus: Corpus, config: ModelConfig, model: Encore | None = None,
          steps: int | None = None) -> TrainResult:
    """Seeded mini-batch Adam training.

    Runs ``config.epochs`` epochs, stopping early once ``steps`` (or
    ``config.max_steps``) optimizer updates have been made.
    """
    if not len(corpus):
        raise EmptyCorpus("training corpus is empty")
    cfg = config.replace(obs_len=corpus.samples[0].obs_len, pred_len=corpus.samples[0].fut_len)
    model = model or Encore(cfg)
    full = make_batch(corpus.samples, corpus.visible_aspect_ratio, cfg.edge_eps)
    rng = np.random.default_rng(cfg.seed + 1)
    state = AdamState.for_params(model.parameters(), lr=cfg.lr)
    limit = steps if steps is not None else cfg.max_steps
    result = TrainResult(model)
    n = len(full)
    done = 0
    epoch = 0
    while limit is None or done < limit:
        if limit is None and epoch >= cfg.epochs:
            break
        order = rng.permutation(n)
        sums = {p: 0.0 for p in (*LOSS_PARTS, "total")}
        n_batches = 0
        for lo in range(0, n, cfg.batch_size):
            parts = train_step(model, full.take(order[lo : lo + cfg.batch_size]), state, rng)
            result.step_losses.append(parts["total"])
            for p in sums:
                sums[p] += parts[p]
            n_batches += 1
            done += 1
            if limit is not None and done >= limit:
                break
        epoch += 1
        row = {"epoch": epoch, **{p: v / n_batches for p, v in sums.items()}}
        result.history.append(row)
        log.debug("epoch %d total %.6g", epoch, row["total"])
    return result


def predict(model: Encore, samples, k: int | None = None, seed: int = 0,
            batch_size: int = 256) -> np.ndarray:
    """``(n, k, tau, 4)`` pixel predictions; deterministic models return k=1."""
    cfg = model.config
    if cfg.deterministic:
        k, mode = 1, "prior_mean"
    else:
        k, mode = (k or cfg.k_samples), "sample"
    if k < 1:
        raise ValueError("k must be >= 1")
    samples = list(samples)
    rng = np.random.default_rng(seed)
    chunks = []
    for lo in range(0, len(samples), batch_size):
        batch = make_batch(samples[lo : lo + batch_size], with_targets=False)
        out = model.forward(batch, k=k, rng=rng, mode=mode, training=False)
        px = to_pixels(out.trajectory.data, batch.first_box, batch.image_scale)  # (k, b, tau, 4)
        chunks.append(np.transpose(px, (1, 0, 2, 3)))
    if not chunks:
        return np.empty((0, k, cfg.pred_len, 4))
    return np.concatenate(chunks, axis=0)
