"""Epoch loop: divide the training pairs, then optimize the weighted matching loss.

Each epoch first scores every pair with the current model, splits the pairs with
the two branch mixtures and recalibrates the diagonal labels. Mini-batch steps
then minimize sum_i l_i * (L_bge(i) + L_tse(i)) with Adam.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import division as div
from . import encoder as enc
from .evaluation import evaluate_model
from .losses import VARIANTS, LossConfig, NumericError, loss_and_grad

log = logging.getLogger(__name__)


BACKBONE = ("token_proj", "token_bias", "global_query")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.01
    tse_lr_scale: float = 10.0
    lr_schedule: str = "cosine"
    lr_warmup_epochs: int = 1
    warmup_epochs: int = 1
    loss: LossConfig = field(default_factory=LossConfig)
    select_ratio: float = 0.3
    loss_variant: str = "tal"
    use_ccd: bool = True
    delta: float = 0.5
    dim: int = 32
    n_tokens: int = 8
    hidden: int | None = None
    shared_init: bool = True
    init_cone: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.loss_variant not in VARIANTS:
            raise ValueError(f"loss_variant must be one of {VARIANTS}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")
        enc.num_selected(self.n_tokens, self.select_ratio)


@dataclass
class TrainState:
    params: enc.EncoderParams
    epoch: int = 0
    division: div.DivisionResult | None = None
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    step: int = 0
    loss_history: list = field(default_factory=list)
    metric_history: list = field(default_factory=list)
    best: dict | None = None
    best_params: enc.EncoderParams | None = None


class Adam:
    def __init__(self, state: TrainState, cfg: TrainConfig, steps_per_epoch: int):
        self.s = state
        self.cfg = cfg
        self.total = cfg.epochs * steps_per_epoch
        self.warm = cfg.lr_warmup_epochs * steps_per_epoch if cfg.lr_schedule == "cosine" else 0
        for k, v in state.params.tensors.items():
            state.adam_m.setdefault(k, np.zeros_like(v))
            state.adam_v.setdefault(k, np.zeros_like(v))

    def lr(self, step: int) -> float:
        base = self.cfg.learning_rate
        if self.cfg.lr_schedule == "constant":
            return base
        if step < self.warm:
            return base * (step + 1) / self.warm
        progress = (step - self.warm) / max(1, self.total - self.warm)
        return base * 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    def update(self, grads: dict) -> None:
        b1, b2 = self.cfg.adam_betas
        s = self.s
        lr = self.lr(s.step)
        s.step += 1
        c1 = 1 - b1 ** s.step
        c2 = 1 - b2 ** s.step
        for k in s.params.names():
            step = lr if k.split(".")[1] in BACKBONE else lr * self.cfg.tse_lr_scale
            g = grads[k]
            m = s.adam_m[k]
            v = s.adam_v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            s.params.tensors[k] -= step * (m / c1) / (np.sqrt(v / c2) + self.cfg.adam_eps)


def batch_labels(identity, recalibrated) -> np.ndarray:
    """l_ij = [identity_i == identity_j], diagonal set to the recalibrated label,
    and rows/columns of items flagged noisy cleared."""
    return div.identity_labels(identity, recalibrated)


def batch_step(params: enc.EncoderParams, image_raw, text_raw, identity, weights, cfg: TrainConfig):
    """Loss and parameter gradients of one mini-batch. Returns (loss, grads) or (0, None)."""
    weights = np.asarray(weights)
    if not np.any(weights):
        return 0.0, None
    img = enc.encode(params, image_raw, "image", cfg.select_ratio, keep_cache=True)
    txt = enc.encode(params, text_raw, "text", cfg.select_ratio, keep_cache=True)
    s_b, s_t = enc.similarity_matrices(img, txt)
    L = batch_labels(identity, weights)
    lb, g_b = loss_and_grad(s_b, L, cfg.loss, cfg.loss_variant, weights)
    lt, g_t = loss_and_grad(s_t, L, cfg.loss, cfg.loss_variant, weights)
    grads = enc.backward(params, img, g_b @ txt.bge, g_t @ txt.tse)
    grads.update(enc.backward(params, txt, g_b.T @ img.bge, g_t.T @ img.tse))
    return lb.total + lt.total, grads


def _division_quality(res: div.DivisionResult | None, true_clean: np.ndarray):
    clean = np.arange(len(true_clean)) if res is None else res.clean
    tp = int(true_clean[clean].sum())
    precision = tp / len(clean) if len(clean) else float("nan")
    recall = tp / int(true_clean.sum()) if true_clean.sum() else float("nan")
    return precision, recall


def train(dataset, cfg: TrainConfig, val=None, audit_path=None, state: TrainState | None = None,
          epoch_callback=None) -> TrainState:
    """Run the full schedule on ``dataset``; ``val`` (if given) is evaluated every epoch."""
    n = len(dataset)
    if n < 2:
        raise TrainingError("need at least two training pairs")
    if state is None:
        params = enc.init_params(dataset.raw_dim, cfg.dim, cfg.n_tokens, cfg.hidden, seed=cfg.seed,
                                 shared_init=cfg.shared_init, cone=cfg.init_cone)
        state = TrainState(params)
    probe = div.batch_order(n, cfg.batch_size, np.random.default_rng(0))
    opt = Adam(state, cfg, len(probe))
    audit = None
    if audit_path is not None:
        fh = open(audit_path, "w", newline="")
        audit = csv.writer(fh, lineterminator="\n")
        audit.writerow(["epoch", "pair_id", "loss_bge", "loss_tse", "post_bge", "post_tse", "set",
                        "recalibrated", "true_clean_flag"])
    try:
        for epoch in range(state.epoch + 1, cfg.epochs + 1):
            _run_epoch(state, dataset, cfg, opt, epoch, audit)
            metrics = {}
            if val is not None:
                metrics = evaluate_model(state.params, val, cfg.select_ratio)
                if state.best is None or metrics["rank1"] > state.best["rank1"]:
                    state.best = dict(metrics, epoch=epoch)
                    state.best_params = state.params.copy()
            precision, recall = _division_quality(state.division, dataset.true_clean_flag)
            metrics.update(division_precision=precision, division_recall=recall)
            state.metric_history.append(metrics)
            if epoch_callback is not None:
                epoch_callback(state)
            log.info("epoch %d loss %.4f %s", epoch, state.loss_history[-1], metrics)
    finally:
        if audit is not None:
            fh.close()
    return state


def _epoch_rng(cfg: TrainConfig, epoch: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, epoch, stream])


def _run_epoch(state: TrainState, dataset, cfg: TrainConfig, opt: Adam, epoch: int, audit) -> None:
    n = len(dataset)
    if cfg.use_ccd and epoch > cfg.warmup_epochs:
        nb, nt, _, _, flags = div.per_sample_losses(
            state.params, dataset, cfg.loss, cfg.batch_size, _epoch_rng(cfg, epoch, 0), cfg.select_ratio)
        state.division = div.confident_consensus_division(nb, nt, _epoch_rng(cfg, epoch, 1), cfg.delta, flags)
        weights = state.division.recalibrated
        if audit is not None:
            sets = state.division.set_labels()
            for i in range(n):
                audit.writerow([epoch, int(dataset.pair_id[i]), repr(float(nb[i])), repr(float(nt[i])),
                                repr(float(state.division.posteriors_bge[i])),
                                repr(float(state.division.posteriors_tse[i])),
                                sets[i], int(weights[i]), int(dataset.true_clean_flag[i])])
    else:
        state.division = None
        weights = np.ones(n, dtype=np.int64)

    total = 0.0
    for b, idx in enumerate(div.batch_order(n, cfg.batch_size, _epoch_rng(cfg, epoch, 2))):
        try:
            loss, grads = batch_step(state.params, dataset.image_raw[idx], dataset.text_raw[idx],
                                     dataset.identity[idx], weights[idx], cfg)
        except NumericError as exc:
            raise TrainingError(f"epoch {epoch} batch {b}: {exc}; pairs {dataset.pair_id[idx].tolist()}") from exc
        if not math.isfinite(loss):
            raise TrainingError(f"epoch {epoch} batch {b}: loss is {loss}; pairs {dataset.pair_id[idx].tolist()}")
        total += loss
        if grads is not None:
            opt.update(grads)
    if not state.params.is_finite():
        raise TrainingError(f"epoch {epoch}: parameters became non-finite")
    state.loss_history.append(total)
    state.epoch = epoch
