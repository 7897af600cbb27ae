"""Triplet losses over a K x K image-text similarity block.

Rows of ``sims`` are images, columns are texts. ``labels[i, j] = 1`` marks
(image i, text j) as a positive; every other entry is a negative. Each anchor
pair i gets an image-to-text term from row i and a text-to-image term from
column i:

    TAL    [m - S+ + tau * log sum_neg exp(S / tau)]_+
    TRL    [m - S+ + max_neg S]_+
    TRL-S  sum_neg [m - S+ + S]_+

where S+ is the softmax(S / tau)-weighted mean of the positive similarities.
TAL is an upper bound of TRL and approaches it as tau -> 0.

Every loss comes with its gradient with respect to ``sims``; gradients with
respect to embeddings follow from ``sims = V @ T.T``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

VARIANTS = ("tal", "trl", "trls")


class NumericError(FloatingPointError):
    pass


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.1
    tau: float = 0.015
    reduction: str = "sum"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.margin >= 0:
            raise ValueError(f"margin must be nonnegative, got {self.margin}")
        if self.reduction not in ("sum", "mean"):
            raise ValueError(f"reduction must be 'sum' or 'mean', got {self.reduction!r}")


@dataclass
class LossValue:
    total: float
    per_pair: np.ndarray
    i2t: np.ndarray = field(repr=False)
    t2i: np.ndarray = field(repr=False)


def _masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax of ``x`` restricted to ``mask``; all-masked rows give zeros."""
    xm = np.where(mask, x, -np.inf)
    top = xm.max(axis=-1, keepdims=True)
    top = np.where(np.isfinite(top), top, 0.0)
    e = np.where(mask, np.exp(xm - top), 0.0)
    z = e.sum(axis=-1, keepdims=True)
    return np.divide(e, z, out=np.zeros_like(e), where=z > 0)


def _masked_logsumexp(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    xm = np.where(mask, x, -np.inf)
    top = xm.max(axis=-1)
    safe_top = np.where(np.isfinite(top), top, 0.0)
    s = np.where(mask, np.exp(xm - safe_top[..., None]), 0.0).sum(axis=-1)
    with np.errstate(divide="ignore"):
        return np.where(s > 0, safe_top + np.log(s), -np.inf)


def weighted_positive(sims, labels, tau: float) -> float:
    """Softmax(S / tau)-weighted mean similarity over the positives of one row."""
    sims = np.asarray(sims, dtype=np.float64)
    pos = np.asarray(labels).astype(bool)
    if not pos.any():
        raise ContractError("weighted_positive needs at least one positive")
    alpha = _masked_softmax(sims / tau, pos)
    return float(np.sum(alpha * sims))


def _rows(sims, pos, cfg: LossConfig, variant: str, active: np.ndarray):
    """Per-row hinge values and d(value)/d(sims) for the image-to-text layout."""
    m, tau = cfg.margin, cfg.tau
    neg = ~pos
    has_neg = neg.any(axis=1) & active
    alpha = _masked_softmax(sims / tau, pos)
    s_plus = np.sum(alpha * sims, axis=1)
    # d S+ / d S_ij = alpha_ij * (1 + (S_ij - S+) / tau)
    ds_plus = alpha * (1.0 + (sims - s_plus[:, None]) / tau)
    K = sims.shape[0]
    grad = np.zeros_like(sims)
    if variant == "trls":
        args = m - s_plus[:, None] + sims
        act = neg & (args > 0) & has_neg[:, None]
        value = np.where(act, args, 0.0).sum(axis=1)
        n_act = act.sum(axis=1)
        grad = act.astype(np.float64) - n_act[:, None] * ds_plus
        return value, grad
    if variant == "tal":
        hard = tau * _masked_logsumexp(sims / tau, neg)
        dhard = _masked_softmax(sims / tau, neg)
    elif variant == "trl":
        hard = np.where(neg, sims, -np.inf).max(axis=1)
        dhard = np.zeros_like(sims)
        pick = np.argmax(np.where(neg, sims, -np.inf), axis=1)
        dhard[np.arange(K), pick] = 1.0
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    arg = np.where(has_neg, m - s_plus + np.where(has_neg, hard, 0.0), 0.0)
    value = np.maximum(arg, 0.0)
    on = (arg > 0)[:, None]
    grad = np.where(on, dhard - ds_plus, 0.0)
    return value, grad


def loss_and_grad(sims, labels, cfg: LossConfig, variant: str = "tal", weights=None):
    """Loss value and gradient w.r.t. ``sims`` of the weighted sum over anchors.

    ``weights[i]`` scales anchor pair i (the recalibrated label in training);
    anchors of weight zero are skipped and may have no positives. A direction
    with no negatives contributes 0.
    """
    sims = np.asarray(sims, dtype=np.float64)
    if sims.ndim != 2 or sims.shape[0] != sims.shape[1]:
        raise ContractError(f"similarities must be square, got {sims.shape}")
    if not np.all(np.isfinite(sims)):
        raise NumericError("non-finite similarity in batch")
    pos = np.asarray(labels).astype(bool)
    K = sims.shape[0]
    w = np.ones(K) if weights is None else np.asarray(weights, dtype=np.float64)
    active = w != 0
    lacking = active & ~(pos.any(axis=1) & pos.any(axis=0))
    if lacking.any():
        raise ContractError(f"anchors {np.flatnonzero(lacking).tolist()} have no positive pair")
    v_i2t, g_i2t = _rows(sims, pos, cfg, variant, active)
    v_t2i, g_t2i = _rows(sims.T, pos.T, cfg, variant, active)
    v_i2t = v_i2t * w
    v_t2i = v_t2i * w
    grad = g_i2t * w[:, None] + (g_t2i * w[:, None]).T
    per_pair = v_i2t + v_t2i
    total = float(per_pair.sum())
    if cfg.reduction == "mean":
        total /= K
        grad = grad / K
    if not np.isfinite(total):
        raise NumericError("loss is not finite")
    return LossValue(total, per_pair, v_i2t, v_t2i), grad


def tal(sims, labels, cfg: LossConfig, weights=None) -> LossValue:
    return loss_and_grad(sims, labels, cfg, "tal", weights)[0]


def trl(sims, labels, cfg: LossConfig, weights=None) -> LossValue:
    return loss_and_grad(sims, labels, cfg, "trl", weights)[0]


def trl_s(sims, labels, cfg: LossConfig, weights=None) -> LossValue:
    return loss_and_grad(sims, labels, cfg, "trls", weights)[0]


def embedding_grad(V, T, labels, cfg: LossConfig, variant: str = "tal", weights=None):
    """Full chain-rule gradients of the batch loss with ``sims = V @ T.T``.

    Returns (loss, dL/dV, dL/dT).
    """
    V = np.asarray(V, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    loss, g = loss_and_grad(V @ T.T, labels, cfg, variant, weights)
    return loss, g @ T, g.T @ V


def grad_tal(V, T, labels, cfg: LossConfig, weights=None):
    return embedding_grad(V, T, labels, cfg, "tal", weights)


def grad_trl(V, T, labels, cfg: LossConfig, weights=None):
    return embedding_grad(V, T, labels, cfg, "trl", weights)


def grad_trl_s(V, T, labels, cfg: LossConfig, weights=None):
    return embedding_grad(V, T, labels, cfg, "trls", weights)


# One-direction, one-positive-per-anchor setting used for the gradient analysis:
# the positive of v_i is t_i, every t_j (j != i) is a negative, S = v . t.

def beta_weights(v_i, T, i: int, tau: float) -> np.ndarray:
    """beta_j = softmax_{j != i}(v_i . t_j / tau); entry i is 0."""
    s = T @ v_i
    mask = np.ones(len(T), dtype=bool)
    mask[i] = False
    return _masked_softmax(s / tau, mask)


def anchor_loss(v_i, T, i: int, cfg: LossConfig, variant: str) -> float:
    s = T @ np.asarray(v_i, dtype=np.float64)
    neg = np.delete(s, i)
    if variant == "trl":
        return max(cfg.margin - s[i] + neg.max(), 0.0)
    if variant == "trls":
        return float(np.maximum(cfg.margin - s[i] + neg, 0.0).sum())
    if variant == "tal":
        top = neg.max()
        lse = top + cfg.tau * np.log(np.sum(np.exp((neg - top) / cfg.tau)))
        return max(cfg.margin - s[i] + lse, 0.0)
    raise ValueError(f"unknown loss variant {variant!r}")


def anchor_grad(v_i, T, i: int, cfg: LossConfig, variant: str):
    """Closed-form gradients of ``anchor_loss`` w.r.t. v_i and every t_j.

    TRL:   dv = t_hat - t_i,              dt_i = -v_i,      dt_hat = v_i
    TRL-S: dv = sum_{j in Z} (t_j - t_i), dt_i = -|Z| v_i,  dt_j = v_i (j in Z)
    TAL:   dv = sum_j beta_j (t_j - t_i), dt_i = -v_i,      dt_j = beta_j v_i
    Z is the set of negatives whose hinge is active. Inactive hinges give zeros.
    """
    v_i = np.asarray(v_i, dtype=np.float64)
    T = np.asarray(T, dtype=np.float64)
    K = len(T)
    s = T @ v_i
    coef = np.zeros(K)  # dL/dt_j = coef_j * v_i, and dL/dv_i = sum_j coef_j t_j
    if variant == "trl":
        negs = np.flatnonzero(np.arange(K) != i)
        hat = negs[np.argmax(s[negs])]
        if cfg.margin - s[i] + s[hat] > 0:
            coef[hat] = 1.0
            coef[i] = -1.0
    elif variant == "trls":
        z = (cfg.margin - s[i] + s > 0) & (np.arange(K) != i)
        coef[z] = 1.0
        coef[i] = -float(z.sum())
    elif variant == "tal":
        if anchor_loss(v_i, T, i, cfg, "tal") > 0:
            coef = beta_weights(v_i, T, i, cfg.tau)
            coef[i] = -1.0
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    return coef @ T, coef[:, None] * v_i[None, :]
