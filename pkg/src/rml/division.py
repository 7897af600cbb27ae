"""Loss-based clean/noisy division with a two-component 1-D Gaussian mixture.

Per-sample losses from each embedding branch are fitted by their own mixture;
the lower-mean component is the clean one. A pair counts as confidently clean
only when both branches call it clean, confidently noisy only when both call it
noisy, and uncertain otherwise. Uncertain pairs get a coin-flip label.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import encoder as enc
from .losses import LossConfig, loss_and_grad

VAR_FLOOR = 1e-6


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class GmmParams:
    weights: tuple
    means: tuple
    variances: tuple
    log_likelihoods: tuple = ()
    n_iter: int = 0


@dataclass
class DivisionResult:
    clean: np.ndarray
    noisy: np.ndarray
    uncertain: np.ndarray
    posteriors_bge: np.ndarray
    posteriors_tse: np.ndarray
    recalibrated: np.ndarray

    def set_labels(self) -> np.ndarray:
        """'C', 'N' or 'U' per index."""
        n = len(self.recalibrated)
        out = np.full(n, "U", dtype="<U1")
        out[self.clean] = "C"
        out[self.noisy] = "N"
        return out


def _component_logpdf(x, means, variances):
    x = np.asarray(x, dtype=np.float64)[..., None]
    mu = np.asarray(means)
    var = np.asarray(variances)
    return -0.5 * (np.log(2 * math.pi * var) + (x - mu) ** 2 / var)


def _weighted_logpdf(x, weights, means, variances):
    with np.errstate(divide="ignore"):
        return _component_logpdf(x, means, variances) + np.log(np.asarray(weights))


def _log_likelihood(x, weights, means, variances) -> float:
    lp = _weighted_logpdf(x, weights, means, variances)
    top = lp.max(axis=1, keepdims=True)
    return float(np.sum(top[:, 0] + np.log(np.exp(lp - top).sum(axis=1))))


def fit_gmm(losses, tol: float = 1e-6, max_iter: int = 200) -> GmmParams:
    """EM for a two-component mixture, deterministically initialized.

    Starts from means at the 10th and 90th percentiles, equal weights and the
    sample variance for both components; stops once the log-likelihood gain
    drops below ``tol`` or after ``max_iter`` iterations.
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    if np.unique(x).size < 2:
        raise DegenerateInputError("need at least two distinct loss values")
    w = np.array([0.5, 0.5])
    mu = np.percentile(x, [10, 90]).astype(np.float64)
    if mu[0] == mu[1]:
        # a point mass covers both percentiles; identical components would never separate
        mu = np.array([x.min(), x.max()])
    var = np.full(2, max(float(x.var()), VAR_FLOOR))
    lls = [_log_likelihood(x, w, mu, var)]
    it = 0
    for it in range(1, max_iter + 1):
        lp = _weighted_logpdf(x, w, mu, var)
        lp -= lp.max(axis=1, keepdims=True)
        resp = np.exp(lp)
        resp /= resp.sum(axis=1, keepdims=True)
        nk = resp.sum(axis=0)
        # an emptied component keeps its previous parameters
        alive = nk > 1e-12
        w = nk / nk.sum()
        mu = np.where(alive, (resp * x[:, None]).sum(axis=0) / np.where(alive, nk, 1.0), mu)
        var = np.where(alive, (resp * (x[:, None] - mu) ** 2).sum(axis=0) / np.where(alive, nk, 1.0), var)
        var = np.maximum(var, VAR_FLOOR)
        lls.append(_log_likelihood(x, w, mu, var))
        if lls[-1] - lls[-2] < tol:
            break
    order = np.argsort(mu, kind="stable")
    return GmmParams(tuple(w[order].tolist()), tuple(mu[order].tolist()), tuple(var[order].tolist()),
                     tuple(lls), it)


def posterior_clean(params: GmmParams, losses) -> np.ndarray:
    """p(clean | loss): responsibility of the lower-mean component."""
    lp = _weighted_logpdf(np.atleast_1d(losses), params.weights, params.means, params.variances)
    lp -= lp.max(axis=1, keepdims=True)
    p = np.exp(lp)
    post = p[:, 0] / p.sum(axis=1)
    return post if np.ndim(losses) else float(post[0])


def divide(posteriors, delta: float = 0.5):
    """(clean, noisy) index arrays: clean iff posterior > delta."""
    p = np.asarray(posteriors, dtype=np.float64)
    return np.flatnonzero(p > delta), np.flatnonzero(p <= delta)


def consensus(div_bge, div_tse, rng: np.random.Generator, n: int | None = None,
              posteriors_bge=None, posteriors_tse=None) -> DivisionResult:
    """Intersect two (clean, noisy) divisions and recalibrate correspondence labels.

    Uncertain pairs draw their label uniformly from {0, 1} using ``rng``.
    """
    clean_b, noisy_b = (np.asarray(a, dtype=np.int64) for a in div_bge)
    clean_t, noisy_t = (np.asarray(a, dtype=np.int64) for a in div_tse)
    universe_b = np.union1d(clean_b, noisy_b)
    universe_t = np.union1d(clean_t, noisy_t)
    if (not np.array_equal(universe_b, universe_t) or len(universe_b) != len(clean_b) + len(noisy_b)
            or len(universe_t) != len(clean_t) + len(noisy_t)):
        raise ValueError("divisions do not partition the same index set")
    if n is None:
        n = int(universe_b.max()) + 1 if len(universe_b) else 0
    clean = np.intersect1d(clean_b, clean_t)
    noisy = np.intersect1d(noisy_b, noisy_t)
    uncertain = np.setdiff1d(universe_b, np.union1d(clean, noisy))
    recal = np.zeros(n, dtype=np.int64)
    recal[clean] = 1
    recal[uncertain] = rng.integers(0, 2, size=len(uncertain))
    nan = np.full(n, np.nan)
    return DivisionResult(
        clean, noisy, uncertain,
        nan.copy() if posteriors_bge is None else np.asarray(posteriors_bge, dtype=np.float64),
        nan.copy() if posteriors_tse is None else np.asarray(posteriors_tse, dtype=np.float64),
        recal,
    )


def minmax_normalize(x):
    """Scale to [0, 1]. A constant vector maps to 0.5 everywhere; second value flags that."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if hi - lo <= 0:
        return np.full_like(x, 0.5), True
    return (x - lo) / (hi - lo), False


def identity_labels(identity: np.ndarray, diag=None) -> np.ndarray:
    """Positive where identities match; diagonal optionally overridden by ``diag``.

    An item whose diagonal label is 0 is nobody's positive, so its whole row and
    column are cleared.
    """
    identity = np.asarray(identity)
    L = (identity[:, None] == identity[None, :]).astype(np.int64)
    if diag is not None:
        diag = np.asarray(diag, dtype=np.int64)
        off = diag == 0
        L[off, :] = 0
        L[:, off] = 0
        np.fill_diagonal(L, diag)
    return L


def batch_order(n: int, batch_size: int, rng: np.random.Generator) -> list:
    """Shuffled index batches; a trailing batch smaller than 2 joins the previous one."""
    perm = rng.permutation(n)
    batches = [perm[s:s + batch_size] for s in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) < 2:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def per_sample_losses(params: enc.EncoderParams, dataset, cfg: LossConfig, batch_size: int,
                      rng: np.random.Generator, ratio: float = 0.3, variant: str = "tal"):
    """One no-gradient pass: per-pair losses for the BGE and TSE branches.

    Returns (norm_bge, norm_tse, raw_bge, raw_tse, degenerate_flags). Labels are
    the original correspondences with identity-aware positives.
    """
    n = len(dataset)
    raw_b = np.zeros(n)
    raw_t = np.zeros(n)
    per = LossConfig(cfg.margin, cfg.tau, "sum")
    for idx in batch_order(n, batch_size, rng):
        img = enc.encode(params, dataset.image_raw[idx], "image", ratio)
        txt = enc.encode(params, dataset.text_raw[idx], "text", ratio)
        s_b, s_t = enc.similarity_matrices(img, txt)
        L = identity_labels(dataset.identity[idx], dataset.correspondence_label[idx])
        w = dataset.correspondence_label[idx]
        raw_b[idx] = loss_and_grad(s_b, L, per, variant, w)[0].per_pair
        raw_t[idx] = loss_and_grad(s_t, L, per, variant, w)[0].per_pair
    nb, flag_b = minmax_normalize(raw_b)
    nt, flag_t = minmax_normalize(raw_t)
    return nb, nt, raw_b, raw_t, (flag_b, flag_t)


def branch_posteriors(norm_losses, degenerate: bool) -> np.ndarray:
    """Clean posteriors for one branch; a degenerate loss vector counts as all clean."""
    if degenerate or np.unique(norm_losses).size < 2:
        return np.ones(len(norm_losses))
    return posterior_clean(fit_gmm(norm_losses), norm_losses)


def confident_consensus_division(norm_bge, norm_tse, rng: np.random.Generator, delta: float = 0.5,
                                 degenerate=(False, False)) -> DivisionResult:
    post_b = branch_posteriors(norm_bge, degenerate[0])
    post_t = branch_posteriors(norm_tse, degenerate[1])
    return consensus(divide(post_b, delta), divide(post_t, delta), rng, len(post_b), post_b, post_t)
