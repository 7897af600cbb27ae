"""Text-to-image retrieval metrics: Rank-K, mAP and mINP.

INP for a query is G / R_hard, where G is the number of relevant gallery items
and R_hard the 1-based rank of the last relevant item retrieved; mINP averages it
over queries. Ties in similarity are broken by ascending gallery index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoder as enc


class EvaluationError(ValueError):
    pass


@dataclass
class RetrievalResult:
    rank_k: dict
    map_score: float
    minp: float
    per_query_ranks: list = field(repr=False, default_factory=list)

    def as_dict(self) -> dict:
        return {
            "rank1": self.rank_k[1],
            "rank5": self.rank_k[5],
            "rank10": self.rank_k[10],
            "mAP": self.map_score,
            "mINP": self.minp,
        }


def joint_similarity(s_bge, s_tse) -> np.ndarray:
    s_bge = np.asarray(s_bge, dtype=np.float64)
    s_tse = np.asarray(s_tse, dtype=np.float64)
    if s_bge.shape != s_tse.shape:
        raise ValueError(f"shape mismatch: {s_bge.shape} vs {s_tse.shape}")
    return (s_bge + s_tse) / 2


def evaluate(similarities, relevance, ks=(1, 5, 10)) -> RetrievalResult:
    sims = np.asarray(similarities, dtype=np.float64)
    rel = np.asarray(relevance).astype(bool)
    if sims.shape != rel.shape:
        raise EvaluationError(f"shape mismatch: {sims.shape} vs {rel.shape}")
    n_rel = rel.sum(axis=1)
    if np.any(n_rel == 0):
        raise EvaluationError(f"queries {np.flatnonzero(n_rel == 0).tolist()} have no relevant item")
    order = np.argsort(-sims, axis=1, kind="stable")
    hits = np.take_along_axis(rel, order, axis=1)
    positions = np.arange(1, sims.shape[1] + 1)
    first = np.argmax(hits, axis=1) + 1
    rank_k = {k: float(np.mean(first <= k)) for k in ks}
    cum = np.cumsum(hits, axis=1)
    ap = np.sum(np.where(hits, cum / positions, 0.0), axis=1) / n_rel
    last = sims.shape[1] - np.argmax(hits[:, ::-1], axis=1)
    inp = n_rel / last
    ranks = [positions[h].tolist() for h in hits]
    return RetrievalResult(rank_k, float(ap.mean()), float(inp.mean()), ranks)


def retrieval_matrices(params: enc.EncoderParams, dataset, ratio: float = 0.3):
    """Joint similarity of every text query against the unique gallery images.

    Returns (sims, relevance, gallery image labels); relevance is identity match.
    """
    _, first = np.unique(dataset.image_label, return_index=True)
    gallery = np.sort(first)
    img = enc.encode(params, dataset.image_raw[gallery], "image", ratio)
    txt = enc.encode(params, dataset.text_raw, "text", ratio)
    sims = joint_similarity(txt.bge @ img.bge.T, txt.tse @ img.tse.T)
    relevance = dataset.identity[:, None] == dataset.identity[gallery][None, :]
    return sims, relevance, dataset.image_label[gallery]


def evaluate_model(params: enc.EncoderParams, dataset, ratio: float = 0.3, clean_only: bool = True):
    """Metrics dict for text->image retrieval on ``dataset``, plus similarity spread."""
    if clean_only:
        dataset = dataset.subset(np.flatnonzero(dataset.true_clean_flag == 1))
    sims, relevance, _ = retrieval_matrices(params, dataset, ratio)
    res = evaluate(sims, relevance)
    out = res.as_dict()
    out["num_queries"] = int(sims.shape[0])
    out["num_gallery"] = int(sims.shape[1])
    out["sim_mean"] = float(sims.mean())
    out["sim_std"] = float(sims.std())
    return out
