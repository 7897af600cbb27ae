"""Toy dual encoders with global (BGE) and token-selection (TSE) embedding heads.

A raw feature vector is lifted to ``n_tokens`` local tokens by per-slot affine
maps followed by tanh. A learned global query scores the tokens; the softmax of
those scores plays the role of the global-to-local attention row, and the global
feature is the attention-weighted token aggregate. The TSE head keeps the
top-scoring tokens, L2-normalizes them, maps each through ``MLP(x) + FC(x)`` and
max-pools over tokens.

Everything is plain numpy with hand-written backward passes so the trainer needs
no autodiff framework.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EPS = 1e-12
CHECKPOINT_TAG = "rml-checkpoint v1"
MODALITIES = ("image", "text")
_BLOCKS = ("token_proj", "token_bias", "global_query", "mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "fc_w", "fc_b")


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EncoderParams:
    raw_dim: int
    dim: int
    n_tokens: int
    hidden: int
    tensors: dict

    def __post_init__(self):
        if self.dim < 2 or self.n_tokens < 2:
            raise ShapeError("need dim >= 2 and n_tokens >= 2")

    def names(self) -> list:
        return [f"{m}.{b}" for m in MODALITIES for b in _BLOCKS]

    def shapes(self) -> dict:
        per = {
            "token_proj": (self.n_tokens, self.raw_dim, self.dim),
            "token_bias": (self.n_tokens, self.dim),
            "global_query": (self.dim,),
            "mlp_w1": (self.dim, self.hidden),
            "mlp_b1": (self.hidden,),
            "mlp_w2": (self.hidden, self.dim),
            "mlp_b2": (self.dim,),
            "fc_w": (self.dim, self.dim),
            "fc_b": (self.dim,),
        }
        return {f"{m}.{b}": per[b] for m in MODALITIES for b in _BLOCKS}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.raw_dim, self.dim, self.n_tokens, self.hidden,
                             {k: v.copy() for k, v in self.tensors.items()})

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


def init_params(raw_dim: int, dim: int = 32, n_tokens: int = 8, hidden: int | None = None,
                seed: int = 0, shared_init: bool = True, cone: float = 0.0) -> EncoderParams:
    """Random parameters.

    With ``shared_init`` both modalities start from one draw, so image and text
    embeddings of the same raw vector coincide before training. This stands in
    for a backbone whose modalities are already roughly aligned.

    ``cone`` > 0 starts every token bias at ``cone`` times one shared random unit
    vector, so all embeddings begin inside a narrow cone with high mutual
    similarity, as features of a pretrained backbone typically do.
    """
    hidden = 2 * dim if hidden is None else hidden
    rng = np.random.default_rng(seed)
    t = {}
    draw = None
    for m in MODALITIES:
        if draw is None or not shared_init:
            draw = {
                "token_proj": rng.standard_normal((n_tokens, raw_dim, dim)) / math.sqrt(raw_dim),
                "token_bias": np.zeros((n_tokens, dim)),
                "global_query": rng.standard_normal(dim),
                "mlp_w1": rng.standard_normal((dim, hidden)) / math.sqrt(dim),
                "mlp_b1": np.zeros(hidden),
                "mlp_w2": rng.standard_normal((hidden, dim)) / math.sqrt(hidden),
                "mlp_b2": np.zeros(dim),
                "fc_w": rng.standard_normal((dim, dim)) / math.sqrt(dim),
                "fc_b": np.zeros(dim),
            }
        for b in _BLOCKS:
            t[f"{m}.{b}"] = draw[b].copy()
    if cone:
        u = rng.standard_normal(dim)
        u /= np.linalg.norm(u)
        for m in MODALITIES:
            t[f"{m}.token_bias"] = np.tile(cone * u, (n_tokens, 1))
    return EncoderParams(raw_dim, dim, n_tokens, hidden, t)


def l2_normalize(x: np.ndarray, axis: int = -1):
    """Normalize along ``axis`` with the norm clamped below at EPS. Returns (y, norm)."""
    norm = np.maximum(np.linalg.norm(x, axis=axis, keepdims=True), EPS)
    return x / norm, norm


def _l2_normalize_backward(y, norm, grad_y):
    return (grad_y - y * np.sum(y * grad_y, axis=-1, keepdims=True)) / norm


def num_selected(n_tokens: int, ratio: float) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"select ratio must lie in (0, 1], got {ratio}")
    k = int(math.floor(ratio * n_tokens + 1e-9))
    if k < 1:
        raise ValueError(f"ratio {ratio} selects no token out of {n_tokens}")
    return k


def select_indices(attn: np.ndarray, ratio: float) -> np.ndarray:
    """Indices of the top ``floor(ratio * n)`` attention weights along the last axis.

    Ties go to the lower index; the selected indices come back in ascending order.
    """
    k = num_selected(attn.shape[-1], ratio)
    order = np.argsort(-attn, axis=-1, kind="stable")[..., :k]
    return np.sort(order, axis=-1)


def select_tokens(tokens: np.ndarray, attn: np.ndarray, ratio: float):
    idx = select_indices(attn, ratio)
    return (np.take_along_axis(tokens, idx[..., None], axis=-2),
            np.take_along_axis(attn, idx, axis=-1))


def _tse_forward(p: dict, prefix: str, selected: np.ndarray):
    xhat, xnorm = l2_normalize(selected)
    pre_h = xhat @ p[f"{prefix}.mlp_w1"] + p[f"{prefix}.mlp_b1"]
    h = np.tanh(pre_h)
    z = h @ p[f"{prefix}.mlp_w2"] + p[f"{prefix}.mlp_b2"] + xhat @ p[f"{prefix}.fc_w"] + p[f"{prefix}.fc_b"]
    arg = np.argmax(z, axis=-2)  # (..., d)
    pooled = np.take_along_axis(z, arg[..., None, :], axis=-2)[..., 0, :]
    out, pnorm = l2_normalize(pooled)
    return out, dict(xhat=xhat, xnorm=xnorm, h=h, arg=arg, out=out, pnorm=pnorm, k=selected.shape[-2])


def tse_embed(params: EncoderParams, selected: np.ndarray, modality: str = "image") -> np.ndarray:
    """TSE vector(s) from selected tokens of shape (..., k, d)."""
    if selected.shape[-2] < 1:
        raise ShapeError("need at least one selected token")
    out, _ = _tse_forward(params.tensors, modality, np.asarray(selected, dtype=np.float64))
    return out


@dataclass
class EncodedBatch:
    tokens: np.ndarray      # (B, n_tokens, d)
    attn: np.ndarray        # (B, n_tokens)
    global_: np.ndarray     # (B, d)
    selected: np.ndarray    # (B, k) token indices
    bge: np.ndarray         # (B, d), unit norm
    tse: np.ndarray         # (B, d), unit norm
    cache: dict | None = None

    def __len__(self):
        return self.tokens.shape[0]


def encode(params: EncoderParams, raw: np.ndarray, modality: str, ratio: float = 0.3,
           keep_cache: bool = False) -> EncodedBatch:
    """Encode a batch (B, raw_dim) or a single vector (raw_dim,) of one modality."""
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    X = raw[None] if single else raw
    if X.ndim != 2 or X.shape[1] != params.raw_dim:
        raise ShapeError(f"expected raw features of width {params.raw_dim}, got shape {raw.shape}")
    p = params.tensors
    proj = p[f"{modality}.token_proj"]
    q = p[f"{modality}.global_query"]
    tokens = np.tanh(np.einsum("br,nrd->bnd", X, proj) + p[f"{modality}.token_bias"])
    scores = tokens @ q / math.sqrt(params.dim)
    scores = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(scores)
    attn = e / e.sum(axis=1, keepdims=True)
    glob = np.einsum("bn,bnd->bd", attn, tokens)
    bge, gnorm = l2_normalize(glob)
    idx = select_indices(attn, ratio)
    selected = np.take_along_axis(tokens, idx[..., None], axis=1)
    tse, tcache = _tse_forward(p, modality, selected)
    cache = None
    if keep_cache:
        cache = dict(X=X, tokens=tokens, attn=attn, glob=glob, bge=bge, gnorm=gnorm,
                     idx=idx, selected=selected, tse=tcache, modality=modality)
    enc = EncodedBatch(tokens, attn, glob, idx, bge, tse, cache)
    if single:
        enc = EncodedBatch(tokens[0], attn[0], glob[0], idx[0], bge[0], tse[0], cache)
    return enc


def backward(params: EncoderParams, enc: EncodedBatch, grad_bge: np.ndarray, grad_tse: np.ndarray) -> dict:
    """Parameter gradients given upstream gradients on the unit BGE/TSE vectors."""
    c = enc.cache
    if c is None:
        raise ValueError("encode(..., keep_cache=True) is required for backward")
    m = c["modality"]
    p = params.tensors
    d = params.dim
    tc = c["tse"]

    # TSE head
    g_pooled = _l2_normalize_backward(tc["out"], tc["pnorm"], grad_tse)
    B, k = g_pooled.shape[0], tc["k"]
    g_z = np.zeros((B, k, d))
    np.put_along_axis(g_z, tc["arg"][:, None, :], g_pooled[:, None, :], axis=1)
    grads = {}
    grads[f"{m}.mlp_b2"] = g_z.sum(axis=(0, 1))
    grads[f"{m}.fc_b"] = grads[f"{m}.mlp_b2"].copy()
    grads[f"{m}.mlp_w2"] = np.einsum("bkh,bkd->hd", tc["h"], g_z)
    grads[f"{m}.fc_w"] = np.einsum("bki,bkd->id", tc["xhat"], g_z)
    g_h = g_z @ p[f"{m}.mlp_w2"].T
    g_pre_h = g_h * (1.0 - tc["h"] ** 2)
    grads[f"{m}.mlp_b1"] = g_pre_h.sum(axis=(0, 1))
    grads[f"{m}.mlp_w1"] = np.einsum("bki,bkh->ih", tc["xhat"], g_pre_h)
    g_xhat = g_pre_h @ p[f"{m}.mlp_w1"].T + g_z @ p[f"{m}.fc_w"].T
    g_sel = _l2_normalize_backward(tc["xhat"], tc["xnorm"], g_xhat)

    # BGE path: global = sum_j attn_j * token_j
    g_glob = _l2_normalize_backward(c["bge"], c["gnorm"], grad_bge)
    tokens, attn = c["tokens"], c["attn"]
    g_tokens = attn[..., None] * g_glob[:, None, :]
    np.add.at(g_tokens, (np.arange(B)[:, None], c["idx"]), g_sel)
    g_attn = np.einsum("bnd,bd->bn", tokens, g_glob)
    g_scores = attn * (g_attn - np.sum(attn * g_attn, axis=1, keepdims=True))
    q = p[f"{m}.global_query"]
    g_tokens += g_scores[..., None] * q / math.sqrt(d)
    grads[f"{m}.global_query"] = np.einsum("bn,bnd->d", g_scores, tokens) / math.sqrt(d)
    g_pre = g_tokens * (1.0 - tokens ** 2)
    grads[f"{m}.token_proj"] = np.einsum("br,bnd->nrd", c["X"], g_pre)
    grads[f"{m}.token_bias"] = g_pre.sum(axis=0)
    return grads


def bge_similarity(a: EncodedBatch, b: EncodedBatch) -> float:
    """Cosine of the two global features."""
    return cosine(a.global_, b.global_)


def tse_similarity(a: EncodedBatch, b: EncodedBatch) -> float:
    return cosine(a.tse, b.tse)


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u, _ = l2_normalize(np.asarray(u, dtype=np.float64))
    v, _ = l2_normalize(np.asarray(v, dtype=np.float64))
    return float(np.clip(u @ v, -1.0, 1.0))


def similarity_matrices(img: EncodedBatch, txt: EncodedBatch):
    """(S_bge, S_tse), rows indexed by images and columns by texts."""
    return img.bge @ txt.bge.T, img.tse @ txt.tse.T


# Checkpoint file: tag line, a dims line, then per tensor a "block <name> <shape...>"
# header followed by one line holding the row-major values as shortest-repr floats.

def save_checkpoint(params: EncoderParams, path, extra: dict | None = None) -> None:
    lines = [CHECKPOINT_TAG,
             f"dims raw_dim={params.raw_dim} dim={params.dim} n_tokens={params.n_tokens} hidden={params.hidden}"]
    for key, val in sorted((extra or {}).items()):
        lines.append(f"meta {key}={val}")
    for name in params.names():
        arr = params.tensors[name]
        lines.append(f"block {name} " + " ".join(str(s) for s in arr.shape))
        lines.append(" ".join(repr(float(x)) for x in arr.ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path):
    """Returns (params, meta dict)."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != CHECKPOINT_TAG:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_TAG} file")
    dims = dict(tok.split("=") for tok in lines[1].split()[1:])
    meta, tensors = {}, {}
    i = 2
    while i < len(lines):
        head = lines[i].split()
        if head[0] == "meta":
            key, val = lines[i][5:].split("=", 1)
            meta[key] = val
            i += 1
        elif head[0] == "block":
            shape = tuple(int(s) for s in head[2:])
            vals = np.array([float(x) for x in lines[i + 1].split()], dtype=np.float64)
            if vals.size != math.prod(shape):
                raise CheckpointError(f"{path}: block {head[1]} has {vals.size} values, expected {shape}")
            tensors[head[1]] = vals.reshape(shape)
            i += 2
        else:
            raise CheckpointError(f"{path}:{i + 1}: unexpected line {head[0]!r}")
    params = EncoderParams(int(dims["raw_dim"]), int(dims["dim"]), int(dims["n_tokens"]),
                           int(dims["hidden"]), tensors)
    expected = params.shapes()
    if set(tensors) != set(expected) or any(tensors[k].shape != s for k, s in expected.items()):
        raise CheckpointError(f"{path}: tensor blocks do not match the declared dims")
    return params, meta
