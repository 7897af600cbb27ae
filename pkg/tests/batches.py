"""Random batch generators shared by the unit and acceptance suites."""

import numpy as np


def random_batch(rng, k_range=(2, 16), groups=True):
    """Similarity matrix uniform in [-1, 1] with random identity-grouped labels."""
    K = int(rng.integers(k_range[0], k_range[1] + 1))
    S = rng.uniform(-1.0, 1.0, size=(K, K))
    if groups:
        ident = rng.integers(0, max(1, K // 2) + 1, size=K)
    else:
        ident = np.arange(K)
    L = (ident[:, None] == ident[None, :]).astype(np.int64)
    return S, L


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def hinge_arguments(S, L, margin, tau, variant):
    """Every hinge argument in the batch plus the max-negative gaps (for TRL).

    Used to keep finite-difference probes away from kinks.
    """
    args = []
    gaps = []
    for M, P in ((S, L), (S.T, L.T)):
        for i in range(len(M)):
            pos = P[i].astype(bool)
            neg = M[i][~pos]
            if neg.size == 0:
                continue
            s = M[i][pos]
            w = np.exp((s - s.max()) / tau)
            sp = float(np.sum(w * s) / w.sum())
            if variant == "tal":
                top = neg.max()
                args.append(margin - sp + top + tau * np.log(np.sum(np.exp((neg - top) / tau))))
            elif variant == "trl":
                args.append(margin - sp + neg.max())
                if neg.size > 1:
                    srt = np.sort(neg)
                    gaps.append(srt[-1] - srt[-2])
            else:
                args.extend((margin - sp + neg).tolist())
    return np.array(args), np.array(gaps)


def away_from_kinks(S, L, margin, tau, variant, clearance=0.01):
    args, gaps = hinge_arguments(S, L, margin, tau, variant)
    return (args.size > 0 and np.any(args > 0) and np.all(np.abs(args) >= clearance)
            and np.all(gaps >= clearance))
