"""Shared test oracles: finite differences, brute-force losses, retrieval.

The finite-difference oracle evaluates the forward function with float64
parameter buffers swapped in (a 64-bit shadow pass) and central
differences with h = 1e-3; it never touches the gradient tape it checks.
"""

from __future__ import annotations

import numpy as np

from lodisc.tensor import Tensor, no_grad


def fd_grads(f, params: list[Tensor], h: float = 1e-3) -> list[np.ndarray]:
    """Central finite differences of scalar f() w.r.t. each param, in float64."""
    originals = [p.data for p in params]
    for p in params:
        p.data = p.data.astype(np.float64)
    try:
        grads = []
        with no_grad():
            for p in params:
                g = np.zeros_like(p.data)
                flat = p.data.ravel()
                gf = g.ravel()
                for i in range(flat.size):
                    saved = flat[i]
                    flat[i] = saved + h
                    hi = float(f().data)
                    flat[i] = saved - h
                    lo = float(f().data)
                    flat[i] = saved
                    gf[i] = (hi - lo) / (2.0 * h)
                grads.append(g)
    finally:
        for p, d in zip(params, originals):
            p.data = d
    return grads


def autograd_grads(f, params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    f().backward()
    return [np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
            for p in params]


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative error: max|a-b| / max(max|a|, max|b|, tiny)."""
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0, 1e-12)
    return num / den


def gradcheck(f, params: list[Tensor], h: float = 1e-3) -> float:
    """Max normwise relative error between autograd and finite differences."""
    ad = autograd_grads(f, params)
    fd = fd_grads(f, params, h=h)
    return max(rel_err(a, b) for a, b in zip(ad, fd))


# -- loss oracles ---------------------------------------------------------------


def infonce_oracle(q: np.ndarray, k: np.ndarray, tau: float) -> float:
    """Brute-force 64-bit InfoNCE over the full BxB logit matrix."""
    q = q.astype(np.float64)
    k = k.astype(np.float64)
    qn = q / np.sqrt((q * q).sum(axis=1, keepdims=True) + 1e-12)
    kn = k / np.sqrt((k * k).sum(axis=1, keepdims=True) + 1e-12)
    total = 0.0
    for i in range(len(q)):
        logits = np.array([qn[i] @ kn[j] / tau for j in range(len(k))])
        m = logits.max()
        total += -(logits[i] - m - np.log(np.exp(logits - m).sum()))
    return total / len(q)


def symmetric_oracle(q1, q2, k1, k2, tau: float) -> float:
    return 2.0 * tau * infonce_oracle(q1, k2, tau) + 2.0 * tau * infonce_oracle(q2, k1, tau)


# -- retrieval oracle -------------------------------------------------------------


def retrieval_oracle(query_feats: np.ndarray, query_labels: np.ndarray,
                     gallery_feats: np.ndarray, gallery_labels: np.ndarray,
                     same_bank: bool) -> dict:
    """Exhaustive rank-1/rank-5/mAP with loops, for banks of normalized rows.

    Mirrors the documented protocol: ties broken by ascending gallery
    index, self-match removed when the banks are the same, queries without
    a gallery positive excluded and tallied.
    """
    n_q = len(query_feats)
    hits1 = hits5 = 0
    ap_sum = 0.0
    evaluated = excluded = 0
    for i in range(n_q):
        sims = []
        for j in range(len(gallery_feats)):
            if same_bank and j == i:
                continue
            sims.append((float(np.dot(query_feats[i], gallery_feats[j])), j))
        # descending similarity, ascending index on ties
        sims.sort(key=lambda t: (-t[0], t[1]))
        rel = [gallery_labels[j] == query_labels[i] for _, j in sims]
        n_pos = sum(rel)
        if n_pos == 0:
            excluded += 1
            continue
        evaluated += 1
        hits1 += 1 if any(rel[:1]) else 0
        hits5 += 1 if any(rel[:5]) else 0
        seen = 0
        ap = 0.0
        for rank, is_rel in enumerate(rel, start=1):
            if is_rel:
                seen += 1
                ap += seen / rank
        ap_sum += ap / n_pos
    if evaluated == 0:
        return {"rank1": None, "rank5": None, "map": None,
                "excluded": excluded, "evaluated": 0}
    return {"rank1": hits1 / evaluated, "rank5": hits5 / evaluated,
            "map": ap_sum / evaluated, "excluded": excluded, "evaluated": evaluated}
