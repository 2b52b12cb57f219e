"""Straight-line dense reference for the window attention operator.

Each window is materialised as a full ``(L, d)`` slot array with an
explicit validity mask and processed head by head, slot by slot. Nothing
here shares code with the batched implementation in :mod:`swa_voxel.swa`;
it exists to be compared against.
"""
from __future__ import annotations

import math

import numpy as np


def _ln(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((xi - mu) ** 2 for xi in x) / len(x)
    return np.array([(xi - mu) / math.sqrt(var + eps) * gi + bi for xi, gi, bi in zip(x, g, b)])


def _gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def reference_window(P: dict, prefix: str, slot_feats: np.ndarray, valid: np.ndarray,
                     center_global, dims, heads: int, center_slot: int,
                     scale_energies: bool = True) -> np.ndarray:
    """Centre-query window attention output for one window (variant A).

    ``P`` maps parameter names to arrays; ``slot_feats`` is ``(L, d)`` with
    arbitrary content in invalid slots (it is never read there).
    """
    L, d = slot_feats.shape
    dh = d // heads
    p = lambda n: P[f"{prefix}.{n}"]
    if not valid.any():
        raise ValueError("window has no valid slot")

    if valid[center_slot]:
        q0 = slot_feats[center_slot] @ p("qf.W") + p("qf.b")
    else:
        ext = [max(n - 1, 1) for n in dims]
        pos = np.array([c / e for c, e in zip(center_global, ext)], dtype=float)
        q0 = _gelu(pos @ p("qp1.W") + p("qp1.b")) @ p("qp2.W") + p("qp2.b")
    q_all = q0 @ p("q.W") + p("q.b")

    concat = np.zeros(d)
    for m in range(heads):
        cols = slice(m * dh, (m + 1) * dh)
        qm = q_all[cols]
        keys, vals, slots = [], [], []
        for i in range(L):
            if not valid[i]:
                continue
            f = slot_feats[i]
            k = _ln(f @ p("k.W")[:, cols] + p("k.b")[cols], p("kln.g"), p("kln.b"))
            v = _ln(f @ p("v.W")[:, cols] + p("v.b")[cols], p("vln.g"), p("vln.b"))
            keys.append(k @ p("kslot.W")[i] + p("kslot.b")[i])
            vals.append(v @ p("vslot.W")[i] + p("vslot.b")[i])
            slots.append(i)
        energies = [float(np.dot(qm, k)) for k in keys]
        if scale_energies:
            energies = [e / math.sqrt(dh) for e in energies]
        top = max(energies)
        w = [math.exp(e - top) for e in energies]
        s = sum(w)
        out = np.zeros(dh)
        for wi, vi, i in zip(w, vals, slots):
            out += p("gamma")[m, i] * (wi / s) * vi
        concat[cols] = out
    return concat @ p("o.W") + p("o.b")


def reference_block(P: dict, prefix: str, coords, feats, dims, window, stride: int, padding: int,
                    heads: int, positions, scale_energies: bool = True) -> dict:
    """Pre-norm block output for each requested output position with a non-empty window."""
    lookup = {tuple(int(v) for v in c): np.asarray(f, float) for c, f in zip(coords, feats)}
    p = lambda n: P[f"{prefix}.{n}"]
    h, w, dd = window
    L = h * w * dd
    center_local = ((h - 1) // 2, (w - 1) // 2, (dd - 1) // 2)
    center_slot = (center_local[0] * w + center_local[1]) * dd + center_local[2]
    d = len(next(iter(lookup.values()))) if lookup else 0
    results = {}
    for pos in positions:
        origin = [int(c) * stride - padding for c in pos]
        slot_feats = np.zeros((L, d))
        valid = np.zeros(L, bool)
        for a in range(h):
            for b in range(w):
                for c in range(dd):
                    g = (origin[0] + a, origin[1] + b, origin[2] + c)
                    i = (a * w + b) * dd + c
                    if g in lookup:
                        slot_feats[i] = _ln(lookup[g], p("ln1.g"), p("ln1.b"))
                        valid[i] = True
        if not valid.any():
            continue
        center = tuple(o + c for o, c in zip(origin, center_local))
        attn = reference_window(P, prefix, slot_feats, valid, center, dims, heads, center_slot,
                                scale_energies)
        x_res = lookup[center] if center in lookup else p("empty")
        u = x_res + attn
        hdn = _gelu(_ln(u, p("ln2.g"), p("ln2.b")) @ p("ff1.W") + p("ff1.b"))
        results[tuple(int(v) for v in pos)] = u + hdn @ p("ff2.W") + p("ff2.b")
    return results
