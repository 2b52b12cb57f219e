"""Spatially-aware window attention.

Keys and values get a per-head projection plus layer norm, then a per-slot
affine modulation shared by all heads. One query per window comes from the
centre voxel, or from its normalised grid position when the centre is
empty. Softmax weights over the valid slots are rescaled by per-head,
per-slot ``gamma`` without renormalisation.

Everything here is batched over windows: a batch is described by a
``(N, L)`` table of input rows with ``-1`` marking empty or padded slots.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ParamStore, Tensor
from .grid import (WindowInstance, WindowSpec, all_positions, covering_positions, placement_origins,
                   window_rows)


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class SWAConfig:
    dim: int
    heads: int
    window: tuple = (3, 3, 3)
    scale_energies: bool = True
    variant: str = "A"          # "A": centre query; "B": slot-modulated self queries

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"model dim {self.dim} not divisible by {self.heads} heads")
        if self.variant not in ("A", "B"):
            raise ValueError(f"SWA variant must be 'A' or 'B', got {self.variant!r}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def num_slots(self) -> int:
        h, w, d = self.window
        return h * w * d

    @property
    def center_slot(self) -> int:
        return WindowSpec(self.window).center_slot


def init_swa_block(store: ParamStore, rng: np.random.Generator, prefix: str, cfg: SWAConfig) -> None:
    d, dh, M, L = cfg.dim, cfg.head_dim, cfg.heads, cfg.num_slots
    E.add_layer_norm(store, f"{prefix}.ln1", d)
    for kv in ("k", "v"):
        E.add_linear(store, rng, f"{prefix}.{kv}", d, M * dh)
        E.add_layer_norm(store, f"{prefix}.{kv}ln", dh)
        store.add(f"{prefix}.{kv}slot.W", E.uniform_init(rng, (L, dh, dh), dh))
        store.add(f"{prefix}.{kv}slot.b", E.uniform_init(rng, (L, dh), dh))
    E.add_linear(store, rng, f"{prefix}.qf", d, d)
    E.add_linear(store, rng, f"{prefix}.qp1", 3, d)
    E.add_linear(store, rng, f"{prefix}.qp2", d, d)
    E.add_linear(store, rng, f"{prefix}.q", d, M * dh)
    if cfg.variant == "B":
        store.add(f"{prefix}.qslot.W", E.uniform_init(rng, (L, dh, dh), dh))
        store.add(f"{prefix}.qslot.b", E.uniform_init(rng, (L, dh), dh))
    store.add(f"{prefix}.gamma", np.ones((M, L)))
    E.add_linear(store, rng, f"{prefix}.o", M * dh, d)
    E.add_layer_norm(store, f"{prefix}.ln2", d)
    E.add_linear(store, rng, f"{prefix}.ff1", d, 4 * d)
    E.add_linear(store, rng, f"{prefix}.ff2", 4 * d, d)
    store.add(f"{prefix}.empty", np.zeros(d))


# ---------------------------------------------------------------- batched pieces

def _slot_modulate(store, name: str, x: Tensor, cfg: SWAConfig) -> Tensor:
    """Per-slot affine map on ``(N, L, M, dh)``, returned as ``(N, M, L, dh)``."""
    N, L, M, dh = x.shape
    t = E.reshape(E.transpose(x, (1, 0, 2, 3)), (L, N * M, dh))
    t = E.matmul(t, store.tensor(f"{name}.W"))
    t = E.add(t, E.reshape(store.tensor(f"{name}.b"), (L, 1, dh)))
    return E.transpose(E.reshape(t, (L, N, M, dh)), (1, 2, 0, 3))


def _head_norm(store, name: str, x: Tensor, cfg: SWAConfig) -> Tensor:
    n = x.shape[0]
    h = E.reshape(x, (n, cfg.heads, cfg.head_dim))
    return E.apply_layer_norm(store, name, h)


def batched_project_kv(store, prefix, cfg: SWAConfig, feats: Tensor, rows: np.ndarray):
    """``K', V'`` of shape ``(N, M, L, dh)`` for windows given by ``rows``."""
    if rows.shape[1] != cfg.num_slots:
        raise IndexError(f"window rows carry {rows.shape[1]} slots, block expects {cfg.num_slots}")
    out = []
    for kv in ("k", "v"):
        h = _head_norm(store, f"{prefix}.{kv}ln", E.apply_linear(store, f"{prefix}.{kv}", feats), cfg)
        out.append(_slot_modulate(store, f"{prefix}.{kv}slot", E.gather_rows(h, rows), cfg))
    return out[0], out[1]


def position_stem(store, prefix, pos_norm: np.ndarray) -> Tensor:
    h = E.gelu(E.apply_linear(store, f"{prefix}.qp1", Tensor(pos_norm)))
    return E.apply_linear(store, f"{prefix}.qp2", h)


def normalized_position(coords: np.ndarray, dims) -> np.ndarray:
    ext = np.maximum(np.asarray(dims, dtype=np.float64) - 1.0, 1.0)
    return np.asarray(coords, dtype=np.float64) / ext


def batched_center_query(store, prefix, cfg: SWAConfig, feats: Tensor, center_rows: np.ndarray,
                         centers: np.ndarray, dims) -> Tensor:
    """Per-head queries ``(N, M, dh)``: feature branch where the centre is active, else position branch."""
    active = (center_rows >= 0).astype(np.float64)[:, None]
    qf = E.gather_rows(E.apply_linear(store, f"{prefix}.qf", feats), center_rows)
    qp = position_stem(store, prefix, normalized_position(centers, dims))
    q0 = E.add(E.mul(qf, active), E.mul(qp, 1.0 - active))
    q = E.apply_linear(store, f"{prefix}.q", q0)
    return E.reshape(q, (q.shape[0], cfg.heads, cfg.head_dim))


def batched_attend(store, prefix, cfg: SWAConfig, q: Tensor, k: Tensor, v: Tensor,
                   valid: np.ndarray, return_weights: bool = False):
    """Centre-query attention. ``q`` ``(N, M, dh)``; ``k``, ``v`` ``(N, M, L, dh)``; ``valid`` ``(N, L)``."""
    N, M, L, dh = k.shape
    e = E.matmul(E.reshape(q, (N, M, 1, dh)), E.transpose(k, (0, 1, 3, 2)))
    if cfg.scale_energies:
        e = E.scale(e, 1.0 / math.sqrt(dh))
    alpha = E.masked_softmax(e, valid[:, None, None, :])
    gamma = E.reshape(store.tensor(f"{prefix}.gamma"), (1, M, 1, L))
    o = E.matmul(E.mul(alpha, gamma), v)
    out = E.apply_linear(store, f"{prefix}.o", E.reshape(o, (N, M * dh)))
    if return_weights:
        return out, alpha.data[:, :, 0, :]
    return out


def batched_self_query_attend(store, prefix, cfg: SWAConfig, feats: Tensor, rows: np.ndarray,
                              k: Tensor, v: Tensor, pool_center: np.ndarray) -> Tensor:
    """Ablation without centre query: every valid slot queries the window.

    Row ``n`` keeps the centre slot's output when ``pool_center[n]``,
    otherwise the mean over valid query slots.
    """
    N, M, L, dh = k.shape
    valid = rows >= 0
    qh = E.reshape(E.apply_linear(store, f"{prefix}.q", E.apply_linear(store, f"{prefix}.qf", feats)),
                   (feats.shape[0], M, dh))
    qs = _slot_modulate(store, f"{prefix}.qslot", E.gather_rows(qh, rows), cfg)
    e = E.matmul(qs, E.transpose(k, (0, 1, 3, 2)))
    if cfg.scale_energies:
        e = E.scale(e, 1.0 / math.sqrt(dh))
    alpha = E.masked_softmax(e, valid[:, None, None, :])
    gamma = E.reshape(store.tensor(f"{prefix}.gamma"), (1, M, 1, L))
    o_all = E.matmul(E.mul(alpha, gamma), v)
    w = valid / np.maximum(valid.sum(axis=1, keepdims=True), 1)
    c = cfg.center_slot
    onehot = np.zeros((N, L))
    onehot[:, c] = 1.0
    w = np.where(pool_center[:, None], onehot, w)
    o = E.matmul(Tensor(w.reshape(N, 1, 1, L)), o_all)
    return E.apply_linear(store, f"{prefix}.o", E.reshape(o, (N, M * dh)))


def window_attention(store, prefix, cfg: SWAConfig, feats: Tensor, rows: np.ndarray,
                     centers: np.ndarray, dims, stride: int) -> Tensor:
    """Attention output ``(N, d)`` for a window batch (features already normalised)."""
    k, v = batched_project_kv(store, prefix, cfg, feats, rows)
    center_rows = rows[:, cfg.center_slot]
    if cfg.variant == "A":
        q = batched_center_query(store, prefix, cfg, feats, center_rows, centers, dims)
        return batched_attend(store, prefix, cfg, q, k, v, rows >= 0)
    pool_center = (center_rows >= 0) & (stride == 1)
    return batched_self_query_attend(store, prefix, cfg, feats, rows, k, v, pool_center)


def ffn(store, prefix, x: Tensor) -> Tensor:
    return E.apply_linear(store, f"{prefix}.ff2", E.gelu(E.apply_linear(store, f"{prefix}.ff1", x)))


def block_apply(store, prefix, cfg: SWAConfig, coords: np.ndarray, feats: Tensor, dims,
                spec: WindowSpec, positions: np.ndarray | None = None, skip_empty: bool = True):
    """Pre-norm SWA block over a sparse level.

    ``positions`` are output-lattice coordinates to evaluate (default: every
    placement). Positions whose window holds no active voxel produce no
    output. Returns ``(out_positions, out_features)`` in raster order.
    """
    if tuple(spec.size) != tuple(cfg.window):
        raise ContractError(f"window spec {spec.size} does not match block window {cfg.window}")
    out_dims = spec.output_dims(dims)
    table = np.full(tuple(dims), -1, dtype=np.int64)
    n_in = coords.shape[0]
    if n_in:
        table[tuple(coords.T)] = np.arange(n_in)
    if positions is None:
        # skipping: only placements that cover an active voxel; otherwise the full lattice
        positions = covering_positions(coords, dims, spec) if skip_empty else all_positions(out_dims)
    positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
    if positions.shape[0]:
        order = np.lexsort(positions.T[::-1])
        positions = positions[order]
    if skip_empty:
        rows = window_rows(table, placement_origins(positions, spec), spec)
        keep = (rows >= 0).any(axis=1)
        positions, rows = positions[keep], rows[keep]
        return positions, _block_core(store, prefix, cfg, feats, rows, positions, dims, spec)

    # Dense path: every lattice placement is evaluated, then requested
    # non-empty ones are selected.
    lattice = all_positions(out_dims)
    rows_all = window_rows(table, placement_origins(lattice, spec), spec)
    out_all = _block_core(store, prefix, cfg, feats, rows_all, lattice, dims, spec)
    lin = (lattice[:, 0] * out_dims[1] + lattice[:, 1]) * out_dims[2] + lattice[:, 2]
    want = np.zeros(lattice.shape[0], dtype=bool)
    if positions.shape[0]:
        want[np.searchsorted(lin, (positions[:, 0] * out_dims[1] + positions[:, 1]) * out_dims[2]
                             + positions[:, 2])] = True
    sel = np.flatnonzero(want & (rows_all >= 0).any(axis=1))
    return lattice[sel], E.gather_rows(out_all, sel)


def _block_core(store, prefix, cfg, feats: Tensor, rows, positions, dims, spec):
    n_in = feats.shape[0]
    centers = placement_origins(positions, spec) + np.array(spec.center_local)
    if rows.shape[0] == 0:
        return Tensor(np.zeros((0, cfg.dim)))
    xn = E.apply_layer_norm(store, f"{prefix}.ln1", feats)
    attn = window_attention(store, prefix, cfg, xn, rows, centers, dims, spec.stride)
    center_rows = rows[:, cfg.center_slot]
    with_empty = E.concat([feats, E.reshape(store.tensor(f"{prefix}.empty"), (1, cfg.dim))], axis=0)
    x_res = E.gather_rows(with_empty, np.where(center_rows >= 0, center_rows, n_in))
    u = E.add(x_res, attn)
    return E.add(u, ffn(store, prefix, E.apply_layer_norm(store, f"{prefix}.ln2", u)))


# ---------------------------------------------------------------- per-window API

@dataclass
class WindowAttentionOutput:
    output: np.ndarray                 # (d,)
    weights: np.ndarray | None = None  # (M, n_valid) pre-gamma softmax weights


def _single_rows(slots, L):
    slots = np.asarray(slots, dtype=np.int64)
    if slots.size and (slots.min() < 0 or slots.max() >= L):
        raise IndexError(f"slot index out of range [0, {L})")
    rows = np.full((1, L), -1, dtype=np.int64)
    rows[0, slots] = np.arange(slots.size)
    return rows


def project_kv(feats, slots, store: ParamStore, prefix: str, cfg: SWAConfig):
    """``K', V'`` ``(M, n_valid, dh)`` for one window's valid voxels (rows of ``feats``)."""
    slots = np.asarray(slots, dtype=np.int64)
    rows = _single_rows(slots, cfg.num_slots)
    with E.no_grad():
        k, v = batched_project_kv(store, prefix, cfg, E.as_tensor(feats), rows)
    return k.data[0][:, slots], v.data[0][:, slots]


def center_query(window: WindowInstance, store: ParamStore, prefix: str, cfg: SWAConfig, dims):
    """Per-head query ``(M, dh)`` for one enumerated window."""
    slots = window.valid_slots
    if slots.size == 0:
        raise ContractError("center_query on a window with no active voxel")
    feats = np.stack([window.slot_features[int(i)] for i in slots])
    rows = _single_rows(slots, cfg.num_slots)
    with E.no_grad():
        q = batched_center_query(store, prefix, cfg, E.as_tensor(feats), rows[:, cfg.center_slot],
                                 np.array([window.center]), dims)
    return q.data[0]


def attend(q, k, v, store: ParamStore, prefix: str, cfg: SWAConfig, slots) -> WindowAttentionOutput:
    """Attention for one window: ``q`` ``(M, dh)``, ``k``/``v`` ``(M, n_valid, dh)``."""
    slots = np.asarray(slots, dtype=np.int64)
    if slots.size == 0:
        raise ContractError("attend needs at least one valid slot")
    M, n, dh = np.shape(k)
    L = cfg.num_slots
    kf = np.zeros((1, M, L, dh))
    vf = np.zeros((1, M, L, dh))
    kf[0][:, slots] = k
    vf[0][:, slots] = v
    valid = np.zeros((1, L), dtype=bool)
    valid[0, slots] = True
    with E.no_grad():
        out, w = batched_attend(store, prefix, cfg, E.as_tensor(np.asarray(q)[None]),
                                E.as_tensor(kf), E.as_tensor(vf), valid, return_weights=True)
    return WindowAttentionOutput(out.data[0], w[0][:, slots])


def swa_window_forward(window: WindowInstance, store: ParamStore, prefix: str, cfg: SWAConfig,
                       dims) -> WindowAttentionOutput:
    """project_kv -> center_query -> attend on one window (features used as given)."""
    slots = window.valid_slots
    if slots.size == 0:
        raise ContractError("swa_window_forward on a window with no active voxel")
    feats = np.stack([window.slot_features[int(i)] for i in slots])
    if cfg.variant == "A":
        k, v = project_kv(feats, slots, store, prefix, cfg)
        q = center_query(window, store, prefix, cfg, dims)
        return attend(q, k, v, store, prefix, cfg, slots)
    rows = _single_rows(slots, cfg.num_slots)
    with E.no_grad():
        out = window_attention(store, prefix, cfg, E.as_tensor(feats), rows,
                               np.array([window.center]), dims, 1)
    return WindowAttentionOutput(out.data[0])


def swa_block_forward(grid, spec: WindowSpec, store: ParamStore, prefix: str, cfg: SWAConfig,
                      output_coords=None, skip_empty: bool = True):
    """:func:`block_apply` on a :class:`SparseVoxelGrid`, returning the output-lattice grid."""
    from .grid import SparseVoxelGrid

    with E.no_grad():
        pos, out = block_apply(store, prefix, cfg, grid.coords, E.as_tensor(grid.features),
                               grid.dims, spec, output_coords, skip_empty)
    return SparseVoxelGrid(spec.output_dims(grid.dims), pos, out.data.reshape(-1, cfg.dim))
