"""Four-level sparse U-Net built from SWA blocks (or sparse convolutions).

Encoder level 0 runs a stride-1 block on the input's active set; levels
1.. downsample with stride-2 windows whose output is active exactly where
the window was not skipped. Each decoder stage seeds fine voxels at
``2 * coarse``, fuses them with the encoder skip, dilates the union by one
voxel and runs a stride-1 block over the dilated candidates.
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine as E
from .engine import ParamStore, Tensor
from .grid import GridError, SparseVoxelGrid, WindowSpec, dilate_coords, window_rows, placement_origins
from .swa import SWAConfig, block_apply, init_swa_block

EMPTY_LOGIT = 30.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetConfig:
    levels: int = 4
    dim: int = 32
    heads: int = 2
    num_classes: int = 6              # label values including empty
    variant: str = "A"                # A full SWA, B no centre query, C sparse conv
    window: tuple = (3, 3, 3)
    enc_stride: int = 2
    enc_padding: int = 1
    expand_radius: int = 1
    scale_energies: bool = True

    def __post_init__(self):
        if self.variant not in ("A", "B", "C"):
            raise ConfigError(f"variant must be A, B or C, got {self.variant!r}")
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.levels < 1:
            raise ConfigError("levels must be >= 1")

    @property
    def in_features(self) -> int:
        return self.num_classes + 1

    @property
    def swa(self) -> SWAConfig:
        return SWAConfig(self.dim, self.heads, tuple(self.window), self.scale_energies,
                         "B" if self.variant == "B" else "A")

    def check_dims(self, dims) -> None:
        f = 2 ** (self.levels - 1)
        if any(n % f for n in dims):
            raise ConfigError(f"grid dims {tuple(dims)} not divisible by 2^(levels-1) = {f}")

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}


PRESETS = {
    "full": dict(dim=128, heads=8, num_classes=20),
    "desk": dict(dim=32, heads=2),
    "tiny": dict(dim=8, heads=2, levels=2),
}


def init_unet(cfg: UNetConfig, seed: int = 0) -> ParamStore:
    rng = np.random.default_rng(seed)
    store = ParamStore()
    d = cfg.dim
    E.add_linear(store, rng, "embed", cfg.in_features, d)
    L = int(np.prod(cfg.window))
    for lvl in range(cfg.levels):
        stages = ("enc", "dec") if lvl < cfg.levels - 1 else ("enc",)
        for stage in stages:
            prefix = f"block{lvl}.{stage}"
            if cfg.variant == "C":
                E.add_linear(store, rng, prefix, L * d, d)
            else:
                init_swa_block(store, rng, prefix, cfg.swa)
        if lvl < cfg.levels - 1:
            E.add_linear(store, rng, f"fuse{lvl}", 2 * d, d)
    E.add_layer_norm(store, "head.ln", d)
    E.add_linear(store, rng, "head", d, cfg.num_classes)
    return store


# ---------------------------------------------------------------- levels

@dataclass
class Level:
    coords: np.ndarray
    feats: Tensor
    dims: tuple

    def __len__(self):
        return self.coords.shape[0]

    def to_grid(self) -> SparseVoxelGrid:
        return SparseVoxelGrid(self.dims, self.coords, self.feats.data.reshape(len(self), self.feats.shape[-1]))


def encode_input(grid: SparseVoxelGrid, num_classes: int) -> np.ndarray:
    """One-hot labels plus an occupancy flag, ``(n, num_classes + 1)``."""
    labels = grid.features[:, 0].astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ConfigError(f"input labels outside [0, {num_classes})")
    out = np.zeros((len(grid), num_classes + 1))
    out[np.arange(len(grid)), labels] = 1.0
    out[:, -1] = 1.0
    return out


def embed_input(store: ParamStore, cfg: UNetConfig, grid: SparseVoxelGrid) -> Level:
    """Linear map of per-voxel input features to model width; active set unchanged."""
    if grid.feature_dim != cfg.in_features:
        raise ConfigError(f"input feature width {grid.feature_dim} != expected {cfg.in_features}")
    feats = E.apply_linear(store, "embed", Tensor(grid.features))
    return Level(grid.coords, feats, tuple(grid.dims))


def sparse_conv(coords, feats: Tensor, dims, spec: WindowSpec, W: Tensor, b: Tensor,
                positions: np.ndarray) -> Tensor:
    """3-D sparse convolution evaluated at output-lattice ``positions``.

    ``W`` has shape ``(L * c_in, c_out)`` with slot-major rows; empty and
    padded slots contribute nothing.
    """
    table = np.full(tuple(dims), -1, dtype=np.int64)
    if len(coords):
        table[tuple(np.asarray(coords).T)] = np.arange(len(coords))
    rows = window_rows(table, placement_origins(positions, spec), spec)
    g = E.gather_rows(feats, rows)
    n = rows.shape[0]
    return E.linear(E.reshape(g, (n, -1)), W, b)


def _stage(store, cfg: UNetConfig, prefix: str, level: Level, spec: WindowSpec,
           positions, skip_empty: bool) -> Level:
    out_dims = spec.output_dims(level.dims)
    if cfg.variant == "C":
        if positions is None:
            from .grid import active_positions
            positions = active_positions(level.to_grid(), spec)
        positions = np.asarray(positions, dtype=np.int64).reshape(-1, 3)
        if positions.shape[0]:
            positions = positions[np.lexsort(positions.T[::-1])]
        if positions.shape[0] == 0:
            return Level(positions, Tensor(np.zeros((0, cfg.dim))), out_dims)
        y = sparse_conv(level.coords, level.feats, level.dims, spec,
                        store.tensor(f"{prefix}.W"), store.tensor(f"{prefix}.b"), positions)
        return Level(positions, E.relu(y), out_dims)
    pos, feats = block_apply(store, prefix, cfg.swa, level.coords, level.feats, level.dims, spec,
                             positions, skip_empty)
    return Level(pos, feats, out_dims)


def encode_stage(store, cfg: UNetConfig, lvl: int, level: Level, skip_empty: bool = True) -> Level:
    """Encoder block at level ``lvl``: stride 1 on the active set for level 0, else stride-2 downsampling."""
    if lvl == 0:
        spec = WindowSpec(tuple(cfg.window), 1, 1)
        return _stage(store, cfg, "block0.enc", level, spec, level.coords, skip_empty)
    if any(n % 2 for n in level.dims):
        raise GridError(f"encoder input dims {level.dims} must be even")
    spec = WindowSpec(tuple(cfg.window), cfg.enc_stride, cfg.enc_padding)
    return _stage(store, cfg, f"block{lvl}.enc", level, spec, None, skip_empty)


def _rows_for(coords: np.ndarray, table: np.ndarray) -> np.ndarray:
    if coords.shape[0] == 0:
        return np.zeros(0, np.int64)
    return table[tuple(coords.T)]


def decode_stage(store, cfg: UNetConfig, lvl: int, coarse: Level, skip: Level,
                 skip_empty: bool = True) -> Level:
    """Upsample ``coarse`` (level ``lvl + 1``) into level ``lvl`` with geometric expansion."""
    fine_dims = tuple(skip.dims)
    if tuple(2 * n for n in coarse.dims) != fine_dims:
        raise ConfigError(f"coarse dims {coarse.dims} are not half of fine dims {fine_dims}")
    d = cfg.dim
    seeds = coarse.coords * 2
    mask = np.zeros(fine_dims, dtype=bool)
    if len(seeds):
        mask[tuple(seeds.T)] = True
    if len(skip):
        mask[tuple(skip.coords.T)] = True
    src = np.argwhere(mask).astype(np.int64)
    if src.shape[0] == 0:
        return Level(src, Tensor(np.zeros((0, d))), fine_dims)

    seed_table = np.full(fine_dims, -1, dtype=np.int64)
    if len(seeds):
        seed_table[tuple(seeds.T)] = np.arange(len(seeds))
    skip_table = np.full(fine_dims, -1, dtype=np.int64)
    if len(skip):
        skip_table[tuple(skip.coords.T)] = np.arange(len(skip))
    seed_f = E.gather_rows(coarse.feats, _rows_for(src, seed_table))
    skip_f = E.gather_rows(skip.feats, _rows_for(src, skip_table))
    fused = E.apply_linear(store, f"fuse{lvl}", E.concat([seed_f, skip_f], axis=1))

    cand = dilate_coords(src, fine_dims, cfg.expand_radius)
    spec = WindowSpec(tuple(cfg.window), 1, 1)
    return _stage(store, cfg, f"block{lvl}.dec", Level(src, fused, fine_dims), spec, cand, skip_empty)


# ---------------------------------------------------------------- full network

@dataclass
class UNetOutput:
    coords: np.ndarray          # final active set at full resolution
    logits: Tensor              # (n_active, num_classes)
    dims: tuple
    encoder: list = field(default_factory=list)
    decoder: list = field(default_factory=list)

    def background_logits(self, num_classes: int) -> np.ndarray:
        bg = np.zeros(num_classes)
        bg[0] = EMPTY_LOGIT
        return bg

    def active_mask(self) -> np.ndarray:
        m = np.zeros(self.dims, dtype=bool)
        if len(self.coords):
            m[tuple(self.coords.T)] = True
        return m

    def flat_index(self) -> np.ndarray:
        H, W, D = self.dims
        c = self.coords
        return (c[:, 0] * W + c[:, 1]) * D + c[:, 2]

    def dense_logits(self) -> Tensor:
        """``(H*W*D, C+1)`` logits; never-activated voxels get the fixed empty vector."""
        C = self.logits.shape[1]
        n = int(np.prod(self.dims))
        return scatter_rows(self.logits, self.flat_index(), n, self.background_logits(C))

    def predict(self) -> np.ndarray:
        labels = np.zeros(int(np.prod(self.dims)), dtype=np.int64)
        if len(self.coords):
            labels[self.flat_index()] = self.logits.data.argmax(axis=1)
        return labels.reshape(self.dims)


def scatter_rows(x: Tensor, idx: np.ndarray, n: int, fill: np.ndarray) -> Tensor:
    """``(n, c)`` array of ``fill`` rows with rows ``idx`` replaced by ``x``."""
    out = np.tile(np.asarray(fill, float), (n, 1))
    out[idx] = x.data
    return Tensor(out, (x,), lambda g: (g[idx],))


def unet_forward(store: ParamStore, cfg: UNetConfig, grid: SparseVoxelGrid,
                 skip_empty: bool = True, keep_levels: bool = False) -> UNetOutput:
    """Full forward pass on a labelled input grid (feature column 0 = label id)."""
    cfg.check_dims(grid.dims)
    feats = grid if grid.feature_dim == cfg.in_features else SparseVoxelGrid(
        grid.dims, grid.coords, encode_input(grid, cfg.num_classes))
    level = embed_input(store, cfg, feats)
    enc = []
    for lvl in range(cfg.levels):
        level = encode_stage(store, cfg, lvl, level, skip_empty)
        enc.append(level)
    dec = []
    for lvl in range(cfg.levels - 2, -1, -1):
        level = decode_stage(store, cfg, lvl, level, enc[lvl], skip_empty)
        dec.append(level)
    if len(level):
        h = E.apply_layer_norm(store, "head.ln", level.feats)
        logits = E.apply_linear(store, "head", h)
    else:
        logits = Tensor(np.zeros((0, cfg.num_classes)))
    return UNetOutput(level.coords, logits, tuple(grid.dims),
                      enc if keep_levels else [], dec if keep_levels else [])


def sparse_conv_baseline_forward(store, cfg: UNetConfig, grid, skip_empty: bool = True) -> UNetOutput:
    if cfg.variant != "C":
        raise ConfigError("sparse_conv_baseline_forward needs a variant-C config")
    return unet_forward(store, cfg, grid, skip_empty)
