"""Sparse voxel grids, window geometry and sliding-window enumeration."""
from __future__ import annotations

from dataclasses import dataclass, field
from itertools import product

import numpy as np


class GridError(ValueError):
    pass


def _dims3(dims) -> tuple[int, int, int]:
    dims = tuple(int(v) for v in dims)
    if len(dims) != 3 or min(dims) < 1:
        raise GridError(f"grid dims must be three positive ints, got {dims}")
    return dims


class SparseVoxelGrid:
    """Active voxel coordinates ``(n, 3)`` with features ``(n, feature_dim)``.

    Storage order is arbitrary; nothing downstream may depend on it.
    """

    def __init__(self, dims, coords, features):
        self.dims = _dims3(dims)
        coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != coords.shape[0]:
            raise GridError(f"features {features.shape} do not match {coords.shape[0]} coords")
        if coords.size and ((coords < 0).any() or (coords >= np.array(self.dims)).any()):
            raise GridError(f"coordinates out of bounds for dims {self.dims}")
        keys = linear_index(coords, self.dims)
        if np.unique(keys).size != keys.size:
            raise GridError("duplicate voxel coordinates")
        self.coords = coords
        self.features = features

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.coords.shape[0]

    @classmethod
    def empty(cls, dims, feature_dim: int):
        return cls(dims, np.zeros((0, 3), np.int64), np.zeros((0, feature_dim)))

    def lookup_table(self) -> np.ndarray:
        """Dense ``dims``-shaped array of row indices, ``-1`` where inactive."""
        table = np.full(self.dims, -1, dtype=np.int64)
        if len(self):
            table[tuple(self.coords.T)] = np.arange(len(self))
        return table

    def sorted(self) -> "SparseVoxelGrid":
        order = np.argsort(linear_index(self.coords, self.dims), kind="stable")
        return SparseVoxelGrid(self.dims, self.coords[order], self.features[order])

    def permuted(self, rng: np.random.Generator) -> "SparseVoxelGrid":
        order = rng.permutation(len(self))
        return SparseVoxelGrid(self.dims, self.coords[order], self.features[order])

    def feature_map(self) -> dict[tuple, np.ndarray]:
        return {tuple(int(v) for v in c): f for c, f in zip(self.coords, self.features)}


@dataclass
class DenseLabelVolume:
    """Dense labels in ``{0..C}`` plus the never-observed mask, both ``(H, W, D)``."""

    labels: np.ndarray
    unknown_mask: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.unknown_mask = np.asarray(self.unknown_mask, dtype=bool)
        if self.labels.ndim != 3 or self.labels.shape != self.unknown_mask.shape:
            raise GridError(f"labels {self.labels.shape} and mask {self.unknown_mask.shape} "
                            "must be matching 3-D arrays")
        if self.labels.size and self.labels.min() < 0:
            raise GridError("negative label")

    @property
    def dims(self):
        return self.labels.shape

    @classmethod
    def empty(cls, dims):
        dims = _dims3(dims)
        return cls(np.zeros(dims, np.int64), np.zeros(dims, bool))

    def __eq__(self, other):
        return (isinstance(other, DenseLabelVolume)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.unknown_mask, other.unknown_mask))


def linear_index(coords: np.ndarray, dims) -> np.ndarray:
    """x-major linear index ``x*W*D + y*D + z``."""
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    _, W, D = dims
    return (coords[:, 0] * W + coords[:, 1]) * D + coords[:, 2]


# ---------------------------------------------------------------- windows

@dataclass(frozen=True)
class WindowSpec:
    size: tuple = (3, 3, 3)
    stride: int = 1
    padding: int = 1
    scan_order: str = "z-major"

    def __post_init__(self):
        if len(self.size) != 3 or min(self.size) < 1:
            raise GridError(f"window size must be three positive ints, got {self.size}")
        if self.stride < 1 or self.padding < 0:
            raise GridError("stride must be >= 1 and padding >= 0")
        if self.scan_order != "z-major":
            raise GridError(f"unsupported scan order {self.scan_order!r}")

    @property
    def num_slots(self) -> int:
        h, w, d = self.size
        return h * w * d

    @property
    def center_local(self) -> tuple[int, int, int]:
        return tuple((k - 1) // 2 for k in self.size)

    @property
    def center_slot(self) -> int:
        return slot_index(self.center_local, self.size)

    def output_dims(self, dims) -> tuple[int, int, int]:
        out = tuple((n + 2 * self.padding - k) // self.stride + 1
                    for n, k in zip(dims, self.size))
        if min(out) < 1:
            raise GridError(f"window {self.size}/stride {self.stride}/pad {self.padding} "
                            f"does not fit grid {tuple(dims)}")
        return out

    def slot_offsets(self) -> np.ndarray:
        """``(L, 3)`` local offsets ordered by slot index."""
        return np.array(list(product(*(range(k) for k in self.size))), dtype=np.int64)


def slot_index(local, size) -> int:
    """z-major slot index ``(x*w + y)*d + z``."""
    x, y, z = (int(v) for v in local)
    h, w, d = size
    if not (0 <= x < h and 0 <= y < w and 0 <= z < d):
        raise IndexError(f"local coordinate {tuple(local)} outside window {tuple(size)}")
    return (x * w + y) * d + z


def slot_local(i: int, size) -> tuple[int, int, int]:
    """Inverse of :func:`slot_index`."""
    h, w, d = size
    if not 0 <= i < h * w * d:
        raise IndexError(f"slot {i} outside window {tuple(size)}")
    x, rem = divmod(int(i), w * d)
    y, z = divmod(rem, d)
    return x, y, z


@dataclass
class WindowInstance:
    """One placement of the window over the padded volume."""

    position: tuple          # output-lattice coordinate
    origin: tuple            # window corner in unpadded coords (may be negative)
    center: tuple            # global coordinate of the centre slot
    size: tuple
    slot_occupancy: np.ndarray             # (L,) bool
    slot_rows: np.ndarray                  # (L,) row index into the grid, -1 if empty
    slot_features: dict = field(default_factory=dict)

    @property
    def valid_slots(self) -> np.ndarray:
        return np.flatnonzero(self.slot_occupancy)


def window_rows(table: np.ndarray, origins: np.ndarray, spec: WindowSpec) -> np.ndarray:
    """Row indices ``(N, L)`` of every slot for windows with the given origins.

    ``table`` is a grid lookup table; padded or inactive slots get ``-1``.
    """
    origins = np.asarray(origins, dtype=np.int64).reshape(-1, 3)
    offs = spec.slot_offsets()
    pts = origins[:, None, :] + offs[None, :, :]
    dims = np.array(table.shape)
    inside = ((pts >= 0) & (pts < dims)).all(axis=-1)
    clipped = np.clip(pts, 0, dims - 1)
    rows = table[clipped[..., 0], clipped[..., 1], clipped[..., 2]]
    return np.where(inside, rows, -1)


def placement_origins(positions: np.ndarray, spec: WindowSpec) -> np.ndarray:
    return np.asarray(positions, dtype=np.int64).reshape(-1, 3) * spec.stride - spec.padding


def all_positions(out_dims) -> np.ndarray:
    """Output-lattice positions in raster (x-major) order."""
    grids = np.meshgrid(*(np.arange(n) for n in out_dims), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1).astype(np.int64)


def covering_positions(coords: np.ndarray, dims, spec: WindowSpec) -> np.ndarray:
    """Raster-ordered output positions whose footprint holds one of ``coords``.

    Scatters each voxel to every placement covering it instead of scanning
    the dense lattice.
    """
    out_dims = spec.output_dims(dims)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    if coords.shape[0] == 0:
        return np.zeros((0, 3), np.int64)
    hit = np.zeros(out_dims, dtype=bool)
    shifted = coords + spec.padding
    offs = spec.slot_offsets()
    cand = shifted[:, None, :] - offs[None, :, :]
    ok = (cand % spec.stride == 0).all(axis=-1)
    pos = cand[ok] // spec.stride
    inb = ((pos >= 0) & (pos < np.array(out_dims))).all(axis=-1)
    pos = pos[inb]
    hit[pos[:, 0], pos[:, 1], pos[:, 2]] = True
    return np.argwhere(hit).astype(np.int64)


def active_positions(grid: SparseVoxelGrid, spec: WindowSpec) -> np.ndarray:
    """Raster-ordered output positions of the non-empty window placements."""
    return covering_positions(grid.coords, grid.dims, spec)


def enumerate_windows(grid: SparseVoxelGrid, spec: WindowSpec, skip_empty: bool = True):
    """Yield :class:`WindowInstance` objects in raster order over the output lattice.

    With ``skip_empty`` only placements containing an active voxel are
    produced; otherwise every placement is.
    """
    table = grid.lookup_table()
    positions = active_positions(grid, spec) if skip_empty else all_positions(spec.output_dims(grid.dims))
    if positions.shape[0] == 0:
        return
    origins = placement_origins(positions, spec)
    rows = window_rows(table, origins, spec)
    c = np.array(spec.center_local)
    for pos, org, r in zip(positions, origins, rows):
        occ = r >= 0
        yield WindowInstance(
            position=tuple(int(v) for v in pos),
            origin=tuple(int(v) for v in org),
            center=tuple(int(v) for v in org + c),
            size=tuple(spec.size),
            slot_occupancy=occ,
            slot_rows=r,
            slot_features={int(i): grid.features[r[i]] for i in np.flatnonzero(occ)},
        )


def dilate_coords(coords: np.ndarray, dims, radius: int) -> np.ndarray:
    """In-bounds coords within Chebyshev distance ``radius`` of any input coord (x-major sorted)."""
    if radius < 0:
        raise GridError("dilation radius must be >= 0")
    dims = _dims3(dims)
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    mask = np.zeros(dims, dtype=bool)
    if coords.shape[0] == 0:
        return np.zeros((0, 3), np.int64)
    r = np.arange(-radius, radius + 1)
    offs = np.stack(np.meshgrid(r, r, r, indexing="ij"), -1).reshape(-1, 3)
    pts = (coords[:, None, :] + offs[None]).reshape(-1, 3)
    inb = ((pts >= 0) & (pts < np.array(dims))).all(axis=1)
    pts = pts[inb]
    mask[pts[:, 0], pts[:, 1], pts[:, 2]] = True
    return np.argwhere(mask).astype(np.int64)


def active_neighborhood_dilate(grid: SparseVoxelGrid, radius: int) -> set:
    return {tuple(int(v) for v in c) for c in dilate_coords(grid.coords, grid.dims, radius)}
