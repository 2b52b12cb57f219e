"""Binary scene files and benchmark voxel loaders.

Scene file layout (all little-endian)::

    "SWSC" | u16 version | u32 H, W, D | u16 class count | u64 n_active
    n_active x (u32 x, u32 y, u32 z, u16 label)
    H*W*D x u16 target label, x-major
    ceil(H*W*D / 8) bytes unknown mask, MSB first
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .grid import DenseLabelVolume, SparseVoxelGrid

SCENE_MAGIC = b"SWSC"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sHIIIHQ")
_VOXEL = np.dtype([("x", "<u4"), ("y", "<u4"), ("z", "<u4"), ("label", "<u2")])


class SceneFormatError(ValueError):
    pass


class BadMagicError(SceneFormatError):
    pass


class VersionError(SceneFormatError):
    pass


class TruncatedError(SceneFormatError):
    pass


@dataclass
class Scene:
    """Sparse labelled input (feature column 0 = label id) and dense target."""

    input: SparseVoxelGrid
    target: DenseLabelVolume
    num_classes: int

    @property
    def dims(self):
        return self.input.dims

    @property
    def input_labels(self) -> np.ndarray:
        return self.input.features[:, 0].astype(np.int64)

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        a, b = self.input.sorted(), other.input.sorted()
        return (self.num_classes == other.num_classes and a.dims == b.dims
                and np.array_equal(a.coords, b.coords)
                and np.array_equal(a.features, b.features)
                and self.target == other.target)


def scene_to_bytes(scene: Scene) -> bytes:
    grid, target = scene.input, scene.target
    if tuple(grid.dims) != tuple(target.dims):
        raise SceneFormatError(f"input dims {grid.dims} != target dims {target.dims}")
    H, W, D = grid.dims
    rec = np.zeros(len(grid), dtype=_VOXEL)
    rec["x"], rec["y"], rec["z"] = grid.coords.T
    rec["label"] = scene.input_labels
    parts = [
        _HEADER.pack(SCENE_MAGIC, SCENE_VERSION, H, W, D, scene.num_classes, len(grid)),
        rec.tobytes(),
        target.labels.astype("<u2").tobytes(order="C"),
        np.packbits(target.unknown_mask.ravel(order="C"), bitorder="big").tobytes(),
    ]
    return b"".join(parts)


def scene_from_bytes(buf: bytes) -> Scene:
    if len(buf) < 4:
        raise TruncatedError("truncated scene: header incomplete")
    if buf[:4] != SCENE_MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}, expected {SCENE_MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedError("truncated scene: header incomplete")
    _, version, H, W, D, ncls, n = _HEADER.unpack_from(buf, 0)
    if version != SCENE_VERSION:
        raise VersionError(f"unsupported scene version {version}, expected {SCENE_VERSION}")
    nvox = H * W * D
    need = _HEADER.size + n * _VOXEL.itemsize + 2 * nvox + (nvox + 7) // 8
    if len(buf) < need:
        raise TruncatedError(f"truncated scene: {len(buf)} bytes, expected {need}")
    if len(buf) > need:
        raise SceneFormatError(f"trailing bytes: {len(buf)} bytes, expected {need}")
    off = _HEADER.size
    rec = np.frombuffer(buf, dtype=_VOXEL, count=n, offset=off)
    off += n * _VOXEL.itemsize
    labels = np.frombuffer(buf, dtype="<u2", count=nvox, offset=off).reshape(H, W, D)
    off += 2 * nvox
    bits = np.frombuffer(buf, dtype=np.uint8, count=(nvox + 7) // 8, offset=off)
    mask = np.unpackbits(bits, count=nvox, bitorder="big").astype(bool).reshape(H, W, D)
    coords = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.int64)
    grid = SparseVoxelGrid((H, W, D), coords, rec["label"].astype(np.float64)[:, None])
    return Scene(grid, DenseLabelVolume(labels.astype(np.int64), mask), int(ncls))


def save_scene(path, scene: Scene) -> None:
    Path(path).write_bytes(scene_to_bytes(scene))


def load_scene(path) -> Scene:
    return scene_from_bytes(Path(path).read_bytes())


def save_labels(path, volume: DenseLabelVolume) -> None:
    """Write predicted labels as raw u16 LE, x-major (the scene file's dense-label layout)."""
    Path(path).write_bytes(volume.labels.astype("<u2").tobytes(order="C"))


# ---------------------------------------------------------------- benchmark format

def load_remap_table(path=None) -> dict[int, int]:
    """Parse ``raw = mapped`` lines; ``#`` starts a comment.

    Without a path the bundled SemanticKITTI table is used.
    """
    if path is None:
        text = resources.files("swa_voxel.data").joinpath("semantic_kitti_remap.txt").read_text()
    else:
        text = Path(path).read_text()
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            raw, mapped = (int(v) for v in line.split("="))
        except ValueError:
            raise SceneFormatError(f"{path or 'bundled remap table'}:{lineno}: "
                                   f"expected 'raw = mapped', got {line!r}") from None
        table[raw] = mapped
    return table


def remap_labels(raw: np.ndarray, table: dict[int, int]) -> np.ndarray:
    uniq = np.unique(raw)
    missing = [int(u) for u in uniq if int(u) not in table]
    if missing:
        raise SceneFormatError(f"label ids absent from remap table: {missing}")
    lut = np.zeros(int(uniq.max()) + 1 if uniq.size else 1, dtype=np.int64)
    for u in uniq:
        lut[u] = table[int(u)]
    return lut[raw]


def load_benchmark_voxels(label_path, invalid_path, dims=(256, 256, 32),
                          remap: dict[int, int] | None = None) -> DenseLabelVolume:
    """Read a ``.label`` (u16 LE) / ``.invalid`` (packed bits) voxel pair."""
    H, W, D = dims
    nvox = H * W * D
    lab = Path(label_path).read_bytes()
    inv = Path(invalid_path).read_bytes()
    if len(lab) != 2 * nvox:
        raise SceneFormatError(f"{label_path}: expected {2 * nvox} bytes, got {len(lab)}")
    if len(inv) != (nvox + 7) // 8:
        raise SceneFormatError(f"{invalid_path}: expected {(nvox + 7) // 8} bytes, got {len(inv)}")
    raw = np.frombuffer(lab, dtype="<u2").astype(np.int64)
    labels = remap_labels(raw, load_remap_table() if remap is None else remap)
    mask = np.unpackbits(np.frombuffer(inv, dtype=np.uint8), count=nvox, bitorder="big")
    return DenseLabelVolume(labels.reshape(H, W, D), mask.astype(bool).reshape(H, W, D))


def grid_from_labels(dims, coords, labels) -> SparseVoxelGrid:
    return SparseVoxelGrid(dims, coords, np.asarray(labels, dtype=np.float64)[:, None])
