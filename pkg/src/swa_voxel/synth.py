"""Procedural street-like scenes with a virtual range sensor.

The target is a dense labelled volume (ground, walls, boxes, poles and
ellipsoid blobs). The input keeps a random fraction of the visible surface
voxels; everything hidden from the sensor is dropped and flagged unknown.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import DenseLabelVolume
from .scene_io import Scene, grid_from_labels

EMPTY, GROUND, WALL, BOX, POLE, BLOB = range(6)
CLASS_NAMES = ("empty", "ground", "wall", "box", "pole", "vehicle-blob")


class SynthConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    num_classes: int = 6          # label values including empty
    walls: tuple = (0, 1)
    boxes: tuple = (1, 3)
    poles: tuple = (1, 3)
    blobs: tuple = (1, 2)
    keep_prob: float = 0.7
    occlusion: bool = True
    sensor_origin: tuple | None = None   # continuous coords; default centre, 3/4 height
    ray_step: float = 0.25


def _count(rng, lo_hi):
    lo, hi = lo_hi
    return int(rng.integers(lo, hi + 1))


def _paint_target(rng, dims, cfg: SynthConfig, clear_xy) -> np.ndarray:
    H, W, D = dims
    vol = np.zeros(dims, dtype=np.int64)
    vol[:, :, 0] = GROUND
    cx, cy = clear_xy

    def far_from_sensor(x0, x1, y0, y1):
        # keep a 2-voxel clear zone around the sensor column
        return x1 < cx - 2 or x0 > cx + 2 or y1 < cy - 2 or y0 > cy + 2

    for _ in range(_count(rng, cfg.walls)):
        length = int(rng.integers(H // 4, H // 2 + 1))
        height = int(rng.integers(2, D))
        for _try in range(20):
            if rng.random() < 0.5:
                x0 = int(rng.integers(0, H - length + 1)); y0 = int(rng.integers(0, W))
                xs, ys = slice(x0, x0 + length), slice(y0, y0 + 1)
                box = (x0, x0 + length - 1, y0, y0)
            else:
                y0 = int(rng.integers(0, W - length + 1)); x0 = int(rng.integers(0, H))
                xs, ys = slice(x0, x0 + 1), slice(y0, y0 + length)
                box = (x0, x0, y0, y0 + length - 1)
            if far_from_sensor(*box):
                vol[xs, ys, 1:1 + height] = WALL
                break

    for _ in range(_count(rng, cfg.boxes)):
        sx, sy = (int(v) for v in rng.integers(2, 6, size=2))
        sz = int(rng.integers(2, min(5, D - 1) + 1))
        for _try in range(20):
            x0 = int(rng.integers(0, H - sx + 1)); y0 = int(rng.integers(0, W - sy + 1))
            if far_from_sensor(x0, x0 + sx - 1, y0, y0 + sy - 1):
                vol[x0:x0 + sx, y0:y0 + sy, 1:1 + sz] = BOX
                break

    for _ in range(_count(rng, cfg.poles)):
        height = int(rng.integers(max(2, D // 2), D))
        for _try in range(20):
            x0 = int(rng.integers(0, H)); y0 = int(rng.integers(0, W))
            if far_from_sensor(x0, x0, y0, y0):
                vol[x0, y0, 1:1 + height] = POLE
                break

    gx, gy, gz = np.meshgrid(np.arange(H) + 0.5, np.arange(W) + 0.5, np.arange(D) + 0.5,
                             indexing="ij")
    for _ in range(_count(rng, cfg.blobs)):
        rx = rng.uniform(2.0, 3.5); ry = rng.uniform(1.5, 2.5); rz = rng.uniform(1.0, 2.0)
        for _try in range(20):
            x0 = rng.uniform(rx, H - rx); y0 = rng.uniform(ry, W - ry)
            if far_from_sensor(x0 - rx, x0 + rx, y0 - ry, y0 + ry):
                z0 = 1.0 + rz
                inside = ((gx - x0) / rx) ** 2 + ((gy - y0) / ry) ** 2 + ((gz - z0) / rz) ** 2 <= 1.0
                inside[:, :, 0] = False
                vol[inside] = BLOB
                break
    return vol


def surface_mask(occupied: np.ndarray) -> np.ndarray:
    """Occupied voxels with at least one in-bounds empty face neighbour."""
    surf = np.zeros_like(occupied)
    for ax in range(3):
        for shift in (1, -1):
            nb_empty = np.zeros_like(occupied)
            src = [slice(None)] * 3
            dst = [slice(None)] * 3
            if shift == 1:
                src[ax], dst[ax] = slice(1, None), slice(None, -1)
            else:
                src[ax], dst[ax] = slice(None, -1), slice(1, None)
            nb_empty[tuple(dst)] = ~occupied[tuple(src)]
            surf |= nb_empty
    return surf & occupied


def occlusion_mask(occupied: np.ndarray, sensor, step: float = 0.25) -> np.ndarray:
    """True where the segment from the sensor to a voxel crosses another occupied voxel.

    The ray targets the voxel's closest point to the sensor, so faces seen
    edge-on by the sensor are not occluded by their coplanar neighbours.
    """
    dims = np.array(occupied.shape)
    s = np.asarray(sensor, dtype=float)
    all_idx = np.argwhere(np.ones(occupied.shape, bool))
    out = np.zeros(all_idx.shape[0], dtype=bool)
    for lo in range(0, all_idx.shape[0], 4096):
        idx = all_idx[lo:lo + 4096]
        seg = np.clip(s, idx, idx + 1.0) - s
        n_steps = int(np.ceil(np.linalg.norm(seg, axis=1).max() / step)) + 1
        t = np.linspace(0.0, 1.0, n_steps, endpoint=False)
        cells = np.floor(s[None, None, :] + t[None, :, None] * seg[:, None, :]).astype(np.int64)
        inb = ((cells >= 0) & (cells < dims)).all(axis=-1)
        cc = np.clip(cells, 0, dims - 1)
        hit = occupied[cc[..., 0], cc[..., 1], cc[..., 2]] & inb
        self_cell = (cells == idx[:, None, :]).all(axis=-1)
        out[lo:lo + 4096] = (hit & ~self_cell).any(axis=1)
    return out.reshape(occupied.shape)


def synth_scene(seed: int, dims=(32, 32, 8), config: SynthConfig | None = None) -> Scene:
    """Deterministically generate one ``Scene`` for ``(seed, dims, config)``."""
    cfg = config or SynthConfig()
    dims = tuple(int(v) for v in dims)
    if len(dims) != 3 or min(dims) < 8:
        raise SynthConfigError(f"synthetic scene dims must each be >= 8, got {dims}")
    if cfg.num_classes != 6:
        raise SynthConfigError("the synthetic generator paints exactly 6 labels (incl. empty)")
    if not 0.0 <= cfg.keep_prob <= 1.0:
        raise SynthConfigError(f"keep_prob {cfg.keep_prob} outside [0, 1]")
    H, W, D = dims
    sensor = np.array(cfg.sensor_origin if cfg.sensor_origin is not None
                      else (H / 2, W / 2, 0.75 * D), dtype=float)
    rng = np.random.default_rng(seed)
    labels = _paint_target(rng, dims, cfg, (int(sensor[0]), int(sensor[1])))
    occupied = labels > 0
    if cfg.occlusion:
        unknown = occlusion_mask(occupied, sensor, cfg.ray_step)
    else:
        unknown = np.zeros(dims, bool)
    observed = surface_mask(occupied) & ~unknown
    keep = rng.random(dims) < cfg.keep_prob
    coords = np.argwhere(observed & keep)
    grid = grid_from_labels(dims, coords, labels[tuple(coords.T)])
    return Scene(grid, DenseLabelVolume(labels, unknown), cfg.num_classes)
