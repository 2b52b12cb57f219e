"""Throughput of a stride-1 SWA block with and without empty-window skipping."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import engine as E
from .engine import ParamStore
from .grid import SparseVoxelGrid, WindowSpec, active_positions
from .swa import SWAConfig, block_apply, init_swa_block
from .synth import SynthConfig, surface_mask, synth_scene


@dataclass
class BenchRow:
    density: float
    active: int
    windows_total: int
    windows_visited: int
    time_skip: float
    time_dense: float

    @property
    def windows_skipped(self) -> int:
        return self.windows_total - self.windows_visited

    @property
    def speedup(self) -> float:
        return self.time_dense / self.time_skip if self.time_skip > 0 else float("inf")


def bench_grid(dims, density: float, dim: int, seed: int = 0, layout: str = "surface") -> SparseVoxelGrid:
    """Random grid with ``round(density * H*W*D)`` active voxels.

    ``surface`` draws them from the surfaces of a synthetic scene (topping
    up uniformly if the scene is too small); ``uniform`` draws from the
    whole volume.
    """
    rng = np.random.default_rng(seed)
    n_total = int(np.prod(dims))
    n = int(round(density * n_total))
    if layout == "surface" and min(dims) >= 8:
        scene = synth_scene(seed, dims, SynthConfig(keep_prob=1.0, occlusion=False))
        surf = np.flatnonzero(surface_mask(scene.target.labels > 0).ravel())
        pick = rng.choice(surf, size=min(n, surf.size), replace=False)
        if pick.size < n:
            rest = np.setdiff1d(np.arange(n_total), pick)
            pick = np.concatenate([pick, rng.choice(rest, size=n - pick.size, replace=False)])
    elif layout in ("surface", "uniform"):
        pick = rng.choice(n_total, size=n, replace=False)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    coords = np.stack(np.unravel_index(np.sort(pick), dims), axis=1)
    return SparseVoxelGrid(dims, coords, rng.normal(size=(n, dim)))


def _timed(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_skipping(dims=(64, 64, 16), densities=(0.0, 0.01, 0.05, 0.2), dim: int = 32,
                   heads: int = 2, seed: int = 0, repeats: int = 3, layout: str = "surface"):
    cfg = SWAConfig(dim, heads)
    store = ParamStore()
    init_swa_block(store, np.random.default_rng(seed), "bench", cfg)
    spec = WindowSpec(cfg.window, 1, 1)
    rows = []
    for density in densities:
        grid = bench_grid(dims, density, dim, seed, layout)
        feats = E.Tensor(grid.features)

        def run(skip):
            with E.no_grad():
                block_apply(store, "bench", cfg, grid.coords, feats, grid.dims, spec, None, skip)

        visited = active_positions(grid, spec).shape[0]
        rows.append(BenchRow(density, len(grid), int(np.prod(spec.output_dims(dims))), visited,
                             _timed(lambda: run(True), repeats), _timed(lambda: run(False), repeats)))
    return rows


def format_rows(rows) -> str:
    out = [f"{'density':>8} {'active':>7} {'visited':>8} {'skipped':>8} {'skip%':>7} "
           f"{'t_skip':>9} {'t_dense':>9} {'speedup':>8}"]
    for r in rows:
        pct = 100.0 * r.windows_skipped / r.windows_total
        out.append(f"{r.density:8.4f} {r.active:7d} {r.windows_visited:8d} {r.windows_skipped:8d} "
                   f"{pct:6.2f}% {r.time_skip:9.4f} {r.time_dense:9.4f} {r.speedup:8.2f}")
    return "\n".join(out)
