"""Single-window sparse attention on a hand-made 3x3x3 neighbourhood.

Builds a tiny grid, runs one SWA block at stride 1 and compares the
vectorised result with the slow loop reference. Also shows the effect of
empty-window skipping on the number of placements visited.

    python3 demos/01_window_attention.py
"""
import numpy as np

from swa_voxel import engine as E
from swa_voxel.grid import SparseVoxelGrid, WindowSpec, active_positions, all_positions
from swa_voxel.reference import reference_block
from swa_voxel.swa import SWAConfig, block_apply, init_swa_block

rng = np.random.default_rng(0)
dims = (6, 6, 4)
coords = np.array([[1, 1, 1], [1, 2, 1], [2, 2, 1], [4, 4, 2]])
grid = SparseVoxelGrid(dims, coords, rng.normal(size=(len(coords), 8)))

cfg = SWAConfig(8, 2)
store = E.ParamStore()
init_swa_block(store, rng, "b", cfg)
spec = WindowSpec(cfg.window, 1, 1)

print(f"{len(grid)} active voxels in a {dims} grid")
print(f"placements: {len(all_positions(spec.output_dims(dims)))} total, "
      f"{len(active_positions(grid, spec))} touch an active voxel")

with E.no_grad():
    pos, out = block_apply(store, "b", cfg, grid.coords, E.Tensor(grid.features), dims, spec)
ref = reference_block(dict(store.items()), "b", grid.coords, grid.features, dims, cfg.window,
                      spec.stride, spec.padding, cfg.heads, [tuple(p) for p in pos])
err = max(np.abs(ref[tuple(p)] - o).max() for p, o in zip(pos, out.data))
print(f"output rows {out.shape}, max diff vs loop reference {err:.2e}")
