"""Sparse window attention (SWA) for semantic occupancy prediction on voxel grids.

A small numpy stack: a reverse-mode tensor engine, sparse voxel grids with
window enumeration, the SWA operator, a sparse U-Net built from it, and
training/evaluation utilities.
"""
from .engine import ParamStore, Tensor, backward, finite_diff_check, no_grad
from .grid import DenseLabelVolume, SparseVoxelGrid, WindowSpec, enumerate_windows, slot_index
from .metrics import EvalReport, compute_iou, compute_miou
from .scene_io import Scene, load_scene, save_scene
from .swa import SWAConfig, swa_block_forward, swa_window_forward
from .synth import synth_scene
from .train import TrainConfig, evaluate, poly_lr, train
from .unet import UNetConfig, init_unet, unet_forward

__version__ = "0.1.0"
