"""Train the three variants briefly on synthetic rooms and compare mIoU.

A scaled-down version of the ablation run in the acceptance tests. It takes
about half a minute on one core.

    python3 demos/02_train_small.py
"""
from swa_voxel.synth import synth_scene
from swa_voxel.train import TrainConfig, evaluate, train
from swa_voxel.unet import UNetConfig

dims = (16, 16, 8)
train_set = [synth_scene(2000 + i, dims) for i in range(8)]
test_set = [synth_scene(9000 + i, dims) for i in range(4)]
tc = TrainConfig(iterations=60, optimizer="adam", base_lr=0.002, seed=0)

for variant in "ABC":
    cfg = UNetConfig(levels=4, dim=16, heads=2, variant=variant)
    res = train(cfg, tc, train_set)
    rep = evaluate(res.store, cfg, test_set)
    print(f"variant {variant}: final loss {res.history[-1].loss:.3f}, "
          f"held-out IoU {rep.iou:.3f}, mIoU {rep.miou:.3f}")
