"""Loss, learning-rate schedule, optimisers and the training loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .checkpoint import save_checkpoint
from .engine import ParamStore, StateError, Tensor
from .grid import DenseLabelVolume
from .metrics import ConfusionAccumulator, EvalReport
from .scene_io import Scene
from .unet import UNetConfig, init_unet, unet_forward

log = logging.getLogger(__name__)


class TrainConfigError(ValueError):
    pass


def masked_cross_entropy(logits: Tensor, target: DenseLabelVolume) -> Tensor:
    """Mean cross-entropy over voxels not flagged unknown.

    ``logits`` is ``(H*W*D, C+1)`` in x-major voxel order.
    """
    n = int(np.prod(target.dims))
    if logits.shape[0] != n:
        raise E.ShapeError(f"logits rows {logits.shape[0]} != voxel count {n}")
    return E.masked_cross_entropy(logits, target.labels.ravel(), ~target.unknown_mask.ravel())


def poly_lr(it: int, max_iter: int, base: float = 0.006, power: float = 0.9) -> float:
    if max_iter <= 0:
        raise TrainConfigError("max_iter must be positive")
    if not 0 <= it <= max_iter:
        raise TrainConfigError(f"iteration {it} outside [0, {max_iter}]")
    return base * (1.0 - it / max_iter) ** power


def _require_grads(store: ParamStore) -> None:
    if not store.grads_ready:
        raise StateError("optimizer step without gradients: run backward first")


class SGD:
    """SGD with heavy-ball momentum: ``v = mu*v + g``, ``p -= lr*v``."""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, lr: float) -> None:
        _require_grads(store)
        for name in store.names():
            if not store.trainable(name):
                continue
            g = store.grad(name)
            p = store.value(name)
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v
        store.zero_grad()


class Adam:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8):
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, store: ParamStore, lr: float) -> None:
        _require_grads(store)
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name in store.names():
            if not store.trainable(name):
                continue
            g = store.grad(name)
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            store.value(name)[...] -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        store.zero_grad()


def optimizer_step(store: ParamStore, lr: float, optimizer=None):
    """One SGD-momentum step (fresh state unless ``optimizer`` is given)."""
    opt = optimizer or SGD()
    opt.step(store, lr)
    return opt


def make_optimizer(kind: str, momentum: float = 0.9, weight_decay: float = 0.0):
    if kind == "sgd":
        return SGD(momentum, weight_decay)
    if kind == "adam":
        return Adam()
    raise TrainConfigError(f"unknown optimizer {kind!r}")


@dataclass
class TrainConfig:
    epochs: int = 50
    base_lr: float = 0.006
    power: float = 0.9
    optimizer: str = "sgd"
    momentum: float = 0.9
    weight_decay: float = 0.0
    batch_size: int = 1
    seed: int = 0
    iterations: int | None = None     # overrides epochs x batches when set
    shuffle: bool = True

    def __post_init__(self):
        if self.base_lr <= 0:
            raise TrainConfigError("base_lr must be > 0")
        if self.epochs < 0 or (self.iterations is not None and self.iterations < 0):
            raise TrainConfigError("epochs/iterations must be non-negative")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    iou: float
    miou: float

    def line(self) -> str:
        return f"{self.epoch},{self.loss:.17g},{self.iou:.17g},{self.miou:.17g}"


@dataclass
class TrainResult:
    store: ParamStore
    history: list = field(default_factory=list)
    iterations: int = 0

    def metrics_log(self) -> str:
        return "".join(m.line() + "\n" for m in self.history)


def scene_loss(store: ParamStore, cfg: UNetConfig, scene: Scene):
    out = unet_forward(store, cfg, scene.input)
    return masked_cross_entropy(out.dense_logits(), scene.target), out


def train(cfg: UNetConfig, tcfg: TrainConfig, scenes: list, store: ParamStore | None = None,
          checkpoint_path=None, log_path=None, meta: dict | None = None) -> TrainResult:
    """Train on ``scenes``; deterministic for a fixed seed.

    Per-epoch metrics come from the forward passes made during that epoch.
    """
    if not scenes:
        raise TrainConfigError("training set is empty")
    store = store if store is not None else init_unet(cfg, tcfg.seed)
    n_batches = math.ceil(len(scenes) / tcfg.batch_size)
    max_iter = tcfg.iterations if tcfg.iterations is not None else tcfg.epochs * n_batches
    epochs = math.ceil(max_iter / n_batches) if max_iter else 0
    opt = make_optimizer(tcfg.optimizer, tcfg.momentum, tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    result = TrainResult(store)
    it = 0
    for epoch in range(epochs):
        order = rng.permutation(len(scenes)) if tcfg.shuffle else np.arange(len(scenes))
        acc = ConfusionAccumulator(cfg.num_classes)
        losses = []
        for b in range(n_batches):
            if it >= max_iter:
                break
            batch = [scenes[i] for i in order[b * tcfg.batch_size:(b + 1) * tcfg.batch_size]]
            store.zero_grad()
            for scene in batch:
                loss, out = scene_loss(store, cfg, scene)
                E.backward(loss, seed=np.array(1.0 / len(batch)), store=store)
                losses.append(float(loss.data))
                acc.update(out.predict(), scene.target)
            opt.step(store, poly_lr(it, max_iter, tcfg.base_lr, tcfg.power))
            it += 1
        rep = acc.report()
        m = EpochMetrics(epoch, float(np.mean(losses)), rep.iou, rep.miou)
        result.history.append(m)
        log.info("epoch %d loss %.5f iou %.4f miou %.4f", epoch, m.loss, m.iou, m.miou)
    result.iterations = it
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, store, meta if meta is not None else cfg.as_dict())
    if log_path is not None:
        Path(log_path).write_text(result.metrics_log())
    return result


def predict_scene(store: ParamStore, cfg: UNetConfig, scene: Scene) -> DenseLabelVolume:
    with E.no_grad():
        out = unet_forward(store, cfg, scene.input)
    return DenseLabelVolume(out.predict(), np.zeros(scene.dims, bool))


def evaluate(store: ParamStore, cfg: UNetConfig, scenes: list) -> EvalReport:
    """Dataset-level report from the summed confusion matrix."""
    acc = ConfusionAccumulator(cfg.num_classes)
    for scene in scenes:
        acc.update(predict_scene(store, cfg, scene).labels, scene.target)
    return acc.report()
