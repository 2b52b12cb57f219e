"""Self-checks used by the CLI and the acceptance suite.

Gradient checks compare backprop against central finite differences over
every parameter entry; the oracle comparison runs the batched SWA block
against the straight-line loop reference in :mod:`swa_voxel.reference`.
"""
from __future__ import annotations

import numpy as np

from . import engine as E
from .engine import ParamStore
from .grid import SparseVoxelGrid, WindowSpec
from .reference import reference_block
from .swa import SWAConfig, block_apply, init_swa_block
from .unet import UNetConfig, init_unet, unet_forward

GRAD_TOL = 1e-4
ORACLE_TOL = 1e-6


def _weighted_sum(out: E.Tensor, seed: int) -> E.Tensor:
    w = np.random.default_rng(seed + 7919).normal(size=out.shape)
    return E.sum_(E.mul(out, E.Tensor(w)))


def _away_from_zero(rng, shape, margin=0.1):
    # keeps relu inputs off the kink so central differences stay valid
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _engine_cases(seed: int):
    """(op name, store, loss fn) per tensor-engine op."""
    rng = np.random.default_rng(seed)
    cases = []

    def case(name, arrays, build):
        st = ParamStore()
        for k, v in arrays.items():
            st.add(k, v)
        cases.append((name, st, lambda s: _weighted_sum(build(s.tensor), seed)))

    n, d = 4, 5
    case("add", {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(d,))},
         lambda t: E.add(t("a"), t("b")))
    case("sub", {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(n, 1))},
         lambda t: E.sub(t("a"), t("b")))
    case("mul", {"a": rng.normal(size=(n, d)), "b": rng.normal(size=(1, d))},
         lambda t: E.mul(t("a"), t("b")))
    case("scale", {"a": rng.normal(size=(n, d))}, lambda t: E.scale(t("a"), 0.37))
    case("relu", {"a": _away_from_zero(rng, (n, d))}, lambda t: E.relu(t("a")))
    case("gelu", {"a": 2 * rng.normal(size=(n, d))}, lambda t: E.gelu(t("a")))
    case("reshape", {"a": rng.normal(size=(n, d))}, lambda t: E.reshape(t("a"), (d, n)))
    case("transpose", {"a": rng.normal(size=(2, n, d))}, lambda t: E.transpose(t("a"), (2, 0, 1)))
    case("concat", {"a": rng.normal(size=(n, 2)), "b": rng.normal(size=(n, 3))},
         lambda t: E.concat([t("a"), t("b")], axis=-1))
    case("sum", {"a": rng.normal(size=(n, d))}, lambda t: E.sum_(t("a"), axis=0, keepdims=True))
    idx = np.array([2, -1, 0, 2, 3, -1])
    case("gather_rows", {"a": rng.normal(size=(n, d))}, lambda t: E.gather_rows(t("a"), idx))
    case("matmul", {"a": rng.normal(size=(3, n, d)), "b": rng.normal(size=(3, d, 2))},
         lambda t: E.matmul(t("a"), t("b")))
    case("linear", {"x": rng.normal(size=(n, d)), "W": rng.normal(size=(d, 3)), "b": rng.normal(size=(3,))},
         lambda t: E.linear(t("x"), t("W"), t("b")))
    case("layer_norm", {"x": rng.normal(size=(n, d)), "g": 1 + 0.1 * rng.normal(size=(d,)),
                        "b": rng.normal(size=(d,))},
         lambda t: E.layer_norm(t("x"), t("g"), t("b")))
    case("softmax", {"e": rng.normal(size=(n, d))}, lambda t: E.softmax(t("e")))
    mask = rng.random((n, d)) < 0.6
    mask[0] = False           # fully masked row
    mask[1, 0] = True
    case("masked_softmax", {"e": rng.normal(size=(n, d))}, lambda t: E.masked_softmax(t("e"), mask))
    target = rng.integers(0, d, size=n)
    valid = np.array([True, False, True, True])
    st = ParamStore()
    st.add("z", rng.normal(size=(n, d)))
    cases.append(("masked_cross_entropy", st,
                  lambda s: E.masked_cross_entropy(s.tensor("z"), target, valid)))
    return cases


def gradcheck_engine(seeds=range(20)) -> dict:
    """Max relative gradient error per op over ``seeds``."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, st, fn in _engine_cases(seed):
            worst[name] = max(worst.get(name, 0.0), E.finite_diff_check(fn, st))
    return worst


def _perturbed(store: ParamStore, rng, scale: float = 0.1) -> None:
    # moves gains/gamma away from their symmetric init so every path is exercised
    for n in store.names():
        v = store.value(n)
        store.set_value(n, v + scale * rng.normal(size=v.shape))


def gradcheck_block(seeds=range(20), variant: str = "A", dims=(4, 4, 4), dim: int = 8,
                    heads: int = 2, density: float = 0.3) -> float:
    """Max relative error of one SWA block, input features included; strides alternate 1/2."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cfg = SWAConfig(dim, heads, variant=variant)
        st = ParamStore()
        init_swa_block(st, rng, "b", cfg)
        _perturbed(st, rng)
        coords = np.argwhere(rng.random(dims) < density)
        if len(coords) == 0:
            coords = np.zeros((1, 3), dtype=np.int64)
        st.add("x", rng.normal(size=(len(coords), dim)))
        spec = WindowSpec(cfg.window, 1 + seed % 2, 1)

        def fn(s):
            _, out = block_apply(s, "b", cfg, coords, s.tensor("x"), dims, spec)
            return _weighted_sum(out, seed)

        worst = max(worst, E.finite_diff_check(fn, st))
    return worst


def gradcheck_unet(seeds=range(3), dims=(8, 8, 8), n_active: int = 3, variant: str = "A") -> float:
    """Max relative error of a 2-level U-Net (d=8, M=2) through the masked loss."""
    worst = 0.0
    for seed in seeds:
        rng = np.random.default_rng(seed)
        cfg = UNetConfig(levels=2, dim=8, heads=2, num_classes=4, variant=variant)
        st = init_unet(cfg, seed)
        _perturbed(st, rng, 0.05)
        flat = rng.choice(int(np.prod(dims)), size=n_active, replace=False)
        coords = np.stack(np.unravel_index(np.sort(flat), dims), axis=1)
        labels = rng.integers(1, cfg.num_classes, size=n_active)
        grid = SparseVoxelGrid(dims, coords, labels[:, None].astype(float))
        target = rng.integers(0, cfg.num_classes, size=int(np.prod(dims)))
        valid = rng.random(target.size) < 0.7

        def fn(s):
            out = unet_forward(s, cfg, grid)
            return E.masked_cross_entropy(out.dense_logits(), target, valid)

        worst = max(worst, E.finite_diff_check(fn, st))
    return worst


def random_oracle_case(rng):
    """One random (store, config, grid, spec) with side <= 8, d in {8,16}, M in {1,2,4}."""
    dims = tuple(int(v) for v in rng.integers(2, 9, size=3))
    dim = int(rng.choice([8, 16]))
    heads = int(rng.choice([1, 2, 4]))
    stride = int(rng.choice([1, 2]))
    cfg = SWAConfig(dim, heads, scale_energies=bool(rng.random() < 0.8))
    st = ParamStore()
    init_swa_block(st, rng, "b", cfg)
    _perturbed(st, rng)
    mask = rng.random(dims) < rng.uniform(0.05, 0.5)
    coords = np.argwhere(mask)
    feats = rng.normal(size=(len(coords), dim))
    return st, cfg, SparseVoxelGrid(dims, coords, feats), WindowSpec(cfg.window, stride, 1)


def oracle_case_error(st, cfg, grid, spec) -> float:
    with E.no_grad():
        pos, out = block_apply(st, "b", cfg, grid.coords, E.Tensor(grid.features), grid.dims, spec)
    if len(pos) == 0:
        return 0.0
    ref = reference_block(dict(st.items()), "b", grid.coords, grid.features, grid.dims, cfg.window,
                          spec.stride, spec.padding, cfg.heads, [tuple(p) for p in pos],
                          scale_energies=cfg.scale_energies)
    R = np.stack([ref[tuple(p)] for p in pos])
    return float(np.abs(R - out.data).max() / max(1.0, np.abs(R).max()))


def oracle_compare(cases: int = 100, seed: int = 0) -> float:
    """Max relative error of windowed SWA vs. the loop reference over random cases."""
    rng = np.random.default_rng(seed)
    return max((oracle_case_error(*random_oracle_case(rng)) for _ in range(cases)), default=0.0)
