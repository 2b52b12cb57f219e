import itertools

import numpy as np
import pytest

from swa_voxel import engine as E
from swa_voxel.engine import Tensor
from swa_voxel.grid import SparseVoxelGrid, WindowSpec, dilate_coords
from swa_voxel.reference import reference_block
from swa_voxel.unet import (EMPTY_LOGIT, ConfigError, Level, UNetConfig, decode_stage, embed_input,
                            encode_input, encode_stage, init_unet, sparse_conv, sparse_conv_baseline_forward,
                            unet_forward)


def label_grid(dims, coords, labels):
    return SparseVoxelGrid(dims, np.asarray(coords).reshape(-1, 3), np.asarray(labels, float)[:, None])


def random_label_grid(dims, density, num_classes, seed):
    rng = np.random.default_rng(seed)
    coords = np.argwhere(rng.random(dims) < density)
    return label_grid(dims, coords, rng.integers(1, num_classes, len(coords)))


def random_level(dims, density, d, seed):
    rng = np.random.default_rng(seed)
    coords = np.argwhere(rng.random(dims) < density)
    return Level(coords, Tensor(rng.normal(size=(len(coords), d))), tuple(dims))


TINY = UNetConfig(levels=2, dim=8, heads=2, num_classes=4)


def perturbed(cfg, seed, scale=0.1):
    st = init_unet(cfg, seed)
    rng = np.random.default_rng(seed)
    for n in st.names():
        v = st.value(n)
        st.set_value(n, v + scale * rng.normal(size=v.shape))
    return st


# embedding ------------------------------------------------------------------------

def test_embed_zero_width_error():
    st = init_unet(TINY)
    g = SparseVoxelGrid((4, 4, 4), np.zeros((0, 3)), np.zeros((0, 0)))
    with pytest.raises(ConfigError):
        embed_input(st, TINY, g)


def test_embed_identity():
    cfg = UNetConfig(levels=2, dim=7, heads=1, num_classes=6)
    st = init_unet(cfg)
    st.set_value("embed.W", np.eye(7))
    st.set_value("embed.b", np.zeros(7))
    g = random_label_grid((4, 4, 4), 0.3, 6, 0)
    x = SparseVoxelGrid(g.dims, g.coords, encode_input(g, 6))
    lv = embed_input(st, cfg, x)
    assert np.array_equal(lv.feats.data, x.features)
    assert np.array_equal(lv.coords, x.coords)


def test_embed_matmul_oracle():
    st = perturbed(TINY, 1)
    g = random_label_grid((4, 4, 4), 0.3, 4, 1)
    x = encode_input(g, 4)
    lv = embed_input(st, TINY, SparseVoxelGrid(g.dims, g.coords, x))
    W, b = st.value("embed.W"), st.value("embed.b")
    ref = np.array([[sum(r[i] * W[i, j] for i in range(len(r))) + b[j] for j in range(8)] for r in x])
    assert np.allclose(lv.feats.data, ref, atol=1e-13)


def test_encode_input_one_hot_plus_occupancy():
    g = label_grid((2, 2, 2), [[0, 0, 0], [1, 1, 1]], [2, 5])
    assert encode_input(g, 6).tolist() == [[0, 0, 1, 0, 0, 0, 1], [0, 0, 0, 0, 0, 1, 1]]


# encoder --------------------------------------------------------------------------

def test_encode_empty_level():
    st = init_unet(TINY)
    out = encode_stage(st, TINY, 1, Level(np.zeros((0, 3), np.int64), Tensor(np.zeros((0, 8))), (8, 8, 8)))
    assert len(out) == 0 and out.dims == (4, 4, 4)


@pytest.mark.parametrize("voxel", [(0, 0, 0), (3, 4, 5), (7, 7, 7), (2, 2, 2)])
def test_encode_single_voxel_coarse_set(voxel):
    st = init_unet(TINY)
    lv = Level(np.array([voxel]), Tensor(np.ones((1, 8))), (8, 8, 8))
    out = encode_stage(st, TINY, 1, lv)
    brute = [p for p in itertools.product(range(4), repeat=3)
             if all(2 * pi - 1 <= v <= 2 * pi + 1 for pi, v in zip(p, voxel))]
    assert [tuple(c) for c in out.coords] == brute
    assert 1 <= len(brute) <= 8


def test_encode_full_grid():
    st = init_unet(TINY)
    coords = np.argwhere(np.ones((8, 8, 8), bool))
    out = encode_stage(st, TINY, 1, Level(coords, Tensor(np.ones((512, 8))), (8, 8, 8)))
    assert len(out) == 64 and out.dims == (4, 4, 4)


def test_encode_level0_keeps_active_set():
    st = init_unet(TINY)
    lv = random_level((8, 8, 8), 0.1, 8, 2)
    out = encode_stage(st, TINY, 0, lv)
    assert np.array_equal(out.coords, lv.coords) and out.dims == (8, 8, 8)


def test_encode_odd_dims_rejected():
    st = init_unet(TINY)
    with pytest.raises(ValueError):
        encode_stage(st, TINY, 1, Level(np.array([[0, 0, 0]]), Tensor(np.ones((1, 8))), (5, 4, 4)))


# decoder --------------------------------------------------------------------------

def _empty(dims):
    return Level(np.zeros((0, 3), np.int64), Tensor(np.zeros((0, 8))), dims)


def test_decode_empty():
    st = init_unet(TINY)
    out = decode_stage(st, TINY, 0, _empty((4, 4, 4)), _empty((8, 8, 8)))
    assert len(out) == 0 and out.dims == (8, 8, 8)


def test_decode_single_seed_expands_to_27():
    st = init_unet(TINY)
    coarse = Level(np.array([[2, 2, 2]]), Tensor(np.ones((1, 8))), (4, 4, 4))
    out = decode_stage(st, TINY, 0, coarse, _empty((8, 8, 8)))
    assert len(out) == 27
    assert {tuple(c) for c in out.coords} == set(itertools.product(range(3, 6), repeat=3))


def test_decode_dim_mismatch():
    st = init_unet(TINY)
    with pytest.raises(ConfigError):
        decode_stage(st, TINY, 0, _empty((3, 4, 4)), _empty((8, 8, 8)))


def test_decode_matches_reference():
    st = perturbed(TINY, 3)
    coarse = random_level((4, 4, 4), 0.2, 8, 3)
    skip = random_level((8, 8, 8), 0.05, 8, 4)
    out = decode_stage(st, TINY, 0, coarse, skip)
    P = dict(st.items())
    fine = {}
    for c, f in zip(coarse.coords * 2, coarse.feats.data):
        fine[tuple(c)] = [f, np.zeros(8)]
    for c, f in zip(skip.coords, skip.feats.data):
        fine.setdefault(tuple(c), [np.zeros(8), None])[1] = f
    src = sorted(fine)
    fused = np.array([np.concatenate(fine[c]) @ P["fuse0.W"] + P["fuse0.b"] for c in src])
    cand = dilate_coords(np.array(src), (8, 8, 8), 1)
    assert np.array_equal(out.coords, cand)       # every candidate window holds a source voxel
    ref = reference_block(P, "block0.dec", np.array(src), fused, (8, 8, 8), (3, 3, 3), 1, 1, 2,
                          [tuple(c) for c in cand])
    R = np.stack([ref[tuple(c)] for c in cand])
    assert np.abs(R - out.feats.data).max() / np.abs(R).max() <= 1e-12


# full forward ------------------------------------------------------------------------

def test_forward_empty_input_all_empty():
    cfg = UNetConfig(levels=3, dim=8, heads=2)
    st = init_unet(cfg)
    out = unet_forward(st, cfg, label_grid((8, 8, 8), np.zeros((0, 3)), []))
    assert (out.predict() == 0).all()
    dl = out.dense_logits().data
    assert dl.shape == (512, 6) and (dl[:, 0] == EMPTY_LOGIT).all()


def test_forward_zero_head_bias_empty():
    cfg = UNetConfig(levels=3, dim=8, heads=2)
    st = init_unet(cfg)
    st.set_value("head.W", np.zeros_like(st.value("head.W")))
    st.set_value("head.b", np.array([1.0, 0, 0, 0, 0, 0]))
    out = unet_forward(st, cfg, random_label_grid((8, 8, 8), 0.1, 6, 5))
    assert len(out.coords) > 0 and (out.predict() == 0).all()


def test_forward_structure_and_totality():
    cfg = UNetConfig(levels=4, dim=8, heads=2)
    st = init_unet(cfg)
    g = random_label_grid((16, 16, 8), 0.03, 6, 6)
    out = unet_forward(st, cfg, g, keep_levels=True)
    assert [lv.dims for lv in out.encoder] == [(16, 16, 8), (8, 8, 4), (4, 4, 2), (2, 2, 1)]
    assert [lv.dims for lv in out.decoder] == [(4, 4, 2), (8, 8, 4), (16, 16, 8)]
    coarse = out.encoder[-1]
    for lv in out.decoder:
        active = {tuple(c) for c in lv.coords}
        assert {tuple(c) for c in coarse.coords * 2} <= active
        coarse = lv
    dl = out.dense_logits().data
    assert dl.shape == (16 * 16 * 8, 6) and np.isfinite(dl).all()
    act = out.active_mask().ravel()
    assert (dl[~act, 0] == EMPTY_LOGIT).all() and (dl[~act, 1:] == 0).all()
    # the active set already carries the input voxels
    assert out.active_mask()[tuple(g.coords.T)].all()


def test_forward_rejects_indivisible_dims():
    cfg = UNetConfig(levels=4)
    with pytest.raises(ConfigError):
        unet_forward(init_unet(cfg), cfg, label_grid((12, 12, 8), [[0, 0, 0]], [1]))


def test_forward_permutation_invariance():
    cfg = UNetConfig(levels=3, dim=8, heads=2)
    st = perturbed(cfg, 7)
    g = random_label_grid((8, 8, 8), 0.1, 6, 7)
    a = unet_forward(st, cfg, g).dense_logits().data
    b = unet_forward(st, cfg, g.permuted(np.random.default_rng(1))).dense_logits().data
    assert np.abs(a - b).max() <= 1e-12


@pytest.mark.parametrize("variant", ["A", "B", "C"])
def test_forward_skip_equivalence(variant):
    cfg = UNetConfig(levels=3, dim=8, heads=2, variant=variant)
    st = perturbed(cfg, 8)
    g = random_label_grid((8, 8, 8), 0.05, 6, 8)
    a = unet_forward(st, cfg, g, skip_empty=True)
    b = unet_forward(st, cfg, g, skip_empty=False)
    assert np.array_equal(a.coords, b.coords)
    assert np.abs(a.logits.data - b.logits.data).max() <= 1e-12


def test_parameter_naming():
    names = init_unet(UNetConfig(levels=4, dim=8, heads=2)).names()
    assert "block0.enc.gamma" in names and "block2.dec.gamma" in names
    assert "block3.enc.gamma" in names and "block3.dec.gamma" not in names
    assert len(names) == len(set(names))
    c = init_unet(UNetConfig(levels=2, dim=8, heads=2, variant="C")).names()
    assert "block0.enc.W" in c and not any("gamma" in n for n in c)
    b = init_unet(UNetConfig(levels=2, dim=8, heads=2, variant="B")).names()
    assert "block0.enc.qslot.W" in b


def test_unet_gradcheck_tiny():
    cfg = UNetConfig(levels=2, dim=4, heads=2, num_classes=3)
    st = perturbed(cfg, 9, 0.05)
    g = label_grid((4, 4, 4), [[1, 1, 1], [2, 1, 3]], [1, 2])
    rng = np.random.default_rng(9)
    target, valid = rng.integers(0, 3, 64), rng.random(64) < 0.7
    fn = lambda s: E.masked_cross_entropy(unet_forward(s, cfg, g).dense_logits(), target, valid)
    assert E.finite_diff_check(fn, st) <= 1e-4


# sparse convolution baseline ----------------------------------------------------------------

def dense_conv_oracle(coords, feats, dims, W, b, spec, positions):
    """Zero-padded dense convolution read out at ``positions``."""
    c = feats.shape[1]
    pad = spec.padding
    vol = np.zeros(tuple(n + 2 * pad for n in dims) + (c,))
    for co, f in zip(coords, feats):
        vol[tuple(co + pad)] = f
    Wk = W.reshape(3, 3, 3, c, -1)
    out = []
    for p in positions:
        o = np.asarray(p) * spec.stride
        acc = b.copy()
        for a, bb, cc in itertools.product(range(3), repeat=3):
            acc = acc + vol[o[0] + a, o[1] + bb, o[2] + cc] @ Wk[a, bb, cc]
        out.append(acc)
    return np.array(out)


def test_sparse_conv_delta_kernel_passthrough():
    c = 5
    W = np.zeros((27 * c, c))
    W[13 * c:14 * c] = np.eye(c)
    lv = random_level((5, 5, 5), 0.2, c, 10)
    y = sparse_conv(lv.coords, lv.feats, lv.dims, WindowSpec((3, 3, 3), 1, 1), Tensor(W), Tensor(np.zeros(c)),
                    lv.coords)
    assert np.array_equal(y.data, lv.feats.data)


@pytest.mark.parametrize("stride", [1, 2])
def test_sparse_conv_dense_oracle(stride):
    rng = np.random.default_rng(11)
    lv = random_level((6, 6, 6), 0.15, 3, 11)
    W, b = rng.normal(size=(27 * 3, 4)), rng.normal(size=4)
    spec = WindowSpec((3, 3, 3), stride, 1)
    pos = np.argwhere(np.ones(spec.output_dims((6, 6, 6)), bool))
    y = sparse_conv(lv.coords, lv.feats, (6, 6, 6), spec, Tensor(W), Tensor(b), pos)
    assert np.allclose(y.data, dense_conv_oracle(lv.coords, lv.feats.data, (6, 6, 6), W, b, spec, pos),
                       atol=1e-12)


def test_sparse_conv_baseline_empty_input():
    cfg = UNetConfig(levels=3, dim=8, heads=2, variant="C")
    out = sparse_conv_baseline_forward(init_unet(cfg), cfg, label_grid((8, 8, 8), np.zeros((0, 3)), []))
    assert (out.predict() == 0).all()


def test_sparse_conv_baseline_requires_c():
    with pytest.raises(ConfigError):
        sparse_conv_baseline_forward(init_unet(TINY), TINY, label_grid((8, 8, 8), [[0, 0, 0]], [1]))


def test_variant_a_reduces_to_plain_window_attention():
    # gamma = 1 and identity modulators: attention is standard MHA over valid slots
    from swa_voxel.swa import window_attention
    cfg = TINY.swa
    st = perturbed(TINY, 12)
    p = "block0.enc"
    st.set_value(f"{p}.gamma", np.ones((2, 27)))
    for kv in ("k", "v"):
        st.set_value(f"{p}.{kv}slot.W", np.broadcast_to(np.eye(4), (27, 4, 4)))
        st.set_value(f"{p}.{kv}slot.b", np.zeros((27, 4)))
    rng = np.random.default_rng(12)
    feats = rng.normal(size=(5, 8))
    rows = np.full((1, 27), -1)
    rows[0, [0, 5, 13, 20, 26]] = np.arange(5)
    out = window_attention(st, p, cfg, Tensor(feats), rows, np.array([[3, 3, 3]]), (8, 8, 8), 1).data[0]

    def ln(x, g, b):
        return (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b

    P = dict(st.items())
    q = (feats[2] @ P[f"{p}.qf.W"] + P[f"{p}.qf.b"]) @ P[f"{p}.q.W"] + P[f"{p}.q.b"]
    heads = []
    for m in range(2):
        s = slice(4 * m, 4 * m + 4)
        K = ln(feats @ P[f"{p}.k.W"][:, s] + P[f"{p}.k.b"][s], P[f"{p}.kln.g"], P[f"{p}.kln.b"])
        V = ln(feats @ P[f"{p}.v.W"][:, s] + P[f"{p}.v.b"][s], P[f"{p}.vln.g"], P[f"{p}.vln.b"])
        e = K @ q[s] / 2.0
        a = np.exp(e - e.max())
        heads.append((a / a.sum()) @ V)
    ref = np.concatenate(heads) @ P[f"{p}.o.W"] + P[f"{p}.o.b"]
    assert np.allclose(out, ref, atol=1e-12)
