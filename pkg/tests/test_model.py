import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mldd import tensor as T
from mldd.decoder import (DecoderConfig, cam, channel_attention, decoder_forward, decoder_param_count,
                          dense_attention_gate, init_decoder, project_pyramid, spatial_attention)
from mldd.encoder import CHANNELS, FeaturePyramid, encoder_forward, init_encoder
from mldd.layers import ParamRegistry
from mldd.model import SegModel
from mldd.tensor import Tensor, grad_check


def projected(out_fn, seed=0):
    cache = {}

    def f():
        out = out_fn()
        if "r" not in cache:
            cache["r"] = Tensor(np.random.default_rng(seed).standard_normal(out.shape))
        return T.sum_all(T.mul(out, cache["r"]))

    return f


def rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def block_registry(width=4, reduction=2, n_in=3, seed=0):
    reg = ParamRegistry(seed)
    r = max(1, width // reduction)
    reg.conv("b/gate", 1, width * n_in, 3, pad=1)
    for br in ("max", "avg"):
        reg.conv(f"b/ca_{br}1", r, width, 1)
        reg.conv(f"b/ca_{br}2", width, r, 1)
    reg.conv("b/sa", 1, 2, 7, pad=3)
    return reg


def all_tensors(reg):
    return [t for _, t in reg.tensors()]


# ---------------------------------------------------------------- encoder

def test_encoder_shapes():
    model = SegModel()
    pyr = encoder_forward(Tensor(np.random.default_rng(0).random((2, 3, 64, 64))), model.reg)
    assert [f.shape for f in pyr.features] == [(2, 16, 16, 16), (2, 32, 8, 8), (2, 64, 4, 4), (2, 128, 2, 2)]
    assert pyr.e3.shape == (2, 64, 4, 4)


def test_encoder_rejects_indivisible():
    with pytest.raises(ValueError, match="multiples of 32"):
        encoder_forward(Tensor(np.zeros((1, 3, 50, 64))), SegModel().reg)


def test_encoder_zero_weights_give_zero_features():
    model = SegModel()
    model.reg.zero_()
    pyr = encoder_forward(Tensor(np.random.default_rng(1).random((1, 3, 32, 32))), model.reg)
    assert all(np.all(f.data == 0) for f in pyr.features)


@settings(max_examples=8, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3))
def test_encoder_shape_contract(hm, wm):
    reg = ParamRegistry()
    init_encoder(reg)
    with T.no_grad():
        pyr = encoder_forward(Tensor(np.zeros((1, 3, 32 * hm, 32 * wm))), reg)
    for k, f in enumerate(pyr.features):
        assert f.shape == (1, CHANNELS[k], 8 * hm >> k, 8 * wm >> k)


def test_encoder_gradient_to_image():
    reg = ParamRegistry(2)
    init_encoder(reg, channels=(2, 2, 3, 3))
    rng = np.random.default_rng(3)
    img = Tensor(rng.random((1, 3, 32, 32)), requires_grad=True)
    err = grad_check(projected(lambda: encoder_forward(img, reg).e4), [img])
    assert err < 1e-5


# ---------------------------------------------------------------- blocks

def test_project_pyramid_shapes_and_zero():
    reg = ParamRegistry()
    init_decoder(reg, DecoderConfig())
    rng = np.random.default_rng(4)
    pyr = FeaturePyramid(tuple(Tensor(rng.random((2, c, 16 >> k, 16 >> k))) for k, c in enumerate(CHANNELS)))
    p0 = project_pyramid(pyr, reg)
    assert p0[3].shape == (2, 32, 4, 4)
    reg.zero_()
    assert all(np.all(t.data == 0) for t in project_pyramid(pyr, reg).values())


def test_project_pyramid_gradcheck():
    reg = ParamRegistry(5)
    cfg = DecoderConfig(width=3, n_stages=2, n_layers=1, reduction=1)
    init_decoder(reg, cfg, enc_channels=(2, 3))
    rng = np.random.default_rng(6)
    feats = (rand(rng, 1, 2, 4, 4), rand(rng, 1, 3, 2, 2))
    pyr = FeaturePyramid(feats)
    params = [reg["proj/S1"].weight, reg["proj/S1"].bias, reg["proj/S2"].weight, *feats]
    assert grad_check(projected(lambda: T.concat_channels(
        [project_pyramid(pyr, reg)[1], T.upsample_bilinear(project_pyramid(pyr, reg)[2], 4, 4)])), params) < 1e-5


def test_dag_shape_and_zero_gate():
    reg = block_registry(width=32, reduction=16, n_in=3)
    rng = np.random.default_rng(7)
    cur = Tensor(rng.random((1, 32, 8, 8)))
    deeper = [Tensor(rng.random((1, 32, 4, 4))), Tensor(rng.random((1, 32, 2, 2)))]
    out = dense_attention_gate(cur, deeper, reg["b/gate"])
    assert out.shape == (1, 32, 8, 8)
    reg.zero_()
    out = dense_attention_gate(cur, deeper, reg["b/gate"])
    assert np.array_equal(out.data, 0.5 * cur.data)


def test_dag_errors():
    reg = block_registry(width=4, n_in=2)
    cur = Tensor(np.ones((1, 4, 4, 4)))
    with pytest.raises(ValueError):
        dense_attention_gate(cur, [], reg["b/gate"])
    with pytest.raises(T.ShapeError):
        dense_attention_gate(cur, [Tensor(np.ones((1, 3, 2, 2)))], reg["b/gate"])


def test_dag_gradcheck():
    reg = block_registry(width=3, n_in=3, seed=8)
    rng = np.random.default_rng(9)
    cur, d1, d2 = rand(rng, 1, 3, 4, 4), rand(rng, 1, 3, 2, 2), rand(rng, 1, 3, 1, 1)
    f = projected(lambda: dense_attention_gate(cur, [d1, d2], reg["b/gate"]))
    assert grad_check(f, [cur, d1, d2, reg["b/gate"].weight, reg["b/gate"].bias]) < 1e-5


def test_channel_attention_contracts():
    reg = block_registry(width=32, reduction=16)
    d = Tensor(np.random.default_rng(10).random((2, 32, 8, 8)))
    assert channel_attention(d, reg, "b").shape == (2, 32, 8, 8)
    reg.zero_()
    assert np.array_equal(channel_attention(d, reg, "b").data, 0.5 * d.data)
    soft = channel_attention(d, reg, "b", act="softmax").data
    np.testing.assert_allclose(soft, d.data / 32, rtol=1e-15)


def test_channel_attention_map_ranges():
    reg = block_registry(width=8, reduction=2, seed=11)
    d = Tensor(np.random.default_rng(12).random((2, 8, 4, 4)) + 0.1)
    a_sig = channel_attention(d, reg, "b").data / d.data
    assert np.all((a_sig > 0) & (a_sig < 1))
    a_soft = channel_attention(d, reg, "b", act="softmax").data / d.data
    assert np.max(np.abs(a_soft[:, :, 0, 0].sum(axis=1) - 1)) < 1e-12


def test_spatial_attention_contracts_and_grad():
    reg = block_registry(width=4, seed=13)
    rng = np.random.default_rng(14)
    d = rand(rng, 1, 4, 5, 5)
    assert spatial_attention(d, reg, "b").shape == d.shape
    assert grad_check(projected(lambda: spatial_attention(d, reg, "b")), [d, reg["b/sa"].weight]) < 1e-5
    reg.zero_()
    assert np.array_equal(spatial_attention(d, reg, "b").data, 0.5 * d.data)


def test_cam_zero_weights_quarter():
    reg = block_registry(width=32, reduction=16)
    reg.zero_()
    d = Tensor(np.random.default_rng(15).random((1, 32, 8, 8)))
    assert np.array_equal(cam(d, reg, "b").data, 0.25 * d.data)


@pytest.mark.parametrize("act", ["sigmoid", "softmax"])
def test_cam_gradcheck(act):
    reg = block_registry(width=4, reduction=2, seed=16)
    rng = np.random.default_rng(17)
    d = rand(rng, 1, 4, 4, 4)
    assert grad_check(projected(lambda: cam(d, reg, "b", act)), [d, *all_tensors(reg)[2:]]) < 1e-5


# ---------------------------------------------------------------- grid

@pytest.mark.parametrize("n_layers,counts", [(1, [3]), (2, [3, 2]), (3, [3, 2, 1])])
def test_decoder_grid_shapes(n_layers, counts):
    model = SegModel(DecoderConfig(n_layers=n_layers))
    with T.no_grad():
        grid = model(Tensor(np.random.default_rng(18).random((2, 3, 64, 64))))
    assert grid.block_counts() == counts
    for j, layer in enumerate(grid.p):
        for i, t in layer.items():
            assert t.shape == (2, 32, 16 >> (i - 1), 16 >> (i - 1))
    assert sorted(grid.layer_logits) == list(range(1, n_layers + 1))
    assert all(lg.shape == (2, 1, 64, 64) for lg in grid.layer_logits.values())
    if n_layers == 1:
        assert grid.final_logits is grid.layer_logits[1]


def test_decoder_zero_params_give_half_probability():
    model = SegModel()
    model.reg.zero_()
    grid = model(Tensor(np.random.default_rng(19).random((1, 3, 64, 64))))
    assert np.all(grid.final_logits.data == 0)


def test_final_logits_are_mean_of_layers():
    model = SegModel(seed=3)
    with T.no_grad():
        grid = model(Tensor(np.random.default_rng(20).random((1, 3, 32, 32))))
    mean = sum(lg.data for lg in grid.layer_logits.values()) / 3
    np.testing.assert_allclose(grid.final_logits.data, mean, rtol=1e-14, atol=1e-16)


def test_dense_set_sizes():
    # block (j, i) sees (n_stages - j + 1) - i deeper maps, so its gate input has that many + 1
    cfg = DecoderConfig()
    reg = ParamRegistry()
    init_decoder(reg, cfg)
    for j in range(1, 4):
        for i in cfg.blocks(j):
            n_deeper = (cfg.n_stages - j + 1) - i
            assert n_deeper >= 1
            assert reg[f"dec/L{j}/S{i}/gate"].weight.shape[1] == 32 * (n_deeper + 1)
    assert reg["dec/L1/S1/gate"].weight.shape[1] == 32 * 4


def test_two_stage_decoder_gradcheck():
    cfg = DecoderConfig(width=4, n_stages=2, n_layers=1, reduction=2)
    reg = ParamRegistry(21)
    init_decoder(reg, cfg, enc_channels=(3, 5))
    rng = np.random.default_rng(22)
    feats = (rand(rng, 1, 3, 4, 4), rand(rng, 1, 5, 2, 2))
    pyr = FeaturePyramid(feats)

    f = projected(lambda: decoder_forward(pyr, cfg, reg, 8, 8).final_logits, seed=1)
    assert grad_check(f, [*feats, *all_tensors(reg)]) < 1e-5


def test_param_count_golden():
    assert decoder_param_count(DecoderConfig()) == 15059
    assert SegModel().reg.n_params() == 293520 + 15059
    for n in (1, 2, 3):
        cfg = DecoderConfig(n_layers=n)
        reg = ParamRegistry()
        init_decoder(reg, cfg)
        assert reg.n_params() == decoder_param_count(cfg)


def test_more_layers_strictly_more_params_same_shapes():
    counts = [decoder_param_count(DecoderConfig(n_layers=n)) for n in (1, 2, 3)]
    assert counts[0] < counts[1] < counts[2]
    img = Tensor(np.random.default_rng(23).random((1, 3, 32, 32)))
    grids = []
    for n in (1, 2, 3):
        with T.no_grad():
            grids.append(SegModel(DecoderConfig(n_layers=n), seed=4)(img))
    for small, big in zip(grids, grids[1:]):
        for j, layer in enumerate(small.p):
            for i, t in layer.items():
                assert big.p[j][i].shape == t.shape
                # unshared per-block params with name-keyed init: existing blocks are unchanged
                assert np.array_equal(big.p[j][i].data, t.data)


def test_encoder_params_identical_across_depths():
    a, b = SegModel(DecoderConfig(n_layers=1), seed=9), SegModel(DecoderConfig(n_layers=3), seed=9)
    for name, t in a.reg.tensors():
        if name.startswith("enc/"):
            assert t.data.tobytes() == b.reg[name.rsplit("/", 1)[0]].weight.data.tobytes() or name.endswith("bias")


def test_config_validation():
    with pytest.raises(ValueError):
        DecoderConfig(n_layers=4)
    with pytest.raises(ValueError):
        DecoderConfig(channel_act="tanh")
    assert DecoderConfig(width=8, reduction=16).bottleneck == 1
