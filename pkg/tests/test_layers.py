"""Encoder/decoder construction, shapes, taps, and store round-trips."""

import numpy as np
import pytest

from dtp import tensor as T
from dtp.dtpw import WeightStore
from dtp.errors import ConfigError, ShapeMismatch, WeightStoreMismatch
from dtp.layers import (
    DECODER_LAYERS,
    ENCODER_TAPS,
    ConvSpec,
    build_decoder,
    build_encoder,
)
from dtp.tensor import Graph, Tensor


def _image(seed=0, size=64):
    rng = np.random.default_rng(seed)
    return Tensor(rng.random((1, 3, size, size), dtype=np.float32))


def test_tap_names_cover_fourteen_convs():
    assert ENCODER_TAPS == (
        "relu1_1", "relu1_2",
        "relu2_1", "relu2_2",
        "relu3_1", "relu3_2", "relu3_3", "relu3_4",
        "relu4_1", "relu4_2", "relu4_3", "relu4_4",
        "relu5_1", "relu5_2",
    )


def test_decoder_channel_plan():
    convs = [s for s in DECODER_LAYERS if isinstance(s, ConvSpec)]
    plan = [(s.in_ch, s.out_ch) for s in convs]
    assert plan == [
        (256, 256), (256, 256), (256, 128),
        (128, 128), (128, 128), (128, 64),
        (64, 64), (64, 32), (32, 32), (32, 32), (32, 3),
    ]
    assert [s.followed_by_relu for s in convs] == [True] * 10 + [False]
    assert DECODER_LAYERS.count("up") == 2


def test_encoder_tap_shapes():
    enc = build_encoder(rng=np.random.default_rng(1))
    taps = enc.forward(_image(), ["relu1_1", "relu2_1", "relu3_4", "relu4_1", "relu5_2"])
    assert taps["relu1_1"].shape == (1, 64, 64, 64)
    assert taps["relu2_1"].shape == (1, 128, 32, 32)
    assert taps["relu3_4"].shape == (1, 256, 16, 16)
    assert taps["relu4_1"].shape == (1, 512, 8, 8)
    assert taps["relu5_2"].shape == (1, 512, 4, 4)


def test_encoder_zero_image_gives_zero_taps():
    # Zero biases and relu make the all-black image a fixed point.
    enc = build_encoder(rng=np.random.default_rng(2))
    z = Tensor(np.zeros((1, 3, 32, 32), np.float32))
    taps = enc.forward(z, ["relu1_1", "relu3_4", "relu5_2"])
    for t in taps.values():
        assert not t.data.any()


def test_encoder_rejects_unknown_tap():
    enc = build_encoder(rng=np.random.default_rng(3))
    with pytest.raises(ConfigError, match="relu6_1"):
        enc.forward(_image(), ["relu3_4", "relu6_1"])


def test_encoder_rejects_bad_geometry():
    enc = build_encoder(rng=np.random.default_rng(3))
    rng = np.random.default_rng(0)
    with pytest.raises(ShapeMismatch, match="divisible by 16"):
        enc.forward(Tensor(rng.random((1, 3, 48, 40), dtype=np.float32)), ["relu1_1"])
    with pytest.raises(ShapeMismatch):
        enc.forward(Tensor(rng.random((1, 4, 32, 32), dtype=np.float32)), ["relu1_1"])


def test_encoder_random_init_scheme():
    enc = build_encoder(rng=np.random.default_rng(4))
    params = dict(enc.parameters())
    w = params["conv1_1.weight"]
    assert w.dtype == np.float32 and w.shape == (64, 3, 3, 3)
    bound = np.sqrt(6.0 / (3 * 9))
    assert np.abs(w.data).max() <= bound
    assert np.abs(w.data).max() > 0.8 * bound
    assert not params["conv1_1.bias"].data.any()
    w5 = params["conv5_2.weight"]
    assert np.abs(w5.data).max() <= np.sqrt(6.0 / (512 * 9))


def test_parameter_order_matches_layer_order():
    enc = build_encoder(rng=np.random.default_rng(5))
    names = [n for n, _ in enc.parameters()]
    assert names[:4] == ["conv1_1.weight", "conv1_1.bias", "conv1_2.weight", "conv1_2.bias"]
    assert names[-2:] == ["conv5_2.weight", "conv5_2.bias"]
    assert len(names) == 28
    dec = build_decoder(np.random.default_rng(5))
    dnames = [n for n, _ in dec.parameters()]
    assert dnames[0] == "dec4_3.weight" and dnames[-1] == "dec1_1.bias"
    assert len(dnames) == 22


def test_store_roundtrip_taps_bit_identical():
    enc = build_encoder(rng=np.random.default_rng(6))
    enc2 = build_encoder(weights=enc.to_store())
    img = _image(7, 32)
    a = enc.forward(img, ["relu3_4", "relu5_2"])
    b = enc2.forward(img, ["relu3_4", "relu5_2"])
    for k in a:
        assert np.array_equal(
            a[k].data.view(np.uint32), b[k].data.view(np.uint32)
        )


def test_build_encoder_from_store_errors():
    store = build_encoder(rng=np.random.default_rng(8)).to_store()

    partial = WeightStore()
    for name, arr in store.items():
        if name != "conv3_2.bias":
            partial.add(name, arr)
    with pytest.raises(WeightStoreMismatch, match="conv3_2.bias"):
        build_encoder(weights=partial)

    wrong = WeightStore()
    for name, arr in store.items():
        if name == "conv2_1.weight":
            arr = np.zeros((128, 64, 5, 5), np.float32)
        wrong.add(name, arr)
    with pytest.raises(WeightStoreMismatch, match=r"\(128, 64, 5, 5\).*\(128, 64, 3, 3\)"):
        build_encoder(weights=wrong)


def test_build_encoder_ignores_extra_store_entries():
    store = build_encoder(rng=np.random.default_rng(9)).to_store()
    store.add("conv5_3.weight", np.zeros((512, 512, 3, 3), np.float32))
    store.add("conv5_3.bias", np.zeros(512, np.float32))
    enc = build_encoder(weights=store)
    assert len(enc.parameters()) == 28


def test_build_encoder_casts_f64_store_to_f32():
    store = WeightStore()
    for name, arr in build_encoder(rng=np.random.default_rng(10)).to_store().items():
        store.add(name, arr.astype(np.float64))
    enc = build_encoder(weights=store)
    assert all(t.dtype == np.float32 for _, t in enc.parameters())


def test_build_encoder_requires_source():
    with pytest.raises(ConfigError):
        build_encoder()


def test_forward_stops_at_deepest_requested_tap():
    enc = build_encoder(rng=np.random.default_rng(11))
    with Graph() as g:
        out = enc.forward(_image(0, 32), ["relu2_2"])
        loss = T.reduce(out["relu2_2"], "sum")
    T.backward(g, loss)
    params = dict(enc.parameters())
    assert params["conv1_1.weight"].grad is not None
    assert params["conv2_2.bias"].grad is not None
    assert params["conv3_1.weight"].grad is None
    assert params["conv5_2.weight"].grad is None


def test_decoder_output_shape_and_zero_residual_at_init():
    dec = build_decoder(np.random.default_rng(12))
    rng = np.random.default_rng(0)
    f = Tensor(rng.random((1, 256, 16, 16), dtype=np.float32))
    y = dec.forward(f)
    assert y.shape == (1, 3, 64, 64)
    # the final conv starts at zero: a fresh decoder adds nothing
    assert np.array_equal(y.data, np.zeros_like(y.data))


def test_decoder_final_conv_is_linear_and_signed():
    dec = build_decoder(np.random.default_rng(12))
    params = dict(dec.parameters())
    w = params["dec1_1.weight"]
    w.data = np.random.default_rng(3).standard_normal(w.shape).astype(np.float32)
    f = Tensor(np.random.default_rng(0).random((1, 256, 16, 16), dtype=np.float32))
    y = dec.forward(f)
    assert y.data.min() < 0.0 < y.data.max()


def test_decoder_rejects_wrong_channel_count():
    dec = build_decoder(np.random.default_rng(13))
    with pytest.raises(ShapeMismatch, match="256"):
        dec.forward(Tensor(np.zeros((1, 128, 16, 16), np.float32)))


def test_decoder_gradients_reach_all_parameters():
    dec = build_decoder(np.random.default_rng(14))
    rng = np.random.default_rng(1)
    f = Tensor(rng.random((1, 256, 8, 8), dtype=np.float32))
    with Graph() as g:
        loss = T.reduce(dec.forward(f), "sum")
    T.backward(g, loss)
    for name, t in dec.parameters():
        assert t.grad is not None, name
        assert t.grad.shape == t.shape


def test_identical_rng_gives_identical_networks():
    a = build_encoder(rng=np.random.default_rng(42))
    b = build_encoder(rng=np.random.default_rng(42))
    for (_, ta), (_, tb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(ta.data, tb.data)
