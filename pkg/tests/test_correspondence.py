"""Correspondence: flatten layout, centralization, cosine matrix, warps."""

import numpy as np
import pytest

from dtp import tensor as T
from dtp.correspondence import (
    CorrelationMatrix,
    FlatFeature,
    centralize,
    correlation,
    cycle_reconstruct,
    flatten_feature,
    matched_points,
    unflatten_feature,
    warp_feature,
    warp_image,
    write_matched_points,
)
from dtp.errors import ConfigError, ShapeMismatch
from dtp.tensor import Graph, Tensor

from oracles import assert_grads_close, fd_grad, hard_nn_gather


def _feat(arr):
    a = np.asarray(arr, dtype=np.float32)
    return flatten_feature(Tensor(a[None]))


def _two_point():
    # positions u0=(1,0), u1=(0,1) over two channels
    return _feat([[[1.0, 0.0]], [[0.0, 1.0]]])


def test_flatten_uses_row_major_position_index():
    h, w, c = 3, 4, 2
    data = np.zeros((1, c, h, w), np.float32)
    for i in range(h):
        for j in range(w):
            data[0, :, i, j] = i * w + j
    f = flatten_feature(Tensor(data))
    assert f.rows.shape == (h * w, c)
    assert np.array_equal(f.rows.data[:, 0], np.arange(h * w, dtype=np.float32))


def test_flatten_unflatten_roundtrip_is_identity():
    rng = np.random.default_rng(0)
    x = Tensor(rng.standard_normal((1, 5, 4, 6)).astype(np.float32))
    back = unflatten_feature(flatten_feature(x))
    assert np.array_equal(back.data, x.data)


def test_centralize_constant_feature_is_zero():
    f = _feat(np.full((3, 2, 2), 7.5, np.float32))
    assert not centralize(f).rows.data.any()


def test_centralize_two_point_hand_values():
    c = centralize(_two_point())
    assert np.allclose(c.rows.data, [[0.5, -0.5], [-0.5, 0.5]], atol=1e-7)


def test_centralize_is_idempotent():
    rng = np.random.default_rng(1)
    f = _feat(rng.standard_normal((4, 3, 5)).astype(np.float32))
    once = centralize(f)
    twice = centralize(once)
    assert np.allclose(twice.rows.data, once.rows.data, atol=1e-6)
    assert np.abs(once.rows.data.mean(axis=0)).max() < 1e-6


def test_correlation_two_point_hand_values():
    f = _two_point()
    m = correlation(f, f, tau=0.07)
    assert np.allclose(m.m.data, [[1.0, -1.0], [-1.0, 1.0]], atol=1e-6)


def test_correlation_self_diagonal_is_one():
    rng = np.random.default_rng(2)
    f = _feat(rng.standard_normal((8, 4, 4)).astype(np.float32))
    m = correlation(f, f, tau=0.07).m.data
    norms = np.linalg.norm(
        centralize(f).rows.data, axis=1
    )
    good = norms > 1e-4
    assert good.any()
    assert np.allclose(np.diag(m)[good], 1.0, atol=1e-5)


def test_correlation_constant_content_is_all_zero():
    const = _feat(np.full((3, 2, 3), 2.0, np.float32))
    rng = np.random.default_rng(3)
    fs = _feat(rng.standard_normal((3, 2, 2)).astype(np.float32))
    m = correlation(const, fs, tau=0.07)
    assert not m.m.data.any()


def test_correlation_entries_bounded():
    rng = np.random.default_rng(4)
    fc = _feat(rng.standard_normal((6, 4, 4)).astype(np.float32))
    fs = _feat(rng.standard_normal((6, 3, 5)).astype(np.float32))
    m = correlation(fc, fs, tau=0.07).m.data
    assert m.shape == (16, 15)
    assert m.min() >= -1 - 1e-6 and m.max() <= 1 + 1e-6


def test_correlation_rejects_channel_mismatch_and_bad_tau():
    rng = np.random.default_rng(5)
    fc = _feat(rng.standard_normal((4, 2, 2)).astype(np.float32))
    fs = _feat(rng.standard_normal((5, 2, 2)).astype(np.float32))
    with pytest.raises(ShapeMismatch):
        correlation(fc, fs, tau=0.07)
    with pytest.raises(ConfigError):
        correlation(fc, fc, tau=0.0)


def test_warp_feature_single_style_position():
    rng = np.random.default_rng(6)
    fs = _feat(rng.standard_normal((3, 1, 1)).astype(np.float32))
    m = CorrelationMatrix(Tensor(rng.standard_normal((4, 1)).astype(np.float32)),
                          0.07, (2, 2), (1, 1))
    out = warp_feature(m, fs)
    assert np.allclose(out.rows.data, np.repeat(fs.rows.data, 4, axis=0), atol=1e-7)


def test_warp_feature_near_one_hot_picks_matching_row():
    fs = _two_point()
    m = CorrelationMatrix(
        Tensor(np.array([[1.0, -1.0], [-1.0, 1.0]], np.float32)), 0.07, (1, 2), (1, 2)
    )
    out = warp_feature(m, fs)
    assert np.allclose(out.rows.data[1], fs.rows.data[1], atol=1e-9)
    assert np.allclose(out.rows.data[0], fs.rows.data[0], atol=1e-9)


def test_warp_feature_tiny_tau_matches_gather_oracle():
    rng = np.random.default_rng(7)
    m_int = rng.permuted(np.arange(12.0)).reshape(3, 4).astype(np.float32)
    fs_rows = rng.standard_normal((4, 5)).astype(np.float32)
    corr = CorrelationMatrix(Tensor(m_int), 1e-6, (1, 3), (2, 2))
    out = warp_feature(corr, FlatFeature(Tensor(fs_rows), 2, 2))
    expect = hard_nn_gather(m_int, fs_rows)
    assert np.array_equal(out.rows.data, expect)


def test_warp_rows_are_convex_weights():
    rng = np.random.default_rng(8)
    ones = FlatFeature(Tensor(np.ones((6, 3), np.float32)), 2, 3)
    corr = CorrelationMatrix(
        Tensor(rng.standard_normal((4, 6)).astype(np.float32)), 0.07, (2, 2), (2, 3)
    )
    out = warp_feature(corr, ones)
    assert np.allclose(out.rows.data, 1.0, atol=1e-6)


def test_warp_image_uniform_m_gives_mean_pixel():
    rng = np.random.default_rng(9)
    img = Tensor(rng.random((3, 2, 3), dtype=np.float32))
    corr = CorrelationMatrix(Tensor(np.zeros((4, 6), np.float32)), 0.07, (2, 2), (2, 3))
    out = warp_image(corr, img)
    mean = img.data.reshape(3, -1).mean(axis=1)
    assert out.shape == (3, 2, 2)
    assert np.allclose(out.data, mean[:, None, None], atol=1e-6)


def test_warp_image_one_hot_is_permutation_gather():
    rng = np.random.default_rng(10)
    img = Tensor(rng.random((3, 2, 2), dtype=np.float32))
    perm = np.array([2, 0, 3, 1])
    m = np.zeros((4, 4), np.float32)
    m[np.arange(4), perm] = 1.0
    out = warp_image(CorrelationMatrix(Tensor(m), 1e-6, (2, 2), (2, 2)), img)
    pixels = img.data.reshape(3, 4)
    assert np.array_equal(out.data.reshape(3, 4), pixels[:, perm])


def test_warp_image_constant_style_stays_constant():
    img = Tensor(np.full((3, 2, 2), 0.25, np.float32))
    rng = np.random.default_rng(11)
    corr = CorrelationMatrix(
        Tensor(rng.standard_normal((4, 4)).astype(np.float32)), 0.07, (2, 2), (2, 2)
    )
    out = warp_image(corr, img)
    assert np.allclose(out.data, 0.25, atol=1e-6)


def test_warp_image_stays_in_style_channel_hull():
    rng = np.random.default_rng(12)
    img = Tensor(rng.random((3, 4, 4), dtype=np.float32))
    corr = CorrelationMatrix(
        Tensor(rng.standard_normal((16, 16)).astype(np.float32)), 0.07, (4, 4), (4, 4)
    )
    out = warp_image(corr, img).data
    for ch in range(3):
        assert out[ch].min() >= img.data[ch].min() - 1e-6
        assert out[ch].max() <= img.data[ch].max() + 1e-6


def test_warp_image_rejects_bad_shapes():
    corr = CorrelationMatrix(Tensor(np.zeros((4, 4), np.float32)), 0.07, (2, 2), (2, 2))
    with pytest.raises(ShapeMismatch):
        warp_image(corr, Tensor(np.zeros((3, 2, 3), np.float32)))
    with pytest.raises(ShapeMismatch):
        warp_image(corr, Tensor(np.zeros((1, 2, 2), np.float32)))


def test_cycle_identity_correspondence_roundtrips():
    rng = np.random.default_rng(13)
    fc = FlatFeature(Tensor(rng.standard_normal((4, 3)).astype(np.float32)), 2, 2)
    fs = FlatFeature(Tensor(rng.standard_normal((4, 3)).astype(np.float32)), 2, 2)
    corr = CorrelationMatrix(Tensor(np.eye(4, dtype=np.float32)), 1e-6, (2, 2), (2, 2))
    r_c, r_s = cycle_reconstruct(corr, fs, fc)
    assert np.allclose(r_s.rows.data, fs.rows.data, atol=1e-6)
    assert np.allclose(r_c.rows.data, fc.rows.data, atol=1e-6)


def test_cycle_uniform_m_gives_spatial_means():
    rng = np.random.default_rng(14)
    fc = FlatFeature(Tensor(rng.standard_normal((4, 3)).astype(np.float32)), 2, 2)
    fs = FlatFeature(Tensor(rng.standard_normal((6, 3)).astype(np.float32)), 2, 3)
    corr = CorrelationMatrix(Tensor(np.zeros((4, 6), np.float32)), 0.07, (2, 2), (2, 3))
    r_c, r_s = cycle_reconstruct(corr, fs, fc)
    assert np.allclose(r_s.rows.data, fs.rows.data.mean(0), atol=1e-6)
    assert np.allclose(r_c.rows.data, fc.rows.data.mean(0), atol=1e-6)
    assert r_c.rows.shape == (4, 3) and r_s.rows.shape == (6, 3)


def test_cycle_output_in_style_hull():
    rng = np.random.default_rng(15)
    fc = FlatFeature(Tensor(rng.standard_normal((4, 2)).astype(np.float32)), 2, 2)
    fs = FlatFeature(Tensor(rng.standard_normal((6, 2)).astype(np.float32)), 2, 3)
    corr = CorrelationMatrix(
        Tensor(rng.standard_normal((4, 6)).astype(np.float32)), 0.07, (2, 2), (2, 3)
    )
    _, r_s = cycle_reconstruct(corr, fs, fc)
    for ch in range(2):
        col = fs.rows.data[:, ch]
        assert r_s.rows.data[:, ch].min() >= col.min() - 1e-6
        assert r_s.rows.data[:, ch].max() <= col.max() + 1e-6


def _warp_loss_parts(m_arr, fs_arr, tau, probe):
    m = Tensor(m_arr, requires_grad=True)
    fs = Tensor(fs_arr, requires_grad=True)
    corr = CorrelationMatrix(m, tau, (1, m_arr.shape[0]), (1, m_arr.shape[1]))
    out = warp_feature(corr, FlatFeature(fs, 1, m_arr.shape[1]))
    return m, fs, T.reduce(T.mul(out.rows, Tensor(probe)), "sum")


def test_warp_feature_gradients_match_finite_differences():
    rng = np.random.default_rng(16)
    m_arr = rng.standard_normal((3, 4))
    fs_arr = rng.standard_normal((4, 5))
    probe = rng.standard_normal((3, 5))
    tau = 0.5

    with Graph() as g:
        m, fs, loss = _warp_loss_parts(m_arr, fs_arr, tau, probe)
    T.backward(g, loss)

    def f(args):
        return _warp_loss_parts(args[0], args[1], tau, probe)[2].item()

    assert_grads_close(m.grad, fd_grad(f, [m_arr, fs_arr], 0), rtol=1e-4)
    assert_grads_close(fs.grad, fd_grad(f, [m_arr, fs_arr], 1), rtol=1e-4)


def test_correlation_is_differentiable_end_to_end():
    rng = np.random.default_rng(17)
    fc_arr = rng.standard_normal((1, 3, 2, 2))
    fs_arr = rng.standard_normal((1, 3, 2, 2))
    probe = rng.standard_normal((4, 4))

    def run(fca, fsa):
        fc_t = Tensor(fca, requires_grad=True)
        fs_t = Tensor(fsa, requires_grad=True)
        corr = correlation(flatten_feature(fc_t), flatten_feature(fs_t), tau=0.5)
        return fc_t, fs_t, T.reduce(T.mul(corr.m, Tensor(probe)), "sum")

    with Graph() as g:
        fc_t, fs_t, loss = run(fc_arr, fs_arr)
    T.backward(g, loss)

    def f(args):
        return run(args[0], args[1])[2].item()

    assert_grads_close(fc_t.grad, fd_grad(f, [fc_arr, fs_arr], 0), rtol=1e-4)
    assert_grads_close(fs_t.grad, fd_grad(f, [fc_arr, fs_arr], 1), rtol=1e-4)


def test_matched_points_and_csv(tmp_path):
    m = np.array([[0.2, 0.9, -0.3], [0.8, 0.1, 0.7]], np.float32)
    corr = CorrelationMatrix(Tensor(m), 0.07, (1, 2), (1, 3))
    pts = matched_points(corr)
    assert pts == [(0, 1, pytest.approx(0.9)), (1, 0, pytest.approx(0.8))]
    path = tmp_path / "matches.csv"
    write_matched_points(corr, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "u,v,similarity"
    assert lines[1] == "0,1,0.900000"
    assert lines[2] == "1,0,0.800000"
