import numpy as np
import pytest

from oracles import loop_conv, loop_patch, tiny_resnet, vgg4
from prunekit.core import Conv, ModelGraph, ReLU, forward, im2col, patches_at
from prunekit.errors import UnsupportedStructureError
from prunekit.sampler import (
    ORIGINAL_MODEL,
    DEFAULT_PLAN,
    SAME_LAYER,
    SamplePlan,
    draw_positions,
    load_samples,
    sample_layer,
    sample_residual_last,
    save_samples,
)
from prunekit.surgery import keep_input_channels


def _inputs(model, n, seed=0):
    return np.random.default_rng(seed).standard_normal((n,) + model.input_shape).astype(np.float32)


def test_default_plan():
    assert (DEFAULT_PLAN.images, DEFAULT_PLAN.samples_per_image) == (5000, 10)
    with pytest.raises(ValueError):
        SamplePlan(0, 10)


def test_same_layer_targets_are_exactly_explained():
    m = vgg4(np.random.default_rng(0))
    x = _inputs(m, 6)
    for layer in m.conv_names():
        s = sample_layer(m, m, layer, x, SamplePlan(6, 7, 1), SAME_LAYER)
        W = m.conv(layer).weight.reshape(s.n, -1).astype(np.float64)
        np.testing.assert_allclose(s.X @ W.T, s.Y, atol=1e-5)
        assert s.num_samples == 6 * 7 == len(s.positions)


def test_saturates_on_tiny_maps():
    rng = np.random.default_rng(1)
    m = ModelGraph([Conv("c", rng.standard_normal((2, 3, 3, 3)))], (3, 3, 3))
    s = sample_layer(m, m, "c", _inputs(m, 4), SamplePlan(4, 10, 0), SAME_LAYER)
    assert s.num_samples == 4
    assert s.positions[:, 0].tolist() == [0, 1, 2, 3]


def test_positions_unique_within_image_and_deterministic():
    plan = SamplePlan(5, 9, 123)
    a = draw_positions(5, 3, 4, plan)
    b = draw_positions(5, 3, 4, plan)
    np.testing.assert_array_equal(a, b)
    for img in range(5):
        rows = {tuple(r) for r in a[a[:, 0] == img]}
        assert len(rows) == 9
    assert not np.array_equal(a, draw_positions(5, 3, 4, SamplePlan(5, 9, 124)))


def test_only_plan_images_are_used():
    m = vgg4(np.random.default_rng(2))
    s = sample_layer(m, m, "conv2", _inputs(m, 10), SamplePlan(3, 4, 0), SAME_LAYER)
    assert s.positions[:, 0].max() == 2


def test_channel_block_is_single_channel_im2col():
    m = vgg4(np.random.default_rng(3))
    x = _inputs(m, 3)
    s = sample_layer(m, m, "conv3", x, SamplePlan(3, 5, 0), SAME_LAYER)
    _, fm = forward(m, x, tap="pool")
    conv = m.conv("conv3")
    for i in range(s.c):
        alone = patches_at(fm[:, i:i + 1], conv.kernel, conv.stride, conv.pad, s.positions)
        np.testing.assert_array_equal(s.channel(i), alone)


def test_pruned_prefix_against_tap_oracle():
    rng = np.random.default_rng(4)
    orig = ModelGraph([
        Conv("conv1", rng.standard_normal((5, 2, 3, 3)), rng.standard_normal(5), pad=(1, 1)), ReLU("r1"),
        Conv("conv2", rng.standard_normal((4, 5, 3, 3)), rng.standard_normal(4), pad=(1, 1)), ReLU("r2"),
        Conv("conv3", rng.standard_normal((3, 4, 1, 1)), rng.standard_normal(3)),
    ], (2, 5, 5))
    cur = orig.copy()
    keep_input_channels(cur, "conv2", [0, 2, 4])
    x = _inputs(orig, 3, seed=5)
    plan = SamplePlan(3, 6, 7)
    s = sample_layer(cur, orig, "conv2", x, plan, ORIGINAL_MODEL)

    c1, c2o = orig.conv("conv1"), orig.conv("conv2")
    fm_cur = np.maximum(loop_conv(x, c1.weight[[0, 2, 4]], c1.bias[[0, 2, 4]], pad=(1, 1)), 0)
    fm_orig = np.maximum(loop_conv(x, c1.weight, c1.bias, pad=(1, 1)), 0)
    y_orig = loop_conv(fm_orig, c2o.weight, c2o.bias, pad=(1, 1))
    for row, (img, oy, ox) in enumerate(s.positions):
        np.testing.assert_allclose(s.X[row], loop_patch(fm_cur, img, oy, ox, 3, 3, (1, 1), (1, 1)), atol=1e-5)
        np.testing.assert_allclose(s.Y[row], y_orig[img, :, oy, ox] - c2o.bias, atol=1e-4)
    assert s.meta["mode"] == ORIGINAL_MODEL


def test_same_layer_vs_original_differ_after_pruning():
    rng = np.random.default_rng(6)
    orig = vgg4(rng)
    cur = orig.copy()
    keep_input_channels(cur, "conv2", [1, 2, 3])
    x = _inputs(orig, 4)
    plan = SamplePlan(4, 5, 0)
    a = sample_layer(cur, orig, "conv3", x, plan, SAME_LAYER)
    b = sample_layer(cur, orig, "conv3", x, plan, ORIGINAL_MODEL)
    np.testing.assert_array_equal(a.X, b.X)
    assert not np.allclose(a.Y, b.Y)


def test_sampling_errors():
    m = vgg4(np.random.default_rng(0))
    x = _inputs(m, 2)
    with pytest.raises(KeyError):
        sample_layer(m, m, "nope", x, SamplePlan(2, 2), SAME_LAYER)
    with pytest.raises(UnsupportedStructureError):
        sample_layer(m, m, "relu1", x, SamplePlan(2, 2), SAME_LAYER)
    with pytest.raises(UnsupportedStructureError):
        sample_residual_last(m, m, "conv1", x, SamplePlan(2, 2))


def test_residual_last_without_pruning_equals_original_targets():
    m = tiny_resnet(np.random.default_rng(7))
    x = _inputs(m, 4)
    plan = SamplePlan(4, 6, 3)
    a = sample_residual_last(m, m, "res2", x, plan)
    b = sample_layer(m, m, "res2_c", x, plan, ORIGINAL_MODEL)
    np.testing.assert_array_equal(a.X, b.X)
    np.testing.assert_allclose(a.Y, b.Y, atol=1e-6)


def test_residual_last_zero_branch_gives_shortcut_drift():
    rng = np.random.default_rng(8)
    orig = tiny_resnet(rng)
    orig.conv("res2_c").weight[:] = 0
    cur = orig.copy()
    cur.conv("stem").weight *= 0.7
    x = _inputs(orig, 3)
    s = sample_residual_last(cur, orig, "res2", x, SamplePlan(3, 5, 0))
    _, y1 = forward(orig, x, tap="res1_relu")
    _, y1p = forward(cur, x, tap="res1_relu")
    p = s.positions
    expect = (y1 - y1p).astype(np.float64)[p[:, 0], :, p[:, 1], p[:, 2]]
    np.testing.assert_allclose(s.Y, expect, atol=1e-6)


def test_residual_last_against_tap_oracle():
    rng = np.random.default_rng(9)
    orig = tiny_resnet(rng)
    cur = orig.copy()
    keep_input_channels(cur, "res1_b", [0, 3])
    cur.conv("res1_c").weight *= 1.3
    x = _inputs(orig, 3)
    s = sample_residual_last(cur, orig, "res2", x, SamplePlan(3, 8, 11))
    assert s.meta["block"] == "res2" and s.meta["layer"] == "res2_c"
    # independent taps: block input in both models, original branch output, current branch input
    _, y1 = forward(orig, x, tap="res1_relu")
    _, y1p = forward(cur, x, tap="res1_relu")
    _, y2 = forward(orig, x, tap="res2_c")
    _, xin = forward(cur, x, tap="res2_b_relu")
    bias = cur.conv("res2_c").bias.astype(np.float64)
    cols = im2col(xin, (1, 1))
    ho = wo = 8
    for row, (img, oy, ox) in enumerate(s.positions):
        want = y1[img, :, oy, ox].astype(np.float64) - y1p[img, :, oy, ox] + y2[img, :, oy, ox] - bias
        np.testing.assert_allclose(s.Y[row], want, atol=1e-6)
        np.testing.assert_array_equal(s.X[row], cols[(img * ho + oy) * wo + ox])


def test_save_load_round_trip(tmp_path):
    m = vgg4(np.random.default_rng(10))
    s = sample_layer(m, m, "conv2", _inputs(m, 3), SamplePlan(3, 4, 9), SAME_LAYER)
    save_samples(s, tmp_path / "set" / "conv2")
    back = load_samples(tmp_path / "set" / "conv2")
    np.testing.assert_allclose(back.X, s.X, rtol=1e-6)
    np.testing.assert_allclose(back.Y, s.Y, rtol=1e-6, atol=1e-6)
    np.testing.assert_array_equal(back.positions, s.positions)
    assert back.meta == {"layer": "conv2", "mode": SAME_LAYER, "seed": 9}
