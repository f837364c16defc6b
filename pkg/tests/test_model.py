"""Backbone, labels, filter learning, box regression, loss terms."""

import dataclasses
import math

import numpy as np
import pytest

from rgbdtrack import checkpoint
from rgbdtrack import model as M
from rgbdtrack import profiles
from rgbdtrack import tensor as T


def rng(seed=0):
    return np.random.Generator(np.random.Philox(key=[seed, 4]))


# small profile for fast end-to-end checks: 24px patches -> 3x3 maps,
# 8 backbone channels, 8 attention channels
MICRO = dataclasses.replace(
    profiles.DESK, name="micro", patch_size=24, backbone_widths=(4, 8),
    channels=8, reduced_channels=8, heads=2, d_k=4, d_v=4, ffn_hidden=16,
    cma_layers=1, n_iter=2)


def random_patch(r, size):
    return T.tensor(r.uniform(0.0, 1.0, size=(3, size, size)))


# ---------------------------------------------------------------------------
# extract

def test_extract_output_geometry():
    net = M.TrackerModel(profiles.DESK, seed=1)
    r = rng(1)
    i0, d0 = net.extract(random_patch(r, 96), random_patch(r, 96))
    assert i0.shape == (32, 12, 12)
    assert d0.shape == (32, 12, 12)
    micro_net = M.TrackerModel(MICRO, seed=1)
    i0, _ = micro_net.extract(random_patch(r, 24), random_patch(r, 24))
    assert i0.shape == (8, 3, 3)


def test_extract_rejects_unaligned_resolution():
    net = M.TrackerModel(MICRO, seed=1)
    r = rng(2)
    with pytest.raises(T.ShapeError, match="divisible"):
        net.extract(random_patch(r, 44), random_patch(r, 44))


def test_extract_zero_input_is_deterministic_bias_propagation():
    net = M.TrackerModel(profiles.DESK, seed=3)
    z = T.tensor(np.zeros((3, 96, 96)))
    a, _ = net.extract(z, z)
    b, _ = net.extract(z, z)
    assert a.data.tobytes() == b.data.tobytes()
    # cells away from the border see only bias-propagated constants
    interior = a.data[:, 3:9, 3:9]
    for c in range(interior.shape[0]):
        assert np.ptp(interior[c]) == 0.0


def test_extract_streams_are_unshared_by_default():
    net = M.TrackerModel(MICRO, seed=4)
    r = rng(4)
    x = random_patch(r, 24)
    i0, d0 = net.extract(x, x)
    assert np.abs(i0.data - d0.data).max() > 1e-8
    shared = M.TrackerModel(MICRO, seed=4, share_backbone=True)
    i1, d1 = shared.extract(x, x)
    np.testing.assert_array_equal(i1.data, d1.data)


# ---------------------------------------------------------------------------
# labels

def test_gaussian_labels_peak_is_one_at_center_cell():
    z = M.gaussian_labels((30.0, 30.0, 20.0, 20.0), map_size=12, stride=8)
    ci, cj = M.peak_cell(z)
    assert z[ci, cj] == 1.0
    assert (ci, cj) == (5, 5)


def test_gaussian_labels_monotone_decay():
    z = M.gaussian_labels((30.0, 30.0, 20.0, 20.0), map_size=12, stride=8)
    ci, cj = M.peak_cell(z)
    row = z[ci]
    assert all(row[j] >= row[j + 1] for j in range(cj, 11))
    assert all(row[j] >= row[j - 1] for j in range(1, cj + 1))
    col = z[:, cj]
    assert all(col[i] >= col[i + 1] for i in range(ci, 11))


def test_gaussian_labels_unit_sigma_value():
    # sigma = 0.25*sqrt(32*32)/8 = 1 cell; box centered in cell (2, 2)
    z = M.gaussian_labels((4.0, 4.0, 32.0, 32.0), map_size=5, stride=8)
    assert z[2, 2] == 1.0
    assert z[2, 3] == pytest.approx(math.exp(-0.5), abs=1e-12)


def test_gaussian_labels_reject_degenerate_box():
    with pytest.raises(ValueError, match="degenerate"):
        M.gaussian_labels((1.0, 1.0, 0.0, 5.0), map_size=5, stride=8)


# ---------------------------------------------------------------------------
# hinge residual

def test_hinge_residual_branches():
    assert M.hinge_residual(0.5, 0.8, 0.05) == pytest.approx(-0.3)
    assert M.hinge_residual(0.3, 0.02, 0.05) == pytest.approx(0.3)
    assert M.hinge_residual(-0.2, 0.02, 0.05) == 0.0


def test_hinge_residual_continuous_in_s():
    for z in (0.8, 0.02):
        left = M.hinge_residual(-1e-9, z, 0.05)
        right = M.hinge_residual(1e-9, z, 0.05)
        assert abs(right - left) < 1e-8


# ---------------------------------------------------------------------------
# filter learning

def residual_loss(f, x, z, threshold=0.05):
    s = M.classify(f, x).data
    r = M.hinge_residual(s, z, threshold)
    return float((r * r).sum())


def test_learn_filter_stays_zero_on_background_only_labels():
    r = rng(5)
    x = T.tensor(r.normal(size=(8, 5, 5)))
    z = np.full((5, 5), 0.01)
    iterates = M.learn_filter(x, z, n_iter=5)
    for f in iterates:
        np.testing.assert_array_equal(f.data, np.zeros((1, 8, 3, 3)))
    assert residual_loss(iterates[-1], x, z) == 0.0


def test_learn_filter_monotone_descent():
    r = rng(6)
    x = T.tensor(r.normal(size=(8, 6, 6)))
    z = M.gaussian_labels((20.0, 20.0, 10.0, 10.0), map_size=6, stride=8)
    iterates = M.learn_filter(x, z, n_iter=5)
    losses = [residual_loss(T.zeros((1, 8, 3, 3)), x, z)]
    losses += [residual_loss(f, x, z) for f in iterates]
    for before, after in zip(losses, losses[1:]):
        assert after <= before + 1e-12
    assert losses[-1] < losses[0]


def test_learn_filter_single_cell_recovers_target():
    r = rng(7)
    x = T.tensor(r.normal(size=(4, 1, 1)))
    z = np.array([[0.8]])
    iterates = M.learn_filter(x, z, n_iter=5)
    final = M.classify(iterates[-1], x).item()
    assert abs(final - 0.8) < 1e-3
    first = M.classify(iterates[0], x).item()
    assert abs(first - 0.8) < 1e-9  # normalized step solves the 1-d case at once


def test_learn_filter_input_validation():
    x = T.tensor(np.zeros((4, 3, 3)))
    with pytest.raises(ValueError, match="n_iter"):
        M.learn_filter(x, np.zeros((3, 3)), n_iter=0)
    bad = T.tensor(np.zeros((4, 3, 3)))
    bad.data[0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        M.learn_filter(bad, np.zeros((3, 3)))


# ---------------------------------------------------------------------------
# classification

def test_classify_zero_filter_gives_zero_scores():
    r = rng(8)
    x = T.tensor(r.normal(size=(8, 5, 5)))
    s = M.classify(T.zeros((1, 8, 3, 3)), x)
    np.testing.assert_array_equal(s.data, np.zeros((5, 5)))


def test_classify_is_linear_in_filter():
    r = rng(9)
    x = T.tensor(r.normal(size=(8, 5, 5)))
    f = T.tensor(r.normal(size=(1, 8, 3, 3)))
    a = M.classify(f, x).data
    b = M.classify(T.scale(f, 2.0), x).data
    np.testing.assert_allclose(b, 2 * a, rtol=0, atol=1e-12)


def test_classify_tracks_spatial_shift():
    r = rng(10)
    x = np.zeros((8, 12, 12))
    x[:, 6, 6] = np.abs(r.normal(size=8)) + 0.5
    z = M.gaussian_labels((44.0, 44.0, 16.0, 16.0), map_size=12, stride=8)
    assert M.peak_cell(z) == (6, 6)
    iterates = M.learn_filter(T.tensor(x), z, n_iter=5)
    f = iterates[-1]
    shifted = np.roll(x, shift=(2, 1), axis=(1, 2))
    scores = M.classify(f, T.tensor(shifted)).data
    assert M.peak_cell(scores) == (8, 7)


def test_peak_cell_tie_breaks_to_origin():
    assert M.peak_cell(np.zeros((7, 7))) == (0, 0)
    assert M.peak_cell(np.full((3, 3), 2.5)) == (0, 0)


def test_classify_shape_mismatch():
    with pytest.raises(T.ShapeError):
        M.classify(T.zeros((1, 4, 3, 3)), T.tensor(np.zeros((8, 5, 5))))


# ---------------------------------------------------------------------------
# box regression

def test_regress_zero_params_centers_on_peak():
    r = rng(11)
    x = T.tensor(r.normal(size=(8, 12, 12)))
    params = M.RegressParams(T.tensor(np.zeros((4, 8))), T.tensor(np.zeros(4)))
    box, clamped = M.regress_bbox(x, (3, 4), (10.0, 12.0, 20.0, 10.0),
                                  params, stride=8, patch_size=96)
    np.testing.assert_allclose(box.data, [36 - 10, 28 - 5, 20, 10],
                               rtol=0, atol=1e-12)
    np.testing.assert_allclose(clamped, box.data, rtol=0, atol=1e-12)


def test_regress_exp_parameterization_keeps_size_positive():
    r = rng(12)
    x = T.tensor(r.normal(size=(8, 12, 12)))
    params = M.RegressParams(T.tensor(r.normal(size=(4, 8)) * 2),
                             T.tensor(r.normal(size=4) * 2))
    box, _ = M.regress_bbox(x, (5, 5), (10.0, 10.0, 20.0, 15.0), params,
                            stride=8, patch_size=96)
    assert box.data[2] > 0 and box.data[3] > 0


def test_regress_clamps_to_patch():
    r = rng(13)
    x = T.tensor(r.normal(size=(8, 12, 12)))
    params = M.RegressParams(T.tensor(np.zeros((4, 8))),
                             T.tensor([50.0, 0.0, 0.0, 0.0]))
    box, clamped = M.regress_bbox(x, (5, 11), (0.0, 0.0, 20.0, 20.0), params,
                                  stride=8, patch_size=96)
    assert box.data[0] + box.data[2] > 96  # raw box escapes the patch
    assert clamped[0] >= 0 and clamped[0] + clamped[2] <= 96


def test_regress_rejects_bad_peak():
    x = T.tensor(np.zeros((8, 12, 12)))
    params = M.RegressParams(T.tensor(np.zeros((4, 8))), T.tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError, match="peak"):
        M.regress_bbox(x, (12, 0), (0.0, 0.0, 5.0, 5.0), params, 8, 96)


# ---------------------------------------------------------------------------
# losses

def test_loss_cls_perfect_scores():
    z = M.gaussian_labels((30.0, 30.0, 20.0, 20.0), map_size=5, stride=8)
    z = np.where(z > 0.05, z, 0.5)  # make every cell a target cell
    s = T.tensor(z.copy())
    assert M.loss_cls([[s]], [z]).item() == 0.0


def test_loss_cls_zero_scores_background_labels():
    z = np.full((5, 5), 0.01)
    assert M.loss_cls([[T.zeros((5, 5))]], [z]).item() == 0.0


def test_loss_cls_single_cell_value():
    out = M.loss_cls([[T.tensor([[0.5]])]], [np.array([[0.8]])])
    assert out.item() == pytest.approx(0.09, abs=1e-15)


def test_loss_cls_averages_over_iterations():
    z = np.array([[0.8]])
    one = M.loss_cls([[T.tensor([[0.5]])], [T.tensor([[0.8]])]], [z])
    assert one.item() == pytest.approx(0.045, abs=1e-15)


def test_loss_cls_empty_errors():
    with pytest.raises(ValueError, match="empty"):
        M.loss_cls([], [])
    with pytest.raises(ValueError, match="score maps"):
        M.loss_cls([[T.zeros((2, 2))]], [np.zeros((2, 2)), np.zeros((2, 2))])


def test_loss_bbox_values_and_symmetry():
    gt = np.array([10.0, 20.0, 30.0, 40.0])
    same = M.loss_bbox([T.tensor(gt.copy())], [gt], patch_size=96)
    assert same.item() == 0.0
    shifted = gt.copy()
    shifted[0] += 0.1 * 96  # 0.1 in normalized units
    a = M.loss_bbox([T.tensor(shifted)], [gt], 96).item()
    b = M.loss_bbox([T.tensor(gt.copy())], [shifted], 96).item()
    assert a == pytest.approx(0.0025, abs=1e-12)
    assert a == pytest.approx(b, abs=1e-15)


def test_loss_bbox_count_mismatch():
    with pytest.raises(ValueError, match="predictions"):
        M.loss_bbox([T.tensor(np.zeros(4))], [np.zeros(4), np.zeros(4)], 96)


def test_loss_total_weighting():
    out = M.loss_total(T.tensor(2.0), T.tensor(0.5), lam=0.01)
    assert out.item() == pytest.approx(0.52, abs=1e-15)
    assert M.loss_total(T.tensor(0.0), T.tensor(0.0)).item() == 0.0
    more = M.loss_total(T.tensor(3.0), T.tensor(0.5), lam=0.01)
    assert more.item() > out.item()


# ---------------------------------------------------------------------------
# model wiring

def test_named_parameters_cover_expected_groups():
    net = M.TrackerModel(MICRO, seed=20)
    names = set(net.named_parameters())
    assert "model.backbone.rgb.conv0.weight" in names
    assert "model.backbone.depth.conv2.bias" in names
    assert "fusion.cmim.reduce.weight" in names
    assert "fusion.spm.V" in names
    assert "model.head.regress.weight" in names


def test_checkpoint_round_trip_restores_model(tmp_path):
    net = M.TrackerModel(MICRO, seed=21)
    path = tmp_path / "net.dmf"
    net.save(path)
    other = M.TrackerModel(MICRO, seed=99)
    before = {n: p.data.copy() for n, p in other.named_parameters().items()}
    other.load(path)
    changed = 0
    for name, p in other.named_parameters().items():
        ref = net.named_parameters()[name]
        assert p.data.tobytes() == ref.data.tobytes()
        changed += int(p.data.tobytes() != before[name].tobytes())
    assert changed > 0


def test_checkpoint_rejects_mismatched_model(tmp_path):
    net = M.TrackerModel(MICRO, seed=22)
    path = tmp_path / "net.dmf"
    net.save(path)
    bigger = M.TrackerModel(profiles.DESK, seed=22)
    with pytest.raises(checkpoint.CheckpointError):
        bigger.load(path)


def test_fuse_modes():
    r = rng(23)
    net = M.TrackerModel(MICRO, seed=23)
    i0 = T.tensor(r.normal(size=(8, 3, 3)))
    d0 = T.tensor(r.normal(size=(8, 3, 3)))
    net.fuse_mode = "base"
    np.testing.assert_array_equal(net.fuse(i0, d0).data, i0.data + d0.data)
    net.fuse_mode = "full"
    full = net.fuse(i0, d0).data
    assert np.abs(full - (i0.data + d0.data)).max() > 1e-9
    with pytest.raises(ValueError, match="fuse mode"):
        M.TrackerModel(MICRO, seed=23, fuse_mode="bogus")


def test_fusion_parameters_shared_across_branches():
    # template and search features must flow through the same fusion tensors
    r = rng(24)
    net = M.TrackerModel(MICRO, seed=24)
    t = net.features(random_patch(r, 24), random_patch(r, 24))
    s = net.features(random_patch(r, 24), random_patch(r, 24))
    T.backward(T.add(T.sum(t), T.sum(s)))
    assert np.abs(net.spm.v.grad).max() > 0
    assert float(net.spm.alpha.grad) != 0.0


def test_pair_loss_terms_and_gradcheck():
    # seeds frozen so no relu/hinge pre-activation sits within the probe
    # step of its kink anywhere along the unrolled graph
    r = rng(25)
    net = M.TrackerModel(MICRO, seed=125)
    t_rgb, t_depth = random_patch(r, 24), random_patch(r, 24)
    s_rgb, s_depth = random_patch(r, 24), random_patch(r, 24)
    t_box = np.array([7.0, 7.0, 10.0, 10.0])
    s_box = np.array([9.0, 8.0, 10.0, 11.0])

    losses = M.pair_loss(net, t_rgb, t_depth, s_rgb, s_depth, t_box, s_box)
    assert losses["total"].item() >= 0
    assert losses["cls"].item() >= 0 and losses["bbox"].item() >= 0
    expect = 0.01 * losses["cls"].item() + losses["bbox"].item()
    assert losses["total"].item() == pytest.approx(expect, rel=1e-12)

    params = net.named_parameters()

    def f():
        return M.pair_loss(net, t_rgb, t_depth, s_rgb, s_depth, t_box, s_box)["total"]

    err = T.finite_diff_check(f, list(params.values()))
    assert err < 1e-4
