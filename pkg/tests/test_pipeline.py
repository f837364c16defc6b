"""Optimizer, augmentation, training loop, and online tracker."""

import dataclasses

import numpy as np
import pytest

from rgbdtrack import boxes as B
from rgbdtrack import model as M
from rgbdtrack import pipeline as P
from rgbdtrack import profiles
from rgbdtrack import synthdata as S
from rgbdtrack import tensor as T


def rng(seed=0):
    return np.random.Generator(np.random.Philox(key=[seed, 5]))


MICRO = dataclasses.replace(
    profiles.DESK, name="micro", patch_size=24, backbone_widths=(4, 8),
    channels=8, reduced_channels=8, heads=2, d_k=4, d_v=4, ffn_hidden=16,
    cma_layers=1, n_iter=2)


def static_scene(length=6, size=48, target=12.0, vx=0.0, bounce=True):
    return S.SceneSpec(
        name="scene", width=size, height=size, length=length,
        target=S.ObjectSpec("disk", target, (230, 230, 230), 1200.0,
                            size / 2.0, size / 2.0, vx=vx, bounce=bounce),
        background_color=(25, 25, 25))


# ---------------------------------------------------------------------------
# optimizer

def test_adamw_decoupled_decay_with_zero_gradient():
    p = T.parameter(np.array([2.0, -3.0, 0.5]))
    p.grad = np.zeros(3)
    opt = P.AdamW({"p": p}, lr=0.1, weight_decay=1e-4)
    expected = p.data - 0.1 * 1e-4 * p.data
    opt.step()
    np.testing.assert_array_equal(p.data, expected)


def test_adamw_first_step_is_lr_sized():
    p = T.parameter(np.array([0.0]))
    p.grad = np.array([7.3])
    opt = P.AdamW({"p": p}, lr=0.05, weight_decay=0.0)
    opt.step()
    assert p.data[0] == pytest.approx(-0.05, rel=1e-6)


def test_adamw_minimizes_quadratic():
    p = T.parameter(np.array([5.0]))
    opt = P.AdamW({"p": p}, lr=0.1, weight_decay=0.0)
    for _ in range(400):
        p.grad = 2.0 * (p.data - 3.0)
        opt.step()
    assert abs(p.data[0] - 3.0) < 1e-3


def test_lr_schedule_steps_every_period():
    cfg = P.TrainConfig(epochs=40, pairs_per_epoch=1, learning_rate=1e-3)
    assert P.lr_at_epoch(cfg, 0) == 1e-3
    assert P.lr_at_epoch(cfg, 14) == 1e-3
    assert P.lr_at_epoch(cfg, 15) == pytest.approx(2e-4)
    assert P.lr_at_epoch(cfg, 29) == pytest.approx(2e-4)
    assert P.lr_at_epoch(cfg, 30) == pytest.approx(4e-5)


def test_train_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        P.TrainConfig(epochs=0, pairs_per_epoch=1, learning_rate=1e-3).validate()
    with pytest.raises(ValueError, match="decay_factor"):
        P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=1e-3,
                      lr_decay_factor=1.5).validate()
    with pytest.raises(ValueError, match="positive"):
        P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=0.0).validate()
    with pytest.raises(ValueError, match="warmup"):
        P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=1e-3,
                      warmup_epochs=-0.5).validate()


def test_warmup_factor_ramps_linearly_then_caps():
    cfg = P.TrainConfig(epochs=4, pairs_per_epoch=100, learning_rate=1e-3,
                        warmup_epochs=2.0)
    assert P.warmup_factor(cfg, 0) == pytest.approx(1 / 200)
    assert P.warmup_factor(cfg, 99) == pytest.approx(0.5)
    assert P.warmup_factor(cfg, 199) == 1.0
    assert P.warmup_factor(cfg, 5000) == 1.0
    off = P.TrainConfig(epochs=4, pairs_per_epoch=100, learning_rate=1e-3)
    assert P.warmup_factor(off, 0) == 1.0


# ---------------------------------------------------------------------------
# patch preparation

def test_depth_normalization_clamps():
    patch = np.array([[0.0, 5000.0], [10000.0, 20000.0]])
    out = P.depth_to_input(patch, 10000.0)
    assert out.shape == (3, 2, 2)
    np.testing.assert_array_equal(out[0], [[0.0, 0.5], [1.0, 1.0]])
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out[0], out[2])


def test_flip_arithmetic():
    r = rng(1)
    rgb_in = r.uniform(size=(3, 16, 16))
    depth_in = r.uniform(size=(3, 16, 16))
    fr, fd, fbox = P.flip_patch(rgb_in, depth_in, (10.0, 12.0, 8.0, 8.0), 96)
    np.testing.assert_array_equal(fbox, [96 - 10 - 8, 12, 8, 8])
    np.testing.assert_array_equal(fr, rgb_in[:, :, ::-1])
    np.testing.assert_array_equal(fd, depth_in[:, :, ::-1])
    # flipping twice restores everything
    rr, dd, bb = P.flip_patch(fr, fd, fbox, 96)
    np.testing.assert_array_equal(rr, rgb_in)
    np.testing.assert_array_equal(bb, [10, 12, 8, 8])


def test_brightness_identity_and_clamp():
    r = rng(2)
    rgb_in = r.uniform(size=(3, 8, 8))
    np.testing.assert_array_equal(P.apply_brightness(rgb_in, 1.0), rgb_in)
    assert P.apply_brightness(rgb_in, 1.2).max() <= 1.0


def test_unaugmented_pair_is_centered():
    seq = S.generate(static_scene(), seed=3)
    pair = P.make_training_pair(seq, (0, 1), MICRO, rng(3), augment=False)
    for box in (pair.template_box, pair.search_box):
        cx, cy = box[0] + box[2] / 2, box[1] + box[3] / 2
        assert cx == pytest.approx(MICRO.patch_size / 2, abs=1e-9)
        assert cy == pytest.approx(MICRO.patch_size / 2, abs=1e-9)
    assert pair.template_rgb.shape == (3, 24, 24)
    assert pair.template_rgb.min() >= 0.0 and pair.template_rgb.max() <= 1.0
    assert pair.search_depth.shape == (3, 24, 24)


def test_training_pair_determinism():
    seq = S.generate(static_scene(), seed=4)
    a = P.make_training_pair(seq, (0, 2), MICRO, rng(7))
    b = P.make_training_pair(seq, (0, 2), MICRO, rng(7))
    np.testing.assert_array_equal(a.template_rgb, b.template_rgb)
    np.testing.assert_array_equal(a.search_rgb, b.search_rgb)
    np.testing.assert_array_equal(a.template_box, b.template_box)
    c = P.make_training_pair(seq, (0, 2), MICRO, rng(8))
    assert not np.array_equal(a.template_rgb, c.template_rgb)


def test_training_pair_rejects_absent_target():
    spec = static_scene(length=12, vx=6.0, bounce=False)  # exits the frame
    seq = S.generate(spec, seed=5)
    absent = [i for i, v in enumerate(seq.visible) if not v]
    assert absent, "scene should lose its target"
    with pytest.raises(ValueError, match="not visible"):
        P.make_training_pair(seq, (0, absent[0]), MICRO, rng(9))
    with pytest.raises(IndexError):
        P.make_training_pair(seq, (0, len(seq.rgb)), MICRO, rng(9))


# ---------------------------------------------------------------------------
# training loop

def small_dataset(n=2, seed=11):
    return [S.generate(static_scene(length=4), seed=seed + i) for i in range(n)]


def test_train_single_pair_writes_checkpoint(tmp_path):
    net = M.TrackerModel(MICRO, seed=30)
    cfg = P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=1e-4, seed=1)
    log = tmp_path / "loss.log"
    ckpt = tmp_path / "net.dmf"
    lines = P.train(net, small_dataset(), cfg, log_path=log, checkpoint_path=ckpt)
    assert len(lines) == 1
    epoch, total, cls, bbox, lr = lines[0].split(",")
    assert epoch == "0" and float(lr) == 1e-4
    assert float(total) == pytest.approx(0.01 * float(cls) + float(bbox), rel=1e-9)
    assert log.read_text().strip() == lines[0]
    other = M.TrackerModel(MICRO, seed=99)
    other.load(ckpt)
    for name, p in other.named_parameters().items():
        assert p.data.tobytes() == net.named_parameters()[name].data.tobytes()


def test_train_is_deterministic():
    data = small_dataset()
    runs = []
    for _ in range(2):
        net = M.TrackerModel(MICRO, seed=31)
        cfg = P.TrainConfig(epochs=2, pairs_per_epoch=3, learning_rate=1e-4,
                            seed=5)
        lines = P.train(net, data, cfg)
        runs.append((lines, {n: p.data.copy()
                             for n, p in net.named_parameters().items()}))
    assert runs[0][0] == runs[1][0]
    for name in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][name], runs[1][1][name])


def test_train_aborts_on_non_finite_loss():
    net = M.TrackerModel(MICRO, seed=32)
    net.regress.bias.data[...] = np.nan  # loss goes NaN, features stay finite
    cfg = P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=1e-4)
    with pytest.raises(P.TrainingError, match="epoch 0 batch 0"):
        P.train(net, small_dataset(), cfg)
    poisoned = M.TrackerModel(MICRO, seed=32)
    poisoned.spm.alpha.data[...] = np.nan  # features themselves go NaN
    with pytest.raises(P.TrainingError, match="epoch 0 batch 0"):
        P.train(poisoned, small_dataset(), cfg)


def test_train_rejects_empty_or_invisible_dataset():
    net = M.TrackerModel(MICRO, seed=33)
    cfg = P.TrainConfig(epochs=1, pairs_per_epoch=1, learning_rate=1e-4)
    with pytest.raises(ValueError, match="empty"):
        P.train(net, [], cfg)


def test_train_lr_column_follows_schedule():
    net = M.TrackerModel(MICRO, seed=34)
    cfg = P.TrainConfig(epochs=16, pairs_per_epoch=1, learning_rate=1e-4,
                        seed=2)
    lines = P.train(net, small_dataset(1), cfg)
    lrs = [float(line.split(",")[4]) for line in lines]
    assert lrs[:15] == [1e-4] * 15
    assert lrs[15] == pytest.approx(2e-5)


# ---------------------------------------------------------------------------
# tracker initialization

def zero_head(net):
    net.regress.weight.data[:] = 0.0
    net.regress.bias.data[:] = 0.0
    return net


def test_init_tracker_builds_fifteen_samples():
    seq = S.generate(static_scene(), seed=6)
    net = M.TrackerModel(MICRO, seed=40)
    st = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=2)
    assert len(st.sample_memory) == MICRO.init_samples == 15
    assert st.n_initial == 15
    assert st.filter.shape == (1, MICRO.channels, 3, 3)
    # first sample is the plain centered crop
    rgb_in, depth_in, patch_box, _ = P._crop_sample(
        seq.rgb[0], seq.depth[0], seq.gt_boxes[0], seq.gt_boxes[0], MICRO)
    plain = net.features(T.tensor(rgb_in), T.tensor(depth_in))
    np.testing.assert_array_equal(st.sample_memory[0][0].data, plain.data)
    np.testing.assert_array_equal(st.sample_memory[0][1],
                                  P._patch_labels(patch_box, MICRO))


def test_init_tracker_deterministic():
    seq = S.generate(static_scene(), seed=7)
    net = M.TrackerModel(MICRO, seed=41)
    a = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=3)
    b = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=3)
    assert a.filter.data.tobytes() == b.filter.data.tobytes()
    c = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=4)
    assert a.filter.data.tobytes() != c.filter.data.tobytes()


def test_init_tracker_rejects_degenerate_box():
    seq = S.generate(static_scene(), seed=8)
    net = M.TrackerModel(MICRO, seed=42)
    with pytest.raises(ValueError, match="degenerate"):
        P.init_tracker(seq.rgb[0], seq.depth[0], (10.0, 10.0, 0.0, 5.0), net)


# ---------------------------------------------------------------------------
# per-frame tracking

def test_track_static_target_does_not_drift():
    seq = S.generate(static_scene(length=6), seed=9)
    net = zero_head(M.TrackerModel(MICRO, seed=43))
    st = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=5)
    init_overlap = B.iou(st.current_box, seq.gt_boxes[0])
    for t in range(1, len(seq.rgb)):
        box, conf, st = P.track_step(st, seq.rgb[t], seq.depth[t], net)
        assert B.iou(box, seq.gt_boxes[t]) >= init_overlap - 1e-12
        assert box[2] > 0 and box[3] > 0
        assert box[0] >= 0 and box[1] >= 0
        assert box[0] + box[2] <= seq.frame_size[0]
        assert box[1] + box[3] <= seq.frame_size[1]


def test_track_low_confidence_leaves_state_unchanged():
    seq = S.generate(static_scene(), seed=10)
    net = zero_head(M.TrackerModel(MICRO, seed=44))
    st = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=6)
    st.filter = T.tensor(np.zeros_like(st.filter.data))  # scores become 0
    before_mem = list(st.sample_memory)
    filt = st.filter
    box, conf, st = P.track_step(st, seq.rgb[1], seq.depth[1], net)
    assert conf == 0.0
    assert st.sample_memory == before_mem
    assert st.filter is filt


def test_track_confident_frames_grow_and_bound_memory():
    seq = S.generate(static_scene(length=8), seed=12)
    net = zero_head(M.TrackerModel(MICRO, seed=45))
    st = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net,
                        seed=7, memory_capacity=16, confidence_gate=0.05)
    filt0 = st.filter.data.copy()
    _, conf, st = P.track_step(st, seq.rgb[1], seq.depth[1], net)
    assert conf > 0.05
    assert len(st.sample_memory) == 16
    first_online = st.sample_memory[15]
    assert not np.array_equal(st.filter.data, filt0)  # one refine step ran
    _, _, st = P.track_step(st, seq.rgb[2], seq.depth[2], net)
    assert len(st.sample_memory) == 16  # capacity bound holds
    assert st.sample_memory[15] is not first_online  # oldest online evicted
    for i in range(15):  # initial samples survive
        assert st.sample_memory[i] is not None


def test_track_confidence_drops_when_target_leaves():
    spec = S.SceneSpec(
        name="exit", width=128, height=128, length=10,
        target=S.ObjectSpec("disk", 20.0, (230, 230, 230), 1200.0,
                            64.0, 64.0, vx=14.0, bounce=False),
        background_color=(25, 25, 25))
    seq = S.generate(spec, seed=13)
    first_absent = next(i for i, v in enumerate(seq.visible) if not v)
    net = zero_head(M.TrackerModel(profiles.DESK, seed=46))
    st = P.init_tracker(seq.rgb[0], seq.depth[0], seq.gt_boxes[0], net, seed=8)
    present, absent = [], []
    for t in range(1, len(seq.rgb)):
        _, conf, st = P.track_step(st, seq.rgb[t], seq.depth[t], net)
        (present if seq.visible[t] else absent).append(conf)
    # confidence collapses within 3 frames of the target leaving
    assert min(absent[:3]) < st.confidence_gate
    assert max(absent) < min(present) / 3
