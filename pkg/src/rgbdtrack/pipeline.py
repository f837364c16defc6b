"""Training loop and online tracking runtime.

Training samples template/search pairs from synthetic sequences, augments
them (translation jitter, horizontal flip, brightness), and optimizes all
model parameters with decoupled weight decay and a stepped learning-rate
schedule with optional linear warmup. Tracking keeps a bounded memory of
fused samples and refines the classification filter on confident frames.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import boxes as boxlib
from . import model as M
from . import synthdata
from . import tensor as T
from .profiles import Profile
from .tensor import Tensor


class TrainingError(RuntimeError):
    """Raised when training encounters a non-finite loss."""


# ---------------------------------------------------------------------------
# optimizer

@dataclasses.dataclass
class TrainConfig:
    epochs: int
    pairs_per_epoch: int
    learning_rate: float
    lr_decay_factor: float = 0.2
    lr_decay_period_epochs: int = 15
    warmup_epochs: float = 0.0
    weight_decay: float = 1e-4
    seed: int = 0

    def validate(self) -> None:
        if self.epochs < 1 or self.pairs_per_epoch < 1:
            raise ValueError("TrainConfig: epochs and pairs_per_epoch must be >= 1")
        if self.learning_rate <= 0 or self.lr_decay_period_epochs < 1:
            raise ValueError("TrainConfig: learning_rate and decay period must be positive")
        if not 0.0 < self.lr_decay_factor < 1.0:
            raise ValueError("TrainConfig: lr_decay_factor must lie in (0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("TrainConfig: warmup_epochs must be >= 0")
        if self.weight_decay < 0:
            raise ValueError("TrainConfig: weight_decay must be >= 0")


def lr_at_epoch(config: TrainConfig, epoch: int) -> float:
    return config.learning_rate * config.lr_decay_factor ** (
        epoch // config.lr_decay_period_epochs)


def warmup_factor(config: TrainConfig, global_step: int) -> float:
    """Linear ramp from ~0 to 1 over the first warmup_epochs of steps."""
    steps = config.warmup_epochs * config.pairs_per_epoch
    if steps <= 0:
        return 1.0
    return min(1.0, (global_step + 1) / steps)


class AdamW:
    """Adaptive moments with decoupled weight decay.

    The decay term is applied directly to the parameters, outside the
    moment estimates: with a zero gradient a parameter shrinks by exactly
    lr * weight_decay * theta per step.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 weight_decay: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = dict(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.t = 0
        self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            p.data -= self.lr * self.weight_decay * p.data


# ---------------------------------------------------------------------------
# patch preparation and augmentation

def rgb_to_input(patch: np.ndarray) -> np.ndarray:
    """H x W x 3 intensity patch (0..255 scale) -> 3 x H x W in [0, 1]."""
    return np.ascontiguousarray(patch.transpose(2, 0, 1)) / 255.0


def depth_to_input(patch: np.ndarray, max_depth_mm: float) -> np.ndarray:
    """H x W depth patch in mm -> replicated 3 x H x W in [0, 1]."""
    norm = np.clip(patch / max_depth_mm, 0.0, 1.0)
    return np.ascontiguousarray(np.broadcast_to(norm, (3,) + norm.shape))


def flip_patch(rgb_in: np.ndarray, depth_in: np.ndarray, box,
               patch_size: int):
    """Mirror both modalities and the box around the vertical axis."""
    x, y, w, h = boxlib.as_box(box)
    flipped_box = np.array([patch_size - x - w, y, w, h])
    return (np.ascontiguousarray(rgb_in[:, :, ::-1]),
            np.ascontiguousarray(depth_in[:, :, ::-1]), flipped_box)


def apply_brightness(rgb_in: np.ndarray, factor: float) -> np.ndarray:
    return np.clip(rgb_in * factor, 0.0, 1.0)


def _crop_sample(rgb: np.ndarray, depth: np.ndarray, crop_box, true_box,
                 prof: Profile):
    """Crop both modalities around crop_box; map true_box into the patch."""
    rgb_patch, tf = synthdata.crop(rgb, crop_box, prof.crop_area_factor,
                                   prof.patch_size)
    depth_patch, _ = synthdata.crop(depth, crop_box, prof.crop_area_factor,
                                    prof.patch_size)
    return (rgb_to_input(rgb_patch),
            depth_to_input(depth_patch, prof.max_depth_mm),
            tf.box_to_patch(true_box), tf)


def _augmented_sample(rgb, depth, box, prof: Profile, rng, *,
                      jitter: float = 0.1, flip_prob: float = 0.5,
                      brightness: tuple[float, float] = (0.8, 1.2)):
    """One augmented training sample; draws are in a fixed order."""
    box = boxlib.as_box(box)
    do_flip = rng.uniform() < flip_prob
    dx = rng.uniform(-jitter, jitter) * box[2]
    dy = rng.uniform(-jitter, jitter) * box[3]
    factor = rng.uniform(brightness[0], brightness[1])
    crop_box = np.array([box[0] + dx, box[1] + dy, box[2], box[3]])
    rgb_in, depth_in, patch_box, _ = _crop_sample(rgb, depth, crop_box, box, prof)
    if do_flip:
        rgb_in, depth_in, patch_box = flip_patch(rgb_in, depth_in, patch_box,
                                                 prof.patch_size)
    return apply_brightness(rgb_in, factor), depth_in, patch_box


@dataclasses.dataclass
class TrainingPair:
    template_rgb: np.ndarray
    template_depth: np.ndarray
    search_rgb: np.ndarray
    search_depth: np.ndarray
    template_box: np.ndarray   # patch coordinates
    search_box: np.ndarray


def make_training_pair(seq: synthdata.Sequence, indices: tuple[int, int],
                       prof: Profile, rng, *, augment: bool = True) -> TrainingPair:
    """Cropped, resized, augmented template/search pair from one sequence.

    ``rng`` is a numpy Generator (or an int seed). With augment=False the
    crops are exactly centered on the groundtruth boxes and untouched.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.Generator(np.random.Philox(key=[int(rng), 1]))
    sides = []
    for idx in indices:
        if not 0 <= idx < len(seq.rgb):
            raise IndexError(f"frame {idx} outside sequence of length {len(seq.rgb)}")
        box = seq.gt_boxes[idx]
        if box is None or not seq.visible[idx]:
            raise ValueError(f"frame {idx}: target not visible")
        if augment:
            sides.append(_augmented_sample(seq.rgb[idx], seq.depth[idx], box,
                                           prof, rng))
        else:
            rgb_in, depth_in, patch_box, _ = _crop_sample(
                seq.rgb[idx], seq.depth[idx], box, box, prof)
            sides.append((rgb_in, depth_in, patch_box))
    (t_rgb, t_depth, t_box), (s_rgb, s_depth, s_box) = sides
    return TrainingPair(t_rgb, t_depth, s_rgb, s_depth, t_box, s_box)


# ---------------------------------------------------------------------------
# training loop

def _visible_frames(seq: synthdata.Sequence) -> list[int]:
    return [i for i, v in enumerate(seq.visible)
            if v and seq.gt_boxes[i] is not None]


def train(net: M.TrackerModel, dataset, config: TrainConfig, *,
          log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None) -> list[str]:
    """Optimize the model on template/search pairs drawn from ``dataset``.

    Returns one log line per epoch: "epoch,L_total,L_cls,L_bbox,lr".
    Deterministic for a fixed config seed and dataset.
    """
    config.validate()
    dataset = list(dataset)
    if not dataset:
        raise ValueError("train: empty dataset")
    usable = [(seq, _visible_frames(seq)) for seq in dataset]
    usable = [(seq, vis) for seq, vis in usable if len(vis) >= 1]
    if not usable:
        raise ValueError("train: no sequence has a visible target")
    rng = np.random.Generator(np.random.Philox(key=[config.seed, 2]))
    params = net.named_parameters()
    opt = AdamW(params, lr=config.learning_rate,
                weight_decay=config.weight_decay)
    lines: list[str] = []
    global_step = 0
    for epoch in range(config.epochs):
        base_lr = lr_at_epoch(config, epoch)
        opt.lr = base_lr
        sums = {"total": 0.0, "cls": 0.0, "bbox": 0.0}
        for batch in range(config.pairs_per_epoch):
            opt.lr = base_lr * warmup_factor(config, global_step)
            global_step += 1
            seq, vis = usable[rng.integers(len(usable))]
            idx = (int(vis[rng.integers(len(vis))]),
                   int(vis[rng.integers(len(vis))]))
            pair = make_training_pair(seq, idx, net.profile, rng)
            try:
                losses = M.pair_loss(
                    net, T.tensor(pair.template_rgb), T.tensor(pair.template_depth),
                    T.tensor(pair.search_rgb), T.tensor(pair.search_depth),
                    pair.template_box, pair.search_box)
            except FloatingPointError as exc:
                raise TrainingError(
                    f"non-finite values at epoch {epoch} batch {batch}: {exc}"
                ) from exc
            terms = {k: v.item() for k, v in losses.items()}
            if not all(np.isfinite(v) for v in terms.values()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {batch}: "
                    f"total={terms['total']} cls={terms['cls']} "
                    f"bbox={terms['bbox']}")
            T.zero_grads(params.values())
            T.backward(losses["total"])
            opt.step()
            for key in sums:
                sums[key] += terms[key]
        n = config.pairs_per_epoch
        lines.append(f"{epoch},{sums['total'] / n!r},{sums['cls'] / n!r},"
                     f"{sums['bbox'] / n!r},{opt.lr!r}")
    if log_path is not None:
        Path(log_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    if checkpoint_path is not None:
        net.save(checkpoint_path)
    return lines


# ---------------------------------------------------------------------------
# online tracker

@dataclasses.dataclass
class TrackerState:
    current_box: np.ndarray          # frame coordinates
    filter: Tensor
    sample_memory: list              # (fused features, labels) pairs
    n_initial: int                   # leading samples never evicted
    last_confidence: float
    memory_capacity: int = 30
    confidence_gate: float = 0.5


def _fused_features(net: M.TrackerModel, rgb_in, depth_in) -> Tensor:
    feats = net.features(T.tensor(rgb_in), T.tensor(depth_in))
    return T.tensor(feats.data)  # detached: tracking keeps no tape


def _patch_labels(patch_box, prof: Profile) -> np.ndarray:
    return M.gaussian_labels(patch_box, prof.map_size, prof.stride)


def init_tracker(rgb: np.ndarray, depth: np.ndarray, init_box,
                 net: M.TrackerModel, *, seed: int = 0,
                 memory_capacity: int = 30,
                 confidence_gate: float = 0.5,
                 init_iterations: int | None = None) -> TrackerState:
    """Learn the initial filter from augmented variants of the first frame.

    Builds profile.init_samples samples, the first being the plain centered
    crop, the rest drawn with flip/translation/brightness augmentation.
    The initial fit runs init_iterations descent steps (default three times
    the profile's unroll depth; one-off cost, and the joint fit over the
    sample set needs more steps than a single template).
    """
    prof = net.profile
    if init_iterations is None:
        init_iterations = 3 * prof.n_iter
    box = boxlib.as_box(init_box)
    if box[2] <= 0 or box[3] <= 0:
        raise ValueError(f"init_tracker: degenerate init box {tuple(box)}")
    rng = np.random.Generator(np.random.Philox(key=[seed, 3]))
    samples = []
    rgb_in, depth_in, patch_box, _ = _crop_sample(rgb, depth, box, box, prof)
    samples.append((_fused_features(net, rgb_in, depth_in),
                    _patch_labels(patch_box, prof)))
    for _ in range(prof.init_samples - 1):
        rgb_in, depth_in, patch_box = _augmented_sample(rgb, depth, box,
                                                        prof, rng)
        samples.append((_fused_features(net, rgb_in, depth_in),
                        _patch_labels(patch_box, prof)))
    f = M.learn_filter_set(samples, filter_size=prof.filter_size,
                           n_iter=init_iterations, step=prof.filter_step,
                           threshold=prof.label_threshold)[-1]
    return TrackerState(current_box=box.copy(), filter=T.tensor(f.data),
                        sample_memory=samples, n_initial=len(samples),
                        last_confidence=1.0, memory_capacity=memory_capacity,
                        confidence_gate=confidence_gate)


def track_step(state: TrackerState, rgb: np.ndarray, depth: np.ndarray,
               net: M.TrackerModel):
    """Advance the tracker by one frame; returns (box, confidence, state).

    The search region is cropped around the previous box. When the peak
    score clears the confidence gate the fused sample joins the memory
    (evicting the oldest non-initial sample at capacity) and the filter
    takes one refinement step over the whole memory.
    """
    prof = net.profile
    frame_h, frame_w = rgb.shape[:2]
    rgb_in, depth_in, prev_patch_box, tf = _crop_sample(
        rgb, depth, state.current_box, state.current_box, prof)
    feats = _fused_features(net, rgb_in, depth_in)
    scores = M.classify(state.filter, feats).data
    peak = M.peak_cell(scores)
    confidence = float(scores[peak])
    _, patch_box = M.regress_bbox(feats, peak, prev_patch_box, net.regress,
                                  prof.stride, prof.patch_size)
    frame_box = boxlib.clamp_to_frame(tf.box_to_frame(patch_box),
                                      frame_w, frame_h)
    state.current_box = frame_box
    state.last_confidence = confidence
    if confidence > state.confidence_gate:
        labels = _patch_labels(tf.box_to_patch(frame_box), prof)
        state.sample_memory.append((feats, labels))
        if len(state.sample_memory) > state.memory_capacity:
            state.sample_memory.pop(state.n_initial)
        refined = M.refine_filter(state.filter, state.sample_memory,
                                  step=prof.filter_step,
                                  threshold=prof.label_threshold)
        state.filter = T.tensor(refined.data)
    return frame_box.copy(), confidence, state
