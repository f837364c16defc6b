"""Tracker network: two-stream backbone, fusion core, discriminative head.

The backbone is a small stack of strided 3x3 convolutions per modality
(separate RGB and depth streams by default). Target classification uses a
filter learned online by unrolled gradient descent against Gaussian cell
labels; every descent step is built from tape operations so the training
loss differentiates through the filter-learning procedure. Box estimation
is a linear regression of (dx, dy, dw, dh) from features pooled at the
score peak, with exponential size updates.

Loss structure:

    L_total = lambda * L_cls + L_bbox

where L_cls is the mean over filter iterations of summed squared hinge
residuals (background cells only penalize positive scores) and L_bbox is
the patch-normalized mean squared box error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import attention as att
from . import boxes as boxlib
from . import checkpoint as ckpt
from . import fusion as fus
from . import tensor as T
from .profiles import Profile
from .tensor import Tensor

FUSE_MODES = ("full", "base", "cmim", "spm", "spm_swapped")


@dataclass
class ConvStream:
    """One modality's feature extractor: 3 strided conv+relu stages."""

    weights: list[Tensor]
    biases: list[Tensor]

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.conv{i}.weight"] = w
            out[f"{prefix}.conv{i}.bias"] = b
        return out

    def forward(self, x: Tensor) -> Tensor:
        for w, b in zip(self.weights, self.biases):
            x = T.relu(T.conv2d(x, w, b, stride=2))
        return x


def _init_stream(widths: tuple[int, ...], rng: np.random.Generator) -> ConvStream:
    chain = (3, *widths)
    ws, bs = [], []
    for cin, cout in zip(chain[:-1], chain[1:]):
        fan_in = cin * 9
        ws.append(T.uniform_init((cout, cin, 3, 3), fan_in, rng))
        bs.append(T.uniform_init((cout,), fan_in, rng))
    return ConvStream(ws, bs)


@dataclass
class RegressParams:
    weight: Tensor   # 4 x C
    bias: Tensor     # 4

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class TrackerModel:
    """All parameters plus the forward paths used by training and tracking."""

    def __init__(self, profile: Profile, seed: int = 0, fuse_mode: str = "full",
                 share_backbone: bool = False):
        profile.validate()
        if fuse_mode not in FUSE_MODES:
            raise ValueError(f"unknown fuse mode {fuse_mode!r}; "
                             f"choose from {FUSE_MODES}")
        self.profile = profile
        self.fuse_mode = fuse_mode
        rng = np.random.Generator(np.random.Philox(key=[seed, 10]))
        widths = (*profile.backbone_widths, profile.channels)
        self.rgb_stream = _init_stream(widths, rng)
        self.depth_stream = (self.rgb_stream if share_backbone
                             else _init_stream(widths, rng))
        self.share_backbone = share_backbone
        self.cmim = fus.init_cmim_params(profile.channels,
                                         profile.attention_config(), rng,
                                         n_layers=profile.cma_layers)
        self.spm = fus.init_spm_params(profile.channels)
        self.regress = RegressParams(
            weight=T.uniform_init((4, profile.channels), profile.channels, rng),
            bias=T.parameter(np.zeros(4)),
        )

    # -- parameters --------------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.rgb_stream.named_parameters("model.backbone.rgb")
        if not self.share_backbone:
            out.update(self.depth_stream.named_parameters("model.backbone.depth"))
        out.update(self.cmim.named_parameters("fusion.cmim"))
        out.update(self.spm.named_parameters("fusion.spm"))
        out.update(self.regress.named_parameters("model.head.regress"))
        return out

    def save(self, path) -> None:
        ckpt.save(path, {name: p.data for name, p in self.named_parameters().items()})

    def load(self, path) -> None:
        blob = ckpt.load(path)
        params = self.named_parameters()
        missing = sorted(set(params) - set(blob))
        extra = sorted(set(blob) - set(params))
        if missing or extra:
            raise ckpt.CheckpointError(
                f"{path}: parameter names disagree with this model "
                f"(missing {missing[:3]}, unexpected {extra[:3]})")
        for name, p in params.items():
            if blob[name].shape != p.data.shape:
                raise ckpt.CheckpointError(
                    f"{path}: {name} has shape {blob[name].shape}, "
                    f"model expects {p.data.shape}")
            p.data = np.ascontiguousarray(blob[name])

    # -- forward paths ------------------------------------------------------

    def extract(self, rgb_patch: Tensor, depth_patch: Tensor) -> tuple[Tensor, Tensor]:
        """3 x S x S patches -> (RGB features, depth features), C x S/n x S/n."""
        for patch in (rgb_patch, depth_patch):
            if patch.data.ndim != 3 or patch.shape[0] != 3:
                raise T.ShapeError(f"extract: expected 3 x S x S patch, "
                                   f"got {patch.shape}")
            if patch.shape[1] % self.profile.stride != 0 \
                    or patch.shape[2] % self.profile.stride != 0:
                raise T.ShapeError(f"extract: resolution {patch.shape} not "
                                   f"divisible by stride {self.profile.stride}")
        return self.rgb_stream.forward(rgb_patch), self.depth_stream.forward(depth_patch)

    def fuse(self, i0: Tensor, d0: Tensor) -> Tensor:
        mode = self.fuse_mode
        if mode == "base":
            return fus.base_fuse(i0, d0)
        if mode == "cmim":
            return fus.cmim(i0, d0, self.cmim)
        if mode == "spm":
            return fus.spm(fus.base_fuse(i0, d0), i0, d0, self.spm)
        if mode == "spm_swapped":
            return fus.spm_swapped(fus.cmim(i0, d0, self.cmim), i0, d0, self.spm)
        return fus.spm(fus.cmim(i0, d0, self.cmim), i0, d0, self.spm)

    def features(self, rgb_patch: Tensor, depth_patch: Tensor) -> Tensor:
        fused = self.fuse(*self.extract(rgb_patch, depth_patch))
        if self.profile.normalize_features:
            return channel_norm(fused)
        return fused


def channel_norm(x: Tensor) -> Tensor:
    """Parameter-free normalization over channels at each spatial cell.

    Keeps the fused map's scale independent of the backbone's, so filter
    amplitudes and confidence peaks stay comparable across inputs.
    """
    if x.data.ndim != 3:
        raise T.ShapeError(f"channel_norm: expected C x h x w, got {x.shape}")
    c, h, w = x.shape
    flat = T.transpose(T.reshape(x, (c, h * w)))
    normed = T.layer_norm(flat, T.tensor(np.ones(c)), T.tensor(np.zeros(c)))
    return T.reshape(T.transpose(normed), (c, h, w))


# ---------------------------------------------------------------------------
# labels

def gaussian_labels(gt_box, map_size: int, stride: int,
                    sigma_cells: float = 0.25) -> np.ndarray:
    """Gaussian confidence targets on feature cells, peak 1 at the center cell.

    The center is snapped to the cell containing the box center so the peak
    is exactly 1; sigma scales with the box size measured in cells.
    """
    x, y, w, h = boxlib.as_box(gt_box)
    if w <= 0 or h <= 0:
        raise ValueError(f"gaussian_labels: degenerate box {(x, y, w, h)}")
    cx, cy = x + w / 2.0, y + h / 2.0
    ci = int(np.clip(cy // stride, 0, map_size - 1))
    cj = int(np.clip(cx // stride, 0, map_size - 1))
    sigma = max(sigma_cells * np.sqrt(w * h) / stride, 1e-6)
    ii, jj = np.mgrid[0:map_size, 0:map_size]
    d2 = (ii - ci) ** 2 + (jj - cj) ** 2
    return np.exp(-d2 / (2.0 * sigma * sigma))


# ---------------------------------------------------------------------------
# classification head

def hinge_residual(s, z, threshold: float):
    """Eq-style residual: s - z on target cells (z > threshold), max(0, s) off them."""
    s = np.asarray(s, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > threshold, s - z, np.maximum(0.0, s))


def classify(f: Tensor, fused: Tensor) -> Tensor:
    """Cross-correlate the filter over a fused C x h x w map -> h x w scores."""
    if fused.data.ndim != 3 or f.data.ndim != 4 or f.shape[1] != fused.shape[0]:
        raise T.ShapeError(f"classify: filter {f.shape} does not slide over "
                           f"features {fused.shape}")
    out = T.conv2d(fused, f)
    return T.reshape(out, out.shape[1:])


def peak_cell(scores: np.ndarray) -> tuple[int, int]:
    """Row-major argmax; ties resolve to the lowest index."""
    idx = int(np.argmax(scores))
    return idx // scores.shape[1], idx % scores.shape[1]


def _filter_descent_step(f: Tensor, samples, step: float,
                         threshold: float) -> Tensor:
    """One descent step on the summed hinged residual, Cauchy step length.

    ``samples`` is a sequence of (features, labels) pairs sharing one
    filter. The objective sum over samples and cells of residual^2 is
    piecewise quadratic in f. Along the gradient direction q, a cell
    contributes curvature 2*conv(X, q)^2 wherever its residual is live:
    target cells always, background cells while their score is positive.
    Walking down -q, a background cell's score moves monotonically, so the
    cells that can be live anywhere along the step are exactly the targets,
    the currently-active background, and the background cells whose
    response to q points toward activation. Summing those gives a bound B
    on the directional curvature, and eta = step * |q|^2 / B descends
    monotonically for any feature magnitude whenever step < 2; step=1
    minimizes the quadratic bound and solves a single-cell map in one
    step. Both q and eta live on the tape, so meta-gradients flow through
    the step length as well as the direction.
    """
    q = None
    cache = []
    for x, z in samples:
        scores = classify(f, x)
        resid = T.hinge(scores, z, threshold)
        qi = T.reshape(T.filter_grad(x, resid, f.shape[-1]), f.shape)
        q = qi if q is None else T.add(q, qi)
        cache.append((x, np.asarray(z, dtype=np.float64), scores.data))
    den = None
    for x, z, s in cache:
        response = classify(q, x)
        live = np.where(z > threshold, 1.0,
                        ((s > 0) | (response.data < 0)).astype(np.float64))
        masked = T.mul(response, T.tensor(live))
        term = T.sum(T.mul(masked, masked))
        den = term if den is None else T.add(den, term)
    num = T.sum(T.mul(q, q))
    den = T.add(T.scale(den, 2.0), T.tensor(1e-30))
    eta = T.scale(T.mul(num, T.reciprocal(den)), 2.0 * step)
    return T.sub(f, T.mul(T.broadcast_to(eta, q.shape), q))


def learn_filter_set(samples, *, filter_size: int = 3, n_iter: int = 5,
                     step: float = 1.0, threshold: float = 0.05) -> list[Tensor]:
    """Unrolled descent on the joint residual of a sample set, from zero.

    Returns the filter after each of the n_iter steps (all on the tape, so
    a loss evaluated on any iterate differentiates back into the features).
    """
    if n_iter < 1:
        raise ValueError(f"learn_filter: n_iter must be >= 1, got {n_iter}")
    samples = list(samples)
    if not samples:
        raise ValueError("learn_filter: empty sample set")
    for x, _ in samples:
        if not np.isfinite(x.data).all():
            raise FloatingPointError("learn_filter: non-finite features")
    f = T.zeros((1, samples[0][0].shape[0], filter_size, filter_size))
    iterates: list[Tensor] = []
    for _ in range(n_iter):
        f = _filter_descent_step(f, samples, step, threshold)
        iterates.append(f)
    return iterates


def learn_filter(fused_template: Tensor, labels: np.ndarray, *,
                 filter_size: int = 3, n_iter: int = 5, step: float = 1.0,
                 threshold: float = 0.05) -> list[Tensor]:
    """Single-sample convenience wrapper around learn_filter_set."""
    return learn_filter_set([(fused_template, labels)], filter_size=filter_size,
                            n_iter=n_iter, step=step, threshold=threshold)


def refine_filter(f: Tensor, samples, *, step: float = 1.0,
                  threshold: float = 0.05) -> Tensor:
    """One descent step from an existing filter on a sample set."""
    return _filter_descent_step(f, list(samples), step, threshold)


# ---------------------------------------------------------------------------
# box regression head

def regress_bbox(fused_search: Tensor, peak: tuple[int, int], prev_box,
                 params: RegressParams, stride: int,
                 patch_size: int) -> tuple[Tensor, np.ndarray]:
    """Box deltas from features pooled at the score peak.

    Returns the box as a tape tensor (x, y, w, h) in patch coordinates for
    the loss, plus a clamped numpy copy for the tracker. Center moves by
    (dx, dy) cells from the peak cell center; size scales by exp(dw/dh) of
    the previous box.
    """
    c, h, w = fused_search.shape
    pi, pj = peak
    if not (0 <= pi < h and 0 <= pj < w):
        raise T.ShapeError(f"regress_bbox: peak {peak} outside {h}x{w} map")
    win = 3 if min(h, w) >= 3 else 1
    row = min(max(pi - win // 2, 0), h - win)
    col = min(max(pj - win // 2, 0), w - win)
    pooled = T.spatial_mean(T.slice_window(fused_search, row, col, win))
    delta = T.add(T.matmul(params.weight, T.reshape(pooled, (c, 1))),
                  T.reshape(params.bias, (4, 1)))
    delta = T.reshape(delta, (4,))

    prev = boxlib.as_box(prev_box)
    peak_cx = (pj + 0.5) * stride
    peak_cy = (pi + 0.5) * stride
    dx = T.narrow(delta, 0, 0, 1)
    dy = T.narrow(delta, 0, 1, 1)
    dw = T.narrow(delta, 0, 2, 1)
    dh = T.narrow(delta, 0, 3, 1)
    bw = T.scale(T.exp(dw), prev[2])
    bh = T.scale(T.exp(dh), prev[3])
    cx = T.add(T.scale(dx, float(stride)), T.tensor([peak_cx]))
    cy = T.add(T.scale(dy, float(stride)), T.tensor([peak_cy]))
    box = T.concat([T.sub(cx, T.scale(bw, 0.5)), T.sub(cy, T.scale(bh, 0.5)),
                    bw, bh], axis=0)
    clamped = boxlib.clamp_to_frame(box.data, patch_size, patch_size)
    return box, clamped


# ---------------------------------------------------------------------------
# losses

def loss_cls(score_history: list[list[Tensor]], labels: list[np.ndarray],
             threshold: float = 0.05) -> Tensor:
    """Mean over iterations of summed squared hinge residuals over samples."""
    if not score_history or not score_history[0]:
        raise ValueError("loss_cls: empty sample set")
    terms = []
    for per_iter in score_history:
        if len(per_iter) != len(labels):
            raise ValueError(f"loss_cls: {len(per_iter)} score maps vs "
                             f"{len(labels)} label maps")
        for scores, z in zip(per_iter, labels):
            r = T.hinge(scores, z, threshold)
            terms.append(T.sum(T.mul(r, r)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / len(score_history))


def loss_bbox(pred_boxes: list[Tensor], gt_boxes: list[np.ndarray],
              patch_size: int) -> Tensor:
    """MSE over patch-normalized (x, y, w, h), mean over coords and samples."""
    if len(pred_boxes) != len(gt_boxes):
        raise ValueError(f"loss_bbox: {len(pred_boxes)} predictions vs "
                         f"{len(gt_boxes)} ground-truth boxes")
    if not pred_boxes:
        raise ValueError("loss_bbox: empty sample set")
    inv = 1.0 / patch_size
    terms = []
    for pred, gt in zip(pred_boxes, gt_boxes):
        diff = T.sub(T.scale(pred, inv), T.tensor(boxlib.as_box(gt) * inv))
        terms.append(T.sum(T.mul(diff, diff)))
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.scale(total, 1.0 / (4.0 * len(pred_boxes)))


def loss_total(l_cls: Tensor, l_bbox: Tensor, lam: float = 1e-2) -> Tensor:
    return T.add(T.scale(l_cls, lam), l_bbox)


# ---------------------------------------------------------------------------
# full training objective on one template/search pair

def pair_loss(net: TrackerModel, t_rgb: Tensor, t_depth: Tensor, s_rgb: Tensor,
              s_depth: Tensor, t_box, s_box) -> dict[str, Tensor]:
    """Assemble the end-to-end objective for one (template, search) pair.

    The filter is learned on the template by unrolled descent; the
    classification term is evaluated on the search scores of the final
    iterate (earlier iterates feed the logged average only, detached).
    Regression pools at the label peak so the objective stays continuous
    in the parameters.
    """
    prof = net.profile
    f_t = net.features(t_rgb, t_depth)
    f_s = net.features(s_rgb, s_depth)
    t_labels = gaussian_labels(t_box, prof.map_size, prof.stride, prof.sigma_cells)
    s_labels = gaussian_labels(s_box, prof.map_size, prof.stride, prof.sigma_cells)

    iterates = learn_filter(f_t, t_labels, filter_size=prof.filter_size,
                            n_iter=prof.n_iter, step=prof.filter_step,
                            threshold=prof.label_threshold)
    search_scores = [classify(f, f_s) for f in iterates]
    l_cls = loss_cls([[search_scores[-1]]], [s_labels], prof.label_threshold)
    avg_cls = loss_cls([[T.tensor(s.data)] for s in search_scores], [s_labels],
                       prof.label_threshold)

    peak = peak_cell(s_labels)
    pred_box, _ = regress_bbox(f_s, peak, boxlib.as_box(s_box), net.regress,
                               prof.stride, prof.patch_size)
    l_bbox = loss_bbox([pred_box], [boxlib.as_box(s_box)], prof.patch_size)
    total = loss_total(l_cls, l_bbox, prof.loss_lambda)
    return {"total": total, "cls": l_cls, "bbox": l_bbox, "cls_iter_avg": avg_cls}
