"""Deterministic synthetic RGBD sequence generator.

Scenes are a handful of flat shapes (disks and rectangles) at fixed metric
depths, rasterized into an RGB buffer and a millimeter z-buffer per frame.
All randomness (distractor placement, background clutter) comes from a
counter-based Philox-4x64-10 generator keyed by (seed, stream), so a seed
reproduces bit-identically across platforms; nothing uses the language
default PRNG.

Conventions:
- continuous coordinates: pixel (i, j) spans [j, j+1) x [i, i+1), center
  (j+0.5, i+0.5)
- depth frames store the nearest surface per pixel in millimeters (uint16)
- a frame's ground truth is the tight pixel bound of the target surface
  actually visible after z-buffering; the target counts as absent when
  more than ``OCCLUSION_VISIBILITY_LIMIT`` of its silhouette is covered
  or out of frame
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from . import boxes

ATTRIBUTE_TAGS = ("BC", "DS", "SO", "FM", "PO", "DC")
OCCLUSION_VISIBILITY_LIMIT = 0.9
DEFAULT_BACKGROUND_DEPTH_MM = 9000.0
CLUTTER_PATCH_COUNT = 60


class SceneSpecError(ValueError):
    """Raised for an invalid or inconsistent scene description."""


@dataclass(frozen=True)
class ObjectSpec:
    """A flat shape at a metric depth with linear motion."""

    shape: str                     # "disk" or "rectangle"
    size: float                    # disk diameter / rectangle side, pixels
    color: tuple[int, int, int]
    depth_mm: float
    x: float                       # starting center
    y: float
    vx: float = 0.0
    vy: float = 0.0
    depth_velocity: float = 0.0    # mm per frame
    bounce: bool = True            # reflect off frame edges

    def at(self, t: int, width: int, height: int) -> tuple[float, float, float]:
        """Center position and depth at frame t."""
        x = _bounce_coord(self.x, self.vx, t, width) if self.bounce \
            else self.x + self.vx * t
        y = _bounce_coord(self.y, self.vy, t, height) if self.bounce \
            else self.y + self.vy * t
        return x, y, self.depth_mm + self.depth_velocity * t


@dataclass(frozen=True)
class OccluderSpec:
    """A rectangle that exists during [t_start, t_end) at a fixed depth.

    When follow_target is set the rectangle re-centers on the target each
    frame, which guarantees full cover regardless of target motion.
    """

    t_start: int
    t_end: int
    depth_mm: float
    width: float = 0.0             # 0 means 2x target size
    height: float = 0.0
    color: tuple[int, int, int] = (40, 40, 40)
    follow_target: bool = True
    x: float = 0.0                 # used when follow_target is false
    y: float = 0.0


@dataclass(frozen=True)
class SceneSpec:
    name: str
    width: int = 128
    height: int = 128
    length: int = 30
    target: ObjectSpec = field(default_factory=lambda: ObjectSpec(
        "disk", 20.0, (200, 60, 60), 1500.0, 64.0, 64.0))
    distractors: tuple[ObjectSpec, ...] = ()
    occluders: tuple[OccluderSpec, ...] = ()
    illumination: float = 1.0
    background: str = "plain"      # "plain" or "clutter"
    background_color: tuple[int, int, int] = (120, 120, 120)
    background_depth_mm: float = DEFAULT_BACKGROUND_DEPTH_MM
    tags: tuple[str, ...] = ()

    def validate(self) -> None:
        if self.width < 8 or self.height < 8 or self.length < 1:
            raise SceneSpecError(f"{self.name}: degenerate frame geometry "
                                 f"{self.width}x{self.height}x{self.length}")
        for obj in (self.target, *self.distractors):
            if obj.size <= 0:
                raise SceneSpecError(f"{self.name}: non-positive object size "
                                     f"{obj.size}")
            if obj.shape not in ("disk", "rectangle"):
                raise SceneSpecError(f"{self.name}: unknown shape {obj.shape!r}")
            if obj.depth_mm <= 0:
                raise SceneSpecError(f"{self.name}: non-positive depth {obj.depth_mm}")
        if not 0.0 < self.illumination <= 1.0:
            raise SceneSpecError(f"{self.name}: illumination {self.illumination} "
                                 f"outside (0, 1]")
        if self.background not in ("plain", "clutter"):
            raise SceneSpecError(f"{self.name}: unknown background mode "
                                 f"{self.background!r}")
        for tag in self.tags:
            if tag not in ATTRIBUTE_TAGS:
                raise SceneSpecError(f"{self.name}: unknown attribute tag {tag!r}")
        if "PO" in self.tags and not self.occluders:
            raise SceneSpecError(f"{self.name}: PO tag requires at least one "
                                 f"occluder")
        for occ in self.occluders:
            if not 0 <= occ.t_start < occ.t_end <= self.length:
                raise SceneSpecError(f"{self.name}: occluder window "
                                     f"[{occ.t_start}, {occ.t_end}) outside "
                                     f"sequence of length {self.length}")


@dataclass
class Sequence:
    rgb: list[np.ndarray]              # H x W x 3 uint8
    depth: list[np.ndarray]            # H x W uint16, millimeters
    gt_boxes: list[np.ndarray | None]  # (x, y, w, h) float, None when absent
    visible: list[bool]
    tags: tuple[str, ...]
    seed: int

    def __len__(self) -> int:
        return len(self.rgb)

    @property
    def frame_size(self) -> tuple[int, int]:
        h, w = self.rgb[0].shape[:2]
        return w, h


def _bounce_coord(start: float, v: float, t: int, extent: int) -> float:
    """Position after t steps with reflection off [0, extent]."""
    if v == 0.0:
        return start
    period = 2.0 * extent
    u = (start + v * t) % period
    return u if u <= extent else period - u


def _shape_mask(shape: str, cx: float, cy: float, size: float,
                height: int, width: int) -> np.ndarray:
    ii, jj = np.mgrid[0:height, 0:width]
    px = jj + 0.5
    py = ii + 0.5
    if shape == "disk":
        return (px - cx) ** 2 + (py - cy) ** 2 <= (size / 2.0) ** 2
    half = size / 2.0
    return (np.abs(px - cx) <= half) & (np.abs(py - cy) <= half)


def _rect_mask(cx: float, cy: float, w: float, h: float,
               height: int, width: int) -> np.ndarray:
    ii, jj = np.mgrid[0:height, 0:width]
    return (np.abs(jj + 0.5 - cx) <= w / 2.0) & (np.abs(ii + 0.5 - cy) <= h / 2.0)


def _shape_area(shape: str, size: float) -> float:
    if shape == "disk":
        return np.pi * (size / 2.0) ** 2
    return size * size


def _paint(color_buf: np.ndarray, depth_buf: np.ndarray, mask: np.ndarray,
           color: tuple[int, int, int], depth_mm: float) -> np.ndarray:
    """Z-buffered write; returns the pixels actually won by this surface."""
    won = mask & (depth_mm < depth_buf)
    color_buf[won] = color
    depth_buf[won] = depth_mm
    return won


def _clutter_layer(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    """Static background texture: random gray-ish patches, color only."""
    layer = np.empty((spec.height, spec.width, 3), dtype=np.float64)
    layer[:] = spec.background_color
    for _ in range(CLUTTER_PATCH_COUNT):
        cx = rng.uniform(0, spec.width)
        cy = rng.uniform(0, spec.height)
        w = rng.uniform(4, spec.width / 3)
        h = rng.uniform(4, spec.height / 3)
        color = rng.uniform(30, 225, size=3)
        mask = _rect_mask(cx, cy, w, h, spec.height, spec.width)
        layer[mask] = color
    return layer


def generate(spec: SceneSpec, seed: int) -> Sequence:
    """Render a sequence; bit-identical for identical (spec, seed)."""
    spec.validate()
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    background = (_clutter_layer(spec, rng) if spec.background == "clutter"
                  else np.broadcast_to(np.asarray(spec.background_color, dtype=np.float64),
                                       (spec.height, spec.width, 3)).copy())
    rgb_frames: list[np.ndarray] = []
    depth_frames: list[np.ndarray] = []
    gt: list[np.ndarray | None] = []
    visible: list[bool] = []

    for t in range(spec.length):
        color_buf = background.copy()
        depth_buf = np.full((spec.height, spec.width), spec.background_depth_mm)
        tx, ty, tdepth = spec.target.at(t, spec.width, spec.height)
        target_mask = _shape_mask(spec.target.shape, tx, ty, spec.target.size,
                                  spec.height, spec.width)
        target_won = _paint(color_buf, depth_buf, target_mask,
                            spec.target.color, tdepth)
        for obj in spec.distractors:
            ox, oy, odepth = obj.at(t, spec.width, spec.height)
            mask = _shape_mask(obj.shape, ox, oy, obj.size,
                               spec.height, spec.width)
            won = _paint(color_buf, depth_buf, mask, obj.color, odepth)
            target_won &= ~won
        for occ in spec.occluders:
            if not occ.t_start <= t < occ.t_end:
                continue
            ow = occ.width if occ.width > 0 else 2.0 * spec.target.size
            oh = occ.height if occ.height > 0 else 2.0 * spec.target.size
            ocx, ocy = (tx, ty) if occ.follow_target else (occ.x, occ.y)
            mask = _rect_mask(ocx, ocy, ow, oh, spec.height, spec.width)
            won = _paint(color_buf, depth_buf, mask, occ.color, occ.depth_mm)
            target_won &= ~won

        lit = np.clip(np.rint(color_buf * spec.illumination), 0, 255)
        rgb_frames.append(lit.astype(np.uint8))
        depth_frames.append(np.clip(np.rint(depth_buf), 0, 65535).astype(np.uint16))

        full_area = _shape_area(spec.target.shape, spec.target.size)
        visible_fraction = target_won.sum() / full_area
        is_visible = visible_fraction >= (1.0 - OCCLUSION_VISIBILITY_LIMIT)
        visible.append(is_visible)
        if is_visible:
            rows = np.flatnonzero(target_won.any(axis=1))
            cols = np.flatnonzero(target_won.any(axis=0))
            gt.append(np.array([cols[0], rows[0],
                                cols[-1] + 1 - cols[0], rows[-1] + 1 - rows[0]],
                               dtype=np.float64))
        else:
            gt.append(None)

    return Sequence(rgb_frames, depth_frames, gt, visible, tuple(spec.tags), seed)


# ---------------------------------------------------------------------------
# cropping

@dataclass(frozen=True)
class CropTransform:
    """Affine map from frame coordinates into patch coordinates."""

    x0: float
    y0: float
    scale: float

    def point_to_patch(self, x: float, y: float) -> tuple[float, float]:
        return (x - self.x0) * self.scale, (y - self.y0) * self.scale

    def point_to_frame(self, px: float, py: float) -> tuple[float, float]:
        return px / self.scale + self.x0, py / self.scale + self.y0

    def box_to_patch(self, box) -> np.ndarray:
        x, y, w, h = boxes.as_box(box)
        px, py = self.point_to_patch(x, y)
        return np.array([px, py, w * self.scale, h * self.scale])

    def box_to_frame(self, box) -> np.ndarray:
        px, py, pw, ph = boxes.as_box(box)
        x, y = self.point_to_frame(px, py)
        return np.array([x, y, pw / self.scale, ph / self.scale])


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Sample continuous coordinates with edge clamping (float output)."""
    h, w = img.shape[:2]
    u = xs - 0.5
    v = ys - 0.5
    j0 = np.clip(np.floor(u).astype(int), 0, w - 1)
    i0 = np.clip(np.floor(v).astype(int), 0, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    i1 = np.minimum(i0 + 1, h - 1)
    tx = np.clip(u - j0, 0.0, 1.0)
    ty = np.clip(v - i0, 0.0, 1.0)
    if img.ndim == 3:
        tx = tx[..., None]
        ty = ty[..., None]
    img = img.astype(np.float64)
    top = img[i0, j0] * (1 - tx) + img[i0, j1] * tx
    bot = img[i1, j0] * (1 - tx) + img[i1, j1] * tx
    return top * (1 - ty) + bot * ty


def crop(frame: np.ndarray, box, area_factor: float,
         out_size: int) -> tuple[np.ndarray, CropTransform]:
    """Square crop of side sqrt(area_factor * w * h) centered on the box.

    Out-of-frame samples take the nearest edge value; the result is resized
    to out_size x out_size by bilinear interpolation. Returns the patch
    (float64) and the frame->patch transform.
    """
    x, y, w, h = boxes.as_box(box)
    if w <= 0 or h <= 0:
        raise ValueError(f"crop: zero-area box {(x, y, w, h)}")
    side = float(np.sqrt(area_factor * w * h))
    cx, cy = x + w / 2.0, y + h / 2.0
    x0, y0 = cx - side / 2.0, cy - side / 2.0
    scale = out_size / side
    coords = (np.arange(out_size) + 0.5) / scale
    xs, ys = np.meshgrid(x0 + coords, y0 + coords)
    return _bilinear(frame, xs, ys), CropTransform(x0, y0, scale)


# ---------------------------------------------------------------------------
# sequence serialization

class SequenceIOError(ValueError):
    """Raised when a sequence directory is malformed."""


def write_sequence(seq: Sequence, directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "color").mkdir(parents=True, exist_ok=True)
    (directory / "depth").mkdir(parents=True, exist_ok=True)
    for t, (rgb, depth) in enumerate(zip(seq.rgb, seq.depth)):
        Image.fromarray(rgb).save(directory / "color" / f"{t:08d}.png")
        Image.fromarray(depth).save(directory / "depth" / f"{t:08d}.png")
    lines = []
    for box in seq.gt_boxes:
        if box is None:
            lines.append("nan,nan,nan,nan")
        else:
            lines.append(",".join(repr(float(v)) for v in box))
    (directory / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    (directory / "attributes.txt").write_text(
        "".join(f"{tag}\n" for tag in seq.tags))
    w, h = seq.frame_size
    (directory / "meta.txt").write_text(
        f"width={w}\nheight={h}\nlength={len(seq)}\nseed={seq.seed}\n")


def _parse_meta(path: Path) -> dict[str, int]:
    meta: dict[str, int] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        m = re.fullmatch(r"(\w+)=(-?\d+)", line)
        if not m:
            raise SequenceIOError(f"{path}:{lineno}: malformed meta line {line!r}")
        meta[m.group(1)] = int(m.group(2))
    for key in ("width", "height", "length", "seed"):
        if key not in meta:
            raise SequenceIOError(f"{path}: missing key {key!r}")
    return meta


def _parse_groundtruth(gt_path: Path, length: int
                       ) -> tuple[list[np.ndarray | None], list[bool]]:
    gt: list[np.ndarray | None] = []
    visible: list[bool] = []
    lines = gt_path.read_text().splitlines()
    if len(lines) != length:
        raise SequenceIOError(f"{gt_path}: {len(lines)} lines for {length} frames")
    for lineno, line in enumerate(lines, 1):
        parts = line.strip().split(",")
        if len(parts) != 4:
            raise SequenceIOError(f"{gt_path}:{lineno}: expected 4 fields, "
                                  f"got {line!r}")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise SequenceIOError(f"{gt_path}:{lineno}: non-numeric field "
                                  f"in {line!r}") from None
        if any(np.isnan(v) for v in vals):
            gt.append(None)
            visible.append(False)
        else:
            gt.append(np.array(vals))
            visible.append(True)
    return gt, visible


def _read_tags(directory: Path) -> tuple[str, ...]:
    tag_path = directory / "attributes.txt"
    return tuple(tag_path.read_text().split()) if tag_path.exists() else ()


def read_annotations(directory: str | Path
                     ) -> tuple[list[np.ndarray | None], list[bool],
                                tuple[str, ...]]:
    """Ground-truth boxes, visibility flags, and tags; skips pixel data."""
    directory = Path(directory)
    meta = _parse_meta(directory / "meta.txt")
    gt, visible = _parse_groundtruth(directory / "groundtruth.txt",
                                     meta["length"])
    return gt, visible, _read_tags(directory)


def read_sequence(directory: str | Path) -> Sequence:
    directory = Path(directory)
    meta = _parse_meta(directory / "meta.txt")
    length = meta["length"]
    rgb, depth = [], []
    for t in range(length):
        cpath = directory / "color" / f"{t:08d}.png"
        dpath = directory / "depth" / f"{t:08d}.png"
        if not cpath.exists():
            raise SequenceIOError(f"{directory}: missing color frame {t}")
        if not dpath.exists():
            raise SequenceIOError(f"{directory}: missing depth frame {t}")
        rgb.append(np.asarray(Image.open(cpath).convert("RGB"), dtype=np.uint8))
        depth.append(np.asarray(Image.open(dpath), dtype=np.uint16))
    gt, visible = _parse_groundtruth(directory / "groundtruth.txt", length)
    return Sequence(rgb, depth, gt, visible, _read_tags(directory),
                    meta["seed"])


# ---------------------------------------------------------------------------
# scene spec files (key=value sections, one section per sequence)

_TUPLE3 = re.compile(r"\s*(\d+)\s*,\s*(\d+)\s*,\s*(\d+)\s*")


def _parse_color(name: str, key: str, raw: str) -> tuple[int, int, int]:
    m = _TUPLE3.fullmatch(raw)
    if not m or not all(0 <= int(g) <= 255 for g in m.groups()):
        raise SceneSpecError(f"{name}: key {key!r} wants 'r,g,b' in 0..255, "
                             f"got {raw!r}")
    return tuple(int(g) for g in m.groups())


def _parse_floats(name: str, key: str, raw: str, n: int) -> list[float]:
    parts = [p.strip() for p in raw.split(",")]
    if len(parts) != n:
        raise SceneSpecError(f"{name}: key {key!r} wants {n} comma-separated "
                             f"values, got {raw!r}")
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise SceneSpecError(f"{name}: key {key!r} has a non-numeric value "
                             f"in {raw!r}") from None


def parse_scene_specs(text: str) -> list[SceneSpec]:
    """Parse a multi-sequence scene description in ini-style key=value form.

    Each [section] is one sequence. Unknown keys are rejected with the key
    name so spec typos fail loudly.
    """
    import configparser

    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise SceneSpecError(f"scene spec parse error: {exc}") from None

    specs = []
    for section in parser.sections():
        raw = dict(parser[section])
        specs.append(_scene_from_keys(section, raw))
    if not specs:
        raise SceneSpecError("scene spec defines no sequences")
    return specs


_KNOWN_KEYS = {
    "width", "height", "length", "target_shape", "target_size", "target_color",
    "target_depth_mm", "target_pos", "target_velocity", "target_depth_velocity",
    "illumination", "background", "background_color", "background_depth_mm",
    "distractors", "distractor_color", "distractor_depth_mm", "distractor_speed",
    "occluder", "tags",
}


def _scene_from_keys(name: str, raw: dict[str, str]) -> SceneSpec:
    for key in raw:
        if key not in _KNOWN_KEYS:
            raise SceneSpecError(f"{name}: unknown key {key!r}")

    def get(key, default):
        return raw.get(key, default)

    try:
        width = int(get("width", "128"))
        height = int(get("height", "128"))
        length = int(get("length", "30"))
    except ValueError:
        raise SceneSpecError(f"{name}: frame geometry keys must be integers") from None

    pos = _parse_floats(name, "target_pos", get("target_pos", f"{width / 2},{height / 2}"), 2)
    vel = _parse_floats(name, "target_velocity", get("target_velocity", "0,0"), 2)
    try:
        target = ObjectSpec(
            shape=get("target_shape", "disk"),
            size=float(get("target_size", "20")),
            color=_parse_color(name, "target_color", get("target_color", "200,60,60")),
            depth_mm=float(get("target_depth_mm", "1500")),
            x=pos[0], y=pos[1], vx=vel[0], vy=vel[1],
            depth_velocity=float(get("target_depth_velocity", "0")),
        )
        illumination = float(get("illumination", "1.0"))
        background_depth = float(get("background_depth_mm",
                                     str(DEFAULT_BACKGROUND_DEPTH_MM)))
        n_distractors = int(get("distractors", "0"))
        distractor_speed = float(get("distractor_speed", "1.5"))
        distractor_depth = float(get("distractor_depth_mm",
                                     str(target.depth_mm + 800)))
    except ValueError as exc:
        raise SceneSpecError(f"{name}: {exc}") from None

    distractor_color = (_parse_color(name, "distractor_color", raw["distractor_color"])
                        if "distractor_color" in raw else target.color)
    distractors = _place_distractors(name, n_distractors, target, distractor_color,
                                     distractor_depth, distractor_speed,
                                     width, height)

    occluders: tuple[OccluderSpec, ...] = ()
    if "occluder" in raw:
        vals = _parse_floats(name, "occluder", raw["occluder"], 3)
        occluders = (OccluderSpec(t_start=int(vals[0]), t_end=int(vals[1]),
                                  depth_mm=vals[2]),)

    tags = tuple(t for t in re.split(r"[,\s]+", get("tags", "").strip()) if t)
    spec = SceneSpec(
        name=name, width=width, height=height, length=length, target=target,
        distractors=distractors, occluders=occluders, illumination=illumination,
        background=get("background", "plain"),
        background_color=_parse_color(name, "background_color",
                                      get("background_color", "120,120,120")),
        background_depth_mm=background_depth, tags=tags,
    )
    spec.validate()
    return spec


def _place_distractors(name: str, count: int, target: ObjectSpec,
                       color: tuple[int, int, int], depth_mm: float,
                       speed: float, width: int, height: int) -> tuple[ObjectSpec, ...]:
    """Deterministic target-like objects on a fixed placement grid.

    Placement uses golden-angle spacing instead of the sequence RNG so the
    same spec text always yields the same geometry regardless of seed.
    """
    if count < 0:
        raise SceneSpecError(f"{name}: negative distractor count")
    out = []
    for i in range(count):
        angle = 2.399963229728653 * (i + 1)
        radius = 0.25 * min(width, height) * (1 + (i % 3))
        x = width / 2.0 + radius * np.cos(angle)
        y = height / 2.0 + radius * np.sin(angle)
        x = float(np.clip(x, target.size, width - target.size))
        y = float(np.clip(y, target.size, height - target.size))
        out.append(replace(target, color=color, depth_mm=depth_mm,
                           x=x, y=y,
                           vx=speed * np.cos(angle), vy=speed * np.sin(angle)))
    return tuple(out)
