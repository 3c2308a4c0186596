"""Strong augmentation for detection: color ops, global/box-level geometric ops, Cutout.

An image is a C-contiguous (H, W, 3) uint8 numpy array (row-major RGB).
The sampled sequence is always one color op, then one global-geometric or
box-level op, then Cutout. Only global-geometric ops move box coordinates;
the same affine matrix drives both the pixel warp and the box transform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError
from .geometry import AffineTransform, Box, transform_box
from .seeding import derive_seed

COLOR = "color"
GLOBAL_GEO = "global_geo"
BOX_GEO = "box_geo"
CUTOUT = "cutout"

# Enhancement-factor ops are neutral at 1.0; solarize thresholds at 256 keep
# every pixel; posterize keeps the top `bits` bits per channel.
COLOR_OP_RANGES: dict[str, tuple[float, float]] = {
    "brightness": (0.1, 1.9),
    "contrast": (0.1, 1.9),
    "saturation": (0.1, 1.9),
    "solarize": (0.0, 256.0),
    "posterize": (4.0, 8.0),
    "equalize": (0.0, 1.0),
    "autocontrast": (0.0, 1.0),
}

# Translation magnitudes are fractions of image width/height; rotation and
# shear magnitudes are degrees.
GLOBAL_GEO_RANGES: dict[str, tuple[float, float]] = {
    "translate_x": (-0.10, 0.10),
    "translate_y": (-0.10, 0.10),
    "rotate": (-30.0, 30.0),
    "shear_x": (-30.0, 30.0),
    "shear_y": (-30.0, 30.0),
}

BOX_GEO_RANGES: dict[str, tuple[float, float]] = {
    "translate_x": (-0.05, 0.05),
    "translate_y": (-0.05, 0.05),
    "rotate": (-10.0, 10.0),
    "shear_x": (-10.0, 10.0),
    "shear_y": (-10.0, 10.0),
}

CUTOUT_COUNT_RANGE = (1, 5)
CUTOUT_SIZE_RANGE = (0.0, 0.20)
CUTOUT_FILL = 127


def check_image(img: np.ndarray) -> np.ndarray:
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise ValueError(f"image must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
    if img.shape[0] < 8 or img.shape[1] < 8:
        raise ValueError(f"image must be at least 8x8, got {img.shape}")
    return np.ascontiguousarray(img)


@dataclass(frozen=True)
class AugOp:
    """One sampled operation: a family, an op name, and a magnitude in range."""

    family: str
    op_name: str
    magnitude: float

    def __post_init__(self) -> None:
        ranges = {COLOR: COLOR_OP_RANGES, GLOBAL_GEO: GLOBAL_GEO_RANGES, BOX_GEO: BOX_GEO_RANGES}
        if self.family == CUTOUT:
            lo, hi = CUTOUT_SIZE_RANGE
        elif self.family in ranges:
            if self.op_name not in ranges[self.family]:
                raise ConfigError(f"unknown {self.family} op: {self.op_name!r}")
            lo, hi = ranges[self.family][self.op_name]
        else:
            raise ConfigError(f"unknown augmentation family: {self.family!r}")
        if not (lo <= self.magnitude <= hi):
            raise ConfigError(
                f"magnitude {self.magnitude} outside [{lo}, {hi}] for {self.family}/{self.op_name}"
            )


@dataclass(frozen=True)
class AugPolicy:
    """Sampling policy for the (color, geo-or-box, cutout) sequence."""

    color_ops: tuple[str, ...] = tuple(COLOR_OP_RANGES)
    geo_mode_prob: float = 0.5  # probability of global-geometric over box-level
    global_geo_ops: tuple[str, ...] = tuple(GLOBAL_GEO_RANGES)
    box_geo_ops: tuple[str, ...] = tuple(BOX_GEO_RANGES)
    cutout_count_range: tuple[int, int] = CUTOUT_COUNT_RANGE
    cutout_size_range: tuple[float, float] = CUTOUT_SIZE_RANGE

    def __post_init__(self) -> None:
        if not (0.0 <= self.geo_mode_prob <= 1.0):
            raise ConfigError(f"geo_mode_prob must be in [0, 1]: {self.geo_mode_prob}")
        if not self.color_ops or not self.global_geo_ops or not self.box_geo_ops:
            raise ConfigError("policy op lists must be non-empty")


def sample_sequence(policy: AugPolicy, seed: int) -> list[AugOp]:
    """Sample the three-op sequence [color, global-geo-or-box, cutout].

    The second op is global-geometric with probability ``geo_mode_prob``,
    box-level otherwise; magnitudes are uniform in each op's declared range.
    """
    rng = np.random.default_rng(seed)
    color_name = policy.color_ops[rng.integers(len(policy.color_ops))]
    lo, hi = COLOR_OP_RANGES[color_name]
    color = AugOp(COLOR, color_name, float(rng.uniform(lo, hi)))

    if rng.random() < policy.geo_mode_prob:
        family, names, ranges = GLOBAL_GEO, policy.global_geo_ops, GLOBAL_GEO_RANGES
    else:
        family, names, ranges = BOX_GEO, policy.box_geo_ops, BOX_GEO_RANGES
    geo_name = names[rng.integers(len(names))]
    lo, hi = ranges[geo_name]
    geo = AugOp(family, geo_name, float(rng.uniform(lo, hi)))

    lo, hi = policy.cutout_size_range
    cut = AugOp(CUTOUT, "cutout", float(rng.uniform(lo, hi)))
    return [color, geo, cut]


def _grayscale(img_f: np.ndarray) -> np.ndarray:
    return img_f[..., 0] * 0.299 + img_f[..., 1] * 0.587 + img_f[..., 2] * 0.114


def _to_u8(img_f: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(img_f + 0.5), 0, 255).astype(np.uint8)


def apply_color(img: np.ndarray, op: AugOp) -> np.ndarray:
    """Apply a color op; dimensions are preserved and boxes are unaffected."""
    img = check_image(img)
    if op.family != COLOR:
        raise ConfigError(f"apply_color got family {op.family!r}")
    m = op.magnitude
    f = img.astype(np.float64)
    if op.op_name == "brightness":
        return _to_u8(f * m)
    if op.op_name == "contrast":
        mean = np.floor(_grayscale(f).mean() + 0.5)
        return _to_u8(mean + (f - mean) * m)
    if op.op_name == "saturation":
        gray = _grayscale(f)[..., None]
        return _to_u8(gray + (f - gray) * m)
    if op.op_name == "solarize":
        out = img.copy()
        flip = f >= m
        out[flip] = 255 - out[flip]
        return out
    if op.op_name == "posterize":
        bits = int(m)
        if not (1 <= bits <= 8):
            raise ConfigError(f"posterize bits must be in [1, 8]: {bits}")
        mask = np.uint8(0xFF << (8 - bits) & 0xFF)
        return img & mask
    if op.op_name == "equalize":
        return _equalize(img)
    if op.op_name == "autocontrast":
        return _autocontrast(img)
    raise ConfigError(f"unknown color op: {op.op_name!r}")


def _equalize(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for ch in range(3):
        plane = img[..., ch]
        hist = np.bincount(plane.ravel(), minlength=256)
        nonzero = hist[hist > 0]
        if nonzero.size <= 1:
            out[..., ch] = plane
            continue
        step = (int(hist.sum()) - int(nonzero[-1])) // 255
        if step == 0:
            out[..., ch] = plane
            continue
        csum = np.concatenate([[0], np.cumsum(hist)[:-1]])
        lut = np.clip((csum + step // 2) // step, 0, 255).astype(np.uint8)
        out[..., ch] = lut[plane]
    return out


def _autocontrast(img: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for ch in range(3):
        plane = img[..., ch]
        lo = int(plane.min())
        hi = int(plane.max())
        if hi <= lo:
            out[..., ch] = plane
            continue
        scale = 255.0 / (hi - lo)
        lut = np.clip(np.floor((np.arange(256) - lo) * scale + 0.5), 0, 255).astype(np.uint8)
        out[..., ch] = lut[plane]
    return out


def geometric_matrix(op: AugOp, image_w: float, image_h: float) -> AffineTransform:
    """The affine map for a geometric op. Rotation/shear act about the image center."""
    cx, cy = image_w / 2.0, image_h / 2.0
    name, m = op.op_name, op.magnitude
    if name == "translate_x":
        return AffineTransform.translation(m * image_w, 0.0)
    if name == "translate_y":
        return AffineTransform.translation(0.0, m * image_h)
    if name == "rotate":
        return AffineTransform.rotation(m, cx, cy)
    if name == "shear_x":
        return AffineTransform.shear_x(m, cx, cy)
    if name == "shear_y":
        return AffineTransform.shear_y(m, cx, cy)
    if name == "flip_x":
        return AffineTransform.hflip(image_w)
    raise ConfigError(f"unknown geometric op: {name!r}")


def warp_image(img: np.ndarray, t: AffineTransform) -> np.ndarray:
    """Warp pixels under ``t`` with nearest-neighbor sampling and black fill."""
    img = check_image(img)
    return kernels.warp_affine_nearest(img, t.invert().matrix)


def apply_global_geometric(
    img: np.ndarray, boxes: list[Box], op: AugOp
) -> tuple[np.ndarray, list[Box]]:
    """Warp the image and map every box through the same affine matrix.

    Boxes that degenerate after clipping (any side below 1 px) are dropped.
    """
    if op.family != GLOBAL_GEO:
        raise ConfigError(f"apply_global_geometric got family {op.family!r}")
    img = check_image(img)
    h, w = img.shape[:2]
    t = geometric_matrix(op, w, h)
    warped = warp_image(img, t)
    out_boxes = []
    for b in boxes:
        tb = transform_box(t, b, w, h)
        if tb is not None:
            out_boxes.append(tb)
    return warped, out_boxes


def apply_box_level(img: np.ndarray, boxes: list[Box], op: AugOp, seed: int) -> np.ndarray:
    """Jitter the content inside each box; coordinates and outside pixels stay put.

    Each box independently draws its transform parameter uniformly from
    [-|magnitude|, |magnitude|] (op.magnitude is the strength envelope) and
    warps only the pixels inside the box, about the box center.
    """
    if op.family != BOX_GEO:
        raise ConfigError(f"apply_box_level got family {op.family!r}")
    img = check_image(img)
    if not boxes:
        return img.copy()
    h, w = img.shape[:2]
    rng = np.random.default_rng(seed)
    out = img.copy()
    bound = abs(op.magnitude)
    for b in boxes:
        param = float(rng.uniform(-bound, bound))
        cx, cy = (b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0
        if op.op_name == "translate_x":
            t = AffineTransform.translation(param * w, 0.0)
        elif op.op_name == "translate_y":
            t = AffineTransform.translation(0.0, param * h)
        elif op.op_name == "rotate":
            t = AffineTransform.rotation(param, cx, cy)
        elif op.op_name == "shear_x":
            t = AffineTransform.shear_x(param, cx, cy)
        elif op.op_name == "shear_y":
            t = AffineTransform.shear_y(param, cx, cy)
        else:
            raise ConfigError(f"unknown box-level op: {op.op_name!r}")
        if t.is_identity():
            continue
        region = _pixel_region(b, w, h)
        if region is None:
            continue
        x1, y1, x2, y2 = region
        warped = kernels.warp_affine_nearest(img, t.invert().matrix)
        out[y1:y2, x1:x2] = warped[y1:y2, x1:x2]
    return out


def _pixel_region(b: Box, w: int, h: int) -> tuple[int, int, int, int] | None:
    x1 = max(int(np.floor(b.x1)), 0)
    y1 = max(int(np.floor(b.y1)), 0)
    x2 = min(int(np.ceil(b.x2)), w)
    y2 = min(int(np.ceil(b.y2)), h)
    if x2 <= x1 or y2 <= y1:
        return None
    return (x1, y1, x2, y2)


def apply_cutout(
    img: np.ndarray,
    seed: int,
    count_range: tuple[int, int] = CUTOUT_COUNT_RANGE,
    size_range: tuple[float, float] = CUTOUT_SIZE_RANGE,
) -> np.ndarray:
    """Fill 1-5 random square regions with mid-gray; clipped at borders.

    The count is drawn from ``count_range`` and each region's side is an
    independent draw from ``size_range`` (fraction of the short edge).
    """
    img = check_image(img)
    h, w = img.shape[:2]
    short = min(w, h)
    rng = np.random.default_rng(seed)
    out = img.copy()
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    for _ in range(count):
        frac = float(rng.uniform(size_range[0], size_range[1]))
        cx = float(rng.uniform(0, w))
        cy = float(rng.uniform(0, h))
        side = frac * short
        if side < 1.0:
            continue
        x1 = max(int(np.floor(cx - side / 2)), 0)
        y1 = max(int(np.floor(cy - side / 2)), 0)
        x2 = min(int(np.floor(cx + side / 2)), w)
        y2 = min(int(np.floor(cy + side / 2)), h)
        if x2 > x1 and y2 > y1:
            out[y1:y2, x1:x2] = CUTOUT_FILL
    return out


@dataclass
class AppliedAugment:
    """Record of one augmentation application, for instrumentation and targets."""

    ops: list[AugOp] = field(default_factory=list)
    flipped: bool = False
    geo_matrix: AffineTransform | None = None  # total pixel/box transform, if any
    kept_indices: list[int] = field(default_factory=list)  # surviving input boxes


def strong_augment(
    img: np.ndarray, boxes: list[Box], policy: AugPolicy, seed: int
) -> tuple[np.ndarray, list[Box], AppliedAugment]:
    """The full (color, geo-or-box, cutout) sequence with box bookkeeping."""
    ops = sample_sequence(policy, seed)
    return apply_ops(img, boxes, ops, seed, flip=False)


def apply_ops(
    img: np.ndarray,
    boxes: list[Box],
    ops: list[AugOp],
    seed: int,
    flip: bool = False,
) -> tuple[np.ndarray, list[Box], AppliedAugment]:
    """Apply a sampled op sequence (optionally after a horizontal flip).

    A flip and a global-geometric op compose into one matrix so that pixels
    and boxes go through a single shared transform.
    """
    img = check_image(img)
    h, w = img.shape[:2]
    info = AppliedAugment(ops=list(ops), flipped=flip, kept_indices=list(range(len(boxes))))

    for op in ops:
        if op.family == COLOR:
            img = apply_color(img, op)

    t = AffineTransform.hflip(w) if flip else AffineTransform.identity()
    geo_op = next((op for op in ops if op.family == GLOBAL_GEO), None)
    if geo_op is not None:
        t = geometric_matrix(geo_op, w, h).compose(t)
    if not t.is_identity():
        img = warp_image(img, t)
        new_boxes: list[Box] = []
        kept: list[int] = []
        for i, b in enumerate(boxes):
            tb = transform_box(t, b, w, h)
            if tb is not None:
                new_boxes.append(tb)
                kept.append(i)
        boxes = new_boxes
        info.kept_indices = kept
        info.geo_matrix = t

    box_op = next((op for op in ops if op.family == BOX_GEO), None)
    if box_op is not None:
        img = apply_box_level(img, boxes, box_op, derive_seed(seed, "augment", "box_level"))

    cut_op = next((op for op in ops if op.family == CUTOUT), None)
    if cut_op is not None:
        img = apply_cutout(
            img, derive_seed(seed, "augment", "cutout"), size_range=(0.0, cut_op.magnitude)
        )

    return img, boxes, info
