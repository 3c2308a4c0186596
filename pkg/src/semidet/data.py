"""Synthetic shapes benchmark, labeled-fraction splits, and annotation persistence.

Annotations persist as COCO-style JSON (bbox as [x, y, w, h], 1-based
category ids) with images stored as binary PPM (P6) files referenced by
``file_name``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .geometry import Box

CLASS_NAMES = ("circle", "square", "triangle")


@dataclass
class SyntheticConfig:
    width: int = 64
    height: int = 64
    classes: int = 3
    objects_per_image: tuple[int, int] = (1, 4)
    min_side: int = 14
    max_side: int = 30

    def __post_init__(self) -> None:
        if self.width < 32 or self.height < 32:
            raise ConfigError(f"image dims must be >= 32, got {self.width}x{self.height}")
        if not (1 <= self.classes <= len(CLASS_NAMES)):
            raise ConfigError(f"classes must be in [1, {len(CLASS_NAMES)}]: {self.classes}")
        lo, hi = self.objects_per_image
        if not (1 <= lo <= hi):
            raise ConfigError(f"bad objects_per_image range: {self.objects_per_image}")


@dataclass
class AnnotatedImage:
    """An image plus its ground-truth (or pseudo) boxes."""

    image: np.ndarray  # (H, W, 3) uint8
    gt: list[tuple[Box, int]]
    id: int

    @property
    def width(self) -> int:
        return self.image.shape[1]

    @property
    def height(self) -> int:
        return self.image.shape[0]


@dataclass
class DatasetSplit:
    labeled: list[AnnotatedImage]
    unlabeled: list[AnnotatedImage]  # gt retained for diagnosis, hidden from training
    fold_seed: int
    fraction: float


def _shape_mask(kind: int, side: int) -> np.ndarray:
    """Boolean pixel mask of one shape on a side x side canvas."""
    ys, xs = np.mgrid[0:side, 0:side]
    cx = cy = side / 2.0
    px = xs + 0.5
    py = ys + 0.5
    if kind == 0:  # circle
        r = side / 2.0
        return (px - cx) ** 2 + (py - cy) ** 2 <= r * r
    if kind == 1:  # square
        return np.ones((side, side), dtype=bool)
    # triangle: apex top-center, base along the bottom edge
    half_w = side / 2.0
    depth = py  # distance below the apex row
    margin = (depth / side) * half_w
    return (np.abs(px - cx) <= margin) & (py <= side)


def gen_synthetic(
    seed: int, n_images: int, config: SyntheticConfig | None = None
) -> list[AnnotatedImage]:
    """Generate images of colored shapes on a noisy background, with tight boxes.

    Class 0 is a filled circle, 1 a filled square, 2 a filled triangle.
    Ground-truth boxes are the exact extents of the rasterized shape.
    Deterministic given the seed.
    """
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(seed)
    out: list[AnnotatedImage] = []
    for idx in range(n_images):
        out.append(_gen_one(rng, idx, cfg))
    return out


def _gen_one(rng: np.random.Generator, image_id: int, cfg: SyntheticConfig) -> AnnotatedImage:
    h, w = cfg.height, cfg.width
    base = rng.integers(30, 90, size=3)
    img = np.clip(
        base[None, None, :] + rng.integers(-18, 19, size=(h, w, 3)), 0, 255
    ).astype(np.uint8)

    n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
    gt: list[tuple[Box, int]] = []
    placed: list[tuple[int, int, int, int]] = []
    for _ in range(n_obj):
        for _attempt in range(25):
            side = int(rng.integers(cfg.min_side, cfg.max_side + 1))
            if side > min(w, h) - 2:
                side = min(w, h) - 2
            x0 = int(rng.integers(1, w - side))
            y0 = int(rng.integers(1, h - side))
            # keep shapes disjoint so every gt box stays exactly tight
            if any(_overlap_frac((x0, y0, x0 + side, y0 + side), p) > 0.0 for p in placed):
                continue
            kind = int(rng.integers(cfg.classes))
            color = _object_color(rng, base)
            mask = _shape_mask(kind, side)
            ys, xs = np.nonzero(mask)
            bx1, bx2 = x0 + int(xs.min()), x0 + int(xs.max()) + 1
            by1, by2 = y0 + int(ys.min()), y0 + int(ys.max()) + 1
            img[y0 : y0 + side, x0 : x0 + side][mask] = color
            gt.append((Box(float(bx1), float(by1), float(bx2), float(by2)), kind))
            placed.append((bx1, by1, bx2, by2))
            break
    if not gt:  # extremely crowded draw; place one unconditionally
        side = cfg.min_side
        x0, y0 = 1, 1
        kind = int(rng.integers(cfg.classes))
        mask = _shape_mask(kind, side)
        ys, xs = np.nonzero(mask)
        img[y0 : y0 + side, x0 : x0 + side][mask] = _object_color(rng, base)
        gt.append(
            (
                Box(
                    float(x0 + xs.min()),
                    float(y0 + ys.min()),
                    float(x0 + xs.max() + 1),
                    float(y0 + ys.max() + 1),
                ),
                kind,
            )
        )
    return AnnotatedImage(image=img, gt=gt, id=image_id)


def _object_color(rng: np.random.Generator, base: np.ndarray) -> np.ndarray:
    while True:
        color = rng.integers(80, 256, size=3)
        if color.max() >= 160 and np.abs(color - base).sum() >= 150:
            return color.astype(np.uint8)


def _overlap_frac(a: tuple[int, int, int, int], b: tuple[int, int, int, int]) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    return inter / min(area_a, area_b)


def split_protocol(
    data: list[AnnotatedImage], fraction: float, fold_seed: int
) -> DatasetSplit:
    """Uniform labeled/unlabeled split; nested across fractions per fold.

    The permutation for one fold_seed is fixed, and labeled sets are its
    prefixes, so labeled(f1) is a subset of labeled(f2) whenever f1 <= f2.
    """
    if not (0.0 < fraction <= 1.0):
        raise ConfigError(f"fraction must be in (0, 1]: {fraction}")
    rng = np.random.default_rng(fold_seed)
    order = rng.permutation(len(data))
    n_labeled = int(round(fraction * len(data)))
    chosen = set(order[:n_labeled].tolist())
    labeled = [img for i, img in enumerate(data) if i in chosen]
    unlabeled = [img for i, img in enumerate(data) if i not in chosen]
    return DatasetSplit(labeled=labeled, unlabeled=unlabeled, fold_seed=fold_seed, fraction=fraction)


def write_ppm(img: np.ndarray, path: Path | str) -> None:
    img = np.ascontiguousarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"cannot write PPM from array {img.shape} {img.dtype}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_ppm(path: Path | str) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read image file {path}: {exc}") from exc
    if not raw.startswith(b"P6"):
        raise DataError(f"not a binary PPM (P6) file: {path}")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields: list[bytes] = []
    i = 2
    while len(fields) < 3:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if i < len(raw) and raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise DataError(f"truncated PPM header: {path}")
        fields.append(raw[i:j])
        i = j
    i += 1  # the single whitespace after maxval
    try:
        w, h, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise DataError(f"malformed PPM header in {path}") from exc
    if maxval != 255:
        raise DataError(f"unsupported PPM maxval {maxval} in {path}")
    data = raw[i : i + w * h * 3]
    if len(data) != w * h * 3:
        raise DataError(f"truncated PPM pixel data in {path}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def save_annotations(
    data: list[AnnotatedImage],
    json_path: Path | str,
    image_dir: Path | str | None = None,
    scores: dict[int, list[float]] | None = None,
    extra: dict | None = None,
    write_images: bool = True,
) -> None:
    """Write a COCO-style annotation file; images go to ``image_dir`` as PPM.

    ``scores`` optionally attaches a per-annotation score list keyed by image
    id (used by pseudo-label files); ``extra`` merges extra top-level keys.
    """
    json_path = Path(json_path)
    img_dir = Path(image_dir) if image_dir is not None else json_path.parent / "images"
    if write_images:
        img_dir.mkdir(parents=True, exist_ok=True)
    images = []
    annotations = []
    ann_id = 1
    for item in data:
        file_name = f"{img_dir.name}/{item.id:06d}.ppm"
        if write_images:
            write_ppm(item.image, json_path.parent / file_name)
        images.append(
            {"id": item.id, "file_name": file_name, "width": item.width, "height": item.height}
        )
        img_scores = scores.get(item.id) if scores else None
        for k, (box, cls) in enumerate(item.gt):
            ann = {
                "id": ann_id,
                "image_id": item.id,
                "category_id": cls + 1,
                "bbox": [box.x1, box.y1, box.width, box.height],
                "area": box.area(),
                "iscrowd": 0,
            }
            if img_scores is not None:
                ann["score"] = img_scores[k]
            annotations.append(ann)
            ann_id += 1
    doc = {
        "images": images,
        "annotations": annotations,
        "categories": [
            {"id": i + 1, "name": name} for i, name in enumerate(CLASS_NAMES)
        ],
    }
    if extra:
        doc.update(extra)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    with open(json_path, "w") as fh:
        json.dump(doc, fh)


@dataclass
class LoadedAnnotations:
    items: list[AnnotatedImage]
    scores: dict[int, list[float]] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def load_annotations(json_path: Path | str, load_images: bool = True) -> LoadedAnnotations:
    """Load a COCO-style annotation file written by :func:`save_annotations`.

    Raises DataError naming the offending record for malformed JSON, missing
    image files, or non-positive bbox sides.
    """
    json_path = Path(json_path)
    try:
        with open(json_path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read annotation file {json_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed JSON in {json_path}: {exc}") from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise DataError(f"annotation file {json_path} missing key {key!r}")

    by_image: dict[int, list[tuple[Box, int, float | None]]] = {}
    for ann in doc["annotations"]:
        ann_id = ann.get("id", "?")
        try:
            x, y, bw, bh = ann["bbox"]
            cls = int(ann["category_id"]) - 1
            image_id = int(ann["image_id"])
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed annotation id={ann_id} in {json_path}") from exc
        if bw <= 0 or bh <= 0:
            raise DataError(
                f"annotation id={ann_id} in {json_path} has non-positive bbox size "
                f"w={bw} h={bh}"
            )
        score = float(ann["score"]) if "score" in ann else None
        by_image.setdefault(image_id, []).append(
            (Box(float(x), float(y), float(x + bw), float(y + bh)), cls, score)
        )

    items: list[AnnotatedImage] = []
    scores: dict[int, list[float]] = {}
    for rec in doc["images"]:
        image_id = int(rec["id"])
        if load_images:
            img = read_ppm(json_path.parent / rec["file_name"])
        else:
            img = np.zeros((int(rec["height"]), int(rec["width"]), 3), dtype=np.uint8)
        entries = by_image.get(image_id, [])
        gt = [(b, c) for b, c, _ in entries]
        if entries and entries[0][2] is not None:
            scores[image_id] = [s if s is not None else 0.0 for _, _, s in entries]
        items.append(AnnotatedImage(image=img, gt=gt, id=image_id))
    extra = {
        k: v for k, v in doc.items() if k not in ("images", "annotations", "categories")
    }
    return LoadedAnnotations(items=items, scores=scores, extra=extra)
