"""Tiny single-stage anchor-based detector with explicit forward/backward passes.

Trunk: two 3x3 stride-2 convolutions (ReLU), then a 3x3 head convolution
whose stride brings the feature grid to the anchor stride. Per anchor the
head emits 1 objectness logit, K class logits, and 4 box-regression values.
The joint classification + regression loss normalizes its two terms by the
sampled-anchor count and the positive count respectively.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .errors import ConfigError, DataError
from .geometry import Box, iou_matrix

# regression dw/dh clamp at decode time, as in standard detector frameworks
DECODE_CLIP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class DetectorConfig:
    image_w: int = 64
    image_h: int = 64
    stride: int = 8
    anchor_sizes: tuple[int, ...] = (16, 32)
    channels: tuple[int, int] = (8, 16)
    num_classes: int = 3

    def __post_init__(self) -> None:
        if self.stride < 4 or self.stride % 4 != 0:
            raise ConfigError(f"stride must be a multiple of 4 (>= 4): {self.stride}")
        if not self.anchor_sizes:
            raise ConfigError("anchor_sizes must be non-empty")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1: {self.num_classes}")

    @property
    def fields_per_anchor(self) -> int:
        return 5 + self.num_classes  # objectness + K classes + 4 regression


@dataclass
class AnchorGrid:
    """All anchors for one image size, row-major over cells then by size."""

    stride: int
    sizes: tuple[int, ...]
    image_w: int
    image_h: int
    grid_w: int
    grid_h: int
    boxes: np.ndarray  # (N, 4) xyxy, may exceed image bounds

    def __len__(self) -> int:
        return self.boxes.shape[0]

    def anchor_box(self, i: int) -> Box:
        x1, y1, x2, y2 = self.boxes[i]
        return Box(float(x1), float(y1), float(x2), float(y2))


def build_anchors(image_w: int, image_h: int, stride: int, sizes: tuple[int, ...]) -> AnchorGrid:
    """Anchors centered on stride cells; index = (gy*grid_w + gx)*len(sizes) + si."""
    grid_w = -(-image_w // stride)
    grid_h = -(-image_h // stride)
    cx = (np.arange(grid_w) + 0.5) * stride
    cy = (np.arange(grid_h) + 0.5) * stride
    boxes = np.empty((grid_h * grid_w * len(sizes), 4), dtype=np.float64)
    i = 0
    for gy in range(grid_h):
        for gx in range(grid_w):
            for s in sizes:
                half = s / 2.0
                boxes[i] = (cx[gx] - half, cy[gy] - half, cx[gx] + half, cy[gy] + half)
                i += 1
    return AnchorGrid(
        stride=stride,
        sizes=tuple(sizes),
        image_w=image_w,
        image_h=image_h,
        grid_w=grid_w,
        grid_h=grid_h,
        boxes=boxes,
    )


POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass
class AnchorTargets:
    """Per-anchor labels and regression targets against (ground-truth or pseudo) boxes."""

    labels: np.ndarray  # (N,) int8: 1 positive, 0 negative, -1 ignore
    t_star: np.ndarray  # (N, 4) float64, defined where positive
    class_star: np.ndarray  # (N,) int64, -1 where undefined

    @property
    def positive_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == POSITIVE)

    @property
    def negative_idx(self) -> np.ndarray:
        return np.flatnonzero(self.labels == NEGATIVE)


def assign_anchors(
    grid: AnchorGrid,
    gt: list[tuple[Box, int]],
    pos_iou: float = 0.7,
    neg_iou: float = 0.3,
) -> AnchorTargets:
    """Label anchors against ground truth, Faster-RCNN style.

    An anchor is positive when its IoU with some gt reaches ``pos_iou`` OR it
    is a best (max-IoU, nonzero) anchor for a gt; negative when its max IoU
    is at most ``neg_iou``; ignored otherwise. Regression targets encode the
    anchor's best-matching gt (IoU ties resolve to the lowest gt index).
    Anchors are clipped to the image rectangle for the IoU computation only.
    """
    if not (0.0 < neg_iou < pos_iou <= 1.0):
        raise ConfigError(f"need 0 < neg_iou < pos_iou <= 1, got {neg_iou}, {pos_iou}")
    n = len(grid)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    t_star = np.zeros((n, 4), dtype=np.float64)
    class_star = np.full(n, -1, dtype=np.int64)
    if not gt:
        return AnchorTargets(labels=labels, t_star=t_star, class_star=class_star)

    clipped = grid.boxes.copy()
    clipped[:, 0] = np.clip(clipped[:, 0], 0, grid.image_w)
    clipped[:, 1] = np.clip(clipped[:, 1], 0, grid.image_h)
    clipped[:, 2] = np.clip(clipped[:, 2], 0, grid.image_w)
    clipped[:, 3] = np.clip(clipped[:, 3], 0, grid.image_h)
    gt_boxes = np.array([b.astuple() for b, _ in gt], dtype=np.float64)
    gt_classes = np.array([c for _, c in gt], dtype=np.int64)

    overlaps = iou_matrix(clipped, gt_boxes)  # (N, G)
    best_gt = overlaps.argmax(axis=1)  # lowest index wins ties
    best_iou = overlaps[np.arange(n), best_gt]

    labels[best_iou > neg_iou] = IGNORE
    labels[best_iou >= pos_iou] = POSITIVE
    # every gt claims its best anchors (all ties), unless the overlap is zero
    gt_best = overlaps.max(axis=0)
    for g in range(len(gt)):
        if gt_best[g] <= 0.0:
            continue
        forced = np.flatnonzero(overlaps[:, g] == gt_best[g])
        labels[forced] = POSITIVE

    pos = np.flatnonzero(labels == POSITIVE)
    t_star[pos] = encode_boxes(grid.boxes[pos], gt_boxes[best_gt[pos]])
    class_star[pos] = gt_classes[best_gt[pos]]
    return AnchorTargets(labels=labels, t_star=t_star, class_star=class_star)


def encode_boxes(anchors: np.ndarray, gts: np.ndarray) -> np.ndarray:
    """Faster-RCNN box parameterization: (dx, dy, dw, dh) of gt against anchor."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2.0
    ay = anchors[:, 1] + ah / 2.0
    gw = gts[:, 2] - gts[:, 0]
    gh = gts[:, 3] - gts[:, 1]
    gx = gts[:, 0] + gw / 2.0
    gy = gts[:, 1] + gh / 2.0
    return np.stack(
        [(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1
    )


def decode_boxes(anchors: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_boxes`; dw/dh clamped to avoid overflow."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2.0
    ay = anchors[:, 1] + ah / 2.0
    cx = ax + t[:, 0] * aw
    cy = ay + t[:, 1] * ah
    w = aw * np.exp(np.clip(t[:, 2], -DECODE_CLIP, DECODE_CLIP))
    h = ah * np.exp(np.clip(t[:, 3], -DECODE_CLIP, DECODE_CLIP))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def encode_box(anchor: Box, gt: Box) -> tuple[float, float, float, float]:
    t = encode_boxes(np.array([anchor.astuple()]), np.array([gt.astuple()]))[0]
    return (float(t[0]), float(t[1]), float(t[2]), float(t[3]))


def decode_box(anchor: Box, t: tuple[float, float, float, float]) -> Box:
    b = decode_boxes(np.array([anchor.astuple()]), np.array([t], dtype=np.float64))[0]
    return Box(float(b[0]), float(b[1]), float(b[2]), float(b[3]))


PARAM_NAMES = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "head_w", "head_b")


@dataclass
class DetectorModel:
    config: DetectorConfig
    params: dict[str, np.ndarray]
    grid: AnchorGrid = field(init=False)

    def __post_init__(self) -> None:
        c = self.config
        self.grid = build_anchors(c.image_w, c.image_h, c.stride, c.anchor_sizes)
        expected = _param_shapes(c)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                raise ConfigError(
                    f"parameter {name} has shape "
                    f"{self.params.get(name, np.empty(0)).shape}, expected {shape}"
                )

    @property
    def head_stride(self) -> int:
        return self.config.stride // 4

    def copy(self) -> DetectorModel:
        return DetectorModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()[:16]


def _param_shapes(c: DetectorConfig) -> dict[str, tuple[int, ...]]:
    c1, c2 = c.channels
    out_ch = len(c.anchor_sizes) * c.fields_per_anchor
    return {
        "conv1_w": (c1, 3, 3, 3),
        "conv1_b": (c1,),
        "conv2_w": (c2, c1, 3, 3),
        "conv2_b": (c2,),
        "head_w": (out_ch, c2, 3, 3),
        "head_b": (out_ch,),
    }


def init_model(config: DetectorConfig, seed: int) -> DetectorModel:
    """He-style random init; objectness biases start at -2 (background prior)."""
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(config).items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float64)
        else:
            fan_in = int(np.prod(shape[1:]))
            params[name] = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    fpa = config.fields_per_anchor
    for a in range(len(config.anchor_sizes)):
        params["head_b"][a * fpa] = -2.0
    return DetectorModel(config=config, params=params)


@dataclass
class DetectorOutput:
    """Per-anchor raw outputs, index-aligned with the anchor grid."""

    obj_logits: np.ndarray  # (N,)
    cls_logits: np.ndarray  # (N, K)
    t: np.ndarray  # (N, 4)

    @property
    def obj_prob(self) -> np.ndarray:
        return _sigmoid(self.obj_logits)

    @property
    def cls_prob(self) -> np.ndarray:
        return _softmax_rows(self.cls_logits)


@dataclass
class ForwardCache:
    x: np.ndarray
    h1_pre: np.ndarray
    h1: np.ndarray
    h2_pre: np.ndarray
    h2: np.ndarray
    raw: np.ndarray  # head output (C, gh, gw)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax_rows(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def normalize_image(img: np.ndarray) -> np.ndarray:
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise DataError(f"detector input must be (H, W, 3) uint8, got {img.shape} {img.dtype}")
    return np.ascontiguousarray(img.transpose(2, 0, 1)).astype(np.float64) / 255.0 - 0.5


def forward(
    model: DetectorModel, image: np.ndarray, want_cache: bool = False
) -> DetectorOutput | tuple[DetectorOutput, ForwardCache]:
    c = model.config
    if image.shape[0] != c.image_h or image.shape[1] != c.image_w:
        raise DataError(
            f"image {image.shape[1]}x{image.shape[0]} does not match model "
            f"{c.image_w}x{c.image_h}"
        )
    p = model.params
    x = normalize_image(image)
    h1_pre = kernels.conv2d_forward(x, p["conv1_w"], p["conv1_b"], 2, 1)
    h1 = np.maximum(h1_pre, 0.0)
    h2_pre = kernels.conv2d_forward(h1, p["conv2_w"], p["conv2_b"], 2, 1)
    h2 = np.maximum(h2_pre, 0.0)
    raw = kernels.conv2d_forward(h2, p["head_w"], p["head_b"], model.head_stride, 1)

    out = _split_head(raw, model)
    if want_cache:
        return out, ForwardCache(x=x, h1_pre=h1_pre, h1=h1, h2_pre=h2_pre, h2=h2, raw=raw)
    return out


def _split_head(raw: np.ndarray, model: DetectorModel) -> DetectorOutput:
    c = model.config
    a = len(c.anchor_sizes)
    fpa = c.fields_per_anchor
    gh, gw = raw.shape[1], raw.shape[2]
    if (gh, gw) != (model.grid.grid_h, model.grid.grid_w):
        raise ConfigError(
            f"head output {gw}x{gh} does not match anchor grid "
            f"{model.grid.grid_w}x{model.grid.grid_h}"
        )
    fields = raw.reshape(a, fpa, gh, gw).transpose(2, 3, 0, 1).reshape(-1, fpa)
    return DetectorOutput(
        obj_logits=np.ascontiguousarray(fields[:, 0]),
        cls_logits=np.ascontiguousarray(fields[:, 1 : 1 + c.num_classes]),
        t=np.ascontiguousarray(fields[:, 1 + c.num_classes :]),
    )


def _merge_head_grad(
    d_obj: np.ndarray, d_cls: np.ndarray, d_t: np.ndarray, model: DetectorModel
) -> np.ndarray:
    c = model.config
    a = len(c.anchor_sizes)
    fpa = c.fields_per_anchor
    gh, gw = model.grid.grid_h, model.grid.grid_w
    fields = np.concatenate([d_obj[:, None], d_cls, d_t], axis=1)  # (N, fpa)
    return np.ascontiguousarray(
        fields.reshape(gh, gw, a, fpa).transpose(2, 3, 0, 1).reshape(a * fpa, gh, gw)
    )


@dataclass
class Minibatch:
    """Sampled anchor indices: at most ``cap`` anchors, at most half positive."""

    pos: np.ndarray
    neg: np.ndarray

    @property
    def n_cls(self) -> int:
        return len(self.pos) + len(self.neg)

    @property
    def n_reg(self) -> int:
        return max(len(self.pos), 1)


def sample_minibatch(targets: AnchorTargets, cap: int, rng: np.random.Generator) -> Minibatch:
    if cap < 1:
        raise ConfigError(f"sample_cap must be >= 1: {cap}")
    pos = targets.positive_idx
    neg = targets.negative_idx
    n_pos = min(len(pos), cap // 2)
    if n_pos < len(pos):
        pos = np.sort(rng.choice(pos, size=n_pos, replace=False))
    n_neg = min(len(neg), cap - n_pos)
    if n_neg < len(neg):
        neg = np.sort(rng.choice(neg, size=n_neg, replace=False))
    return Minibatch(pos=pos, neg=neg)


def full_minibatch(targets: AnchorTargets) -> Minibatch:
    return Minibatch(pos=targets.positive_idx, neg=targets.negative_idx)


@dataclass
class LossBreakdown:
    cls_loss: float
    reg_loss: float
    total: float
    n_cls: int
    n_reg: int


def _smooth_l1(d: np.ndarray, beta: float = 1.0) -> np.ndarray:
    ad = np.abs(d)
    return np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)


def _smooth_l1_grad(d: np.ndarray, beta: float = 1.0) -> np.ndarray:
    return np.where(np.abs(d) < beta, d / beta, np.sign(d))


def supervised_loss(
    output: DetectorOutput, targets: AnchorTargets, mb: Minibatch, lam: float = 1.0
) -> LossBreakdown:
    """Joint objectness/class cross-entropy plus smooth-L1 regression.

    cls_loss averages over the sampled anchors (objectness everywhere, class
    cross-entropy on positives); reg_loss averages smooth-L1 over positives.
    total = cls_loss + lam * reg_loss.
    """
    idx = np.concatenate([mb.pos, mb.neg]).astype(np.int64)
    y = np.concatenate([np.ones(len(mb.pos)), np.zeros(len(mb.neg))])
    o = output.obj_logits[idx]
    # stable binary cross-entropy from logits
    bce = np.maximum(o, 0.0) - o * y + np.log1p(np.exp(-np.abs(o)))
    cls_sum = float(bce.sum())
    if len(mb.pos):
        z = output.cls_logits[mb.pos]
        zmax = z.max(axis=1)
        lse = zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))
        cls_sum += float((lse - z[np.arange(len(mb.pos)), targets.class_star[mb.pos]]).sum())
        d = output.t[mb.pos] - targets.t_star[mb.pos]
        reg_sum = float(_smooth_l1(d).sum())
    else:
        reg_sum = 0.0
    cls_loss = cls_sum / mb.n_cls
    reg_loss = reg_sum / mb.n_reg
    return LossBreakdown(
        cls_loss=cls_loss,
        reg_loss=reg_loss,
        total=cls_loss + lam * reg_loss,
        n_cls=mb.n_cls,
        n_reg=mb.n_reg,
    )


def loss_and_gradients(
    model: DetectorModel,
    image: np.ndarray,
    targets: AnchorTargets,
    mb: Minibatch,
    lam: float = 1.0,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Supervised loss and its gradient w.r.t. every model parameter."""
    output, cache = forward(model, image, want_cache=True)
    loss = supervised_loss(output, targets, mb, lam)

    n = len(model.grid)
    k = model.config.num_classes
    d_obj = np.zeros(n, dtype=np.float64)
    d_cls = np.zeros((n, k), dtype=np.float64)
    d_t = np.zeros((n, 4), dtype=np.float64)

    idx = np.concatenate([mb.pos, mb.neg]).astype(np.int64)
    y = np.concatenate([np.ones(len(mb.pos)), np.zeros(len(mb.neg))])
    d_obj[idx] = (_sigmoid(output.obj_logits[idx]) - y) / mb.n_cls
    if len(mb.pos):
        probs = _softmax_rows(output.cls_logits[mb.pos])
        probs[np.arange(len(mb.pos)), targets.class_star[mb.pos]] -= 1.0
        d_cls[mb.pos] = probs / mb.n_cls
        d = output.t[mb.pos] - targets.t_star[mb.pos]
        d_t[mb.pos] = lam * _smooth_l1_grad(d) / mb.n_reg

    grads = _backprop(model, cache, _merge_head_grad(d_obj, d_cls, d_t, model))
    return loss, grads


def _backprop(
    model: DetectorModel, cache: ForwardCache, d_raw: np.ndarray
) -> dict[str, np.ndarray]:
    p = model.params
    dh2, dhw, dhb = kernels.conv2d_backward(cache.h2, p["head_w"], d_raw, model.head_stride, 1)
    dh2 *= cache.h2_pre > 0
    dh1, dw2, db2 = kernels.conv2d_backward(cache.h1, p["conv2_w"], dh2, 2, 1)
    dh1 *= cache.h1_pre > 0
    _, dw1, db1 = kernels.conv2d_backward(cache.x, p["conv1_w"], dh1, 2, 1)
    return {
        "conv1_w": dw1,
        "conv1_b": db1,
        "conv2_w": dw2,
        "conv2_b": db2,
        "head_w": dhw,
        "head_b": dhb,
    }


def sgd_step(
    model: DetectorModel,
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    state: dict[str, np.ndarray],
) -> None:
    """In-place momentum SGD update; ``state`` holds the velocity buffers."""
    for name in PARAM_NAMES:
        g = grads[name]
        v = state.get(name)
        if v is None:
            v = np.zeros_like(g)
            state[name] = v
        v *= momentum
        v += g
        model.params[name] -= lr * v


def save_checkpoint(model: DetectorModel, path) -> None:
    """JSON header (config + shapes) followed by the flat little-endian float64 blob."""
    header = {
        "kind": "semidet-checkpoint",
        "version": 1,
        "config": asdict(model.config),
        "params": [[name, list(model.params[name].shape)] for name in PARAM_NAMES],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode())
        fh.write(b"\n")
        for name in PARAM_NAMES:
            fh.write(np.ascontiguousarray(model.params[name], dtype="<f8").tobytes())


def load_checkpoint(path) -> DetectorModel:
    try:
        with open(path, "rb") as fh:
            buf = io.BufferedReader(fh)
            header_line = buf.readline()
            header = json.loads(header_line.decode())
            if header.get("kind") != "semidet-checkpoint":
                raise DataError(f"not a detector checkpoint: {path}")
            cfg_raw = header["config"]
            cfg = DetectorConfig(
                image_w=cfg_raw["image_w"],
                image_h=cfg_raw["image_h"],
                stride=cfg_raw["stride"],
                anchor_sizes=tuple(cfg_raw["anchor_sizes"]),
                channels=tuple(cfg_raw["channels"]),
                num_classes=cfg_raw["num_classes"],
            )
            params: dict[str, np.ndarray] = {}
            for name, shape in header["params"]:
                count = int(np.prod(shape))
                raw = buf.read(count * 8)
                if len(raw) != count * 8:
                    raise DataError(f"truncated checkpoint {path} at parameter {name}")
                params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    except (json.JSONDecodeError, KeyError, ValueError) as exc:
        raise DataError(f"malformed checkpoint {path}: {exc}") from exc
    return DetectorModel(config=cfg, params=params)
