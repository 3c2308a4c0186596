"""Training orchestration: teacher training, joint student training, ablations.

The four-step recipe: train a teacher on labeled data, generate pseudo
labels for the unlabeled pool offline, strongly augment unlabeled images
(transforming pseudo boxes with the same affine map the pixels get), and
jointly minimize supervised + lambda_u * unsupervised losses with a
constant weight schedule.

All randomness derives from the config seed via named substreams, so both
trainers are bit-reproducible and the supervised trajectory of a joint run
with lambda_u = 0 coincides with plain supervised training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import augment
from .augment import AppliedAugment, AugPolicy
from .data import AnnotatedImage
from .detector import (
    DetectorConfig,
    DetectorModel,
    LossBreakdown,
    assign_anchors,
    init_model,
    loss_and_gradients,
    sample_minibatch,
    sgd_step,
)
from .errors import ConfigError, NumericError
from .geometry import Box
from .metrics import EvalResult, evaluate
from .pseudolabel import PseudoLabelSet, generate_pseudo_labels, infer
from .seeding import derive_rng, derive_seed

AUG_MODES = ("none", "C", "C+{G,B}", "C+{G,B}+Cutout")

# hook(matrix, boxes_before, boxes_after) fired when a global geometric op
# transformed the unlabeled branch's pseudo boxes
UnsupHook = Callable[[object, list[Box], list[Box]], None]


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 1
    lam: float = 1.0  # regression-term weight inside the supervised loss
    lambda_u: float = 2.0  # unsupervised loss weight
    tau: float = 0.9  # pseudo-label confidence threshold
    nms_threshold: float = 0.5
    aug_mode: str = "none"
    seed: int = 0
    stride: int = 8
    anchor_sizes: tuple[int, ...] = (16, 32)
    channels: tuple[int, int] = (8, 16)
    num_classes: int = 3
    sample_cap: int = 64
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    lr_decay_at: float = 0.8  # fraction of steps after which lr drops 10x
    score_floor: float = 0.0  # candidate floor during pseudo-label inference

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1: {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1: {self.batch_size}")
        if self.lambda_u < 0:
            raise ConfigError(f"lambda_u must be >= 0: {self.lambda_u}")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must be in [0, 1]: {self.tau}")
        if self.aug_mode not in AUG_MODES:
            raise ConfigError(f"aug_mode must be one of {AUG_MODES}: {self.aug_mode!r}")
        if not (0.0 < self.nms_threshold <= 1.0):
            raise ConfigError(f"nms_threshold must be in (0, 1]: {self.nms_threshold}")

    def detector_config(self, image_w: int, image_h: int) -> DetectorConfig:
        return DetectorConfig(
            image_w=image_w,
            image_h=image_h,
            stride=self.stride,
            anchor_sizes=self.anchor_sizes,
            channels=self.channels,
            num_classes=self.num_classes,
        )


@dataclass
class StepLoss:
    step: int
    l_s: float
    l_u: float
    total: float


@dataclass
class TrainResult:
    model: DetectorModel
    loss_log: list[StepLoss]
    pseudo: dict[int, PseudoLabelSet] | None = None


class _Stream:
    """Epoch-shuffled cyclic iterator over a dataset."""

    def __init__(self, items: list[AnnotatedImage], rng: np.random.Generator) -> None:
        if not items:
            raise ConfigError("dataset stream is empty")
        self.items = items
        self.rng = rng
        self.order: np.ndarray = np.empty(0, dtype=np.int64)
        self.pos = 0

    def next(self) -> AnnotatedImage:
        if self.pos >= len(self.order):
            self.order = self.rng.permutation(len(self.items))
            self.pos = 0
        item = self.items[self.order[self.pos]]
        self.pos += 1
        return item


def _mode_ops(mode: str, policy: AugPolicy, seed: int) -> list[augment.AugOp]:
    if mode == "none":
        return []
    seq = augment.sample_sequence(policy, seed)
    if mode == "C":
        return seq[:1]
    if mode == "C+{G,B}":
        return seq[:2]
    return seq


def augment_sample(
    img: np.ndarray,
    gt: list[tuple[Box, int]],
    mode: str,
    policy: AugPolicy,
    seed: int,
) -> tuple[np.ndarray, list[tuple[Box, int]], AppliedAugment]:
    """Random flip plus the mode's prefix of the strong sequence, class-preserving."""
    rng = np.random.default_rng(seed)
    flipped = bool(rng.random() < 0.5)
    ops = _mode_ops(mode, policy, derive_seed(seed, "ops"))
    boxes = [b for b, _ in gt]
    classes = [c for _, c in gt]
    img2, boxes2, info = augment.apply_ops(img, boxes, ops, seed, flip=flipped)
    gt2 = [(b, classes[i]) for b, i in zip(boxes2, info.kept_indices)]
    return img2, gt2, info


def _check_uniform_dims(items: list[AnnotatedImage]) -> tuple[int, int]:
    w, h = items[0].width, items[0].height
    for it in items:
        if (it.width, it.height) != (w, h):
            raise ConfigError(
                f"all images must share dimensions; image {it.id} is "
                f"{it.width}x{it.height}, expected {w}x{h}"
            )
    return w, h


def _lr_at(cfg: TrainConfig, step: int) -> float:
    if step >= math.floor(cfg.lr_decay_at * cfg.steps):
        return cfg.lr * 0.1
    return cfg.lr


def _branch_pass(
    model: DetectorModel,
    item: AnnotatedImage,
    gt: list[tuple[Box, int]],
    cfg: TrainConfig,
    mode: str,
    aug_seed: int,
    mb_rng: np.random.Generator,
    policy: AugPolicy,
    hook: UnsupHook | None = None,
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    img2, gt2, info = augment_sample(item.image, gt, mode, policy, aug_seed)
    if hook is not None and info.geo_matrix is not None:
        hook(info.geo_matrix, [b for b, _ in gt], [b for b, _ in gt2])
    targets = assign_anchors(model.grid, gt2, pos_iou=cfg.pos_iou, neg_iou=cfg.neg_iou)
    mb = sample_minibatch(targets, cfg.sample_cap, mb_rng)
    return loss_and_gradients(model, img2, targets, mb, lam=cfg.lam)


def _accumulate(total: dict[str, np.ndarray] | None, grads: dict[str, np.ndarray], scale: float):
    if total is None:
        return {k: v * scale for k, v in grads.items()}
    for k in total:
        total[k] += grads[k] * scale
    return total


def train_teacher(labeled: list[AnnotatedImage], cfg: TrainConfig) -> TrainResult:
    """Supervised training on labeled data only.

    Default augmentation is a random horizontal flip; a strong cfg.aug_mode
    adds the corresponding prefix of the (color, geo, cutout) sequence.
    """
    result = _train(labeled, None, None, cfg, hook=None)
    return result


def run_stac(
    labeled: list[AnnotatedImage],
    unlabeled: list[AnnotatedImage],
    teacher: DetectorModel,
    cfg: TrainConfig,
    pseudo: dict[int, PseudoLabelSet] | None = None,
    hook: UnsupHook | None = None,
) -> TrainResult:
    """Joint training against pseudo labels from a fixed teacher.

    Pseudo labels are generated once, offline, at cfg.tau (unless supplied).
    Each step draws batch_size labeled and batch_size unlabeled images; the
    unlabeled branch gets the strong augmentation, whose geometric part also
    transforms its pseudo boxes. The labeled branch shares the run's
    augmentation mode. Total loss per step is l_s + lambda_u * l_u.
    """
    if pseudo is None:
        pseudo = generate_pseudo_labels(
            teacher,
            unlabeled,
            tau=cfg.tau,
            nms_threshold=cfg.nms_threshold,
            score_floor=cfg.score_floor,
        )
    missing = [item.id for item in unlabeled if item.id not in pseudo]
    if missing:
        raise ConfigError(f"pseudo labels missing for image ids {missing[:5]}")
    return _train(labeled, unlabeled, pseudo, cfg, hook=hook)


def _train(
    labeled: list[AnnotatedImage],
    unlabeled: list[AnnotatedImage] | None,
    pseudo: dict[int, PseudoLabelSet] | None,
    cfg: TrainConfig,
    hook: UnsupHook | None,
) -> TrainResult:
    w, h = _check_uniform_dims(labeled + (unlabeled or []))
    model = init_model(cfg.detector_config(w, h), derive_seed(cfg.seed, "model-init"))
    policy = AugPolicy()

    lab_stream = _Stream(labeled, derive_rng(cfg.seed, "labeled-stream"))
    lab_mb_rng = derive_rng(cfg.seed, "labeled-minibatch")
    use_unsup = unlabeled is not None and cfg.lambda_u > 0.0
    if use_unsup:
        unl_stream = _Stream(unlabeled, derive_rng(cfg.seed, "unlabeled-stream"))
        unl_mb_rng = derive_rng(cfg.seed, "unlabeled-minibatch")

    momentum_state: dict[str, np.ndarray] = {}
    log: list[StepLoss] = []
    scale = 1.0 / cfg.batch_size
    for step in range(cfg.steps):
        grads: dict[str, np.ndarray] | None = None
        l_s = 0.0
        for slot in range(cfg.batch_size):
            item = lab_stream.next()
            loss, g = _branch_pass(
                model,
                item,
                item.gt,
                cfg,
                cfg.aug_mode,
                derive_seed(cfg.seed, "labeled-aug", step, slot),
                lab_mb_rng,
                policy,
            )
            l_s += loss.total * scale
            grads = _accumulate(grads, g, scale)

        l_u = 0.0
        if use_unsup:
            for slot in range(cfg.batch_size):
                item = unl_stream.next()
                pl = pseudo[item.id]
                loss, g = _branch_pass(
                    model,
                    item,
                    pl.as_gt(),
                    cfg,
                    cfg.aug_mode,
                    derive_seed(cfg.seed, "unlabeled-aug", step, slot),
                    unl_mb_rng,
                    policy,
                    hook=hook,
                )
                l_u += loss.total * scale
                grads = _accumulate(grads, g, scale * cfg.lambda_u)

        total = l_s + cfg.lambda_u * l_u
        if not math.isfinite(total):
            raise NumericError(f"non-finite loss at step {step}: l_s={l_s} l_u={l_u}")
        assert grads is not None
        sgd_step(model, grads, _lr_at(cfg, step), cfg.momentum, momentum_state)
        log.append(StepLoss(step=step, l_s=l_s, l_u=l_u, total=total))
    return TrainResult(model=model, loss_log=log, pseudo=pseudo)


def evaluate_model(
    model: DetectorModel,
    items: list[AnnotatedImage],
    nms_threshold: float = 0.5,
    score_floor: float = 0.0,
) -> EvalResult:
    """Run inference over a dataset and score it with the COCO-style evaluator."""
    dets_by_image = {
        it.id: infer(model, it.image, nms_threshold, score_floor) for it in items
    }
    gts_by_image = {it.id: it.gt for it in items}
    return evaluate(dets_by_image, gts_by_image)


@dataclass
class AblationCell:
    lambda_u: float
    tau: float
    map: float
    ap50: float


def ablate_grid(
    labeled: list[AnnotatedImage],
    unlabeled: list[AnnotatedImage],
    teacher: DetectorModel,
    lambda_u_set: list[float],
    tau_set: list[float],
    cfg: TrainConfig,
    eval_items: list[AnnotatedImage],
) -> list[AblationCell]:
    """One joint run per (lambda_u, tau) cell; pseudo labels regenerate per tau."""
    cells: list[AblationCell] = []
    for tau in tau_set:
        pseudo = generate_pseudo_labels(
            teacher, unlabeled, tau=tau, nms_threshold=cfg.nms_threshold,
            score_floor=cfg.score_floor,
        )
        for lam_u in lambda_u_set:
            run_cfg = replace(cfg, lambda_u=lam_u, tau=tau)
            result = run_stac(labeled, unlabeled, teacher, run_cfg, pseudo=pseudo)
            res = evaluate_model(result.model, eval_items, cfg.nms_threshold)
            cells.append(AblationCell(lambda_u=lam_u, tau=tau, map=res.map, ap50=res.ap50))
    return cells


@dataclass
class UnlabeledSizeCell:
    multiplier: str
    n_unlabeled: int
    map: float
    ap50: float
    clamped: bool = False


def ablate_unlabeled_size(
    labeled: list[AnnotatedImage],
    unlabeled: list[AnnotatedImage],
    teacher: DetectorModel,
    multipliers: list[int | str],
    cfg: TrainConfig,
    eval_items: list[AnnotatedImage],
) -> list[UnlabeledSizeCell]:
    """Joint runs on nested unlabeled subsets of size multiplier * |labeled|."""
    import warnings

    order = derive_rng(cfg.seed, "unlabeled-subset").permutation(len(unlabeled))
    cells: list[UnlabeledSizeCell] = []
    for mult in multipliers:
        if mult == "full":
            count, clamped = len(unlabeled), False
        else:
            count = int(mult) * len(labeled)
            clamped = count > len(unlabeled)
            if clamped:
                warnings.warn(
                    f"multiplier {mult} needs {count} unlabeled images but the pool "
                    f"has {len(unlabeled)}; clamping to the full pool",
                    stacklevel=2,
                )
                count = len(unlabeled)
        subset = [unlabeled[i] for i in sorted(order[:count])]
        result = run_stac(labeled, subset, teacher, cfg)
        res = evaluate_model(result.model, eval_items, cfg.nms_threshold)
        cells.append(
            UnlabeledSizeCell(
                multiplier=str(mult), n_unlabeled=count, map=res.map, ap50=res.ap50,
                clamped=clamped,
            )
        )
    return cells


def loss_log_csv(log: list[StepLoss]) -> str:
    lines = ["step,l_s,l_u,total"]
    lines.extend(f"{e.step},{e.l_s!r},{e.l_u!r},{e.total!r}" for e in log)
    return "\n".join(lines) + "\n"
