"""Unified consistency regularization for K-way classification.

Every method is a (w, q, p, loss) quadruple over a batch: a 0/1 weight per
example, a target distribution, the student prediction, and a distance
(cross-entropy or squared L2). The loss is sum_i w_i * dist(q_i, p_i), with
gradient flowing only into p -- except entropy minimization, where the target
is the live prediction and the full derivative is taken.

Targets are produced by :func:`build_targets` under stop-gradient and the
loss/gradient then treat the bundle as constant, which is exactly the
semantics the methods prescribe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

METHODS = (
    "Bootstrapping",
    "EntropyMin",
    "PseudoLabeling",
    "TemporalEnsembling",
    "MeanTeacher",
    "VAT",
    "UDA",
    "FixMatch",
    "NoisyStudent",
    "MixMatch",
    "ReMixMatch",
)

CROSS_ENTROPY = "cross_entropy"
SQUARED_L2 = "squared_l2"

_METHOD_DISTANCE = {
    "TemporalEnsembling": SQUARED_L2,
    "MeanTeacher": SQUARED_L2,
}

_EPS = 1e-300


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(indices: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(indices), k), dtype=np.float64)
    out[np.arange(len(indices)), indices] = 1.0
    return out


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Renormalized power p^(1/T); T=1 is the exact identity."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0: {temperature}")
    p = np.asarray(p, dtype=np.float64)
    if temperature == 1.0:
        return p.copy()
    powered = p ** (1.0 / temperature)
    return powered / powered.sum(axis=-1, keepdims=True)


def ema_update(
    teacher_params: dict[str, np.ndarray],
    student_params: dict[str, np.ndarray],
    alpha: float,
) -> dict[str, np.ndarray]:
    """teacher := alpha * teacher + (1 - alpha) * student, as a new dict."""
    if not (0.0 <= alpha <= 1.0):
        raise ConfigError(f"ema alpha must be in [0, 1]: {alpha}")
    return {
        name: alpha * teacher_params[name] + (1.0 - alpha) * student_params[name]
        for name in teacher_params
    }


def temporal_ensemble_update(q_prev: np.ndarray, p_now: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * q_prev + (1.0 - alpha) * p_now


def mixup(
    x1: np.ndarray, x2: np.ndarray, q1: np.ndarray, q2: np.ndarray, beta_sample: float
) -> tuple[np.ndarray, np.ndarray]:
    """Convex combination of two inputs and their targets."""
    b = float(beta_sample)
    return (b * x1 + (1.0 - b) * x2, b * q1 + (1.0 - b) * q2)


@dataclass(frozen=True)
class FeatureAug:
    """Feature-space augmentation for the toy classifier.

    kind 'identity' returns the input; 'noise' adds gaussian noise of the
    given scale; 'noise_mask' additionally zeroes features with mask_prob.
    """

    kind: str = "identity"
    scale: float = 0.0
    mask_prob: float = 0.0

    def apply(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "identity":
            return x
        if self.kind == "noise":
            return x + rng.normal(0.0, self.scale, size=x.shape)
        if self.kind == "noise_mask":
            out = x + rng.normal(0.0, self.scale, size=x.shape)
            return out * (rng.random(x.shape) >= self.mask_prob)
        raise ConfigError(f"unknown feature augmentation kind: {self.kind!r}")


WEAK_AUG = FeatureAug(kind="noise", scale=0.05)
STRONG_AUG = FeatureAug(kind="noise_mask", scale=0.3, mask_prob=0.2)
IDENTITY_AUG = FeatureAug()


@dataclass(frozen=True)
class ConsistencyConfig:
    """The (w, q, p, loss) selector for one method, plus its knobs."""

    method: str
    distance: str = ""  # empty -> method default
    tau: float = 0.9
    temperature: float = 0.5
    ema_alpha: float = 0.99
    mixup_beta_param: float = 0.75
    vat_epsilon: float = 1.0
    vat_xi: float = 1e-3
    vat_power_iters: int = 1
    weak_aug: FeatureAug = WEAK_AUG
    strong_aug: FeatureAug = STRONG_AUG
    n_weak_draws: int = 2  # MixMatch weak-augmentation average
    n_strong_draws: int = 2  # ReMixMatch strong-augmentation expectation

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown SSL method: {self.method!r}")
        if self.distance not in ("", CROSS_ENTROPY, SQUARED_L2):
            raise ConfigError(f"unknown distance: {self.distance!r}")
        if not (0.0 <= self.tau <= 1.0):
            raise ConfigError(f"tau must be in [0, 1]: {self.tau}")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0: {self.temperature}")
        if not (0.0 <= self.ema_alpha <= 1.0):
            raise ConfigError(f"ema_alpha must be in [0, 1]: {self.ema_alpha}")

    @property
    def effective_distance(self) -> str:
        return self.distance or _METHOD_DISTANCE.get(self.method, CROSS_ENTROPY)


@dataclass
class ToyClassifier:
    """Single-hidden-layer tanh network mapping features to K logits."""

    params: dict[str, np.ndarray]

    @property
    def n_classes(self) -> int:
        return self.params["w2"].shape[0]

    def copy(self) -> ToyClassifier:
        return ToyClassifier({k: v.copy() for k, v in self.params.items()})


def init_toy_classifier(
    n_features: int, n_hidden: int, n_classes: int, seed: int
) -> ToyClassifier:
    rng = np.random.default_rng(seed)
    return ToyClassifier(
        params={
            "w1": rng.normal(0.0, 1.0 / np.sqrt(n_features), (n_hidden, n_features)),
            "b1": np.zeros(n_hidden),
            "w2": rng.normal(0.0, 1.0 / np.sqrt(n_hidden), (n_classes, n_hidden)),
            "b2": np.zeros(n_classes),
        }
    )


def forward_logits(
    params: dict[str, np.ndarray], x: np.ndarray, want_cache: bool = False
):
    z1 = x @ params["w1"].T + params["b1"]
    a1 = np.tanh(z1)
    logits = a1 @ params["w2"].T + params["b2"]
    if want_cache:
        return logits, (x, a1)
    return logits


def predict_proba(params: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
    return softmax(forward_logits(params, x))


def logits_backward(
    params: dict[str, np.ndarray], cache, dlogits: np.ndarray
) -> dict[str, np.ndarray]:
    x, a1 = cache
    dw2 = dlogits.T @ a1
    db2 = dlogits.sum(axis=0)
    dz1 = (dlogits @ params["w2"]) * (1.0 - a1 * a1)
    return {
        "w1": dz1.T @ x,
        "b1": dz1.sum(axis=0),
        "w2": dw2,
        "b2": db2,
    }


def input_backward(params: dict[str, np.ndarray], cache, dlogits: np.ndarray) -> np.ndarray:
    _, a1 = cache
    dz1 = (dlogits @ params["w2"]) * (1.0 - a1 * a1)
    return dz1 @ params["w1"]


def vat_perturbation(
    clf: ToyClassifier,
    x: np.ndarray,
    epsilon: float,
    xi: float,
    power_iters: int = 1,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Adversarial direction approximated by power iteration, scaled to norm epsilon.

    Per example: start from a random unit vector, repeatedly replace it by
    the normalized input-gradient of KL(p(x) || p(x + xi*d)).
    """
    if epsilon == 0.0:
        return np.zeros_like(x)
    rng = rng or np.random.default_rng(0)
    p0 = predict_proba(clf.params, x)
    d = rng.standard_normal(x.shape)
    d = _normalize_rows(d)
    for _ in range(power_iters):
        logits, cache = forward_logits(clf.params, x + xi * d, want_cache=True)
        p1 = softmax(logits)
        grad = input_backward(clf.params, cache, p1 - p0)
        norms = np.linalg.norm(grad, axis=1, keepdims=True)
        nonzero = norms[:, 0] > 0
        d[nonzero] = grad[nonzero] / norms[nonzero]
    return epsilon * d


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return m / norms


@dataclass
class TeacherState:
    """Method-owned state: a frozen teacher, an EMA teacher, or an ensemble memory."""

    frozen_params: dict[str, np.ndarray] | None = None
    ema_params: dict[str, np.ndarray] | None = None
    q_memory: np.ndarray | None = None


@dataclass
class TargetBundle:
    """Stop-gradient side of the loss: weights, targets, and model inputs."""

    method: str
    distance: str
    w: np.ndarray  # (B,)
    q: np.ndarray | None  # (B, K); None for entropy minimization (live target)
    inputs: list[np.ndarray] = field(default_factory=list)  # each (B, F)


def build_targets(
    cfg: ConsistencyConfig,
    x: np.ndarray,
    student: ToyClassifier,
    state: TeacherState | None,
    rng: np.random.Generator,
) -> TargetBundle:
    """Compute (w, q, model inputs) for one batch, per the method's recipe."""
    state = state or TeacherState()
    b = x.shape[0]
    ones = np.ones(b)
    method = cfg.method

    if method == "Bootstrapping":
        pt = _require_frozen(state, method, x)
        return TargetBundle(method, cfg.effective_distance, _thresh(pt, cfg.tau), pt, [x])
    if method == "EntropyMin":
        return TargetBundle(method, cfg.effective_distance, ones, None, [x])
    if method == "PseudoLabeling":
        ps = predict_proba(student.params, x)
        q = one_hot(ps.argmax(axis=1), student.n_classes)
        return TargetBundle(method, cfg.effective_distance, _thresh(ps, cfg.tau), q, [x])
    if method == "TemporalEnsembling":
        if state.q_memory is None:
            raise ConfigError("TemporalEnsembling requires TeacherState.q_memory")
        return TargetBundle(method, cfg.effective_distance, ones, state.q_memory.copy(), [x])
    if method == "MeanTeacher":
        if state.ema_params is None:
            raise ConfigError("MeanTeacher requires TeacherState.ema_params")
        q = predict_proba(state.ema_params, x)
        return TargetBundle(method, cfg.effective_distance, ones, q, [x])
    if method == "VAT":
        q = predict_proba(student.params, x)
        r = vat_perturbation(
            student, x, cfg.vat_epsilon, cfg.vat_xi, cfg.vat_power_iters, rng
        )
        return TargetBundle(method, cfg.effective_distance, ones, q, [x + r])
    if method == "UDA":
        pw = predict_proba(student.params, cfg.weak_aug.apply(x, rng))
        q = sharpen(pw, cfg.temperature)
        xs = cfg.strong_aug.apply(x, rng)
        return TargetBundle(method, cfg.effective_distance, _thresh(pw, cfg.tau), q, [xs])
    if method == "FixMatch":
        pw = predict_proba(student.params, cfg.weak_aug.apply(x, rng))
        q = one_hot(pw.argmax(axis=1), student.n_classes)
        xs = cfg.strong_aug.apply(x, rng)
        return TargetBundle(method, cfg.effective_distance, _thresh(pw, cfg.tau), q, [xs])
    if method == "NoisyStudent":
        pt = _require_frozen(state, method, x)
        q = one_hot(pt.argmax(axis=1), student.n_classes)
        xs = cfg.strong_aug.apply(x, rng)
        return TargetBundle(method, cfg.effective_distance, _thresh(pt, cfg.tau), q, [xs])
    if method == "MixMatch":
        z = np.roll(x, 1, axis=0)
        qx = sharpen(_mean_weak_proba(cfg, x, student, rng), cfg.temperature)
        qz = sharpen(_mean_weak_proba(cfg, z, student, rng), cfg.temperature)
        beta = rng.beta(cfg.mixup_beta_param, cfg.mixup_beta_param, size=(b, 1))
        x_mix, q = mixup_batch(cfg.weak_aug.apply(x, rng), cfg.weak_aug.apply(z, rng), qx, qz, beta)
        return TargetBundle(method, cfg.effective_distance, ones, q, [x_mix])
    if method == "ReMixMatch":
        z = np.roll(x, 1, axis=0)
        qx = sharpen(predict_proba(student.params, cfg.weak_aug.apply(x, rng)), cfg.temperature)
        qz = sharpen(predict_proba(student.params, cfg.weak_aug.apply(z, rng)), cfg.temperature)
        beta = rng.beta(cfg.mixup_beta_param, cfg.mixup_beta_param, size=(b, 1))
        q = beta * qx + (1.0 - beta) * qz
        inputs = [
            beta * cfg.strong_aug.apply(x, rng) + (1.0 - beta) * cfg.strong_aug.apply(z, rng)
            for _ in range(cfg.n_strong_draws)
        ]
        return TargetBundle(method, cfg.effective_distance, ones, q, inputs)
    raise ConfigError(f"unknown SSL method: {method!r}")


def mixup_batch(
    x1: np.ndarray, x2: np.ndarray, q1: np.ndarray, q2: np.ndarray, beta: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    return (beta * x1 + (1.0 - beta) * x2, beta * q1 + (1.0 - beta) * q2)


def _mean_weak_proba(
    cfg: ConsistencyConfig, x: np.ndarray, student: ToyClassifier, rng: np.random.Generator
) -> np.ndarray:
    draws = [
        predict_proba(student.params, cfg.weak_aug.apply(x, rng))
        for _ in range(max(cfg.n_weak_draws, 1))
    ]
    return np.mean(draws, axis=0)


def _thresh(p: np.ndarray, tau: float) -> np.ndarray:
    return (p.max(axis=1) >= tau).astype(np.float64)


def _require_frozen(state: TeacherState, method: str, x: np.ndarray) -> np.ndarray:
    if state.frozen_params is None:
        raise ConfigError(f"{method} requires TeacherState.frozen_params")
    return predict_proba(state.frozen_params, x)


def consistency_loss(
    bundle: TargetBundle, student: ToyClassifier
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value for a frozen target bundle (mean over expectation draws)."""
    total = 0.0
    last_p = None
    for inp in bundle.inputs:
        p = softmax(forward_logits(student.params, inp))
        last_p = p
        q = p if bundle.q is None else bundle.q
        if bundle.distance == CROSS_ENTROPY:
            per_ex = -(q * np.log(np.maximum(p, _EPS))).sum(axis=1)
        else:
            per_ex = ((q - p) ** 2).sum(axis=1)
        total += float((bundle.w * per_ex).sum())
    loss = total / len(bundle.inputs)
    diag_q = bundle.q if bundle.q is not None else last_p
    return loss, {"w": bundle.w.copy(), "q": np.array(diag_q)}


def consistency_grads(bundle: TargetBundle, student: ToyClassifier) -> dict[str, np.ndarray]:
    """Gradient of :func:`consistency_loss` w.r.t. the student parameters."""
    grads: dict[str, np.ndarray] | None = None
    for inp in bundle.inputs:
        logits, cache = forward_logits(student.params, inp, want_cache=True)
        p = softmax(logits)
        if bundle.q is None:
            # entropy minimization: d/dz of -sum p log p
            h = -(p * np.log(np.maximum(p, _EPS))).sum(axis=1, keepdims=True)
            dlogits = -p * (np.log(np.maximum(p, _EPS)) + h)
        elif bundle.distance == CROSS_ENTROPY:
            dlogits = p - bundle.q
        else:
            g = 2.0 * (p - bundle.q)
            dlogits = p * (g - (g * p).sum(axis=1, keepdims=True))
        dlogits = dlogits * bundle.w[:, None] / len(bundle.inputs)
        g_draw = logits_backward(student.params, cache, dlogits)
        if grads is None:
            grads = g_draw
        else:
            for k in grads:
                grads[k] += g_draw[k]
    assert grads is not None
    return grads


def unified_loss(
    cfg: ConsistencyConfig,
    x: np.ndarray,
    student: ToyClassifier,
    state: TeacherState | None,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray]]:
    """One-call convenience: build targets, then evaluate the loss."""
    bundle = build_targets(cfg, x, student, state, rng)
    return consistency_loss(bundle, student)


def unified_loss_and_grads(
    cfg: ConsistencyConfig,
    x: np.ndarray,
    student: ToyClassifier,
    state: TeacherState | None,
    rng: np.random.Generator,
) -> tuple[float, dict[str, np.ndarray], dict[str, np.ndarray]]:
    bundle = build_targets(cfg, x, student, state, rng)
    loss, diag = consistency_loss(bundle, student)
    return loss, consistency_grads(bundle, student), diag


def supervised_ce_and_grads(
    student: ToyClassifier, x: np.ndarray, y: np.ndarray
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean cross-entropy on labeled data, for demo training loops."""
    logits, cache = forward_logits(student.params, x, want_cache=True)
    p = softmax(logits)
    n = len(y)
    loss = float(-np.log(np.maximum(p[np.arange(n), y], _EPS)).mean())
    dlogits = p.copy()
    dlogits[np.arange(n), y] -= 1.0
    return loss, logits_backward(student.params, cache, dlogits / n)


def make_blobs(
    n: int, n_classes: int, n_features: int, seed: int, spread: float = 0.55
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian class clusters at random unit centers; returns (X, y)."""
    rng = np.random.default_rng(seed)
    centers = _normalize_rows(rng.standard_normal((n_classes, n_features))) * 2.0
    y = rng.integers(n_classes, size=n)
    x = centers[y] + rng.normal(0.0, spread, size=(n, n_features))
    return x, y


def demo_run(
    method: str,
    seed: int = 0,
    steps: int = 300,
    lr: float = 0.5,
    lambda_u: float = 1.0,
    n_labeled: int = 30,
    n_unlabeled: int = 300,
    n_test: int = 500,
    n_classes: int = 3,
    n_features: int = 4,
    n_hidden: int = 16,
    batch_size: int = 32,
    **cfg_overrides,
) -> dict:
    """Train the toy classifier with one SSL method; report losses and accuracy."""
    cfg = ConsistencyConfig(method=method, **cfg_overrides)
    rng = np.random.default_rng(seed)
    x_l, y_l = make_blobs(n_labeled, n_classes, n_features, seed=seed * 7 + 1)
    x_u, _ = make_blobs(n_unlabeled, n_classes, n_features, seed=seed * 7 + 2)
    x_t, y_t = make_blobs(n_test, n_classes, n_features, seed=seed * 7 + 3)

    student = init_toy_classifier(n_features, n_hidden, n_classes, seed=seed)
    state = TeacherState()
    if method in ("Bootstrapping", "NoisyStudent"):
        teacher = _train_supervised(x_l, y_l, n_hidden, seed, steps=steps, lr=lr)
        state.frozen_params = teacher.params
    if method == "MeanTeacher":
        state.ema_params = {k: v.copy() for k, v in student.params.items()}
    if method == "TemporalEnsembling":
        state.q_memory = np.full((n_unlabeled, n_classes), 1.0 / n_classes)

    log: list[dict] = []
    for step in range(steps):
        sup_loss, sup_grads = supervised_ce_and_grads(student, x_l, y_l)
        idx = rng.choice(n_unlabeled, size=min(batch_size, n_unlabeled), replace=False)
        xb = x_u[idx]
        bundle_state = state
        if method == "TemporalEnsembling":
            bundle_state = replace_memory(state, idx)
        u_loss, u_grads, _ = unified_loss_and_grads(cfg, xb, student, bundle_state, rng)
        u_loss /= len(xb)  # keep lambda_u comparable across batch sizes
        for k in student.params:
            student.params[k] -= lr * (sup_grads[k] + lambda_u * u_grads[k] / len(xb))
        if method == "MeanTeacher":
            state.ema_params = ema_update(state.ema_params, student.params, cfg.ema_alpha)
        if method == "TemporalEnsembling":
            p_now = predict_proba(student.params, xb)
            state.q_memory[idx] = temporal_ensemble_update(
                state.q_memory[idx], p_now, cfg.ema_alpha
            )
        if step % max(steps // 10, 1) == 0 or step == steps - 1:
            log.append({"step": step, "sup_loss": sup_loss, "unsup_loss": u_loss})

    acc = float((predict_proba(student.params, x_t).argmax(axis=1) == y_t).mean())
    sup_only = _train_supervised(x_l, y_l, n_hidden, seed, steps=steps, lr=lr)
    acc_sup = float((predict_proba(sup_only.params, x_t).argmax(axis=1) == y_t).mean())
    return {
        "method": method,
        "seed": seed,
        "test_accuracy": acc,
        "supervised_only_accuracy": acc_sup,
        "log": log,
    }


def replace_memory(state: TeacherState, idx: np.ndarray) -> TeacherState:
    assert state.q_memory is not None
    return TeacherState(
        frozen_params=state.frozen_params,
        ema_params=state.ema_params,
        q_memory=state.q_memory[idx],
    )


def _train_supervised(
    x: np.ndarray, y: np.ndarray, n_hidden: int, seed: int, steps: int, lr: float
) -> ToyClassifier:
    clf = init_toy_classifier(x.shape[1], n_hidden, int(y.max()) + 1, seed=seed)
    for _ in range(steps):
        _, grads = supervised_ce_and_grads(clf, x, y)
        for k in clf.params:
            clf.params[k] -= lr * grads[k]
    return clf
