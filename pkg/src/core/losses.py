"""
Losses Module

Training objective of the detection head with analytic gradients:

    L     = 1/N_cls * sum_i L_cls + 1/N_reg * sum_i p*_i * L_reg
    L_reg = lambda1 * L_h + lambda2 * L_alpha + lambda3 * L_r

L_cls is softmax cross-entropy, L_h is smooth-L1 over the four box deltas
of the labeled class, L_alpha and L_r are smooth-L1 on the sigmoid-normalized
length ratios and obliquity factor.
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import numpy.typing as npt

from src.core.geometry import HBox
from src.errors import InvalidInputError

Array = npt.NDArray[np.float64]

DEFAULT_BETA = 1.0

# largest log-scale change applied to predicted deltas at inference
BBOX_XFORM_CLIP = math.log(1000.0 / 16.0)


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 16.0
    smooth_l1_beta: float = DEFAULT_BETA

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise InvalidInputError(f"{name} must be a finite value >= 0, got {value}")
        if not (math.isfinite(self.smooth_l1_beta) and self.smooth_l1_beta > 0):
            raise InvalidInputError(f"smooth_l1_beta must be > 0, got {self.smooth_l1_beta}")


@dataclass(frozen=True)
class RegressionTarget:
    """Per-proposal targets: box deltas, alpha and r"""

    deltas: Tuple[float, float, float, float]
    alpha_t: Tuple[float, float, float, float]
    r_t: float

    def __post_init__(self):
        values = tuple(self.deltas) + tuple(self.alpha_t) + (self.r_t,)
        if len(values) != 9 or not all(math.isfinite(v) for v in values):
            raise InvalidInputError("regression target needs 4 finite deltas, 4 alpha and r")
        if not all(0.0 <= v <= 1.0 for v in tuple(self.alpha_t) + (self.r_t,)):
            raise InvalidInputError("alpha_t and r_t must lie in [0, 1]")


@dataclass
class RegressionTargets:
    """Batch of regression targets, shapes (N, 4), (N, 4), (N,)"""

    deltas: Array
    alpha: Array
    r: Array

    @classmethod
    def stack(cls, targets) -> "RegressionTargets":
        targets = list(targets)
        if not targets:
            return cls(np.zeros((0, 4)), np.zeros((0, 4)), np.zeros(0))
        return cls(
            np.array([t.deltas for t in targets], dtype=np.float64),
            np.array([t.alpha_t for t in targets], dtype=np.float64),
            np.array([t.r_t for t in targets], dtype=np.float64),
        )


@dataclass
class BatchLabels:
    """Class index per proposal (0 is background) and the positive flag p*"""

    classes: npt.NDArray[np.int64]
    positive: Optional[npt.NDArray[np.bool_]] = None

    def __post_init__(self):
        self.classes = np.asarray(self.classes, dtype=np.int64).ravel()
        if self.positive is None:
            self.positive = self.classes > 0
        self.positive = np.asarray(self.positive, dtype=bool).ravel()
        if self.positive.shape != self.classes.shape:
            raise InvalidInputError("classes and positive flags differ in length")
        if np.any(self.classes < 0):
            raise InvalidInputError("class indices must be >= 0")
        if np.any(self.classes[self.positive] == 0):
            raise InvalidInputError("positive proposals must carry a foreground class")

    @property
    def n_cls(self) -> int:
        return int(self.classes.size)

    @property
    def n_reg(self) -> int:
        return int(np.count_nonzero(self.positive))


@dataclass
class HeadOutputs:
    """Head predictions (or gradients with the same layout).

    logits (N, K+1), class-specific deltas (N, 4(K+1)), alpha (N, 4) and
    r (N,); alpha and r are the sigmoid outputs.
    """

    logits: Array
    deltas: Array
    alpha: Array
    r: Array

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1] - 1

    def __len__(self) -> int:
        return self.logits.shape[0]


@dataclass
class LossResult:
    total: float
    cls: float
    box: float
    alpha: float
    r: float
    grads: HeadOutputs = field(repr=False)


def smooth_l1(d, beta: float = DEFAULT_BETA) -> Tuple[Array, Array]:
    """Elementwise smooth-L1 value and derivative"""
    if beta <= 0:
        raise InvalidInputError(f"beta must be > 0, got {beta}")
    d = np.asarray(d, dtype=np.float64)
    abs_d = np.abs(d)
    quadratic = abs_d < beta
    value = np.where(quadratic, 0.5 * d * d / beta, abs_d - 0.5 * beta)
    grad = np.clip(d / beta, -1.0, 1.0)
    return value, grad


def encode_deltas(gt, anchors) -> Array:
    """Batch box deltas (t_x, t_y, t_w, t_h) of (N, 4) boxes relative to (N, 4) anchors"""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if gt.shape != anchors.shape:
        raise InvalidInputError(f"box and anchor batches differ: {gt.shape} vs {anchors.shape}")
    if np.any(gt[:, 2:] <= 0) or np.any(anchors[:, 2:] <= 0):
        raise InvalidInputError("box sizes must be positive")
    return np.stack(
        [
            (gt[:, 0] - anchors[:, 0]) / anchors[:, 2],
            (gt[:, 1] - anchors[:, 1]) / anchors[:, 3],
            np.log(gt[:, 2] / anchors[:, 2]),
            np.log(gt[:, 3] / anchors[:, 3]),
        ],
        axis=1,
    )


def decode_deltas(deltas, anchors, clip: Optional[float] = None) -> Array:
    """Inverse of encode_deltas; clip caps the log-scale terms when given"""
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    if np.any(anchors[:, 2:] <= 0):
        raise InvalidInputError("anchor sizes must be positive")
    tw, th = deltas[:, 2], deltas[:, 3]
    if clip is not None:
        tw, th = np.minimum(tw, clip), np.minimum(th, clip)
    return np.stack(
        [
            anchors[:, 0] + deltas[:, 0] * anchors[:, 2],
            anchors[:, 1] + deltas[:, 1] * anchors[:, 3],
            anchors[:, 2] * np.exp(tw),
            anchors[:, 3] * np.exp(th),
        ],
        axis=1,
    )


def box_delta_encode(gt: HBox, anchor: HBox) -> Array:
    return encode_deltas(gt.as_array(), anchor.as_array())[0]


def box_delta_decode(deltas, anchor: HBox) -> HBox:
    return HBox(*map(float, decode_deltas(deltas, anchor.as_array())[0]))


def l_alpha(pred, target, beta: float = DEFAULT_BETA) -> Tuple[Array, Array]:
    """Sum of smooth-L1 over the four ratios (per row) and its gradient wrt pred"""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise InvalidInputError(f"alpha prediction {pred.shape} and target {target.shape} differ")
    value, grad = smooth_l1(pred - target, beta)
    return value.sum(axis=-1), grad


def l_r(pred, target, beta: float = DEFAULT_BETA) -> Tuple[Array, Array]:
    return smooth_l1(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64), beta)


def l_box(pred, target, beta: float = DEFAULT_BETA) -> Tuple[Array, Array]:
    """Horizontal-box term: smooth-L1 summed over the four deltas"""
    value, grad = smooth_l1(np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64), beta)
    return value.sum(axis=-1), grad


def softmax(logits) -> Array:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def l_cls(logits, classes) -> Tuple[Array, Array]:
    """Softmax cross-entropy per row and its gradient (softmax - onehot)"""
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    cls = np.atleast_1d(np.asarray(classes, dtype=np.int64))
    if cls.shape[0] != z.shape[0]:
        raise InvalidInputError("one class index per logit row is required")
    if np.any(cls < 0) or np.any(cls >= z.shape[1]):
        raise InvalidInputError("class index out of range")
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(z.shape[0])
    value = log_norm - shifted[rows, cls]
    grad = softmax(z)
    grad[rows, cls] -= 1.0
    if np.ndim(logits) == 1:
        return value[0], grad[0]
    return value, grad


def l_total(
    preds: HeadOutputs,
    targets: RegressionTargets,
    labels: BatchLabels,
    weights: LossWeights = LossWeights(),
) -> LossResult:
    n = len(preds)
    lengths = {
        len(preds.deltas),
        len(preds.alpha),
        len(preds.r),
        len(targets.deltas),
        len(targets.alpha),
        len(targets.r),
        labels.n_cls,
    }
    if lengths != {n}:
        raise InvalidInputError(f"batch lengths disagree: {sorted(lengths)}")
    if n < 1:
        raise InvalidInputError("the batch must hold at least one proposal")
    if preds.deltas.shape[1] != 4 * preds.logits.shape[1]:
        raise InvalidInputError("deltas need 4 values per class (background included)")

    beta = weights.smooth_l1_beta
    cls_value, cls_grad = l_cls(preds.logits, labels.classes)

    pos = np.flatnonzero(labels.positive)
    n_reg = pos.size
    rows = np.arange(n)
    cols = labels.classes[:, None] * 4 + np.arange(4)
    class_deltas = preds.deltas[rows[:, None], cols]

    box_value, box_grad = l_box(class_deltas, targets.deltas, beta)
    alpha_value, alpha_grad = l_alpha(preds.alpha, targets.alpha, beta)
    r_value, r_grad = l_r(preds.r, targets.r, beta)

    # correctly rounded sums make the loss independent of proposal order
    cls_term = math.fsum(cls_value) / n
    if n_reg:
        box_term = math.fsum(box_value[pos]) / n_reg
        alpha_term = math.fsum(alpha_value[pos]) / n_reg
        r_term = math.fsum(r_value[pos]) / n_reg
    else:
        box_term = alpha_term = r_term = 0.0
    total = cls_term + weights.lambda1 * box_term + weights.lambda2 * alpha_term + weights.lambda3 * r_term

    mask = labels.positive.astype(np.float64)
    scale = mask / n_reg if n_reg else np.zeros(n)
    deltas_grad = np.zeros_like(preds.deltas)
    deltas_grad[rows[:, None], cols] = weights.lambda1 * box_grad * scale[:, None]
    grads = HeadOutputs(
        logits=cls_grad / n,
        deltas=deltas_grad,
        alpha=weights.lambda2 * alpha_grad * scale[:, None],
        r=weights.lambda3 * r_grad * scale,
    )
    return LossResult(total, cls_term, box_term, alpha_term, r_term, grads)
