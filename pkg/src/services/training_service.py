"""
Training Service Module

Desk-scale detection head trained with the gliding-vertex objective.

Proposals are jittered ground-truth boxes plus random background boxes.
Their features are the normalized proposal box, noisy observations of the
assigned object's extreme vertices and a noisy class indicator; a two-layer
tanh network maps them to class logits, class-specific box deltas and
sigmoid-normalized length ratios and obliquity.
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.special import expit

from src.config import RunConfig
from src.core.geometry import HBox, aabb
from src.core.losses import (
    BBOX_XFORM_CLIP,
    BatchLabels,
    HeadOutputs,
    LossResult,
    LossWeights,
    RegressionTargets,
    decode_deltas,
    encode_deltas,
    l_total,
    softmax,
)
from src.core.nms import ScoredPoly, batched_oriented_nms
from src.core.representation import GlidingRep, SelectionPolicy, encode_batch, extreme_vertices, select
from src.errors import InvalidInputError, TrainingDivergedError
from src.services.dataio_service import DetDataset, DetRecord, GtDataset, GtRecord
from src.services.evaluation_service import MapResult, mean_average_precision
from src.services.simulation_service import SceneSpec, child_seed, gen_dataset

FORMAT_VERSION = 1

# standard deviation of proposal center (fraction of size) and log-size jitter
PROPOSAL_JITTER = 0.1

# noise on the class indicator features
CLASS_NOISE = 0.1

LOG_EVERY = 500

Array = npt.NDArray[np.float64]


@dataclass(frozen=True)
class Proposal:
    hbox: HBox
    iou: float
    gt_index: Optional[int] = None

    def __post_init__(self):
        if not (0.0 <= self.iou <= 1.0):
            raise InvalidInputError(f"proposal IoU must lie in [0, 1], got {self.iou}")

    @property
    def is_positive(self) -> bool:
        return self.gt_index is not None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 7.5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 4000
    decay_steps: Tuple[int, ...] = (3000, 3600)
    batch_size: int = 128
    seed: int = 7
    weights: LossWeights = field(default_factory=LossWeights)
    positive_iou: float = 0.5
    negative_ratio: int = 3
    hidden_dim: int = 64
    feature_noise: float = 0.05

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.hidden_dim < 1 or self.steps < 0:
            raise InvalidInputError("learning_rate, batch_size and hidden_dim must be positive, steps >= 0")
        if not (0.0 <= self.momentum < 1.0) or self.weight_decay < 0 or self.feature_noise < 0:
            raise InvalidInputError("momentum must lie in [0, 1); weight_decay and feature_noise must be >= 0")

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "TrainConfig":
        return cls(
            learning_rate=run.learning_rate,
            momentum=run.momentum,
            weight_decay=run.weight_decay,
            steps=run.steps,
            decay_steps=tuple(run.decay_steps),
            batch_size=run.batch_size,
            seed=run.seed,
            weights=LossWeights(run.lambda1, run.lambda2, run.lambda3, run.smooth_l1_beta),
            positive_iou=run.positive_iou,
            negative_ratio=run.negative_ratio,
            hidden_dim=run.hidden_dim,
            feature_noise=run.feature_noise,
        )


@dataclass(frozen=True)
class SceneContext:
    """What the features of one image may observe"""

    gts: Sequence[GtRecord]
    image_size: Tuple[int, int]
    class_names: Tuple[str, ...]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


def feature_dim(num_classes: int) -> int:
    return 4 + 8 + (num_classes + 1) + 1


class HeadModel:
    """Two-layer tanh head: features -> (K+1) logits, 4(K+1) deltas, 4 alpha, r"""

    def __init__(self, params: Dict[str, Array], num_classes: int):
        self.params = params
        self.num_classes = num_classes
        expected = self.output_dim
        if params["W2"].shape[1] != expected or params["W1"].shape[1] != params["W2"].shape[0]:
            raise InvalidInputError(f"parameter shapes do not match {num_classes} classes")
        if not all(np.all(np.isfinite(p)) for p in params.values()):
            raise InvalidInputError("model parameters must be finite")

    @classmethod
    def init(cls, feature_dim: int, hidden_dim: int, num_classes: int, rng: np.random.Generator) -> "HeadModel":
        output_dim = 5 * (num_classes + 1) + 5
        params = {
            "W1": rng.normal(0.0, 1.0 / math.sqrt(feature_dim), size=(feature_dim, hidden_dim)),
            "b1": np.zeros(hidden_dim),
            "W2": rng.normal(0.0, 0.1 / math.sqrt(hidden_dim), size=(hidden_dim, output_dim)),
            "b2": np.zeros(output_dim),
        }
        return cls(params, num_classes)

    @property
    def feature_dim(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def output_dim(self) -> int:
        return 5 * (self.num_classes + 1) + 5

    def copy(self) -> "HeadModel":
        return HeadModel({k: v.copy() for k, v in self.params.items()}, self.num_classes)

    def _split(self, z: Array) -> Tuple[Array, Array, Array, Array]:
        k1 = self.num_classes + 1
        return z[:, :k1], z[:, k1 : 5 * k1], z[:, 5 * k1 : 5 * k1 + 4], z[:, -1]

    def forward(self, features) -> Tuple[HeadOutputs, Dict[str, Array]]:
        x = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if x.shape[1] != self.feature_dim:
            raise InvalidInputError(f"expected {self.feature_dim} features, got {x.shape[1]}")
        hidden = np.tanh(x @ self.params["W1"] + self.params["b1"])
        z = hidden @ self.params["W2"] + self.params["b2"]
        logits, deltas, alpha_z, r_z = self._split(z)
        outputs = HeadOutputs(logits, deltas, expit(alpha_z), expit(r_z))
        return outputs, {"x": x, "hidden": hidden, "alpha": outputs.alpha, "r": outputs.r}

    def backward(self, cache: Dict[str, Array], grads: HeadOutputs) -> Dict[str, Array]:
        """Parameter gradients from gradients wrt the head outputs (alpha and r after the sigmoid)"""
        alpha, r = cache["alpha"], cache["r"]
        dz = np.concatenate(
            [
                grads.logits,
                grads.deltas,
                grads.alpha * alpha * (1.0 - alpha),
                (grads.r * r * (1.0 - r))[:, None],
            ],
            axis=1,
        )
        hidden = cache["hidden"]
        d_hidden = (dz @ self.params["W2"].T) * (1.0 - hidden * hidden)
        return {
            "W1": cache["x"].T @ d_hidden,
            "b1": d_hidden.sum(axis=0),
            "W2": hidden.T @ dz,
            "b2": dz.sum(axis=0),
        }


class SGDMomentum:
    """Heavy-ball SGD with L2 weight decay on the named parameters"""

    def __init__(self, momentum: float = 0.9, weight_decay: float = 0.0, decayed: Sequence[str] = ("W1", "W2")):
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decayed = set(decayed)
        self.velocity: Dict[str, Array] = {}

    def step(self, params: Dict[str, Array], grads: Dict[str, Array], lr: float) -> None:
        for name in sorted(params):
            grad = grads[name]
            if self.weight_decay and name in self.decayed:
                grad = grad + self.weight_decay * params[name]
            v = self.velocity.get(name)
            v = grad.copy() if v is None else self.momentum * v + grad
            self.velocity[name] = v
            params[name] -= lr * v


@dataclass
class TrainingSet:
    features: Array
    labels: BatchLabels
    targets: RegressionTargets
    proposals: List[Proposal]
    image_ids: List[str]

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class FitResult:
    model: HeadModel
    losses: List[float]
    learning_rates: List[float]


def box_iou_matrix(boxes_a: Array, boxes_b: Array) -> Array:
    """IoU of axis-aligned (x, y, w, h) boxes, shape (N, M)"""
    a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)
    a_lo, a_hi = a[:, :2] - a[:, 2:] / 2.0, a[:, :2] + a[:, 2:] / 2.0
    b_lo, b_hi = b[:, :2] - b[:, 2:] / 2.0, b[:, :2] + b[:, 2:] / 2.0
    lo = np.maximum(a_lo[:, None, :], b_lo[None, :, :])
    hi = np.minimum(a_hi[:, None, :], b_hi[None, :, :])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=2)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def generate_proposals(
    gts: Sequence[GtRecord],
    image_size: Tuple[int, int],
    rng: np.random.Generator,
    per_object: int = 4,
    n_background: int = 8,
    positive_iou: float = 0.5,
) -> List[Proposal]:
    """
    Jittered ground-truth boxes plus uniformly placed background boxes

    Args:
        gts: Objects of the image
        image_size: (width, height)
        rng: Random stream
        per_object: Jittered copies per object
        n_background: Random boxes per image
        positive_iou: Proposals whose best box IoU reaches this are assigned to that object

    Returns:
        Proposals in generation order
    """
    width, height = image_size
    gt_boxes = np.array([aabb(g.polygon).as_array() for g in gts]).reshape(-1, 4)
    boxes = []
    for box in gt_boxes:
        for _ in range(per_object):
            dx, dy, dw, dh = rng.normal(0.0, PROPOSAL_JITTER, size=4)
            boxes.append([box[0] + dx * box[2], box[1] + dy * box[3], box[2] * math.exp(dw), box[3] * math.exp(dh)])
    side = min(width, height)
    for _ in range(n_background):
        w, h = rng.uniform(side / 16.0, side / 4.0, size=2)
        boxes.append([rng.uniform(w / 2.0, width - w / 2.0), rng.uniform(h / 2.0, height - h / 2.0), w, h])
    boxes = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0:
        return []
    overlaps = box_iou_matrix(boxes, gt_boxes) if len(gt_boxes) else np.zeros((len(boxes), 0))
    proposals = []
    for i, box in enumerate(boxes):
        best = int(np.argmax(overlaps[i])) if overlaps.shape[1] else -1
        best_iou = float(np.clip(overlaps[i, best], 0.0, 1.0)) if best >= 0 else 0.0
        gt_index = best if best >= 0 and best_iou >= positive_iou else None
        proposals.append(Proposal(HBox(*map(float, box)), best_iou, gt_index))
    return proposals


def featurize(p: Proposal, context: SceneContext, noise: float, rng: np.random.Generator) -> Array:
    """
    Feature vector of one proposal

    Layout: proposal box normalized by the image (4), the assigned object's
    top/right/bottom/left vertices relative to the proposal with Gaussian
    noise (8, zero for background), a noisy class indicator with background
    at slot 0 (K+1) and a constant 1.
    """
    width, height = context.image_size
    box = p.hbox
    k1 = context.num_classes + 1
    out = np.zeros(feature_dim(context.num_classes))
    out[:4] = [box.x / width, box.y / height, box.w / width, box.h / height]
    indicator = np.zeros(k1)
    if p.is_positive:
        gt = context.gts[p.gt_index]
        v = extreme_vertices(gt.polygon[None])[0]
        rel = (v - [box.x, box.y]) / [box.w, box.h]
        out[4:12] = rel.ravel() + rng.normal(0.0, noise, size=8)
        indicator[context.class_names.index(gt.cls) + 1] = 1.0
    else:
        indicator[0] = 1.0
    out[12 : 12 + k1] = indicator + rng.normal(0.0, CLASS_NOISE, size=k1)
    out[-1] = 1.0
    return out


def regression_targets(proposals: Sequence[Proposal], gts: Sequence[GtRecord]) -> RegressionTargets:
    n = len(proposals)
    deltas, alpha, r = np.zeros((n, 4)), np.zeros((n, 4)), np.zeros(n)
    pos = [i for i, p in enumerate(proposals) if p.is_positive]
    if pos:
        quads = np.array([gts[proposals[i].gt_index].polygon for i in pos])
        hboxes, alphas, rs = encode_batch(quads)
        anchors = np.array([proposals[i].hbox.as_array() for i in pos])
        deltas[pos] = encode_deltas(hboxes, anchors)
        alpha[pos] = alphas
        r[pos] = rs
    return RegressionTargets(deltas, alpha, r)


def build_training_set(
    gts: GtDataset,
    class_names: Sequence[str],
    image_size: Tuple[int, int],
    config: TrainConfig,
    rng: np.random.Generator,
    per_object: int = 4,
    n_background: int = 8,
) -> TrainingSet:
    """Proposals, features, labels and targets for every image, in sorted image order"""
    class_names = tuple(class_names)
    features, classes, proposals_all, image_ids = [], [], [], []
    deltas, alpha, r = [], [], []
    for image_id in sorted(gts):
        records = gts[image_id]
        context = SceneContext(records, image_size, class_names)
        proposals = generate_proposals(records, image_size, rng, per_object, n_background, config.positive_iou)
        for p in proposals:
            features.append(featurize(p, context, config.feature_noise, rng))
            classes.append(class_names.index(records[p.gt_index].cls) + 1 if p.is_positive else 0)
        targets = regression_targets(proposals, records)
        deltas.append(targets.deltas)
        alpha.append(targets.alpha)
        r.append(targets.r)
        proposals_all.extend(proposals)
        image_ids.extend([image_id] * len(proposals))
    dim = feature_dim(len(class_names))
    return TrainingSet(
        features=np.array(features).reshape(-1, dim),
        labels=BatchLabels(np.array(classes, dtype=np.int64)),
        targets=RegressionTargets(
            np.concatenate(deltas) if deltas else np.zeros((0, 4)),
            np.concatenate(alpha) if alpha else np.zeros((0, 4)),
            np.concatenate(r) if r else np.zeros(0),
        ),
        proposals=proposals_all,
        image_ids=image_ids,
    )


def _subset(data: TrainingSet, idx: npt.NDArray[np.intp]) -> Tuple[Array, RegressionTargets, BatchLabels]:
    targets = RegressionTargets(data.targets.deltas[idx], data.targets.alpha[idx], data.targets.r[idx])
    labels = BatchLabels(data.labels.classes[idx], data.labels.positive[idx])
    return data.features[idx], targets, labels


def head_loss(model: HeadModel, features: Array, targets: RegressionTargets, labels: BatchLabels, weights: LossWeights) -> Tuple[LossResult, Dict[str, Array]]:
    """Loss of the head on a batch and its gradient wrt every parameter"""
    outputs, cache = model.forward(features)
    result = l_total(outputs, targets, labels, weights)
    return result, model.backward(cache, result.grads)


def evaluate_loss(model: HeadModel, data: TrainingSet, weights: LossWeights) -> LossResult:
    outputs, _ = model.forward(data.features)
    return l_total(outputs, data.targets, data.labels, weights)


def sample_batch(rng: np.random.Generator, positive: npt.NDArray[np.bool_], batch_size: int, negative_ratio: int) -> npt.NDArray[np.intp]:
    """Positives up to batch_size / (1 + negative_ratio), negatives fill the rest"""
    pos = np.flatnonzero(positive)
    neg = np.flatnonzero(~positive)
    n_pos = min(len(pos), max(1, batch_size // (1 + negative_ratio)))
    n_neg = min(len(neg), batch_size - n_pos)
    chosen = np.concatenate([rng.choice(pos, n_pos, replace=False), rng.choice(neg, n_neg, replace=False)])
    return np.sort(chosen)


def sgd_fit(model: HeadModel, data: TrainingSet, config: TrainConfig) -> FitResult:
    """
    Train a copy of the model with momentum SGD

    Args:
        model: Initial model (left untouched)
        data: Training proposals
        config: Optimizer and sampling settings

    Returns:
        Trained model, per-step batch loss and learning rate
    """
    if data.labels.n_reg < 1:
        raise InvalidInputError("training needs at least one positive proposal")
    model = model.copy()
    optimizer = SGDMomentum(config.momentum, config.weight_decay)
    rng = np.random.default_rng(child_seed(config.seed, 101))
    losses: List[float] = []
    rates: List[float] = []
    lr = config.learning_rate
    for step in range(config.steps):
        decays = sum(1 for s in config.decay_steps if step >= s)
        step_lr = config.learning_rate * 0.1 ** decays
        if step_lr != lr:
            logging.info(f"Step {step}: learning rate decayed to {step_lr:g}")
            lr = step_lr
        idx = sample_batch(rng, data.labels.positive, config.batch_size, config.negative_ratio)
        features, targets, labels = _subset(data, idx)
        result, grads = head_loss(model, features, targets, labels, config.weights)
        if not math.isfinite(result.total):
            raise TrainingDivergedError(step, result.total)
        optimizer.step(model.params, grads, lr)
        losses.append(result.total)
        rates.append(lr)
        if step % LOG_EVERY == 0:
            logging.info(f"Step {step}: loss={result.total:.6f} lr={lr:g}")
    return FitResult(model, losses, rates)


def infer(
    model: HeadModel,
    proposals: Sequence[Proposal],
    features: Array,
    policy: SelectionPolicy,
    nms_thresh: float,
    class_names: Sequence[str],
    score_threshold: float = 0.05,
) -> List[DetRecord]:
    """
    Detections of one image: scores from the softmax, class-specific box
    deltas decoded on the proposal, obliquity-guided selection, then
    per-class oriented NMS
    """
    if len(proposals) == 0:
        return []
    outputs, _ = model.forward(features)
    probs = softmax(outputs.logits)
    anchors = np.array([p.hbox.as_array() for p in proposals])
    scored = []
    for k in range(1, model.num_classes + 1):
        rows = np.flatnonzero(probs[:, k] > score_threshold)
        if rows.size == 0:
            continue
        boxes = decode_deltas(outputs.deltas[rows, 4 * k : 4 * k + 4], anchors[rows], clip=BBOX_XFORM_CLIP)
        for row, box in zip(rows, boxes):
            rep = GlidingRep(HBox(*map(float, box)), tuple(map(float, outputs.alpha[row])), float(outputs.r[row]))
            scored.append(ScoredPoly(select(rep, policy), float(probs[row, k]), k))
    kept = batched_oriented_nms(scored, nms_thresh)
    return [DetRecord(class_names[d.cls - 1], d.score, d.poly) for d in kept]


def save_checkpoint(model: HeadModel, path: Path) -> Path:
    """Versioned JSON checkpoint; floats are written with full precision"""
    payload = {
        "format_version": FORMAT_VERSION,
        "num_classes": model.num_classes,
        "params": {
            name: {"shape": list(value.shape), "values": value.ravel().tolist()}
            for name, value in sorted(model.params.items())
        },
    }
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    except OSError as exc:
        raise InvalidInputError(f"cannot write checkpoint {path}: {exc.strerror or exc}") from exc
    logging.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Path) -> HeadModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    if payload.get("format_version") != FORMAT_VERSION:
        raise InvalidInputError(f"unsupported checkpoint version {payload.get('format_version')!r}")
    params = {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["params"].items()
    }
    return HeadModel(params, int(payload["num_classes"]))


@dataclass
class Split:
    gts: GtDataset
    data: TrainingSet


@dataclass
class PipelineResult:
    train: Split
    test: Split
    fit: FitResult
    detections: DetDataset
    untrained_detections: DetDataset
    metrics: Dict[float, MapResult]
    untrained_metrics: Dict[float, MapResult]


class TrainingService:
    """Synthesize, train, detect and evaluate"""

    @staticmethod
    def scene_spec(run: RunConfig) -> SceneSpec:
        return SceneSpec(
            image_size=(run.image_size, run.image_size),
            count_range=(run.min_objects, run.max_objects),
            aspect_range=(run.min_aspect, run.max_aspect),
            size_range=(run.min_size, run.max_size),
            horizontal_fraction=run.horizontal_fraction,
            overlap_cap=run.overlap_cap,
            classes=tuple(run.classes),
            seed=run.seed,
        )

    @staticmethod
    def build_split(gts: GtDataset, run: RunConfig, split: int) -> Split:
        rng = np.random.default_rng(child_seed(run.seed, 200 + split))
        data = build_training_set(
            gts,
            run.classes,
            (run.image_size, run.image_size),
            TrainConfig.from_run_config(run),
            rng,
            per_object=run.proposals_per_object,
            n_background=run.background_proposals,
        )
        return Split(gts, data)

    @staticmethod
    def train(split: Split, run: RunConfig) -> FitResult:
        config = TrainConfig.from_run_config(run)
        rng = np.random.default_rng(child_seed(run.seed, 300))
        model = HeadModel.init(split.data.features.shape[1], config.hidden_dim, len(run.classes), rng)
        return sgd_fit(model, split.data, config)

    @staticmethod
    def detect(model: HeadModel, split: Split, run: RunConfig) -> DetDataset:
        policy = SelectionPolicy(run.t_r)
        detections: DetDataset = {}
        ids = np.array(split.data.image_ids)
        for image_id in sorted(split.gts):
            rows = np.flatnonzero(ids == image_id)
            proposals = [split.data.proposals[i] for i in rows]
            detections[image_id] = infer(
                model, proposals, split.data.features[rows], policy, run.nms_iou, run.classes, run.score_threshold
            )
        return detections

    @staticmethod
    def run_pipeline(run: RunConfig, iou_thresholds: Sequence[float] = (0.5, 0.7)) -> PipelineResult:
        spec = TrainingService.scene_spec(run)
        train = TrainingService.build_split(gen_dataset(spec, run.train_images, "train", split=0), run, 0)
        test = TrainingService.build_split(gen_dataset(spec, run.test_images, "test", split=1), run, 1)
        fit = TrainingService.train(train, run)
        untrained = HeadModel.init(
            train.data.features.shape[1], run.hidden_dim, len(run.classes), np.random.default_rng(child_seed(run.seed, 300))
        )
        detections = TrainingService.detect(fit.model, test, run)
        untrained_detections = TrainingService.detect(untrained, test, run)
        metrics = {t: mean_average_precision(detections, test.gts, t, run.ap_mode) for t in iou_thresholds}
        untrained_metrics = {t: mean_average_precision(untrained_detections, test.gts, t, run.ap_mode) for t in iou_thresholds}
        return PipelineResult(train, test, fit, detections, untrained_detections, metrics, untrained_metrics)
