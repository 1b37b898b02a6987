"""Training and evaluation of the toy detector."""

import math
from dataclasses import dataclass, field

import numpy as np

from ..boxes import Detection
from ..diffcore import AdamW, Module, make_rng, no_grad
from ..evaluation import confusion_matrix, mean_ap, nms3d
from ..fusion import (
    DeMFConfig,
    DeMFStack,
    assign_targets,
    demf_forward,
    detection_loss,
    final_predictions,
    total_loss,
)
from .encoders import ImageEncoder, PointEncoder
from .scene import SceneSpec, synth_scene

METRICS_VERSION = 1
EVAL_SEED_BASE = 1_000_000


class ConfigInvalid(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 1500
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    # name prefix -> learning-rate factor, e.g. {"stack.": 1.0, "points.": 1.0}
    lr_multipliers: dict = field(default_factory=dict)
    train_scenes: int = 64
    eval_scenes: int = 32
    eval_every: int = 0  # 0: evaluate only after the last step
    num_candidates: int = 32
    radius: float = 0.4
    freeze_image: bool = True
    assign_radius: float = 0.5
    loss_weights: tuple = (1.0, 1.0, 1.0)
    iou_thresholds: tuple = (0.25, 0.5)
    ensemble: bool = False

    def validate(self):
        if self.steps < 0 or self.train_scenes < 1 or self.eval_scenes < 0 or self.eval_every < 0:
            raise ConfigInvalid("steps, eval_scenes, eval_every >= 0 and train_scenes >= 1 required")
        if not (self.lr >= 0 and self.weight_decay >= 0 and self.eps > 0):
            raise ConfigInvalid("lr and weight_decay must be >= 0, eps > 0")
        if not all(0.0 <= b < 1.0 for b in self.betas) or len(self.betas) != 2:
            raise ConfigInvalid(f"betas must be two values in [0, 1), got {self.betas}")
        if self.num_candidates < 1 or self.radius <= 0 or self.assign_radius <= 0:
            raise ConfigInvalid("num_candidates >= 1 and positive radii required")
        if not all(0.0 < t < 1.0 for t in self.iou_thresholds):
            raise ConfigInvalid(f"iou thresholds must be in (0, 1), got {self.iou_thresholds}")
        return self


@dataclass
class PreparedScene:
    """A scene with its candidate coordinates and point statistics cached."""

    scene: object
    coords: np.ndarray
    stats: np.ndarray


class ToyDetector(Module):
    def __init__(self, model_cfg, train_cfg, rng):
        C = model_cfg.channels
        self.points = PointEncoder(C, rng, train_cfg.num_candidates, train_cfg.radius)
        if model_cfg.use_image:
            self.image = ImageEncoder(C, model_cfg.levels, rng, frozen=train_cfg.freeze_image)
        else:
            self.image = None
        self.stack = DeMFStack(model_cfg, rng)

    def prepare(self, scene):
        return PreparedScene(scene, *self.points.candidates(scene.points))

    def forward(self, prepared, training=False, rng=None):
        pf = self.points.encode(prepared.coords, prepared.stats)
        pyramid = self.image(prepared.scene.image) if self.image is not None else []
        return demf_forward(pf, prepared.scene.cam, pyramid, self.stack, training=training, rng=rng)

    def trainable(self):
        for name, p in self.named_parameters():
            if self.image is not None and self.image.frozen and name.startswith("image."):
                continue
            yield name, p


def scene_loss(outputs, prepared, num_classes, cfg):
    per_layer = [
        detection_loss(o.boxes, prepared.scene.gts, prepared.coords, num_classes, cfg.assign_radius, cfg.loss_weights)
        for o in outputs
    ]
    return total_loss(per_layer), per_layer


def build(model_cfg, train_cfg):
    model_cfg.validate()
    train_cfg.validate()
    return ToyDetector(model_cfg, train_cfg, make_rng(train_cfg.seed, "init"))


def prepare_scenes(model, spec, seeds):
    return [model.prepare(synth_scene(s, spec)) for s in seeds]


def train_seeds(cfg):
    return range(cfg.train_scenes)


def eval_seeds(cfg):
    return range(EVAL_SEED_BASE, EVAL_SEED_BASE + cfg.eval_scenes)


@dataclass
class TrainResult:
    model: ToyDetector
    rows: list  # metrics rows, see metrics_header
    final: dict
    initial_loss: float
    last_loss: float


def metrics_header(layers):
    return ["step"] + [f"loss_l{i}" for i in range(layers + 1)] + ["total_loss", "ambiguous_acc", "map_25"]


def train(model_cfg=None, train_cfg=None, spec=None, scenes=None, eval_set=None, model=None):
    """Optimize a toy detector; returns a :class:`TrainResult`.

    ``scenes`` and ``eval_set`` may be passed pre-built (lists of
    :class:`PreparedScene`) to share them between runs. Metrics rows hold
    per-layer losses averaged since the previous row, and the held-out
    ambiguous-object accuracy and mAP@0.25.
    """
    model_cfg = model_cfg or DeMFConfig()
    train_cfg = train_cfg or TrainConfig()
    spec = (spec or SceneSpec()).validate()
    if model_cfg.num_classes != spec.num_classes:
        raise ConfigInvalid(f"model has {model_cfg.num_classes} classes, scenes have {spec.num_classes}")
    model = model or build(model_cfg, train_cfg)
    scenes = scenes if scenes is not None else prepare_scenes(model, spec, train_seeds(train_cfg))
    if eval_set is None:
        eval_set = prepare_scenes(model, spec, eval_seeds(train_cfg))
    opt = AdamW(
        list(model.trainable()),
        lr=train_cfg.lr,
        betas=train_cfg.betas,
        eps=train_cfg.eps,
        weight_decay=train_cfg.weight_decay,
        lr_multipliers=train_cfg.lr_multipliers,
    )
    order_rng = make_rng(train_cfg.seed, "order")
    drop_rng = make_rng(train_cfg.seed, "dropout")
    layers = model_cfg.layers
    rows = []
    window = []
    initial = last = float("nan")
    order = []
    for step in range(train_cfg.steps):
        if not order:
            order = list(order_rng.permutation(len(scenes)))
        prepared = scenes[order.pop()]
        outputs = model.forward(prepared, training=True, rng=drop_rng)
        loss, per_layer = scene_loss(outputs, prepared, model_cfg.num_classes, train_cfg)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(step, value)
        if step == 0:
            initial = value
        last = value
        window.append([float(l.data) for l in per_layer] + [value])
        opt.zero_grad()
        loss.backward()
        opt.step()
        done = step + 1
        if train_cfg.eval_every and done % train_cfg.eval_every == 0 and done < train_cfg.steps:
            rows.append(_row(done, window, evaluate(model, eval_set, model_cfg.num_classes, train_cfg)))
            window = []
    final = evaluate(model, eval_set, model_cfg.num_classes, train_cfg)
    rows.append(_row(train_cfg.steps, window, final, layers))
    return TrainResult(model, rows, final, initial, last)


def _row(step, window, ev, layers=None):
    if window:
        losses = list(np.mean(np.array(window), axis=0))
    else:
        losses = [float("nan")] * ((layers if layers is not None else 0) + 2)
    return [step] + losses + [ev["ambiguous_acc"], ev["map"][0.25] if 0.25 in ev["map"] else float("nan")]


def detections(probs, centers, sizes, num_classes, nms_iou=0.25):
    """Candidate-level predictions to scored detections, after class-aware NMS."""
    fg = probs[:, :num_classes]
    cls = fg.argmax(axis=1)
    dets = [Detection(centers[i], sizes[i], int(cls[i]), float(fg[i, cls[i]])) for i in range(len(cls))]
    return nms3d(dets, nms_iou)


def evaluate(model, eval_set, num_classes, cfg):
    """Held-out metrics: ambiguous-object and overall accuracy, mAP per threshold, confusion."""
    correct = {True: 0, False: 0}
    total = {True: 0, False: 0}
    results = []
    with no_grad():
        for prepared in eval_set:
            outputs = model.forward(prepared, training=False)
            probs, centers, sizes = final_predictions(outputs, ensemble=cfg.ensemble)
            gts = prepared.scene.gts
            target = assign_targets(prepared.coords, gts, cfg.assign_radius)
            for j, gt in enumerate(gts):
                amb = bool(prepared.scene.ambiguous[j])
                total[amb] += 1
                mine = np.flatnonzero(target == j)
                if mine.size == 0:
                    continue
                dist = np.linalg.norm(prepared.coords[mine] - np.array(gt.center), axis=1)
                best = mine[int(np.argmin(dist))]
                correct[amb] += int(np.argmax(probs[best, :num_classes]) == gt.class_id)
            results.append((detections(probs, centers, sizes, num_classes), gts))
    maps = {t: mean_ap(results, num_classes, t)[0] for t in cfg.iou_thresholds}
    n_all = total[True] + total[False]
    return {
        "ambiguous_acc": correct[True] / total[True] if total[True] else float("nan"),
        "accuracy": (correct[True] + correct[False]) / n_all if n_all else float("nan"),
        "ambiguous_objects": total[True],
        "map": maps,
        "confusion": confusion_matrix(results, num_classes, iou_thresh=0.25),
    }


def format_metrics(rows, layers):
    """Versioned CSV text of metrics rows (floats in round-trip form)."""
    lines = [f"# demf-metrics v{METRICS_VERSION}", ",".join(metrics_header(layers))]
    for row in rows:
        lines.append(",".join([str(int(row[0]))] + [repr(float(v)) for v in row[1:]]))
    return "\n".join(lines) + "\n"
