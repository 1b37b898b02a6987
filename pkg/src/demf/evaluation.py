"""Axis-aligned 3D IoU, greedy confusion-matrix assignment, and average precision.

Background is encoded as ``-1`` in assignments and occupies the last row and
column of a :class:`ConfusionMatrix`.
"""

from dataclasses import dataclass

import numpy as np

from .boxes import Detection, GroundTruthBox, box_array

AP_INTERPOLATION = "all-point"


def _as_row(box):
    if isinstance(box, (Detection, GroundTruthBox)):
        return np.array([*box.center, *box.size], dtype=np.float64)
    row = np.asarray(box, dtype=np.float64).reshape(-1)
    if row.shape != (6,):
        raise ValueError(f"a box is (cx, cy, cz, sx, sy, sz), got shape {row.shape}")
    return row


def iou3d(a, b):
    """Intersection over union of two axis-aligned boxes given as center + size."""
    a, b = _as_row(a), _as_row(b)
    if np.any(a[3:] <= 0) or np.any(b[3:] <= 0):
        raise ValueError("box sizes must be positive")
    return float(iou_matrix(a, b)[0, 0])


def iou_matrix(a, b):
    """Pairwise IoU of ``(n, 6)`` and ``(m, 6)`` box arrays, shape ``(n, m)``.

    Volumes are taken from the same corners as the intersection, so a box
    against itself gives exactly 1.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 6)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 6)
    a_lo, a_hi = a[:, :3] - a[:, 3:] / 2, a[:, :3] + a[:, 3:] / 2
    b_lo, b_hi = b[:, :3] - b[:, 3:] / 2, b[:, :3] + b[:, 3:] / 2
    lo = np.maximum(a_lo[:, None], b_lo[None])
    hi = np.minimum(a_hi[:, None], b_hi[None])
    inter = np.prod(np.clip(hi - lo, 0.0, None), axis=2)
    union = np.prod(a_hi - a_lo, axis=1)[:, None] + np.prod(b_hi - b_lo, axis=1)[None, :] - inter
    return inter / union


def score_order(preds):
    """Indices of ``preds`` by descending score; ties keep input order."""
    scores = np.array([p.score for p in preds], dtype=np.float64)
    return np.argsort(-scores, kind="stable")


def confusion_assign(preds, gts, iou_thresh=0.25):
    """Greedy label assignment for the confusion matrix.

    Predictions are visited by descending score. Each one takes its
    highest-IoU ground truth (any class) when that IoU reaches ``iou_thresh``
    and the ground truth is still free; otherwise it goes to background.
    Returns an ``(n_preds,)`` array of ground-truth indices, ``-1`` for
    background.
    """
    if not 0.0 < iou_thresh < 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1), got {iou_thresh}")
    out = np.full(len(preds), -1, dtype=np.intp)
    if not preds or not gts:
        return out
    iou = iou_matrix(box_array(preds), box_array(gts))
    used = np.zeros(len(gts), dtype=bool)
    for i in score_order(preds):
        c = int(np.argmax(iou[i]))
        if iou[i, c] >= iou_thresh and not used[c]:
            out[i] = c
            used[c] = True
    return out


@dataclass
class ConfusionMatrix:
    """Rows: ground-truth class then background; columns: predicted class then background."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes):
        return cls(np.zeros((num_classes + 1, num_classes + 1), dtype=np.int64))

    @property
    def num_classes(self):
        return self.counts.shape[0] - 1

    def merge(self, other):
        return ConfusionMatrix(self.counts + other.counts)

    def add_scene(self, preds, gts, iou_thresh=0.25, score_thresh=None):
        if score_thresh is not None:
            preds = [p for p in preds if p.score >= score_thresh]
        bg = self.num_classes
        assigned = confusion_assign(preds, gts, iou_thresh)
        matched = np.zeros(len(gts), dtype=bool)
        for p, g in zip(preds, assigned):
            if g >= 0:
                self.counts[gts[g].class_id, p.class_id] += 1
                matched[g] = True
            else:
                self.counts[bg, p.class_id] += 1
        for g, hit in zip(gts, matched):
            if not hit:
                self.counts[g.class_id, bg] += 1
        return self

    def to_csv(self):
        n = self.num_classes
        names = [str(c) for c in range(n)] + ["background"]
        lines = ["gt\\pred," + ",".join(names)]
        for name, row in zip(names, self.counts):
            lines.append(name + "," + ",".join(str(int(v)) for v in row))
        return "\n".join(lines) + "\n"


def confusion_matrix(scenes, num_classes, iou_thresh=0.25, score_thresh=None):
    """Accumulate :func:`confusion_assign` outcomes over ``(preds, gts)`` pairs.

    Unmatched ground truths land in the background column of their class row.
    ``score_thresh`` drops predictions below it first (no filtering by default).
    """
    cm = ConfusionMatrix.empty(num_classes)
    for preds, gts in scenes:
        cm.add_scene(preds, gts, iou_thresh, score_thresh)
    return cm


def _all_point_ap(tp, npos):
    tp = np.asarray(tp, dtype=np.float64)
    fp = 1.0 - tp
    tp_cum, fp_cum = np.cumsum(tp), np.cumsum(fp)
    recall = tp_cum / npos
    precision = tp_cum / np.maximum(tp_cum + fp_cum, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def average_precision(scenes, class_id, iou_thresh=0.25):
    """AP of one class over ``(preds, gts)`` pairs with all-point interpolation.

    Detections of the class are swept by descending score across scenes and
    matched greedily to unmatched ground truths of the same class and scene.
    Returns ``nan`` when the class has no ground truth.
    """
    records = []
    npos = 0
    for s, (preds, gts) in enumerate(scenes):
        cls_gts = [g for g in gts if g.class_id == class_id]
        npos += len(cls_gts)
        for p in preds:
            if p.class_id == class_id:
                records.append((s, p, cls_gts))
    if npos == 0:
        return float("nan")
    if not records:
        return 0.0
    order = np.argsort(-np.array([p.score for _, p, _ in records]), kind="stable")
    used = {}
    tp = np.zeros(len(records))
    for rank, idx in enumerate(order):
        s, p, cls_gts = records[idx]
        if not cls_gts:
            continue
        iou = iou_matrix(_as_row(p), box_array(cls_gts))[0]
        c = int(np.argmax(iou))
        flags = used.setdefault(s, np.zeros(len(cls_gts), dtype=bool))
        if iou[c] >= iou_thresh and not flags[c]:
            flags[c] = True
            tp[rank] = 1.0
    return _all_point_ap(tp, npos)


def mean_ap(scenes, num_classes, iou_thresh=0.25):
    """``(mAP, per_class_ap)``; classes without ground truth are left out of the mean."""
    scenes = list(scenes)
    per_class = np.array([average_precision(scenes, c, iou_thresh) for c in range(num_classes)])
    valid = per_class[~np.isnan(per_class)]
    return (float(valid.mean()) if valid.size else float("nan")), per_class


def nms3d(dets, iou_thresh=0.25):
    """Class-aware greedy non-maximum suppression; returns the kept detections by score."""
    keep = []
    for i in score_order(dets):
        d = dets[i]
        if all(k.class_id != d.class_id or iou3d(k, d) < iou_thresh for k in keep):
            keep.append(d)
    return keep


# -- interchange files ---------------------------------------------------------


def format_record(scene_id, box):
    """One line ``scene_id class_id cx cy cz sx sy sz [score]`` with round-trip floats."""
    scene_id = str(scene_id)
    if not scene_id or any(ch.isspace() for ch in scene_id):
        raise ValueError(f"scene id must be a non-empty token, got {scene_id!r}")
    fields = [scene_id, str(box.class_id)] + [repr(float(v)) for v in (*box.center, *box.size)]
    if isinstance(box, Detection):
        fields.append(repr(box.score))
    return " ".join(fields)


def parse_record(line):
    """Inverse of :func:`format_record`: ``(scene_id, GroundTruthBox | Detection)``."""
    tok = line.split()
    if len(tok) not in (8, 9):
        raise ValueError(f"box record needs 8 or 9 fields, got {len(tok)}: {line!r}")
    scene_id, class_id = tok[0], int(tok[1])
    vals = [float(t) for t in tok[2:]]
    if len(tok) == 8:
        return scene_id, GroundTruthBox(vals[:3], vals[3:6], class_id)
    return scene_id, Detection(vals[:3], vals[3:6], class_id, vals[6])


def write_records(path, records):
    with open(path, "w") as fh:
        for scene_id, box in records:
            fh.write(format_record(scene_id, box) + "\n")


def read_records(path):
    with open(path) as fh:
        return [parse_record(line) for line in fh if line.strip() and not line.startswith("#")]


def group_by_scene(records):
    """``{scene_id: [boxes]}`` preserving file order."""
    out = {}
    for scene_id, box in records:
        out.setdefault(scene_id, []).append(box)
    return out
