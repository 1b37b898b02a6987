"""Stacked fusion layers: self-attention, reference-anchored deformable
cross-attention into the image pyramid, and a feed-forward block, each with a
residual add followed by layer norm. Every layer (and the raw input) has its
own prediction head; the average of their losses is the training objective.
"""

from dataclasses import dataclass

import numpy as np

from .attention import DeformAttnParams, SelfAttnParams, ms_deform_attn, self_attn
from .diffcore import (
    LayerNorm,
    Linear,
    Module,
    ShapeMismatch,
    Tensor,
    as_tensor,
    dropout,
    log_softmax,
    relu,
    tabs,
)
from .geometry import ref_points

BOX_VECTOR_DIM = 6  # center (3) + log size (3)


class EmptyList(ValueError):
    pass


@dataclass
class DeMFConfig:
    channels: int = 32
    heads: int = 4
    samples: int = 2
    levels: int = 2
    layers: int = 2
    dropout: float = 0.4
    offset_mode: str = "learned"
    grid_spacing: float = 2.0
    num_classes: int = 4
    use_image: bool = True
    ffn_mult: int = 4

    def validate(self):
        if self.channels % self.heads:
            raise ValueError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.offset_mode not in ("learned", "grid"):
            raise ValueError(f"offset_mode must be 'learned' or 'grid', got {self.offset_mode!r}")
        if self.layers < 0 or self.levels < 1 or self.samples < 1 or self.num_classes < 1:
            raise ValueError("layers >= 0, levels >= 1, samples >= 1 and num_classes >= 1 required")
        return self


@dataclass
class PointFeatureSet:
    feats: Tensor  # (N, C)
    coords: np.ndarray  # (N, 3)

    def __post_init__(self):
        self.feats = as_tensor(self.feats)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 3)
        if self.feats.ndim != 2 or self.feats.shape[0] != self.coords.shape[0] or self.feats.shape[0] == 0:
            raise ShapeMismatch("PointFeatureSet", self.feats.shape, self.coords.shape)


@dataclass
class BoxPredictions:
    """Per-candidate box predictions; the last logit column is background."""

    logits: Tensor  # (N, num_classes + 1)
    center: Tensor  # (N, 3)
    log_size: Tensor  # (N, 3)

    @property
    def size(self):
        return np.exp(self.log_size.data)

    def vector(self):
        """Detached ``(N, 6)`` center + log-size parameterization."""
        return np.concatenate([self.center.data, self.log_size.data], axis=1)

    def class_probs(self):
        z = self.logits.data - self.logits.data.max(axis=1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=1, keepdims=True)


@dataclass
class LayerOutput:
    feats: Tensor
    boxes: BoxPredictions


class PredictionHead(Module):
    """Two-layer MLP: class logits (+ background), center offset from the anchor, log size."""

    def __init__(self, channels, num_classes, rng):
        self.num_classes = num_classes
        self.hidden = Linear(channels, channels, rng)
        self.out = Linear(channels, num_classes + 1 + BOX_VECTOR_DIM, rng)

    def __call__(self, feats, anchors):
        raw = self.out(relu(self.hidden(feats)))
        k = self.num_classes + 1
        return BoxPredictions(
            logits=raw[:, :k],
            center=raw[:, k : k + 3] + Tensor(anchors, dtype=raw.dtype),
            log_size=raw[:, k + 3 : k + 6],
        )


class DeMFLayer(Module):
    def __init__(self, cfg, rng):
        C = cfg.channels
        self.pos_embed = Linear(BOX_VECTOR_DIM, C, rng)
        self.self_attn = SelfAttnParams(C, cfg.heads, rng)
        self.norm1 = LayerNorm(C)
        if cfg.use_image:
            self.cross_attn = DeformAttnParams(
                C, cfg.heads, cfg.levels, cfg.samples, rng,
                learned_offsets=cfg.offset_mode == "learned", grid_spacing=cfg.grid_spacing,
            )
        else:
            self.cross_attn = None
        self.norm2 = LayerNorm(C)
        self.ffn_in = Linear(C, cfg.ffn_mult * C, rng)
        self.ffn_out = Linear(cfg.ffn_mult * C, C, rng)
        self.norm3 = LayerNorm(C)
        self.dropout = cfg.dropout


class DeMFStack(Module):
    def __init__(self, cfg, rng):
        self.cfg = cfg.validate()
        self.heads = [PredictionHead(cfg.channels, cfg.num_classes, rng) for _ in range(cfg.layers + 1)]
        self.layers = [DeMFLayer(cfg, rng) for _ in range(cfg.layers)]


def demf_layer(z, refs, pyramid, pos, layer, valid=None, training=False, rng=None):
    """One fusion layer over ``N`` candidates.

    ``refs`` are the normalized image references of the candidates; rows with
    ``valid == False`` (degenerate projections) receive no cross-attention.
    """
    z = as_tensor(z)
    pos = as_tensor(pos, dtype=z.dtype)
    if pos.shape != z.shape:
        raise ShapeMismatch("demf_layer", z.shape, pos.shape)
    rate = layer.dropout
    z1 = layer.norm1(z + dropout(self_attn(z, pos, layer.self_attn), rate, training, rng))
    if layer.cross_attn is not None:
        refs = np.asarray(refs, dtype=z.dtype).reshape(-1, 2)
        if refs.shape[0] != z.shape[0]:
            raise ShapeMismatch("demf_layer refs", refs.shape, z.shape)
        fused = ms_deform_attn(z1 + pos, refs, pyramid, layer.cross_attn)
        if valid is not None and not np.all(valid):
            fused = fused * Tensor(np.asarray(valid, dtype=z.dtype)[:, None])
        z2 = layer.norm2(z1 + dropout(fused, rate, training, rng))
    else:
        z2 = layer.norm2(z1)
    hidden = relu(layer.ffn_in(z2))
    return layer.norm3(z2 + layer.ffn_out(hidden))


def demf_forward(pf, cam, pyramid, stack, training=False, rng=None, box_inputs=None):
    """Run the input head and every layer; returns ``layers + 1`` :class:`LayerOutput`.

    The previous layer's box vector is detached before it feeds the next
    layer's positional embedding. ``box_inputs`` replaces those detached
    vectors with given ``(N, 6)`` arrays (used to hold them fixed under
    finite differences).
    """
    refs, valid = ref_points(cam, pf.coords)
    feats = pf.feats
    outputs = [LayerOutput(feats, stack.heads[0](feats, pf.coords))]
    for i, layer in enumerate(stack.layers):
        vec = outputs[-1].boxes.vector() if box_inputs is None else box_inputs[i]
        box_vec = Tensor(vec, dtype=feats.dtype)
        pos = layer.pos_embed(box_vec)
        feats = demf_layer(feats, refs, pyramid, pos, layer, valid=valid, training=training, rng=rng)
        outputs.append(LayerOutput(feats, stack.heads[i + 1](feats, pf.coords)))
    return outputs


def total_loss(per_layer_losses):
    """Average of the per-layer losses (input head included)."""
    if len(per_layer_losses) == 0:
        raise EmptyList("total_loss needs at least one layer loss")
    acc = per_layer_losses[0]
    for loss in per_layer_losses[1:]:
        acc = acc + loss
    if isinstance(acc, Tensor):
        return acc * (1.0 / len(per_layer_losses))
    return acc / len(per_layer_losses)


def assign_targets(anchors, gts, radius=0.5):
    """Index of the nearest ground-truth center within ``radius`` per anchor, else -1."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 3)
    if not gts:
        return np.full(len(anchors), -1, dtype=np.intp)
    centers = np.array([g.center for g in gts])
    dist = np.linalg.norm(anchors[:, None, :] - centers[None, :, :], axis=2)
    nearest = dist.argmin(axis=1)
    hit = dist[np.arange(len(anchors)), nearest] <= radius
    return np.where(hit, nearest, -1)


def detection_loss(preds, gts, anchors, num_classes, radius=0.5, weights=(1.0, 1.0, 1.0)):
    """Cross-entropy over classes + background, plus L1 on center and log size
    of assigned candidates. Terms are means over candidates; returns the weighted sum.
    """
    w_cls, w_center, w_size = weights
    target = assign_targets(anchors, gts, radius)
    n = len(target)
    labels = np.array([gts[t].class_id if t >= 0 else num_classes for t in target], dtype=np.intp)
    logp = log_softmax(preds.logits, axis=1)
    loss = -(logp[np.arange(n), labels].sum() * (w_cls / n))
    assigned = np.flatnonzero(target >= 0)
    if assigned.size:
        gt_center = np.array([gts[t].center for t in target[assigned]])
        gt_log_size = np.log(np.array([gts[t].size for t in target[assigned]]))
        scale = 1.0 / assigned.size
        center_l1 = tabs(preds.center[assigned] - Tensor(gt_center, dtype=logp.dtype)).sum()
        size_l1 = tabs(preds.log_size[assigned] - Tensor(gt_log_size, dtype=logp.dtype)).sum()
        loss = loss + center_l1 * (w_center * scale) + size_l1 * (w_size * scale)
    return loss


def final_predictions(outputs, ensemble=False):
    """``(class_probs, centers, sizes)`` from the last head or averaged over all heads."""
    chosen = outputs if ensemble else outputs[-1:]
    probs = np.mean([o.boxes.class_probs() for o in chosen], axis=0)
    centers = np.mean([o.boxes.center.data for o in chosen], axis=0)
    log_sizes = np.mean([o.boxes.log_size.data for o in chosen], axis=0)
    return probs, centers, np.exp(log_sizes)

