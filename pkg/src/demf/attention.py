"""Bilinear sampling, (multi-scale) deformable attention and self-attention.

Conventions
-----------
* Feature maps are ``(C, H, W)`` tensors; a pyramid is a list of them, finest
  level first, all with the same ``C``.
* A normalized reference ``(u, v)`` in ``[0, 1]^2`` maps to grid coordinates
  ``(u * W - 0.5, v * H - 0.5)``, so 0 and 1 are the outer edges of the
  border pixels. Samples falling outside a map read zeros.
* Offsets are expressed in grid cells of the level they sample and divided by
  ``(W_l, H_l)`` before being added to the reference.
* Attention weights of one head are normalized jointly over all ``L * K``
  samples.
"""

import math

import numpy as np

from . import kernels
from .diffcore import (
    Linear,
    Module,
    ShapeMismatch,
    Tensor,
    as_tensor,
    matmul,
    reshape,
    softmax,
    transpose,
)
from .diffcore.tensor import _accumulate, _result


class LevelMismatch(ValueError):
    pass


class NonSquareK(ValueError):
    pass


def _sample(values, loc):
    """Differentiable multi-level gather.

    ``values``: list of ``(H_l, W_l, M, D)`` tensors; ``loc``: ``(N, M, L, K, 2)``
    normalized positions. Returns ``(N, M, L, K, D)``.
    """
    loc = as_tensor(loc, dtype=values[0].dtype)
    outs = [kernels.sample_forward(v.data, loc.data[:, :, l]) for l, v in enumerate(values)]
    out = np.stack(outs, axis=2)

    def backward(g):
        grad_loc = np.zeros(loc.shape, dtype=loc.dtype) if loc.requires_grad else None
        for l, v in enumerate(values):
            gv, gl = kernels.sample_backward(v.data, loc.data[:, :, l], np.ascontiguousarray(g[:, :, l]))
            _accumulate(v, gv)
            if grad_loc is not None:
                grad_loc[:, :, l] = gl
        if grad_loc is not None:
            _accumulate(loc, grad_loc)

    return _result(out, (*values, loc), backward)


def bilinear_sample(fmap, uv):
    """Sample a ``(C, H, W)`` map at normalized ``uv``; returns ``(C,)``.

    Differentiable with respect to both the map and ``uv``.
    """
    fmap = as_tensor(fmap)
    uv = as_tensor(uv, dtype=fmap.dtype)
    C, H, W = fmap.shape
    value = reshape(transpose(fmap, (1, 2, 0)), (H, W, 1, C))
    out = _sample([value], reshape(uv, (1, 1, 1, 1, 2)))
    return reshape(out, (C,))


class DeformAttnParams(Module):
    """Projections of one (multi-scale) deformable attention block.

    ``value_proj`` is the per-head ``W'_m`` stacked over heads, ``output_proj``
    the stacked ``W_m``. With ``learned_offsets=False`` there is no offset head
    and samples sit on a fixed ``sqrt(K) x sqrt(K)`` grid (``grid_spacing`` cells
    apart) around the reference.
    """

    def __init__(self, channels, heads, levels, samples, rng, learned_offsets=True, grid_spacing=2.0):
        if channels % heads:
            raise ShapeMismatch("DeformAttnParams", (channels,), (heads,))
        self.channels, self.heads, self.levels, self.samples = channels, heads, levels, samples
        self.grid_spacing = float(grid_spacing)
        self.value_proj = Linear(channels, channels, rng)
        self.output_proj = Linear(channels, channels, rng)
        if learned_offsets:
            self.offset_head = Linear(channels, heads * levels * samples * 2, rng)
            self.offset_head.weight.data[...] = 0.0
            self.offset_head.bias.data[...] = ring_offsets(heads, levels, samples).reshape(-1)
        else:
            side = math.isqrt(samples)
            if side * side != samples:
                raise NonSquareK(f"grid sampling needs a square number of samples, got K={samples}")
            self.offset_head = None
        self.weight_head = Linear(channels, heads * levels * samples, rng)
        self.weight_head.weight.data[...] = 0.0

    @property
    def learned_offsets(self):
        return self.offset_head is not None

    def offsets(self, query):
        """Raw offsets in grid cells, ``(N, M, L, K, 2)``."""
        n = query.shape[0]
        shape = (n, self.heads, self.levels, self.samples, 2)
        if self.offset_head is None:
            grid = grid_offsets(self.samples, self.grid_spacing)
            return Tensor(np.broadcast_to(grid[None, None, None], shape), dtype=query.dtype)
        return reshape(self.offset_head(query), shape)


def ring_offsets(heads, levels, samples):
    """Initial offsets: head m, sample k on angle 2*pi*(m*K + k)/(M*K), radius k + 1 cells."""
    out = np.zeros((heads, levels, samples, 2))
    for m in range(heads):
        for k in range(samples):
            theta = 2.0 * np.pi * (m * samples + k) / (heads * samples)
            out[m, :, k] = (k + 1) * np.cos(theta), (k + 1) * np.sin(theta)
    return out


def grid_offsets(samples, spacing=2.0):
    """Fixed square grid centred on the reference, row-major, ``(K, 2)`` in cells."""
    side = math.isqrt(samples)
    if side * side != samples:
        raise NonSquareK(f"grid sampling needs a square number of samples, got K={samples}")
    ticks = (np.arange(side) - (side - 1) / 2.0) * spacing
    gy, gx = np.meshgrid(ticks, ticks, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _sampling_state(query, ref, pyramid, params):
    levels = len(pyramid)
    if levels != params.levels:
        raise LevelMismatch(f"params expect {params.levels} levels, pyramid has {levels}")
    channels = query.shape[-1]
    if channels != params.channels:
        raise ShapeMismatch("deform_attn query", query.shape, (params.channels,))
    for fmap in pyramid:
        if fmap.ndim != 3 or fmap.shape[0] != channels:
            raise ShapeMismatch("deform_attn pyramid", fmap.shape, (channels, "H", "W"))
    n = query.shape[0]
    M, L, K = params.heads, params.levels, params.samples
    cells = np.array([[fmap.shape[2], fmap.shape[1]] for fmap in pyramid], dtype=query.dtype)
    loc = reshape(ref, (n, 1, 1, 1, 2)) + params.offsets(query) * Tensor(1.0 / cells.reshape(1, 1, L, 1, 2))
    logits = reshape(params.weight_head(query), (n, M, L * K))
    weights = reshape(softmax(logits, axis=-1), (n, M, L, K, 1))
    return loc, weights


def attention_locations(query, ref, pyramid, params):
    """Return the ``(N, M, L, K, 2)`` sample positions and ``(N, M, L, K)`` weights (no graph)."""
    query, ref = _as_batch(query, ref)
    loc, weights = _sampling_state(query, ref, pyramid, params)
    return loc.data, weights.data[..., 0]


def _as_batch(query, ref):
    query = as_tensor(query)
    ref = as_tensor(ref, dtype=query.dtype)
    if query.ndim == 1:
        query = reshape(query, (1, -1))
    if ref.ndim == 1:
        ref = reshape(ref, (1, 2))
    if ref.shape != (query.shape[0], 2):
        raise ShapeMismatch("deform_attn reference", ref.shape, (query.shape[0], 2))
    return query, ref


def ms_deform_attn(query, ref, pyramid, params):
    """Multi-scale deformable attention for a batch of queries.

    ``query``: ``(N, C)`` or ``(C,)``; ``ref``: ``(N, 2)`` or ``(2,)`` normalized
    references; ``pyramid``: list of ``(C, H_l, W_l)`` tensors. Returns a tensor
    shaped like ``query``.
    """
    single = as_tensor(query).ndim == 1
    query, ref = _as_batch(query, ref)
    pyramid = [as_tensor(x, dtype=query.dtype) for x in pyramid]
    loc, weights = _sampling_state(query, ref, pyramid, params)
    n, C = query.shape
    M = params.heads
    head_dim = C // M
    # Projecting before sampling commutes with bilinear interpolation and zero
    # padding; the value bias is re-added after aggregation (weights sum to 1).
    values = []
    for fmap in pyramid:
        _, H, W = fmap.shape
        projected = matmul(transpose(fmap, (1, 2, 0)), params.value_proj.weight)
        values.append(reshape(projected, (H, W, M, head_dim)))
    sampled = _sample(values, loc)
    heads = (sampled * weights).sum(axis=(2, 3))
    out = params.output_proj(reshape(heads, (n, C)) + params.value_proj.bias)
    return reshape(out, (C,)) if single else out


def deform_attn(query, ref, fmap, params):
    """Single-scale deformable attention; ``params`` must be built with one level."""
    return ms_deform_attn(query, ref, [fmap], params)


def grid_deform_attn(query, ref, pyramid, params):
    """Deformable attention with fixed grid sampling; ``params.offset_head`` must be absent."""
    if params.learned_offsets:
        raise ValueError("grid_deform_attn needs params built with learned_offsets=False")
    return ms_deform_attn(query, ref, pyramid, params)


class SelfAttnParams(Module):
    def __init__(self, channels, heads, rng):
        if channels % heads:
            raise ShapeMismatch("SelfAttnParams", (channels,), (heads,))
        self.heads = heads
        self.q_proj = Linear(channels, channels, rng)
        # a key bias only shifts every score of a query equally; softmax cancels it
        self.k_proj = Linear(channels, channels, rng, bias=False)
        self.v_proj = Linear(channels, channels, rng)
        self.out_proj = Linear(channels, channels, rng)


def self_attn(zs, pos, params):
    """Multi-head scaled dot-product attention among the ``N`` candidates.

    Queries and keys see ``zs + pos``; values see ``zs``. The residual is left to
    the caller.
    """
    zs = as_tensor(zs)
    pos = as_tensor(pos, dtype=zs.dtype)
    if zs.shape != pos.shape or zs.ndim != 2:
        raise ShapeMismatch("self_attn", zs.shape, pos.shape)
    n, C = zs.shape
    M = params.heads
    d = C // M
    x = zs + pos

    def split(t):
        return transpose(reshape(t, (n, M, d)), (1, 0, 2))

    q = split(params.q_proj(x))
    k = split(params.k_proj(x))
    v = split(params.v_proj(zs))
    scores = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / math.sqrt(d))
    attn = softmax(scores, axis=-1)
    mixed = reshape(transpose(matmul(attn, v), (1, 0, 2)), (n, C))
    return params.out_proj(mixed)
