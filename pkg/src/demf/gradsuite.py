"""Randomized gradient-check instances for the differentiable building blocks.

Each builder returns ``(f, inputs)`` for :func:`grad_check`, where ``f`` is the
dot product of the op's output with a fixed random vector. Instances are
redrawn until they sit clear of the kinks of the piecewise-linear pieces:
a bilinear sample within ``KINK_MARGIN`` grid cells of a cell boundary, or a
relu input within ``KINK_MARGIN`` of zero. Finite differences straddling a
kink estimate neither one-sided derivative.
"""

import time
from dataclasses import dataclass

import numpy as np

from .attention import (
    DeformAttnParams,
    SelfAttnParams,
    attention_locations,
    bilinear_sample,
    deform_attn,
    ms_deform_attn,
    self_attn,
)
from .diffcore import (
    Tensor,
    add,
    conv2d,
    dropout,
    grad_check,
    layer_norm,
    log_softmax,
    make_rng,
    matmul,
    mul,
    no_grad,
    relu,
    softmax,
)
from .fusion import DeMFConfig, DeMFLayer, demf_layer

KINK_MARGIN = 1e-3
MAX_SCALARS = 2000
MAX_ATTEMPTS = 100


class InstanceExhausted(RuntimeError):
    pass


@dataclass
class CheckResult:
    op: str
    seed: int
    checked: int
    max_rel_error: float
    tol: float
    seconds: float

    @property
    def passed(self):
        return self.max_rel_error <= self.tol


def _param(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _dot(out, r):
    return (out * Tensor(r, dtype=out.dtype)).sum()


def _clear_grid(loc, shapes):
    """True when no sample of ``loc (..., L, K, 2)`` is near a cell boundary."""
    for l, (H, W) in enumerate(shapes):
        gx = loc[..., l, :, 0] * W - 0.5
        gy = loc[..., l, :, 1] * H - 0.5
        for g in (gx, gy):
            frac = g - np.floor(g)
            if np.min(np.minimum(frac, 1.0 - frac)) < KINK_MARGIN:
                return False
    return True


def _clear_relu(pre):
    return np.min(np.abs(pre)) >= KINK_MARGIN


def _randomize_attention(params, rng):
    """Move the attention heads off their symmetric initialization."""
    if params.offset_head is not None:
        params.offset_head.weight.data[...] = rng.normal(scale=0.5, size=params.offset_head.weight.shape)
        params.offset_head.bias.data[...] += rng.normal(scale=0.5, size=params.offset_head.bias.shape)
    params.weight_head.weight.data[...] = rng.normal(scale=0.5, size=params.weight_head.weight.shape)
    params.weight_head.bias.data[...] = rng.normal(scale=0.1, size=params.weight_head.bias.shape)
    params.value_proj.bias.data[...] = rng.normal(scale=0.1, size=params.value_proj.bias.shape)
    params.output_proj.bias.data[...] = rng.normal(scale=0.1, size=params.output_proj.bias.shape)


# -- primitives (at most 32 elements each) -----------------------------------


def _matmul(rng):
    a, b = _param(rng, (3, 4)), _param(rng, (4, 5))
    r = rng.normal(size=(3, 5))
    return (lambda a, b: _dot(matmul(a, b), r)), [a, b]


def _add_mul(rng):
    a, b, c = _param(rng, (4, 5)), _param(rng, (1, 5)), _param(rng, (4, 1))
    r = rng.normal(size=(4, 5))
    return (lambda a, b, c: _dot(mul(add(a, b), c) + a * a, r)), [a, b, c]


def _relu(rng):
    x = rng.normal(size=(5, 6))
    if not _clear_relu(x):
        return None
    x = Tensor(x, requires_grad=True)
    r = rng.normal(size=(5, 6))
    return (lambda x: _dot(relu(x), r)), [x]


def _layer_norm(rng):
    x, g, b = _param(rng, (3, 8)), _param(rng, (8,)), _param(rng, (8,))
    r = rng.normal(size=(3, 8))
    return (lambda x, g, b: _dot(layer_norm(x, g, b), r)), [x, g, b]


def _softmax(rng):
    x = _param(rng, (4, 8), scale=2.0)
    r = rng.normal(size=(4, 8))
    axis = int(rng.integers(0, 2))
    return (lambda x: _dot(softmax(x, axis=axis), r) + _dot(log_softmax(x, axis=axis), r)), [x]


def _dropout(rng):
    x = _param(rng, (4, 8))
    r = rng.normal(size=(4, 8))
    seed = int(rng.integers(2**31))
    # a fresh generator per call keeps the mask fixed across perturbations
    return (lambda x: _dot(dropout(x, 0.3, True, make_rng(seed, "mask")), r)), [x]


def _conv2d(rng):
    x, w, b = _param(rng, (1, 4, 4)), _param(rng, (2, 1, 2, 2)), _param(rng, (2,))
    r = rng.normal(size=(2, 3, 3))
    return (lambda x, w, b: _dot(conv2d(x, w, b, stride=2, padding=1), r)), [x, w, b]


# -- attention ---------------------------------------------------------------


def _bilinear(rng):
    fmap = _param(rng, (3, 4, 5))
    uv = rng.uniform(-0.1, 1.1, size=2)
    if not _clear_grid(uv.reshape(1, 1, 2), [(4, 5)]):
        return None
    uv = Tensor(uv, requires_grad=True)
    r = rng.normal(size=3)
    return (lambda fmap, uv: _dot(bilinear_sample(fmap, uv), r)), [fmap, uv]


def _deform(rng, shapes, heads=2, samples=2, channels=8):
    params = DeformAttnParams(channels, heads, len(shapes), samples, rng)
    _randomize_attention(params, rng)
    q = _param(rng, (channels,))
    ref = rng.uniform(0.1, 0.9, size=2)
    pyramid = [_param(rng, (channels, H, W)) for H, W in shapes]
    with no_grad():
        loc, _ = attention_locations(q, ref, pyramid, params)
    if not _clear_grid(loc, shapes):
        return None
    ref = Tensor(ref, requires_grad=True)
    r = rng.normal(size=channels)
    inputs = [q, ref, *pyramid] + params.parameters()

    def f(q, ref, *rest):
        if len(shapes) == 1:
            return _dot(deform_attn(q, ref, rest[0], params), r)
        return _dot(ms_deform_attn(q, ref, list(rest[: len(shapes)]), params), r)

    return f, inputs


def _deform_single(rng):
    return _deform(rng, [(5, 5)])


def _deform_multi(rng):
    return _deform(rng, [(6, 6), (3, 3)])


def _self_attn(rng):
    n, channels = 4, 8
    params = SelfAttnParams(channels, 2, rng)
    for p in params.parameters():
        if p.ndim == 1:
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    zs, pos = _param(rng, (n, channels)), _param(rng, (n, channels))
    r = rng.normal(size=(n, channels))
    return (lambda zs, pos, *_: _dot(self_attn(zs, pos, params), r)), [zs, pos] + params.parameters()


def _layer(rng):
    n, channels = 3, 8
    cfg = DeMFConfig(channels=channels, heads=2, samples=2, levels=2, layers=1, dropout=0.0)
    layer = DeMFLayer(cfg.validate(), rng)
    _randomize_attention(layer.cross_attn, rng)
    for p in layer.parameters():
        if p.ndim == 1 and not p.data.any():
            p.data[...] = rng.normal(scale=0.1, size=p.shape)
    z, pos = _param(rng, (n, channels)), _param(rng, (n, channels))
    shapes = [(4, 4), (2, 2)]
    pyramid = [_param(rng, (channels, H, W)) for H, W in shapes]
    refs = rng.uniform(0.1, 0.9, size=(n, 2))
    with no_grad():
        z1 = layer.norm1(z + self_attn(z, pos, layer.self_attn))
        loc, _ = attention_locations(z1 + pos, refs, pyramid, layer.cross_attn)
        z2 = layer.norm2(z1 + ms_deform_attn(z1 + pos, refs, pyramid, layer.cross_attn))
        pre = layer.ffn_in(z2).data
    if not (_clear_grid(loc, shapes) and _clear_relu(pre)):
        return None
    r = rng.normal(size=(n, channels))

    def f(z, pos, *_):
        return _dot(demf_layer(z, refs, pyramid, pos, layer), r)

    return f, [z, pos, *pyramid] + layer.parameters()


PRIMITIVES = {
    "matmul": _matmul,
    "add_mul": _add_mul,
    "relu": _relu,
    "layer_norm": _layer_norm,
    "softmax": _softmax,
    "dropout": _dropout,
    "conv2d": _conv2d,
}

BLOCKS = {
    "bilinear_sample": _bilinear,
    "deform_attn": _deform_single,
    "ms_deform_attn": _deform_multi,
    "self_attn": _self_attn,
    "demf_layer": _layer,
}

BUILDERS = {**PRIMITIVES, **BLOCKS}


def build_instance(op, seed):
    """Deterministic ``(f, inputs)`` for ``op``; redraws until clear of kinks."""
    builder = BUILDERS[op]
    for attempt in range(MAX_ATTEMPTS):
        built = builder(make_rng(seed, "gradcheck", op, str(attempt)))
        if built is not None:
            f, inputs = built
            scalars = sum(t.data.size for t in inputs)
            if scalars > MAX_SCALARS:
                raise ValueError(f"{op} instance has {scalars} scalars, limit {MAX_SCALARS}")
            return f, inputs
    raise InstanceExhausted(f"no kink-free {op} instance for seed {seed}")


def run_suite(ops, seeds, h=1e-5, tol=1e-6):
    """Grad-check every op on every seed; returns a list of :class:`CheckResult`."""
    results = []
    for op in ops:
        for seed in seeds:
            start = time.perf_counter()
            f, inputs = build_instance(op, seed)
            report = grad_check(f, inputs, h=h, tol=tol)
            results.append(
                CheckResult(op, seed, report.checked, report.max_rel_error, tol, time.perf_counter() - start)
            )
    return results
