"""Pure numpy bilinear gather/scatter kernels.

Layout contract shared with the compiled backend:

* ``value``: ``(H, W, M, D)`` feature map, one ``D``-wide slice per head.
* ``loc``: ``(N, M, K, 2)`` normalized ``(u, v)`` sample positions; head ``m``
  reads only ``value[:, :, m, :]``.

Normalized ``(u, v)`` maps to grid coordinates ``(u * W - 0.5, v * H - 0.5)``;
neighbours outside the map read as zero.
"""

import numpy as np

NAME = "python"


def _corners(value, loc):
    H, W, M, _ = value.shape
    x = np.clip(loc[..., 0] * W - 0.5, -2.0, W + 1.0)
    y = np.clip(loc[..., 1] * H - 0.5, -2.0, H + 1.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.intp)
    y0 = y0.astype(np.intp)
    heads = np.broadcast_to(np.arange(M)[None, :, None], x0.shape)
    # (dy, dx, weight, d weight / dx, d weight / dy)
    corners = (
        (0, 0, (1 - fx) * (1 - fy), -(1 - fy), -(1 - fx)),
        (0, 1, fx * (1 - fy), 1 - fy, -fx),
        (1, 0, (1 - fx) * fy, -fy, 1 - fx),
        (1, 1, fx * fy, fy, fx),
    )
    for dy, dx, w, wx, wy in corners:
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi < H) & (xi >= 0) & (xi < W)
        yield np.clip(yi, 0, H - 1), np.clip(xi, 0, W - 1), heads, valid, w, wx, wy


def sample_forward(value, loc):
    N, M, K, _ = loc.shape
    out = np.zeros((N, M, K, value.shape[3]), dtype=value.dtype)
    for yc, xc, heads, valid, w, _, _ in _corners(value, loc):
        out += (w * valid)[..., None] * value[yc, xc, heads]
    return out


def sample_backward(value, loc, grad_out):
    H, W, _, _ = value.shape
    grad_value = np.zeros_like(value)
    grad_loc = np.zeros(loc.shape, dtype=value.dtype)
    for yc, xc, heads, valid, w, wx, wy in _corners(value, loc):
        np.add.at(grad_value, (yc, xc, heads), (w * valid)[..., None] * grad_out)
        dot = np.einsum("nmkd,nmkd->nmk", value[yc, xc, heads], grad_out) * valid
        grad_loc[..., 0] += dot * wx * W
        grad_loc[..., 1] += dot * wy * H
    return grad_value, grad_loc
