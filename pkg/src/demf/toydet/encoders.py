"""Small stand-ins for the point and image backbones."""

import numpy as np

from ..diffcore import Linear, Module, Parameter, Tensor, conv2d, relu
from ..fusion import PointFeatureSet

STATS_DIM = 10  # count, centroid offset (3), standard deviations (3), correlations (3)


def farthest_point_sample(points, n, start=0):
    """Indices of ``n`` farthest-point samples, seeded at index ``start``."""
    points = np.asarray(points, dtype=np.float64)
    if n >= len(points):
        return np.arange(len(points))
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = start
    dist = np.linalg.norm(points - points[start], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def local_stats(points, centers, radius, expected_count=256.0):
    """Per-center statistics of the points within ``radius``, scaled to O(1).

    The count enters as ``log1p(count) / log1p(expected_count)``; offsets and
    standard deviations are in units of ``radius``; off-diagonal covariance
    enters as correlation coefficients. All are relative to the center, so
    translating points and centers together leaves them unchanged. An empty
    neighborhood gives the zero vector.
    """
    points = np.asarray(points, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(centers), STATS_DIM))
    for i, c in enumerate(centers):
        rel = points - c
        rel = rel[np.einsum("ij,ij->i", rel, rel) <= radius * radius] / radius
        if len(rel) == 0:
            continue
        mean = rel.mean(axis=0)
        dev = rel - mean
        cov = dev.T @ dev / len(rel)
        std = np.sqrt(np.diag(cov))
        denom = np.where(std > 0, std, 1.0)
        corr = cov / np.outer(denom, denom)
        out[i, 0] = np.log1p(len(rel)) / np.log1p(expected_count)
        out[i, 1:4] = mean
        out[i, 4:7] = std
        out[i, 7:10] = corr[0, 1], corr[0, 2], corr[1, 2]
    return out


class PointEncoder(Module):
    """Candidates at farthest-point samples; features from an MLP over local statistics."""

    def __init__(self, channels, rng, num_candidates=32, radius=0.4):
        self.num_candidates = num_candidates
        self.radius = radius
        self.fc1 = Linear(STATS_DIM, channels, rng)
        self.fc2 = Linear(channels, channels, rng)

    def candidates(self, points):
        """``(coords, stats)``; depends only on the points, so callers may cache it."""
        idx = farthest_point_sample(points, self.num_candidates)
        coords = np.asarray(points, dtype=np.float64)[idx]
        return coords, local_stats(points, coords, self.radius)

    def encode(self, coords, stats):
        feats = self.fc2(relu(self.fc1(Tensor(stats))))
        return PointFeatureSet(feats, coords)

    def __call__(self, points):
        return self.encode(*self.candidates(points))


class ImageEncoder(Module):
    """Chain of 3x3 stride-2 convolutions; level ``l`` (from 1) is ``ceil(H / 2**l)`` high.

    Borders are padded by edge replication, so a constant image gives constant
    levels. ``frozen`` asks the trainer to leave these parameters out of the
    optimizer.
    """

    def __init__(self, channels, levels, rng, in_channels=3, frozen=False):
        self.frozen = frozen
        self.weights = []
        self.biases = []
        c_in = in_channels
        for _ in range(levels):
            bound = 1.0 / np.sqrt(c_in * 9)
            self.weights.append(Parameter(rng.uniform(-bound, bound, size=(channels, c_in, 3, 3))))
            self.biases.append(Parameter(np.zeros(channels)))
            c_in = channels

    def __call__(self, image):
        x = Tensor(image) if not isinstance(image, Tensor) else image
        pyramid = []
        for w, b in zip(self.weights, self.biases):
            x = relu(conv2d(_edge_pad(x), w, b, stride=2))
            pyramid.append(x)
        return pyramid


def _edge_pad(x):
    _, H, W = x.shape
    rows = np.clip(np.arange(-1, H + 1), 0, H - 1)
    cols = np.clip(np.arange(-1, W + 1), 0, W - 1)
    return x[:, rows[:, None], cols[None, :]]
