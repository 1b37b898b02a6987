"""Camera projection of 3D candidate coordinates to normalized image references."""

from dataclasses import dataclass

import numpy as np

EPS_PROJ = 1e-6


class DegenerateProjection(ValueError):
    """The point lies on (or numerically at) the camera plane."""


@dataclass(frozen=True)
class CameraModel:
    """Nine mapping parameters plus the image extent in pixels.

    ``u = (psi1 x + psi2 y + psi3 z) / d`` and ``v = (psi4 x + psi5 y + psi6 z) / d``
    with ``d = psi7 x + psi8 y + psi9 z``.
    """

    psi: tuple
    width_px: float
    height_px: float

    def __post_init__(self):
        psi = tuple(float(p) for p in self.psi)
        if len(psi) != 9:
            raise ValueError(f"psi needs 9 values, got {len(psi)}")
        if not any(psi):
            raise ValueError("psi must not be all zero")
        if not (self.width_px > 0 and self.height_px > 0):
            raise ValueError(f"image extent must be positive, got {self.width_px}x{self.height_px}")
        object.__setattr__(self, "psi", psi)
        object.__setattr__(self, "width_px", float(self.width_px))
        object.__setattr__(self, "height_px", float(self.height_px))

    @classmethod
    def pinhole(cls, focal, cx, cy, width_px, height_px):
        return cls((focal, 0.0, cx, 0.0, focal, cy, 0.0, 0.0, 1.0), width_px, height_px)

    @property
    def matrix(self):
        return np.asarray(self.psi).reshape(3, 3)


def project(cam, p):
    x, y, z = (float(c) for c in p)
    s = cam.psi
    d = s[6] * x + s[7] * y + s[8] * z
    if abs(d) <= EPS_PROJ:
        raise DegenerateProjection(f"point {tuple(p)} projects through denominator {d!r}")
    return ((s[0] * x + s[1] * y + s[2] * z) / d, (s[3] * x + s[4] * y + s[5] * z) / d)


def normalize_pixel(cam, px):
    u, v = px
    return (min(max(u / cam.width_px, 0.0), 1.0), min(max(v / cam.height_px, 0.0), 1.0))


def denormalize(cam, unit):
    a, b = unit
    return (a * cam.width_px, b * cam.height_px)


def ref_point(cam, s):
    return normalize_pixel(cam, project(cam, s))


def ref_points(cam, coords):
    """Vectorized :func:`ref_point` over an ``(N, 3)`` array.

    Returns ``(refs, valid)``; degenerate rows get reference ``(0, 0)`` and
    ``valid == False`` instead of raising.
    """
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    s = cam.psi
    x, y, z = coords[:, 0], coords[:, 1], coords[:, 2]
    d = s[6] * x + s[7] * y + s[8] * z
    valid = np.abs(d) > EPS_PROJ
    safe = np.where(valid, d, 1.0)
    u = (s[0] * x + s[1] * y + s[2] * z) / safe / cam.width_px
    v = (s[3] * x + s[4] * y + s[5] * z) / safe / cam.height_px
    refs = np.clip(np.stack([u, v], axis=1), 0.0, 1.0)
    refs[~valid] = 0.0
    return refs, valid


def parse_camera(text):
    values = [float(tok) for tok in text.split()]
    if len(values) != 11:
        raise ValueError(f"camera record needs 11 numbers (9 psi, W0, H0), got {len(values)}")
    return CameraModel(tuple(values[:9]), values[9], values[10])


def load_camera(path):
    with open(path) as fh:
        return parse_camera(fh.read())


def format_camera(cam):
    return " ".join(repr(float(v)) for v in (*cam.psi, cam.width_px, cam.height_px)) + "\n"


def save_camera(path, cam):
    with open(path, "w") as fh:
        fh.write(format_camera(cam))
