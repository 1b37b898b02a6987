"""Synthetic scenes where some classes share their point-cloud shape.

Each object is an axis-aligned box whose surface is sampled for points. Its
shape comes from a geometry archetype: normally one per class, but an object of
a class listed in an ambiguous pair may instead use the archetype shared by both
classes of the pair. The image paints every box footprint with a per-class color
and stripe texture, so the class of an ambiguous object is visible only there.
"""

import colorsys
from dataclasses import dataclass, field

import numpy as np

from ..boxes import GroundTruthBox
from ..diffcore import make_rng
from ..geometry import CameraModel, project

# (sx, sy, sz) in meters; every half-diagonal stays below 0.5 m
SHARED_ARCHETYPES = ((0.60, 0.40, 0.30), (0.30, 0.30, 0.60))
UNIQUE_ARCHETYPES = ((0.65, 0.25, 0.25), (0.25, 0.65, 0.25), (0.45, 0.45, 0.45), (0.25, 0.25, 0.65))
SIZE_JITTER = 0.05
SURFACE_NOISE = 0.005
DEPTH_RANGE = (3.5, 6.0)
BACKGROUND = 0.5
MAX_PLACEMENT_TRIES = 1000


class SpecInvalid(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    num_classes: int = 4
    objects: int = 4
    ambiguity: float = 1.0
    n_points: int = 2048
    image_height: int = 64
    image_width: int = 64
    focal: float = 48.0
    min_points: int = 64
    pairs: tuple = ((0, 1), (2, 3))
    clutter: float = 0.0  # farthest-point sampling gravitates to isolated clutter points

    def validate(self):
        if self.num_classes < 2:
            raise SpecInvalid(f"num_classes must be >= 2, got {self.num_classes}")
        if self.objects < 1:
            raise SpecInvalid(f"objects must be >= 1, got {self.objects}")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise SpecInvalid(f"ambiguity must be in [0, 1], got {self.ambiguity}")
        if not 0.0 <= self.clutter < 1.0:
            raise SpecInvalid(f"clutter must be in [0, 1), got {self.clutter}")
        if self.image_height < 8 or self.image_width < 8 or self.focal <= 0:
            raise SpecInvalid("image needs at least 8x8 pixels and a positive focal length")
        seen = set()
        for pair in self.pairs:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise SpecInvalid(f"ambiguous pairs need two distinct classes, got {pair}")
            for c in pair:
                if not 0 <= c < self.num_classes or c in seen:
                    raise SpecInvalid(f"pair class {c} out of range or in two pairs")
                seen.add(c)
        if self.object_points < max(self.min_points, 1):
            raise SpecInvalid(
                f"{self.n_points} points over {self.objects} objects leaves {self.object_points} "
                f"per object, below min_points={self.min_points}"
            )
        return self

    @property
    def clutter_points(self):
        return int(round(self.n_points * self.clutter))

    @property
    def object_points(self):
        return (self.n_points - self.clutter_points) // self.objects

    def camera(self):
        return CameraModel.pinhole(
            self.focal, self.image_width / 2.0, self.image_height / 2.0, self.image_width, self.image_height
        )

    def pair_of(self, class_id):
        for p, pair in enumerate(self.pairs):
            if class_id in pair:
                return p
        return None


@dataclass
class ToyScene:
    points: np.ndarray  # (N0, 3)
    image: np.ndarray  # (3, H0, W0)
    cam: CameraModel
    gts: list
    ambiguous: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))  # per gt


def archetype_size(spec, class_id, shared):
    """Base box size of a class's unique archetype or of its pair's shared one."""
    if shared:
        p = spec.pair_of(class_id)
        if p < len(SHARED_ARCHETYPES):
            return np.array(SHARED_ARCHETYPES[p])
        return make_rng(p, "shared-archetype").uniform(0.25, 0.55, size=3)
    if class_id < len(UNIQUE_ARCHETYPES):
        return np.array(UNIQUE_ARCHETYPES[class_id])
    return make_rng(class_id, "unique-archetype").uniform(0.25, 0.55, size=3)


def class_color(class_id, num_classes):
    return np.array(colorsys.hsv_to_rgb(class_id / num_classes, 0.85, 0.9))


def class_texture(class_id, num_classes, rows, cols):
    """Color times a stripe pattern whose period and direction depend on the class."""
    period = 3 + class_id % 3
    coord = cols if class_id % 2 == 0 else rows
    stripe = ((coord // period) % 2).astype(np.float64)
    return class_color(class_id, num_classes)[:, None] * (0.7 + 0.3 * stripe)[None, :]


def _class_list(spec, rng):
    reps = -(-spec.objects // spec.num_classes)
    classes = np.concatenate([rng.permutation(spec.num_classes) for _ in range(reps)])
    return classes[: spec.objects]


def _footprint(cam, center, size):
    corners = center + (np.array(np.meshgrid([-1, 1], [-1, 1], [-1, 1])).reshape(3, -1).T * size / 2)
    px = np.array([project(cam, c) for c in corners])
    return px.min(axis=0), px.max(axis=0)


def _place(spec, cam, sizes, rng):
    W, H = spec.image_width, spec.image_height
    centers, boxes2d = [], []
    for size in sizes:
        for _ in range(MAX_PLACEMENT_TRIES):
            z = rng.uniform(*DEPTH_RANGE)
            u = rng.uniform(0.15 * W, 0.85 * W)
            v = rng.uniform(0.25 * H, 0.75 * H)
            center = np.array([(u - W / 2.0) * z / spec.focal, (v - H / 2.0) * z / spec.focal, z])
            lo, hi = _footprint(cam, center, size)
            # footprints stay inside the image and apart, so nothing is occluded
            if lo.min() < 0 or hi[0] > W or hi[1] > H:
                continue
            if any(np.all(lo < h2 + 1) and np.all(l2 - 1 < hi) for l2, h2 in boxes2d):
                continue
            centers.append(center)
            boxes2d.append((lo, hi))
            break
        else:
            raise SpecInvalid("could not place all objects without overlap; reduce objects")
    return centers, boxes2d


def _surface_points(center, size, n, rng):
    areas = np.array([size[1] * size[2], size[0] * size[2], size[0] * size[1]])
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = rng.uniform(-0.5, 0.5, size=(n, 3))
    side = rng.choice([-0.5, 0.5], size=n)
    pts[np.arange(n), axis] = side
    return center + pts * size + rng.normal(scale=SURFACE_NOISE, size=(n, 3))


def _render(spec, cam, centers, sizes, classes, rng):
    H, W = spec.image_height, spec.image_width
    image = np.full((3, H, W), BACKGROUND) + rng.normal(scale=0.02, size=(3, H, W))
    # painter's algorithm: far boxes first
    for i in np.argsort([-c[2] for c in centers], kind="stable"):
        lo, hi = _footprint(cam, centers[i], sizes[i])
        x0, y0 = max(int(np.floor(lo[0])), 0), max(int(np.floor(lo[1])), 0)
        x1, y1 = min(int(np.ceil(hi[0])), W), min(int(np.ceil(hi[1])), H)
        rows, cols = np.mgrid[y0:y1, x0:x1]
        tex = class_texture(int(classes[i]), spec.num_classes, rows.reshape(-1), cols.reshape(-1))
        image[:, y0:y1, x0:x1] = tex.reshape(3, y1 - y0, x1 - x0)
    return np.clip(image, 0.0, 1.0)


def synth_scene(seed, spec=SceneSpec()):
    """Deterministic toy scene for ``seed``."""
    spec.validate()
    rng = make_rng(seed, "scene")
    cam = spec.camera()
    classes = _class_list(spec, rng)
    shared = np.array([spec.pair_of(c) is not None and rng.random() < spec.ambiguity for c in classes])
    sizes = [archetype_size(spec, c, s) * rng.uniform(1 - SIZE_JITTER, 1 + SIZE_JITTER, size=3)
             for c, s in zip(classes, shared)]
    centers, _ = _place(spec, cam, sizes, rng)
    points = [_surface_points(c, s, spec.object_points, rng) for c, s in zip(centers, sizes)]
    lo = np.min([c - 1.0 for c in centers], axis=0)
    hi = np.max([c + 1.0 for c in centers], axis=0)
    points.append(rng.uniform(lo, hi, size=(spec.clutter_points, 3)))
    image = _render(spec, cam, centers, sizes, classes, rng)
    gts = [GroundTruthBox(c, s, int(k)) for c, s, k in zip(centers, sizes, classes)]
    return ToyScene(np.concatenate(points), image, cam, gts, shared)
