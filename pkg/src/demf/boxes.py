from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GroundTruthBox:
    center: tuple
    size: tuple
    class_id: int

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "class_id", int(self.class_id))
        if len(self.center) != 3 or len(self.size) != 3:
            raise ValueError("center and size need three components")
        if min(self.size) <= 0:
            raise ValueError(f"box size must be positive, got {self.size}")


@dataclass(frozen=True)
class Detection:
    center: tuple
    size: tuple
    class_id: int
    score: float

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "size", tuple(float(s) for s in self.size))
        object.__setattr__(self, "class_id", int(self.class_id))
        object.__setattr__(self, "score", float(self.score))
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


def box_array(boxes):
    """``(n, 6)`` array of ``center + size`` rows."""
    if not boxes:
        return np.zeros((0, 6))
    return np.array([(*b.center, *b.size) for b in boxes], dtype=np.float64)
