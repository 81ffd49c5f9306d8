"""Ellipse geometry shared by FOV detection and pixel masking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Ellipse:
    """An ellipse in pixel-index coordinates (x to the right, y down).

    ``a`` is the semi-axis along direction ``theta``; ``b`` the other one.
    Construction normalizes so that ``a >= b`` and ``theta`` lies in
    ``[0, pi)``. Positivity is checked by :meth:`validate`, not here, so a
    degenerate ellipse can still be represented and rejected by consumers.
    """

    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self):
        a, b, theta = float(self.a), float(self.b), float(self.theta)
        if b > a:
            a, b = b, a
            theta += math.pi / 2
        theta = math.fmod(theta, math.pi)
        if theta < 0:
            theta += math.pi
        if theta >= math.pi:
            theta = 0.0
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", theta)

    def validate(self) -> "Ellipse":
        vals = (self.cx, self.cy, self.a, self.b, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("ellipse has non-finite parameters")
        if self.b <= 0:
            raise ValueError("degenerate ellipse: semi-axis must be positive")
        return self

    @property
    def area(self) -> float:
        return math.pi * self.a * self.b

    def half_extents(self) -> tuple[float, float]:
        """Half width and half height of the axis-aligned bounding box."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        hx = math.sqrt((self.a * c) ** 2 + (self.b * s) ** 2)
        hy = math.sqrt((self.a * s) ** 2 + (self.b * c) ** 2)
        return hx, hy

    def to_dict(self) -> dict:
        return {"cx": self.cx, "cy": self.cy, "a": self.a, "b": self.b, "theta": self.theta}


def interior_mask(height: int, width: int, e: Ellipse) -> np.ndarray:
    """Boolean (height, width) mask of pixel centers inside or on ``e``."""
    e.validate()
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    dx, dy = xs - e.cx, ys - e.cy
    c, s = math.cos(e.theta), math.sin(e.theta)
    u = (dx * c + dy * s) / e.a
    v = (-dx * s + dy * c) / e.b
    return u * u + v * v <= 1.0
