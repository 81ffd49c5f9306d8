"""Field-of-view detection by robust direct least-squares ellipse fitting.

The fit minimizes the algebraic conic residual subject to ``4AC - B^2 = 1``
(the Fitzgibbon constraint), solved through the numerically stable 3x3
block reduction of Halir and Flusser on centered, RMS-scaled coordinates.
Robustness to rim artifacts comes from repeatedly refitting after trimming
the worst-fitting fraction of boundary points.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .ellipse import Ellipse
from .imaging import check_image, intensity_plane

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 10
MIN_POINTS = 6


class FitError(ValueError):
    """Raised when an ellipse cannot be fitted to the given data."""


@dataclass(frozen=True)
class ConicCoefficients:
    """Implicit conic ``A x^2 + B xy + C y^2 + D x + E y + F = 0``."""

    A: float
    B: float
    C: float
    D: float
    E: float
    F: float

    @classmethod
    def from_vector(cls, v) -> "ConicCoefficients":
        v = np.asarray(v, dtype=np.float64)
        n = np.linalg.norm(v)
        if n == 0 or not np.all(np.isfinite(v)):
            raise FitError("degenerate configuration")
        v = v / n
        if v[0] + v[2] < 0:
            v = -v
        return cls(*(float(c) for c in v))

    def as_vector(self) -> np.ndarray:
        return np.array([self.A, self.B, self.C, self.D, self.E, self.F])

    @property
    def discriminant(self) -> float:
        return self.B * self.B - 4 * self.A * self.C

    def evaluate(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        x, y = p[:, 0], p[:, 1]
        return self.A * x * x + self.B * x * y + self.C * y * y + self.D * x + self.E * y + self.F

    def residuals(self, points) -> np.ndarray:
        """Algebraic residual divided by the conic's gradient magnitude.

        This is the first-order (Sampson) distance to the curve, in the
        units of the point coordinates.
        """
        p = np.asarray(points, dtype=np.float64)
        x, y = p[:, 0], p[:, 1]
        gx = 2 * self.A * x + self.B * y + self.D
        gy = self.B * x + 2 * self.C * y + self.E
        g = np.hypot(gx, gy)
        return np.abs(self.evaluate(p)) / np.maximum(g, np.finfo(float).tiny)


# -- segmentation --------------------------------------------------------------


def otsu_threshold(ch: np.ndarray) -> int:
    """Threshold maximizing between-class variance of the 256-bin histogram.

    Classes are ``v <= t`` and ``v > t``. When several thresholds tie for
    the maximum (e.g. an empty gap between two modes) the middle of the
    tied range is returned.
    """
    hist = np.bincount(np.asarray(ch).ravel(), minlength=256).astype(np.float64)
    p = hist / hist.sum()
    levels = np.arange(256, dtype=np.float64)
    w0 = np.cumsum(p)
    m0 = np.cumsum(p * levels)
    mt = m0[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        var_b = (mt * w0 - m0) ** 2 / (w0 * w1)
    var_b[~((w0 > 1e-15) & (w1 > 1e-15))] = -1.0
    best = var_b.max()
    if best <= 0:
        return int(np.asarray(ch).max())
    tied = np.flatnonzero(var_b >= best * (1 - 1e-12))
    return int((tied[0] + tied[-1]) // 2)


def segment_foreground(ch: np.ndarray, threshold: Union[int, str] = DEFAULT_THRESHOLD) -> np.ndarray:
    """Boolean mask of pixels brighter than ``threshold`` (an int or ``"otsu"``)."""
    ch = np.asarray(ch)
    if ch.size == 0:
        raise ValueError("empty input")
    if threshold == "otsu":
        threshold = otsu_threshold(ch)
    elif isinstance(threshold, str):
        raise ValueError(f"unknown threshold policy {threshold!r}")
    return ch > threshold


def boundary_points(mask: np.ndarray) -> np.ndarray:
    """(x, y) centers of foreground pixels with a background 4-neighbor.

    Pixels outside the mask count as background. Rows are in raster order.
    """
    m = np.asarray(mask, dtype=bool)
    if m.size == 0:
        return np.zeros((0, 2), dtype=np.float64)
    p = np.pad(m, 1, constant_values=False)
    interior = p[:-2, 1:-1] & p[2:, 1:-1] & p[1:-1, :-2] & p[1:-1, 2:]
    ys, xs = np.nonzero(m & ~interior)
    return np.column_stack([xs, ys]).astype(np.float64)


# -- fitting -------------------------------------------------------------------


def fit_ellipse_direct(points) -> ConicCoefficients:
    """Direct least-squares ellipse fit.

    Args:
        points: (n, 2) array-like of (x, y), n >= 6, not all collinear.

    Returns:
        Unit-norm conic coefficients in the original coordinate frame,
        signed so that ``A + C > 0``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < MIN_POINTS:
        raise FitError("insufficient points")
    if not np.all(np.isfinite(pts)):
        raise FitError("non-finite point coordinates")

    mx, my = pts.mean(axis=0)
    dx, dy = pts[:, 0] - mx, pts[:, 1] - my
    s = math.sqrt(np.mean(dx * dx + dy * dy))
    if s == 0:
        raise FitError("degenerate configuration")
    x, y = dx / s, dy / s

    d1 = np.column_stack([x * x, x * y, y * y])
    d2 = np.column_stack([x, y, np.ones_like(x)])
    s1, s2, s3 = d1.T @ d1, d1.T @ d2, d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise FitError("degenerate configuration")
    t = -np.linalg.solve(s3, s2.T)
    m = s1 + s2 @ t
    # premultiply by the inverse of the 3x3 constraint block [[0,0,2],[0,-1,0],[2,0,0]]
    m = np.vstack([m[2] / 2.0, -m[1], m[0] / 2.0])
    evals, evecs = np.linalg.eig(m)

    best, best_cost = None, math.inf
    for k in range(3):
        if abs(evals[k].imag) > 1e-9 * max(1.0, abs(evals[k].real)):
            continue
        a1 = evecs[:, k].real
        cond = 4 * a1[0] * a1[2] - a1[1] ** 2
        if cond <= 0:
            continue
        v = np.concatenate([a1, t @ a1])
        cost = float(np.sum((d1 @ a1 + d2 @ v[3:]) ** 2)) / cond
        if cost < best_cost:
            best, best_cost = v, cost
    if best is None:
        raise FitError("degenerate configuration")

    a, b, c, d, e, f = best
    ss = s * s
    coeffs = [
        a / ss,
        b / ss,
        c / ss,
        (-2 * a * mx - b * my) / ss + d / s,
        (-b * mx - 2 * c * my) / ss + e / s,
        (a * mx * mx + b * mx * my + c * my * my) / ss - (d * mx + e * my) / s + f,
    ]
    return ConicCoefficients.from_vector(coeffs)


def conic_to_geometric(c: ConicCoefficients) -> Ellipse:
    """Center, semi-axes and orientation of an ellipse given as a conic."""
    A, B, C, D, E, F = c.as_vector()
    if not B * B - 4 * A * C < 0:
        raise FitError("conic is not an ellipse")
    cx, cy = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = F + (D * cx + E * cy) / 2.0
    lam, vec = np.linalg.eigh([[A, B / 2.0], [B / 2.0, C]])
    with np.errstate(divide="ignore", invalid="ignore"):
        sq = -f0 / lam
    if not np.all(sq > 0):
        raise FitError("conic is not a real ellipse")
    # eigh sorts ascending; the long axis belongs to the smaller |lambda|
    order = np.argsort(np.abs(lam))
    a = math.sqrt(sq[order[0]])
    b = math.sqrt(sq[order[1]])
    v = vec[:, order[0]]
    theta = 0.0 if a - b <= 1e-12 * a else math.atan2(v[1], v[0])
    return Ellipse(float(cx), float(cy), a, b, theta)


def _trim_schedule(n: int, trim_fraction: float, iterations: int) -> list[int]:
    drops = []
    for _ in range(iterations):
        k = int(math.floor(trim_fraction * n))
        drops.append(k)
        n -= k
    return drops


def fit_ellipse_robust(points, trim_fraction: float = 0.1, iterations: int = 3) -> Ellipse:
    """Ellipse fit that discards the worst-fitting points between refits.

    Each round fits the current inliers, ranks them by residual distance
    (stable sort) and drops ``floor(trim_fraction * n)`` of them. After
    ``iterations`` rounds the survivors are fitted once more.
    """
    if not 0 <= trim_fraction < 0.5:
        raise ValueError("trim_fraction must be in [0, 0.5)")
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    remaining = len(pts) - sum(_trim_schedule(len(pts), trim_fraction, iterations))
    if remaining < MIN_POINTS:
        raise FitError("insufficient points")

    inliers = pts
    for _ in range(iterations):
        conic = fit_ellipse_direct(inliers)
        k = int(math.floor(trim_fraction * len(inliers)))
        if k == 0:
            break
        order = np.argsort(conic.residuals(inliers), kind="stable")
        inliers = inliers[np.sort(order[: len(inliers) - k])]
    return conic_to_geometric(fit_ellipse_direct(inliers))


def detect_fov(
    img: np.ndarray,
    threshold: Union[int, str] = DEFAULT_THRESHOLD,
    trim_fraction: float = 0.1,
    iterations: int = 3,
) -> Ellipse:
    """Locate the illuminated retina disc of a fundus photograph."""
    check_image(img)
    mask = segment_foreground(intensity_plane(img), threshold)
    pts = boundary_points(mask)
    log.debug("fov: %d boundary points", len(pts))
    e = fit_ellipse_robust(pts, trim_fraction, iterations)
    if e.area < 0.1 * img.shape[0] * img.shape[1]:
        raise FitError(f"implausible field of view (area {e.area:.0f} px)")
    return e
