"""Manifests, stratified splitting, augmentation and synthetic fundus data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ellipse import Ellipse, interior_mask
from .imaging import check_image, to_uint8, write_image

SPLITS = ("train", "val", "test")
MANIFEST_HEADER = ("path", "label", "split")


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    split: Optional[str] = None

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if self.split not in (None,) + SPLITS:
            raise ValueError(f"unknown split {self.split!r}")


# -- manifest I/O ----------------------------------------------------------------


def load_manifest(path) -> list[Sample]:
    """Parse a ``path,label,split`` CSV manifest.

    Paths are returned as written (relative to the manifest's directory);
    see :func:`resolve_path`.
    """
    samples: list[Sample] = []
    seen: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return samples
        header = [h.strip() for h in header]
        if header[:2] != ["path", "label"] or (len(header) > 2 and header[2] != "split") or len(header) > 3:
            raise ManifestError(f"line 1: expected header 'path,label,split', got {','.join(header)!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ManifestError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            p, lab = row[0].strip(), row[1].strip()
            split = row[2].strip() if len(row) > 2 else ""
            if not p:
                raise ManifestError(f"line {lineno}: empty path")
            if lab not in ("0", "1"):
                raise ManifestError(f"line {lineno}: label must be 0 or 1, got {lab!r}")
            if split and split not in SPLITS:
                raise ManifestError(f"line {lineno}: unknown split {split!r}")
            if p in seen:
                raise ManifestError(f"line {lineno}: duplicate path {p!r} (first on line {seen[p]})")
            seen[p] = lineno
            samples.append(Sample(p, int(lab), split or None))
    return samples


def write_manifest(path, samples: Iterable[Sample]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in samples:
            w.writerow([s.path, s.label, s.split or ""])
    return path


def resolve_path(manifest_path, sample: Sample) -> Path:
    p = Path(sample.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


# -- splitting -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("ratios must be three positive numbers")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"ratios must sum to 1, got {sum(self.ratios)}")


def _round_half_up(ratio: float, n: int) -> int:
    # ratios like 0.1 are not exact in binary; round through a small fraction
    q = Fraction(ratio).limit_denominator(10**6) * n
    return math.floor(q + Fraction(1, 2))


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: val and test rounded half up, train gets the rest."""
    n_val = _round_half_up(ratios[1], n)
    n_test = _round_half_up(ratios[2], n)
    n_train = n - n_val - n_test
    if n_train < 0:
        raise ValueError(f"cannot split {n} samples with ratios {tuple(ratios)}")
    return n_train, n_val, n_test


def split_dataset(samples: Sequence[Sample], spec: SplitSpec = SplitSpec(), respect_existing: bool = False) -> list[Sample]:
    """Assign train/val/test splits; returns new samples in input order.

    Each group (each label when stratified, else the whole set) is shuffled
    with a generator keyed by ``(seed, group)`` and cut into the counts of
    :func:`split_counts`. With ``respect_existing`` already-assigned samples
    keep their split and only unassigned ones are distributed.
    """
    if not samples:
        raise ValueError("no samples to split")
    out = list(samples)
    pending = [i for i, s in enumerate(out) if not (respect_existing and s.split)]
    groups: dict[int, list[int]] = {}
    for i in pending:
        key = out[i].label if spec.stratified else -1
        groups.setdefault(key, []).append(i)
    if spec.stratified and pending:
        for lab in (0, 1):
            if len(groups.get(lab, [])) < 3:
                raise ValueError(f"class {lab} has fewer than 3 samples; cannot stratify")
    for key in sorted(groups):
        idx = groups[key]
        counts = split_counts(len(idx), spec.ratios)
        rng = np.random.default_rng([spec.seed, key + 1])
        perm = rng.permutation(len(idx))
        names = np.repeat(np.array(SPLITS), counts)
        for pos, name in zip(perm, names):
            out[idx[pos]] = replace(out[idx[pos]], split=str(name))
    return out


# -- augmentation ----------------------------------------------------------------


@dataclass(frozen=True)
class AugmentParams:
    rotation_max: float = 15.0
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_frac: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not (0 <= self.hflip_prob <= 1 and 0 <= self.vflip_prob <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be positive with lo <= hi")
        if self.rotation_max < 0 or self.translate_frac < 0:
            raise ValueError("rotation_max and translate_frac must be non-negative")


@dataclass(frozen=True)
class AugmentDraw:
    angle: float = 0.0
    hflip: bool = False
    vflip: bool = False
    scale: float = 1.0
    tx: float = 0.0
    ty: float = 0.0


def augment_rng(seed: int, draw_index: int) -> np.random.Generator:
    """Counter-based generator: same ``(seed, draw_index)`` gives the same stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, draw_index])))


def draw_augmentation(params: AugmentParams, draw_index: int, width: int, height: int) -> AugmentDraw:
    rng = augment_rng(params.seed, draw_index)
    u = rng.random(6)
    lo, hi = params.scale_range
    return AugmentDraw(
        angle=(2 * u[0] - 1) * params.rotation_max,
        hflip=bool(u[1] < params.hflip_prob),
        vflip=bool(u[2] < params.vflip_prob),
        scale=lo + (hi - lo) * u[3],
        tx=(2 * u[4] - 1) * params.translate_frac * width,
        ty=(2 * u[5] - 1) * params.translate_frac * height,
    )


def transform_image(img: np.ndarray, d: AugmentDraw) -> np.ndarray:
    """Rotate about the center, flip, scale about the center, then translate.

    Angles are degrees, positive turning +x toward +y (clockwise on screen).
    Output keeps the input size; samples falling outside the source are black.
    """
    check_image(img)
    if d == AugmentDraw():
        return img.copy()
    h, w = img.shape[:2]
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    t = math.radians(d.angle)
    c, s = math.cos(t), math.sin(t)
    rot = np.array([[c, -s], [s, c]])
    flip = np.diag([-1.0 if d.hflip else 1.0, -1.0 if d.vflip else 1.0])
    inv = rot.T @ flip / d.scale

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    qx, qy = xs - cx - d.tx, ys - cy - d.ty
    sx = inv[0, 0] * qx + inv[0, 1] * qy + cx
    sy = inv[1, 0] * qx + inv[1, 1] * qy + cy
    return bilinear_sample(img, sx, sy)


def bilinear_sample(img: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    """Sample ``img`` at float coordinates; taps outside the image read as 0."""
    h, w = img.shape[:2]
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    f = img.astype(np.float64)
    out = np.zeros(sx.shape + (img.shape[2],))
    for oy, wy in ((0, 1 - fy), (1, fy)):
        for ox, wx in ((0, 1 - fx), (1, fx)):
            xi, yi = x0 + ox, y0 + oy
            ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = f[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            out += np.where(ok, wx * wy, 0.0)[..., None] * vals
    return to_uint8(out)


def augment_sample(img: np.ndarray, params: AugmentParams, draw_index: int) -> np.ndarray:
    d = draw_augmentation(params, draw_index, img.shape[1], img.shape[0])
    return transform_image(img, d)


# -- synthetic fundus generator --------------------------------------------------

DEFAULT_SYNTH_SIZE = 256


@dataclass(frozen=True)
class Lesion:
    cx: float
    cy: float
    radius: float
    contrast: float


@dataclass(frozen=True)
class Scene:
    """Everything needed to render one synthetic fundus photograph."""

    size: int
    fov: Ellipse
    base_color: tuple[float, float, float]
    exposure: float
    disc: tuple[float, float, float]  # optic disc x, y, radius
    macula: tuple[float, float, float]  # darker central zone x, y, radius
    vessels: tuple[np.ndarray, ...] = field(default_factory=tuple)
    vessel_widths: tuple[float, ...] = ()
    noise_seed: int = 0


def make_scene(seed: int, index: int, size: int = DEFAULT_SYNTH_SIZE) -> Scene:
    rng = np.random.default_rng([seed, index, 0])
    r = rng.uniform(0.45, 0.48) * size
    cx = (size - 1) / 2 + rng.uniform(-0.01, 0.01) * size
    cy = (size - 1) / 2 + rng.uniform(-0.01, 0.01) * size
    fov = Ellipse(cx, cy, r, r * rng.uniform(0.96, 1.0), 0.0)
    base = (rng.uniform(150, 200), rng.uniform(70, 105), rng.uniform(30, 55))
    exposure = rng.uniform(0.7, 1.25)
    side = rng.choice([-1.0, 1.0])
    dx = cx + side * rng.uniform(0.3, 0.45) * r
    dy = cy + rng.uniform(-0.1, 0.1) * r
    drad = rng.uniform(0.13, 0.17) * r
    macula = (cx - side * rng.uniform(0.0, 0.08) * r, cy + rng.uniform(-0.05, 0.05) * r, rng.uniform(0.25, 0.35) * r)
    vessels, widths = [], []
    for _ in range(int(rng.integers(3, 7))):
        ang = rng.uniform(0, 2 * np.pi)
        pts = [(dx, dy)]
        step = r / 8
        for _ in range(10):
            ang += rng.normal(0, 0.3)
            pts.append((pts[-1][0] + step * np.cos(ang), pts[-1][1] + step * np.sin(ang)))
        vessels.append(np.array(pts))
        widths.append(rng.uniform(0.006, 0.012) * size)
    return Scene(size, fov, base, exposure, (dx, dy, drad), macula, tuple(vessels), tuple(widths),
                 int(rng.integers(0, 2**63 - 1)))


def make_lesion(scene: Scene, seed: int, index: int) -> Lesion:
    """A faint yellowish blob in the central third of the FOV."""
    rng = np.random.default_rng([seed, index, 1])
    r = scene.fov.b
    rho = (r / 3) * math.sqrt(rng.uniform())
    phi = rng.uniform(0, 2 * np.pi)
    return Lesion(
        scene.fov.cx + rho * math.cos(phi),
        scene.fov.cy + rho * math.sin(phi),
        rng.uniform(0.07, 0.12) * 2 * r,
        rng.uniform(20, 35),
    )


def _vessel_distance(n: int, pts: np.ndarray, reach: float) -> np.ndarray:
    """Distance from each pixel to a polyline, exact within ``reach`` of it."""
    dist = np.full((n, n), np.inf)
    for p, q in zip(pts[:-1], pts[1:]):
        x0 = max(int(math.floor(min(p[0], q[0]) - reach)), 0)
        x1 = min(int(math.ceil(max(p[0], q[0]) + reach)) + 1, n)
        y0 = max(int(math.floor(min(p[1], q[1]) - reach)), 0)
        y1 = min(int(math.ceil(max(p[1], q[1]) + reach)) + 1, n)
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1].astype(np.float64)
        d = q - p
        L2 = float(d @ d) or 1e-12
        t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / L2, 0, 1)
        seg = np.hypot(xs - p[0] - t * d[0], ys - p[1] - t * d[1])
        np.minimum(dist[y0:y1, x0:x1], seg, out=dist[y0:y1, x0:x1])
    return dist


LESION_TINT = np.array([1.2, 1.2, 0.6])


def render_scene(scene: Scene, lesion: Optional[Lesion] = None) -> np.ndarray:
    n = scene.size
    ys, xs = np.mgrid[0:n, 0:n].astype(np.float64)
    inside = interior_mask(n, n, scene.fov)
    rho2 = ((xs - scene.fov.cx) / scene.fov.a) ** 2 + ((ys - scene.fov.cy) / scene.fov.b) ** 2
    mx, my, mrad = scene.macula
    macula = 0.3 * np.exp(-(((xs - mx) ** 2 + (ys - my) ** 2) / mrad**2))
    falloff = (1 - 0.2 * np.clip(rho2, 0, 1)) * (1 - macula)
    img = np.asarray(scene.base_color)[None, None, :] * falloff[..., None]

    dx, dy, drad = scene.disc
    dd = np.hypot(xs - dx, ys - dy) / drad
    img += np.exp(-(dd**4))[..., None] * np.array([70.0, 80.0, 60.0])
    img *= scene.exposure

    if lesion is not None:
        ld = np.hypot(xs - lesion.cx, ys - lesion.cy) / lesion.radius
        prof = np.where(ld < 1, np.cos(np.clip(ld, 0, 1) * np.pi / 2) ** 0.5, 0.0)
        img += prof[..., None] * (lesion.contrast * LESION_TINT)

    darkening = np.zeros((n, n))
    for pts, wid in zip(scene.vessels, scene.vessel_widths):
        dist = _vessel_distance(n, pts, 4 * wid)
        darkening = np.maximum(darkening, 0.35 * np.exp(-((dist / wid) ** 2)))
    shade = 1 - darkening
    img *= shade[..., None]

    noise = np.random.default_rng(scene.noise_seed).normal(0, 1.5, size=(n, n, 3))
    img = np.where(inside[..., None], img + noise, 0.0)
    return to_uint8(img)


def generate_synthetic(n_per_class: int, seed: int, out_dir, size: int = DEFAULT_SYNTH_SIZE) -> Path:
    """Write ``2 * n_per_class`` PNGs plus ``manifest.csv``; return the manifest path.

    Image ``i`` uses scene ``(seed, i)``; the second half of the indices are
    positives and carry a planted lesion.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    samples = []
    for i in range(2 * n_per_class):
        label = int(i >= n_per_class)
        scene = make_scene(seed, i, size)
        lesion = make_lesion(scene, seed, i) if label else None
        name = f"{'pos' if label else 'neg'}_{i:05d}.png"
        write_image(out / name, render_scene(scene, lesion))
        samples.append(Sample(name, label))
    return write_manifest(out / "manifest.csv", samples)
