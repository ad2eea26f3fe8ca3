"""Synthetic dataset generation, augmentation, and persistence.

Shapes are sampled area-uniformly on parametric surfaces and normalized to
[-1, 1]^3; partial views are half-space crops resampled by FPS.  The store is
a manifest JSON plus one PDRC file per cloud; the same store holds the cached
coarse clouds used to train the refinement network.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .cloudio import read_pdrc, write_pdrc
from .errors import ArgumentError, ConfigError, DataError
from .geometry import PointCloud, farthest_point_sample
from .metrics import one_sided_chamfer

CATEGORIES = ("sphere", "cuboid", "cylinder", "capsule")

MANIFEST_NAME = "manifest.json"
MANIFEST_VERSION = 1


@dataclass
class DatasetPair:
    """(partial conditioner, complete shape) with identifying metadata."""

    partial: PointCloud
    complete: PointCloud
    shape_id: int
    view_id: int
    category: str

    @property
    def key(self) -> str:
        return f"{self.shape_id:04d}_{self.view_id:02d}"


# ---------------------------------------------------------------------------
# parametric surface samplers (area-uniform)
# ---------------------------------------------------------------------------


def sphere_surface(center, radius, n, rng) -> np.ndarray:
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return np.asarray(center) + radius * dirs


def cuboid_surface(center, half, n, rng) -> np.ndarray:
    """n points on the 6 faces of an axis-aligned cuboid, faces weighted by area."""
    hx, hy, hz = half
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy]) * 4.0
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-1.0, 1.0, size=n)
    v = rng.uniform(-1.0, 1.0, size=n)
    pts = np.empty((n, 3))
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    axis = face // 2
    for ax in range(3):
        sel = axis == ax
        o1, o2 = [a for a in range(3) if a != ax]
        pts[sel, ax] = sign[sel] * half[ax]
        pts[sel, o1] = u[sel] * half[o1]
        pts[sel, o2] = v[sel] * half[o2]
    return np.asarray(center) + pts


def cylinder_surface(center, radius, half_height, n, rng) -> np.ndarray:
    """Capped cylinder along y with side and cap areas in proportion."""
    side = 2.0 * math.pi * radius * (2.0 * half_height)
    cap = math.pi * radius * radius
    part = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts = np.empty((n, 3))
    on_side = part == 0
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 2] = radius * np.sin(theta[on_side])
    pts[on_side, 1] = rng.uniform(-half_height, half_height, size=int(on_side.sum()))
    for which, y in ((1, half_height), (2, -half_height)):
        sel = part == which
        r = radius * np.sqrt(rng.uniform(0.0, 1.0, size=int(sel.sum())))
        pts[sel, 0] = r * np.cos(theta[sel])
        pts[sel, 2] = r * np.sin(theta[sel])
        pts[sel, 1] = y
    return np.asarray(center) + pts


def capsule_surface(center, radius, half_height, n, rng) -> np.ndarray:
    """Cylinder side plus two hemispherical caps along y."""
    side = 2.0 * math.pi * radius * (2.0 * half_height)
    caps = 4.0 * math.pi * radius * radius
    part = rng.choice(2, size=n, p=np.array([side, caps]) / (side + caps))
    pts = np.empty((n, 3))
    on_side = part == 0
    theta = rng.uniform(0.0, 2.0 * math.pi, size=n)
    pts[on_side, 0] = radius * np.cos(theta[on_side])
    pts[on_side, 2] = radius * np.sin(theta[on_side])
    pts[on_side, 1] = rng.uniform(-half_height, half_height, size=int(on_side.sum()))
    sel = ~on_side
    dirs = rng.standard_normal((int(sel.sum()), 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    sph = radius * dirs
    sph[:, 1] = np.where(sph[:, 1] >= 0.0, sph[:, 1] + half_height, sph[:, 1] - half_height)
    pts[sel] = sph
    return np.asarray(center) + pts


def generate_shape(category: str, n: int, rng: np.random.Generator) -> PointCloud:
    """n area-uniform surface points of a randomly-sized shape in [-1, 1]^3."""
    if n < 16:
        raise ArgumentError(f"generate_shape: need n >= 16, got {n}")
    if category == "sphere":
        pts = sphere_surface((0.0, 0.0, 0.0), rng.uniform(0.5, 0.9), n, rng)
    elif category == "cuboid":
        pts = cuboid_surface((0.0, 0.0, 0.0), rng.uniform(0.3, 0.9, size=3), n, rng)
    elif category == "cylinder":
        pts = cylinder_surface((0.0, 0.0, 0.0), rng.uniform(0.3, 0.7), rng.uniform(0.4, 0.9), n, rng)
    elif category == "capsule":
        r = rng.uniform(0.25, 0.45)
        pts = capsule_surface((0.0, 0.0, 0.0), r, rng.uniform(0.3, 0.9 - r), n, rng)
    else:
        raise ArgumentError(f"unknown shape category {category!r}")
    return PointCloud(points=np.clip(pts, -1.0, 1.0))


def make_partial(
    complete: PointCloud,
    view_dir: np.ndarray,
    keep_fraction: float,
    resample_to: int | None = None,
) -> PointCloud:
    """Half-space crop toward a view direction, optionally FPS-resampled.

    Keeps the points whose projection onto view_dir exceeds the
    (1 - keep_fraction) quantile, mimicking a partial observation.
    """
    if not (0.0 < keep_fraction < 1.0):
        raise ArgumentError(f"keep_fraction {keep_fraction} outside (0, 1)")
    d = np.asarray(view_dir, dtype=np.float64)
    d = d / np.linalg.norm(d)
    proj = complete.points @ d
    cut = np.quantile(proj, 1.0 - keep_fraction)
    keep = np.nonzero(proj > cut)[0]
    if keep.size == 0:
        keep = np.array([int(np.argmax(proj))])
    pts = complete.points[keep]
    if resample_to is not None:
        if resample_to > pts.shape[0]:
            raise ArgumentError(
                f"cannot resample {pts.shape[0]} cropped points up to {resample_to}"
            )
        pts = pts[farthest_point_sample(pts, resample_to)]
    return PointCloud(points=pts)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

_AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True)
class AugmentConfig:
    """Rotation / mirror / translation / scaling magnitudes.

    rotation_limit_deg: angle drawn uniformly from [-a, a] about the up axis
    mirror_prob: each of the two up-axis-parallel planes mirrors with prob m/2
    translation_std: iid N(0, sigma^2) shift per coordinate
    scale_range: multiplier drawn uniformly from [low, high]
    """

    rotation_limit_deg: float
    mirror_prob: float
    translation_std: float
    scale_range: tuple[float, float]
    up_axis: str = "y"

    def __post_init__(self):
        if not (0.0 <= self.mirror_prob <= 1.0):
            raise ConfigError(f"mirror_prob {self.mirror_prob} outside [0, 1]")
        if self.translation_std < 0.0:
            raise ConfigError("translation_std must be nonnegative")
        low, high = self.scale_range
        if not (0.0 < low <= high):
            raise ConfigError(f"scale_range {self.scale_range} must satisfy 0 < low <= high")
        if self.up_axis not in _AXES:
            raise ConfigError(f"up_axis must be one of x/y/z, got {self.up_axis!r}")


# magnitudes used on MVP-style data: large for the generator so it does not
# overfit, small for the refiner where accuracy is the priority
AUGMENT_GENERATOR = AugmentConfig(90.0, 0.5, 0.1, (1.0 / 1.2, 1.2))
AUGMENT_REFINER = AugmentConfig(3.0, 0.5, 0.005, (1.0 / 1.01, 1.01))
AUGMENT_IDENTITY = AugmentConfig(0.0, 0.0, 0.0, (1.0, 1.0))

AUGMENT_PRESETS = {
    "generator": AUGMENT_GENERATOR,
    "refiner": AUGMENT_REFINER,
    "identity": AUGMENT_IDENTITY,
}


@dataclass(frozen=True)
class Transform:
    """One concrete rigid + scale transform, applied as rotate, mirror, scale, translate."""

    rotation: np.ndarray
    mirror_signs: np.ndarray
    scale: float
    translation: np.ndarray

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (points @ self.rotation.T) * self.mirror_signs * self.scale + self.translation

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        return PointCloud(
            points=self.apply(cloud.points),
            features=None if cloud.features is None else cloud.features.copy(),
            labels=None if cloud.labels is None else cloud.labels.copy(),
        )


def draw_transform(cfg: AugmentConfig, rng: np.random.Generator) -> Transform:
    up = _AXES[cfg.up_axis]
    angle = math.radians(rng.uniform(-cfg.rotation_limit_deg, cfg.rotation_limit_deg))
    axes = [a for a in range(3) if a != up]
    rot = np.eye(3)
    c, s = math.cos(angle), math.sin(angle)
    rot[axes[0], axes[0]] = c
    rot[axes[0], axes[1]] = -s
    rot[axes[1], axes[0]] = s
    rot[axes[1], axes[1]] = c
    signs = np.ones(3)
    for a in axes:
        if rng.uniform() < cfg.mirror_prob / 2.0:
            signs[a] = -1.0
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    translation = rng.normal(0.0, cfg.translation_std, size=3) if cfg.translation_std > 0 else np.zeros(3)
    return Transform(rotation=rot, mirror_signs=signs, scale=scale, translation=translation)


def augment(pair: DatasetPair, cfg: AugmentConfig, rng: np.random.Generator) -> DatasetPair:
    """Apply one shared transform to both clouds of a pair."""
    tf = draw_transform(cfg, rng)
    return DatasetPair(
        partial=tf.apply_cloud(pair.partial),
        complete=tf.apply_cloud(pair.complete),
        shape_id=pair.shape_id,
        view_id=pair.view_id,
        category=pair.category,
    )


def mirror_concat(partial: PointCloud, up_axis: str = "y") -> PointCloud:
    """Symmetry-exploiting preprocessing of the partial input.

    Reflects the cloud across the plane perpendicular to the non-up horizontal
    axis that most objects are symmetric about (z = 0 for y-up frames),
    labels originals +1 and mirrored points -1, then FPS-subsamples the
    doubled cloud back to 1.5x the input size to restore uniformity.
    """
    up = _AXES[up_axis]
    mirror_axis = 2 if up != 2 else 1
    flipped = partial.points.copy()
    flipped[:, mirror_axis] *= -1.0
    merged = np.concatenate([partial.points, flipped], axis=0)
    labels = np.concatenate([np.ones(partial.n), -np.ones(partial.n)])
    keep = farthest_point_sample(merged, (3 * partial.n) // 2)
    return PointCloud(points=merged[keep], labels=labels[keep])


# ---------------------------------------------------------------------------
# bounding-box conditioners
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Axis-aligned or oriented box: center, half extents, optional rotation."""

    center: np.ndarray
    half: np.ndarray
    rotation: np.ndarray | None = None

    def surface_area(self) -> float:
        hx, hy, hz = np.asarray(self.half, dtype=np.float64)
        return float(8.0 * (hx * hy + hy * hz + hx * hz))


def sample_box_conditioner(boxes, n: int, rng: np.random.Generator) -> PointCloud:
    """Area-uniform points over the union of box surfaces (the conditioner
    for controllable generation)."""
    boxes = list(boxes)
    if not boxes:
        raise ArgumentError("need at least one box")
    if n < 6 * len(boxes):
        raise ArgumentError(f"need n >= {6 * len(boxes)} samples for {len(boxes)} boxes")
    areas = np.array([b.surface_area() for b in boxes])
    if (areas <= 0.0).any():
        raise ArgumentError("degenerate zero-area box")
    which = rng.choice(len(boxes), size=n, p=areas / areas.sum())
    pts = np.empty((n, 3))
    for bi, box in enumerate(boxes):
        sel = which == bi
        local = cuboid_surface((0.0, 0.0, 0.0), np.asarray(box.half, dtype=np.float64),
                               int(sel.sum()), rng)
        if box.rotation is not None:
            local = local @ np.asarray(box.rotation, dtype=np.float64).T
        pts[sel] = local + np.asarray(box.center, dtype=np.float64)
    return PointCloud(points=pts)


# ---------------------------------------------------------------------------
# dataset construction and persistence
# ---------------------------------------------------------------------------


@dataclass
class DatasetSpec:
    n_pairs: int = 32
    complete_points: int = 256
    partial_points: int = 128
    # lower bound keeps the crop at least as large as the resample target
    keep_fraction: tuple[float, float] = (0.55, 0.75)


def build_dataset(spec: DatasetSpec, rng: np.random.Generator) -> list[DatasetPair]:
    pairs = []
    for i in range(spec.n_pairs):
        category = CATEGORIES[i % len(CATEGORIES)]
        complete = generate_shape(category, spec.complete_points, rng)
        view = rng.standard_normal(3)
        keep = rng.uniform(*spec.keep_fraction)
        partial = make_partial(complete, view, keep, resample_to=spec.partial_points)
        pairs.append(DatasetPair(partial=partial, complete=complete,
                                 shape_id=i, view_id=0, category=category))
        assert one_sided_chamfer(partial, complete) < 1e-4
    return pairs


def save_pairs(root, pairs: list[DatasetPair]) -> None:
    os.makedirs(root, exist_ok=True)
    entries = []
    for pair in pairs:
        partial_file = f"{pair.key}_partial.pdrc"
        complete_file = f"{pair.key}_complete.pdrc"
        write_pdrc(os.path.join(root, partial_file), pair.partial)
        write_pdrc(os.path.join(root, complete_file), pair.complete)
        entries.append({
            "shape_id": pair.shape_id,
            "view_id": pair.view_id,
            "category": pair.category,
            "partial_file": partial_file,
            "complete_file": complete_file,
            "coarse_files": [],
        })
    _write_manifest(root, entries)


def _write_manifest(root, entries) -> None:
    with open(os.path.join(root, MANIFEST_NAME), "w") as f:
        json.dump({"version": MANIFEST_VERSION, "pairs": entries}, f, indent=1)


def _read_manifest(root) -> list[dict]:
    path = os.path.join(root, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    with open(path) as f:
        manifest = json.load(f)
    if manifest.get("version") != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {manifest.get('version')}")
    return manifest["pairs"]


def load_pairs(root) -> list[DatasetPair]:
    pairs = []
    for e in _read_manifest(root):
        pairs.append(DatasetPair(
            partial=read_pdrc(os.path.join(root, e["partial_file"])),
            complete=read_pdrc(os.path.join(root, e["complete_file"])),
            shape_id=e["shape_id"],
            view_id=e["view_id"],
            category=e["category"],
        ))
    return pairs


def save_coarse(root, pair: DatasetPair, clouds: list[PointCloud]) -> list[str]:
    """Attach cached coarse clouds to a pair under view-indexed keys."""
    entries = _read_manifest(root)
    names = []
    for j, cloud in enumerate(clouds):
        name = f"{pair.key}_coarse{j:02d}.pdrc"
        write_pdrc(os.path.join(root, name), cloud)
        names.append(name)
    for e in entries:
        if e["shape_id"] == pair.shape_id and e["view_id"] == pair.view_id:
            e["coarse_files"] = names
            break
    else:
        raise DataError(f"pair {pair.key} not present in manifest")
    _write_manifest(root, entries)
    return names


def load_coarse(root, pair: DatasetPair) -> list[PointCloud]:
    for e in _read_manifest(root):
        if e["shape_id"] == pair.shape_id and e["view_id"] == pair.view_id:
            return [read_pdrc(os.path.join(root, name)) for name in e["coarse_files"]]
    raise DataError(f"pair {pair.key} not present in manifest")
