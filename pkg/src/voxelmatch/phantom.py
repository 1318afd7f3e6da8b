"""Procedural 3-D phantoms with exact ground truth.

Each phantom is a textured "body" ellipsoid containing disjoint ellipsoidal
organs of distinct intensity bands, with landmarks at organ centers and axis
poles.  Pairs derive a second volume through a known rigid/affine transform,
an intensity remap emulating a second modality, optional local corruptions,
and an optional field-of-view crop, so every suite has exact correspondence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import InsufficientOverlap, PlacementFailure
from .geometry import AffineTransform, Point3, RigidTransform, apply
from .volume import Box3, LabelVolume, ScalarVolume, VolumeGeometry, crop

__all__ = [
    "PhantomSpec",
    "Corruption",
    "PhantomPair",
    "gen_phantom",
    "gen_pair",
    "MODALITY_REMAPS",
]


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: float = 1.0
    n_organs: int = 6
    organ_axis_range: tuple[float, float] = (3.5, 7.0)  # mm
    texture_scale: float = 6.0  # mm
    texture_amplitude: float = 0.05
    air_intensity: float = 0.05
    body_intensity: float = 0.30
    organ_intensity_range: tuple[float, float] = (0.45, 0.95)
    seed: int = 0

    def __post_init__(self):
        if self.n_organs < 0:
            raise ValueError("n_organs must be non-negative")
        if self.organ_axis_range[0] <= 0 or self.organ_axis_range[0] > self.organ_axis_range[1]:
            raise ValueError("organ_axis_range must be positive and ordered")


@dataclass(frozen=True)
class Corruption:
    """Local intensity corruption: contrast inversion or constant occlusion in a sphere."""

    center: Point3  # mm
    radius: float   # mm
    kind: str = "invert"  # "invert" | "occlude"

    def __post_init__(self):
        if self.kind not in ("invert", "occlude"):
            raise ValueError(f"unknown corruption kind {self.kind!r}")
        if self.radius <= 0:
            raise ValueError("corruption radius must be positive")


@dataclass
class PhantomPair:
    """Two phantoms linked by a known transform; the transform IS the correspondence map."""

    volume_a: ScalarVolume
    labels_a: LabelVolume
    landmarks_a: list
    volume_b: ScalarVolume
    labels_b: LabelVolume
    landmarks_b: list
    transform: RigidTransform | AffineTransform  # physical mm, A -> B
    modality_remap: str = "identity"
    fov_box: Box3 | None = None
    corruptions: tuple = ()


def _random_rotation(rng) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def _fill_ellipsoid(target: np.ndarray, geom: VolumeGeometry, center_mm, axes_mm, rot, value):
    """Assign ``value`` to voxels inside the ellipsoid; returns the membership mask window."""
    spacing = np.asarray(geom.spacing)
    origin = np.asarray(geom.origin)
    c_vox = (np.asarray(center_mm) - origin) / spacing
    reach = np.max(axes_mm) / spacing
    lo = np.maximum(np.floor(c_vox - reach).astype(int) - 1, 0)
    hi = np.minimum(np.ceil(c_vox + reach).astype(int) + 1, np.asarray(geom.dims) - 1)
    if np.any(lo > hi):
        return None
    xs = np.arange(lo[0], hi[0] + 1)
    ys = np.arange(lo[1], hi[1] + 1)
    zs = np.arange(lo[2], hi[2] + 1)
    zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
    pts = np.stack([xx, yy, zz], axis=-1) * spacing + origin - np.asarray(center_mm)
    local = pts @ rot  # rotate into the ellipsoid frame
    inside = ((local / np.asarray(axes_mm)) ** 2).sum(axis=-1) <= 1.0
    window = (slice(lo[2], hi[2] + 1), slice(lo[1], hi[1] + 1), slice(lo[0], hi[0] + 1))
    target[window][inside] = value
    return window, inside


def _add_texture(data: np.ndarray, geom: VolumeGeometry, rng, scale_mm: float, amplitude: float, n_blobs: int = 60):
    spacing = np.asarray(geom.spacing)
    dims = np.asarray(geom.dims)
    for _ in range(n_blobs):
        c_vox = rng.uniform(0, dims - 1)
        sigma_mm = rng.uniform(0.5 * scale_mm, 1.5 * scale_mm)
        amp = rng.uniform(-amplitude, amplitude)
        sig_vox = sigma_mm / spacing
        reach = np.ceil(3 * sig_vox).astype(int)
        lo = np.maximum(np.floor(c_vox - reach).astype(int), 0)
        hi = np.minimum(np.ceil(c_vox + reach).astype(int), dims - 1)
        xs = np.arange(lo[0], hi[0] + 1)
        ys = np.arange(lo[1], hi[1] + 1)
        zs = np.arange(lo[2], hi[2] + 1)
        zz, yy, xx = np.meshgrid(zs, ys, xs, indexing="ij")
        r2 = (
            ((xx - c_vox[0]) / sig_vox[0]) ** 2
            + ((yy - c_vox[1]) / sig_vox[1]) ** 2
            + ((zz - c_vox[2]) / sig_vox[2]) ** 2
        )
        data[lo[2]:hi[2] + 1, lo[1]:hi[1] + 1, lo[0]:hi[0] + 1] += amp * np.exp(-0.5 * r2)


def gen_phantom(spec: PhantomSpec, seed: int | None = None):
    """Generate one phantom: (ScalarVolume, LabelVolume, landmarks).

    Landmarks are (id, Point3-in-mm) tuples: one center plus two axis poles
    per organ.  Deterministic given (spec, seed).
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    geom = VolumeGeometry(spec.dims, (spec.spacing,) * 3, (0.0, 0.0, 0.0))
    dims = np.asarray(spec.dims, dtype=np.float64)
    spacing = np.asarray(geom.spacing)
    extent = dims * spacing
    center = (dims - 1.0) / 2.0 * spacing

    data = np.full(geom.shape_zyx, spec.air_intensity, dtype=np.float64)
    labels = np.zeros(geom.shape_zyx, dtype=np.uint16)

    body_axes = extent * 0.40 * rng.uniform(0.95, 1.05, size=3)
    body_rot = np.eye(3)
    _fill_ellipsoid(data, geom, center, body_axes, body_rot, spec.body_intensity)

    organs = []
    landmarks = []
    lo_i, hi_i = spec.organ_intensity_range
    for k in range(1, spec.n_organs + 1):
        placed = False
        for _ in range(1000):
            u = rng.normal(size=3)
            u /= max(np.linalg.norm(u), 1e-12)
            radius = rng.uniform(0.15, 0.80)
            c = center + u * radius * body_axes
            axes = rng.uniform(spec.organ_axis_range[0], spec.organ_axis_range[1], size=3)
            rot = _random_rotation(rng)
            if all(
                np.linalg.norm(c - oc) > np.max(axes) + np.max(oa) + 1.0
                for oc, oa, _ in organs
            ):
                organs.append((c, axes, rot))
                placed = True
                break
        if not placed:
            raise PlacementFailure(f"could not place organ {k} without overlap")
        if spec.n_organs > 1:
            base = lo_i + (hi_i - lo_i) * (k - 1) / (spec.n_organs - 1)
        else:
            base = (lo_i + hi_i) / 2.0
        c, axes, rot = organs[-1]
        _fill_ellipsoid(data, geom, c, axes, rot, base)
        _fill_ellipsoid(labels, geom, c, axes, rot, k)
        pole = rot[:, 0] * axes[0] * 0.7
        landmarks.append((f"o{k}c", Point3.from_array(c)))
        landmarks.append((f"o{k}p0", Point3.from_array(c + pole)))
        landmarks.append((f"o{k}p1", Point3.from_array(c - pole)))

    _add_texture(data, geom, rng, spec.texture_scale, spec.texture_amplitude)
    np.clip(data, 0.0, 1.0, out=data)
    return (
        ScalarVolume(geom, data.astype(np.float32)),
        LabelVolume(geom, labels),
        landmarks,
    )


def _remap_inverted(v: np.ndarray) -> np.ndarray:
    """Reverse tissue contrast while keeping air dark (rank order of organs flips)."""
    out = v.copy()
    tissue = v > 0.2
    out[tissue] = 1.2 - v[tissue]
    return out


MODALITY_REMAPS = {
    "identity": lambda v: v,
    "inverted": _remap_inverted,
    "gamma": lambda v: np.clip(v, 0.0, None) ** 2.0,
}


def gen_pair(
    spec: PhantomSpec,
    transform: RigidTransform | AffineTransform,
    modality_remap: str = "identity",
    fov_box: Box3 | None = None,
    corruptions=(),
    seed: int | None = None,
) -> PhantomPair:
    """Generate a phantom pair: B is A pushed through ``transform`` (physical mm),
    remapped to a second pseudo-modality, locally corrupted, then FOV-cropped.

    Landmarks of B are exactly the transformed landmarks of A (mm), recorded
    before cropping; cropping only changes the stored grid, not physical
    coordinates.
    """
    if modality_remap not in MODALITY_REMAPS:
        raise ValueError(f"unknown modality remap {modality_remap!r}")
    vol_a, lab_a, lms_a = gen_phantom(spec, seed)
    g = vol_a.geometry

    centers = np.array([[p.x, p.y, p.z] for name, p in lms_a if name.endswith("c")])
    if len(centers):
        moved = transform.apply_array(centers)
        vox = g.physical_to_voxel(moved)
        lim = np.asarray(g.dims, dtype=np.float64) - 1.0
        in_view = np.all((vox >= 0) & (vox <= lim), axis=1)
        if in_view.sum() < 0.5 * len(centers):
            raise InsufficientOverlap("transform pushes most organs out of view")

    inv = transform.inverse()
    ax = [np.arange(g.dims[i], dtype=np.float64) for i in range(3)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    src = g.physical_to_voxel(inv.apply_array(g.voxel_to_physical(pts)))
    coords = [src[:, 2].reshape(zz.shape), src[:, 1].reshape(zz.shape), src[:, 0].reshape(zz.shape)]
    data_b = ndimage.map_coordinates(
        vol_a.data.astype(np.float64), coords, order=1,
        mode="constant", cval=spec.air_intensity,
    )
    labels_b = ndimage.map_coordinates(lab_a.data, coords, order=0, mode="constant", cval=0)

    data_b = MODALITY_REMAPS[modality_remap](data_b)

    lo, hi = float(data_b.min()), float(data_b.max())
    for c in corruptions:
        cv = g.physical_to_voxel(c.center.to_array())
        r2 = (
            ((xx - cv[0]) * g.spacing[0]) ** 2
            + ((yy - cv[1]) * g.spacing[1]) ** 2
            + ((zz - cv[2]) * g.spacing[2]) ** 2
        )
        sphere = r2 <= c.radius**2
        if c.kind == "invert":
            data_b[sphere] = (lo + hi) - data_b[sphere]
        else:
            data_b[sphere] = 0.5 * (lo + hi)

    vol_b = ScalarVolume(g, data_b.astype(np.float32))
    lab_b = LabelVolume(g, labels_b)
    lms_b = [(name, apply(transform, p)) for name, p in lms_a]
    if fov_box is not None:
        vol_b = crop(vol_b, fov_box)
        lab_b = crop(lab_b, fov_box)
    return PhantomPair(
        vol_a, lab_a, lms_a, vol_b, lab_b, lms_b,
        transform, modality_remap, fov_box, tuple(corruptions),
    )
