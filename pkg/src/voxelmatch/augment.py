"""Intensity and geometric augmentations plus overlapping-patch pair extraction.

Geometric transforms are recorded exactly, so corresponding voxels of the two
patches of a pair can always be mapped onto each other; intensity transforms
never move geometry.  Everything is deterministic given (input, spec, seed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .errors import InsufficientOverlap, VolumeTooSmall
from .geometry import AffineTransform, rotation_matrix
from .volume import Box3, LabelVolume, ScalarVolume, VolumeGeometry, crop

__all__ = [
    "AugmentSpec",
    "PatchPair",
    "bezier_intensity",
    "intensity_reverse",
    "geometric_augment",
    "warp",
    "sample_patch_pair",
]

IDENTITY_BEZIER = (1.0 / 3.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0)


@dataclass(frozen=True)
class AugmentSpec:
    """Augmentation parameters.

    ``bezier_control_points`` is (x1, y1, x2, y2) for the two interior
    control points of a unit-square cubic curve through (0,0) and (1,1);
    ``None`` draws fresh controls per patch (sorted, hence monotone, unless
    ``aggressive`` is set, which also enables intensity reversal).
    """

    seed: int = 0
    bezier_control_points: tuple[float, float, float, float] | None = None
    reverse_probability: float = 0.5
    rotation_degrees: float = 10.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    blur_sigma_range: tuple[float, float] = (0.0, 1.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.02)
    aggressive: bool = False
    patch_size: tuple[int, int, int] = (32, 32, 32)
    min_overlap: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.reverse_probability <= 1.0:
            raise ValueError("reverse_probability must lie in [0, 1]")
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError("scale_range must be positive and ordered")
        if not 0.0 < self.min_overlap <= 1.0:
            raise ValueError("min_overlap must lie in (0, 1]")


@dataclass
class PatchPair:
    """Two overlapping, independently augmented patches with exact correspondence.

    ``map_ab`` sends physical coordinates of patch A onto patch B;
    ``overlap_a`` marks the patch-A voxels whose source location is seen by
    both patches and lands inside patch B.
    """

    patch_a: ScalarVolume
    patch_b: ScalarVolume
    map_ab: AffineTransform
    overlap_a: np.ndarray
    labels_a: LabelVolume | None = None
    labels_b: LabelVolume | None = None
    overlap_b: np.ndarray | None = None

    def a_to_b_voxels(self, pts_a) -> np.ndarray:
        """Map (N, 3) patch-A voxel coordinates to patch-B voxel coordinates."""
        phys = self.patch_a.geometry.voxel_to_physical(pts_a)
        return self.patch_b.geometry.physical_to_voxel(self.map_ab.apply_array(phys))

    def b_to_a_voxels(self, pts_b) -> np.ndarray:
        phys = self.patch_b.geometry.voxel_to_physical(pts_b)
        return self.patch_a.geometry.physical_to_voxel(
            self.map_ab.inverse().apply_array(phys)
        )


def _bezier_curve(control: tuple[float, float, float, float], n: int = 1025):
    x1, y1, x2, y2 = control
    t = np.linspace(0.0, 1.0, n)
    omt = 1.0 - t
    b1 = 3.0 * t * omt * omt
    b2 = 3.0 * t * t * omt
    b3 = t * t * t
    xs = b1 * x1 + b2 * x2 + b3
    ys = b1 * y1 + b2 * y2 + b3
    order = np.argsort(xs, kind="stable")
    return xs[order], ys[order]


def bezier_intensity(vol: ScalarVolume, control=None, seed: int = 0) -> ScalarVolume:
    """Map intensities through a cubic curve pinned at (0,0) and (1,1).

    The volume is min-max rescaled to [0, 1], pushed through the curve, and
    rescaled back.  A constant volume maps to itself.  The curve is monotone
    when the control points are sorted along both axes.
    """
    if control is None:
        control = tuple(np.random.default_rng(seed).uniform(0.0, 1.0, 4))
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    if hi - lo <= 0.0:
        return ScalarVolume(vol.geometry, vol.data.copy())
    xs, ys = _bezier_curve(tuple(float(c) for c in control))
    u = (vol.data.astype(np.float64) - lo) / (hi - lo)
    mapped = np.interp(u.ravel(), xs, ys).reshape(vol.data.shape)
    return ScalarVolume(vol.geometry, (lo + mapped * (hi - lo)).astype(np.float32))


def intensity_reverse(vol: ScalarVolume) -> ScalarVolume:
    """Reflect intensities: v -> (max + min) - v.  An involution."""
    lo = float(vol.data.min())
    hi = float(vol.data.max())
    return ScalarVolume(vol.geometry, ((lo + hi) - vol.data.astype(np.float64)).astype(np.float32))


def _source_coords(geometry: VolumeGeometry, transform: AffineTransform) -> list[np.ndarray]:
    """Per-axis (z, y, x) source indices of the inverse-mapped output grid.

    Coordinates within 1e-6 of the valid range are snapped onto it, so exact
    grid-to-grid motions do not leak into the outside-fill path through
    rounding in the matrix entries.
    """
    inv = transform.inverse()
    shape = geometry.shape_zyx
    ax = [np.arange(geometry.dims[i], dtype=np.float64) for i in range(3)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    src = geometry.physical_to_voxel(inv.apply_array(geometry.voxel_to_physical(pts)))
    for i in range(3):
        lim = geometry.dims[i] - 1.0
        c = src[:, i]
        near = (c > -1e-6) & (c < lim + 1e-6)
        src[near, i] = np.clip(c[near], 0.0, lim)
    return [src[:, 2].reshape(shape), src[:, 1].reshape(shape), src[:, 0].reshape(shape)]


def warp(vol: ScalarVolume, transform: AffineTransform, order: int = 1) -> ScalarVolume:
    """Resample a volume under a physical-space affine: out(y) = in(T^-1 y).

    Voxels whose pre-image leaves the input grid are filled with the input
    minimum.  ``order=0`` gives nearest-neighbour lookup for label data.
    """
    coords = _source_coords(vol.geometry, transform)
    out = ndimage.map_coordinates(
        vol.data.astype(np.float64), coords, order=order,
        mode="constant", cval=float(vol.data.min()),
    )
    return ScalarVolume(vol.geometry, out.astype(np.float32))


def _warp_labels(lab: LabelVolume, transform: AffineTransform) -> LabelVolume:
    coords = _source_coords(lab.geometry, transform)
    out = ndimage.map_coordinates(lab.data, coords, order=0, mode="constant", cval=0)
    return LabelVolume(lab.geometry, out)


def geometric_augment(
    vol: ScalarVolume, spec: AugmentSpec, seed: int
) -> tuple[ScalarVolume, AffineTransform]:
    """Random rotation/scale about the volume center plus blur and noise.

    Returns the augmented volume and the exact physical-space transform that
    was applied, so landmark positions can be propagated.
    """
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= max(np.linalg.norm(axis), 1e-12)
    angle = math.radians(rng.uniform(-spec.rotation_degrees, spec.rotation_degrees))
    scale = rng.uniform(spec.scale_range[0], spec.scale_range[1])
    blur = rng.uniform(spec.blur_sigma_range[0], spec.blur_sigma_range[1])
    noise = rng.uniform(spec.noise_sigma_range[0], spec.noise_sigma_range[1])

    g = vol.geometry
    center = np.asarray(g.origin) + (np.asarray(g.dims, dtype=np.float64) - 1.0) / 2.0 * np.asarray(g.spacing)
    linear = scale * rotation_matrix(axis, angle)
    transform = AffineTransform(linear, center - linear @ center)
    identity = (
        abs(angle) < 1e-12 and abs(scale - 1.0) < 1e-12
    )
    out = ScalarVolume(g, vol.data.copy()) if identity else warp(vol, transform)
    data = out.data.astype(np.float64)
    if blur > 1e-6:
        data = ndimage.gaussian_filter(data, sigma=blur, mode="nearest")
    if noise > 1e-12:
        data = data + rng.normal(0.0, noise, size=data.shape)
    return ScalarVolume(g, data.astype(np.float32)), transform


def _intensity_augment(vol: ScalarVolume, spec: AugmentSpec, rng) -> ScalarVolume:
    if spec.aggressive:
        control = tuple(rng.uniform(0.0, 1.0, 4))
        out = bezier_intensity(vol, control)
        if rng.uniform() < spec.reverse_probability:
            out = intensity_reverse(out)
        return out
    if spec.bezier_control_points is not None:
        return bezier_intensity(vol, spec.bezier_control_points)
    raw = rng.uniform(0.0, 1.0, 4)
    control = (min(raw[0], raw[2]), min(raw[1], raw[3]), max(raw[0], raw[2]), max(raw[1], raw[3]))
    return bezier_intensity(vol, control)


def sample_patch_pair(
    vol: ScalarVolume,
    labels: LabelVolume | None,
    spec: AugmentSpec,
    seed: int,
) -> PatchPair:
    """Extract two overlapping patches and augment them independently.

    The geometric transforms and window offsets are composed into one exact
    physical correspondence; with ``aggressive`` augmentation the intensity
    of each patch is additionally bent and possibly reversed, which leaves
    the correspondence untouched.
    """
    g = vol.geometry
    ps = spec.patch_size
    if any(ps[i] > g.dims[i] for i in range(3)):
        raise VolumeTooSmall(f"patch {ps} exceeds volume dims {g.dims}")
    rng = np.random.default_rng(seed)
    max_off = [g.dims[i] - ps[i] for i in range(3)]
    target = spec.min_overlap * ps[0] * ps[1] * ps[2]
    o_a = o_b = None
    for _ in range(200):
        ca = [int(rng.integers(0, m + 1)) for m in max_off]
        cb = [int(rng.integers(0, m + 1)) for m in max_off]
        span = 1
        for i in range(3):
            lo = max(ca[i], cb[i])
            hi = min(ca[i] + ps[i], cb[i] + ps[i])
            span *= max(0, hi - lo)
        if span >= target:
            o_a, o_b = ca, cb
            break
    if o_a is None:
        o_a = o_b = [m // 2 for m in max_off]  # fully overlapping fallback

    def window(offset):
        box = Box3(tuple(offset), tuple(offset[i] + ps[i] - 1 for i in range(3)))
        return crop(vol, box), (crop(labels, box) if labels is not None else None)

    win_a, lab_a = window(o_a)
    win_b, lab_b = window(o_b)
    aug_a, t_a = geometric_augment(win_a, spec, int(rng.integers(2**63)))
    aug_b, t_b = geometric_augment(win_b, spec, int(rng.integers(2**63)))
    aug_a = _intensity_augment(aug_a, spec, rng)
    aug_b = _intensity_augment(aug_b, spec, rng)
    if lab_a is not None:
        lab_a = _warp_labels(lab_a, t_a)
        lab_b = _warp_labels(lab_b, t_b)
    map_ab = t_b.compose(t_a.inverse())

    overlap_a = _overlap_mask(aug_a.geometry, t_a, win_a.geometry, win_b.geometry, aug_b.geometry, map_ab)
    if not overlap_a.any():
        raise InsufficientOverlap("augmented patches share no usable overlap")
    overlap_b = _overlap_mask(
        aug_b.geometry, t_b, win_b.geometry, win_a.geometry, aug_a.geometry, map_ab.inverse()
    )
    return PatchPair(aug_a, aug_b, map_ab, overlap_a, lab_a, lab_b, overlap_b)


def _overlap_mask(
    geom_self: VolumeGeometry,
    t_self: AffineTransform,
    win_self: VolumeGeometry,
    win_other: VolumeGeometry,
    geom_other: VolumeGeometry,
    map_self_other: AffineTransform,
) -> np.ndarray:
    """Voxels of an augmented patch whose source is seen by both windows and
    whose image lands inside the other patch grid."""
    ax = [np.arange(geom_self.dims[i], dtype=np.float64) for i in range(3)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    pts = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    phys = geom_self.voxel_to_physical(pts)
    source = t_self.inverse().apply_array(phys)

    def inside(geometry, p):
        v = geometry.physical_to_voxel(p)
        lim = np.asarray(geometry.dims, dtype=np.float64) - 1.0
        return np.all((v >= -1e-9) & (v <= lim + 1e-9), axis=1)

    ok = inside(win_self, source) & inside(win_other, source)
    mapped = geom_other.physical_to_voxel(map_self_other.apply_array(phys))
    lim = np.asarray(geom_other.dims, dtype=np.float64) - 1.0
    ok &= np.all((mapped >= -1e-9) & (mapped <= lim + 1e-9), axis=1)
    return ok.reshape(geom_self.shape_zyx)
