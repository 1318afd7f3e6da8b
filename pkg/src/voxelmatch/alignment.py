"""Cross-modality alignment: grid matching, trimmed rigid fit, margin-scheduled
cropping, a pluggable deformable-refinement hook, and the outer retraining loop.

One alignment step matches grid points of the small-FOV (moving) scan into the
large-FOV (fixed) scan, fits a rigid transform to the survivors, and crops the
fixed scan around the transformed moving body box plus a margin.  The outer
loop retrains the embedding model on the registered pairs and repeats with a
smaller margin.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import BackendFailure, EmptyMask, TooFewMatches
from .geometry import Point3, RigidTransform, fit_rigid_trimmed
from .matching import EmbeddingSet, FixpointConfig, SimilarityWeights, grid_match
from .metrics import LandmarkPairSet, evaluate
from .model import ProjectionModel, TrainConfig, embed, train
from .volume import (
    Box3,
    LabelVolume,
    ScalarVolume,
    body_mask,
    crop,
    dilate_box,
    mask_bbox,
)

__all__ = [
    "AlignConfig",
    "AlignProvenance",
    "RegisteredPair",
    "CrossPair",
    "RoundMetrics",
    "register_and_crop",
    "register_deformable",
    "identity_backend",
    "apply_displacement",
    "iterate_alignment",
    "format_metrics_table",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AlignConfig:
    grid_spacing: int = 8            # embedding-grid voxels between match seeds
    similarity_floor: float = 0.5    # matches below this are discarded
    trim_fraction: float = 0.2
    margins: tuple[int, ...] = (10, 5, 1)  # working-grid voxels, one per retraining round
    matcher: str = "nn"              # "nn" | "fixpoint"
    body_threshold: float = 0.2

    def __post_init__(self):
        if self.grid_spacing < 2:
            raise ValueError("grid_spacing must be >= 2")
        if any(a < b for a, b in zip(self.margins, self.margins[1:])):
            raise ValueError("margins must be non-increasing")
        if self.matcher not in ("nn", "fixpoint"):
            raise ValueError(f"unknown matcher {self.matcher!r}")


@dataclass
class AlignProvenance:
    round_index: int
    margin: int
    n_grid: int
    n_accepted: int
    inlier_count: int
    mean_residual_mm: float


@dataclass
class RegisteredPair:
    fixed_crop: ScalarVolume
    moving: ScalarVolume
    rigid: RigidTransform          # moving -> fixed, physical mm
    overlap_mask: LabelVolume      # on the fixed-crop grid
    provenance: AlignProvenance


@dataclass
class CrossPair:
    """One unregistered cross-modality case, optionally with truth landmarks (mm)."""

    fixed: ScalarVolume
    moving: ScalarVolume
    fixed_landmarks: list | None = None
    moving_landmarks: list | None = None
    pair_id: str = ""


@dataclass
class RoundMetrics:
    round_index: int
    pair_id: str
    inliers: int
    mean_residual_mm: float
    med_mm: float | None = None


def _grid_points(mask: LabelVolume, spacing_half: int) -> np.ndarray:
    """Full-resolution voxel coordinates of an evenly spaced embedding-grid lattice
    restricted to the mask."""
    nx, ny, nz = mask.geometry.dims
    hx = np.arange(0, (nx + 1) // 2, spacing_half)
    hy = np.arange(0, (ny + 1) // 2, spacing_half)
    hz = np.arange(0, (nz + 1) // 2, spacing_half)
    gx, gy, gz = np.meshgrid(hx, hy, hz, indexing="ij")
    pts_full = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) * 2
    keep = []
    data = mask.data
    for p in pts_full:
        ix = min(int(p[0]), nx - 1)
        iy = min(int(p[1]), ny - 1)
        iz = min(int(p[2]), nz - 1)
        if data[iz, iy, ix]:
            keep.append((ix, iy, iz))
    return np.asarray(keep, dtype=np.float64)


def register_and_crop(
    fixed: ScalarVolume,
    moving: ScalarVolume,
    model: ProjectionModel,
    cfg: AlignConfig,
    margin: int,
    fixed_set: EmbeddingSet | None = None,
    moving_set: EmbeddingSet | None = None,
    weights: SimilarityWeights = SimilarityWeights(),
    fixpoint_cfg: FixpointConfig | None = None,
    round_index: int = 0,
) -> RegisteredPair:
    """One alignment step: grid match, trimmed rigid fit, margin-dilated crop.

    Both volumes are taken at working resolution.  Raises ``TooFewMatches``
    when fewer than three grid matches clear the similarity floor.
    """
    mask = body_mask(moving, cfg.body_threshold)
    if moving_set is None:
        moving_set = embed(moving, model)
    if fixed_set is None:
        fixed_set = embed(fixed, model)
    pts = _grid_points(mask, cfg.grid_spacing)
    if len(pts) == 0:
        raise EmptyMask("body mask holds no grid points")
    fp_cfg = fixpoint_cfg if cfg.matcher == "fixpoint" else None
    if cfg.matcher == "fixpoint" and fp_cfg is None:
        fp_cfg = FixpointConfig()
    results = grid_match(pts, moving_set, fixed_set, weights, fp_cfg)
    src, dst = [], []
    for p, r in zip(pts, results):
        if r is None or r.similarity < cfg.similarity_floor:
            continue
        src.append(p)
        dst.append([r.point.x, r.point.y, r.point.z])
    if len(src) < 3:
        raise TooFewMatches(
            f"{len(src)} of {len(pts)} grid matches cleared the floor {cfg.similarity_floor}"
        )
    src_mm = moving.geometry.voxel_to_physical(np.asarray(src))
    dst_mm = fixed.geometry.voxel_to_physical(np.asarray(dst))
    rigid, report = fit_rigid_trimmed(src_mm, dst_mm, cfg.trim_fraction)
    inliers = int(report.inlier_mask.sum())
    mean_resid = float(np.sqrt(report.residual_sum_squares / max(inliers, 1)))

    bbox = mask_bbox(mask)
    corners_vox = np.array(
        [[x, y, z] for x in (bbox.min[0], bbox.max[0])
         for y in (bbox.min[1], bbox.max[1])
         for z in (bbox.min[2], bbox.max[2])],
        dtype=np.float64,
    )
    corners_fixed = fixed.geometry.physical_to_voxel(
        rigid.apply_array(moving.geometry.voxel_to_physical(corners_vox))
    )
    lo = np.floor(corners_fixed.min(axis=0)).astype(int)
    hi = np.ceil(corners_fixed.max(axis=0)).astype(int)
    lo = np.clip(lo, 0, np.asarray(fixed.geometry.dims) - 1)
    hi = np.clip(hi, 0, np.asarray(fixed.geometry.dims) - 1)
    box = dilate_box(Box3(tuple(lo), tuple(hi)), margin, fixed.geometry.dims)
    fixed_crop = crop(fixed, box)

    gc = fixed_crop.geometry
    ax = [np.arange(gc.dims[i], dtype=np.float64) for i in range(3)]
    zz, yy, xx = np.meshgrid(ax[2], ax[1], ax[0], indexing="ij")
    vox = np.stack([xx.ravel(), yy.ravel(), zz.ravel()], axis=1)
    back = moving.geometry.physical_to_voxel(
        rigid.inverse().apply_array(gc.voxel_to_physical(vox))
    )
    lim = np.asarray(moving.geometry.dims, dtype=np.float64) - 1.0
    overlap = np.all((back >= -1e-9) & (back <= lim + 1e-9), axis=1)
    overlap_mask = LabelVolume(gc, overlap.reshape(gc.shape_zyx).astype(np.uint16))

    return RegisteredPair(
        fixed_crop=fixed_crop,
        moving=moving,
        rigid=rigid,
        overlap_mask=overlap_mask,
        provenance=AlignProvenance(
            round_index, margin, len(pts), len(src), inliers, mean_resid
        ),
    )


def identity_backend(pair: RegisteredPair) -> np.ndarray:
    """Default deformable backend: the zero displacement field."""
    return np.zeros((*pair.fixed_crop.geometry.shape_zyx, 3), dtype=np.float64)


def register_deformable(pair: RegisteredPair, backend=None) -> np.ndarray:
    """Run a pluggable deformable-refinement backend.

    The backend receives the registered pair and must return a finite
    (nz, ny, nx, 3) mm displacement field on the fixed-crop grid.
    """
    backend = backend or identity_backend
    try:
        fieldv = np.asarray(backend(pair), dtype=np.float64)
    except Exception as exc:  # noqa: BLE001 - backend is third-party code
        raise BackendFailure(f"deformable backend raised: {exc}") from exc
    expected = (*pair.fixed_crop.geometry.shape_zyx, 3)
    if fieldv.shape != expected:
        raise BackendFailure(f"field shape {fieldv.shape}, expected {expected}")
    if not np.all(np.isfinite(fieldv)):
        raise BackendFailure("field contains non-finite values")
    return fieldv


def apply_displacement(points_mm: np.ndarray, fieldv: np.ndarray, geometry) -> np.ndarray:
    """Shift physical points by the field value at their (nearest) voxel."""
    pts = np.asarray(points_mm, dtype=np.float64).reshape(-1, 3)
    vox = np.round(geometry.physical_to_voxel(pts)).astype(int)
    vox = np.clip(vox, 0, np.asarray(geometry.dims) - 1)
    shifts = fieldv[vox[:, 2], vox[:, 1], vox[:, 0]]
    return pts + shifts


def _pair_med(rigid: RigidTransform, pair: CrossPair) -> float | None:
    if not pair.fixed_landmarks or not pair.moving_landmarks:
        return None
    fixed_by_id = dict(pair.fixed_landmarks)
    pred, true = [], []
    for name, p in pair.moving_landmarks:
        if name not in fixed_by_id:
            continue
        moved = rigid.apply_array(p.to_array())
        pred.append(Point3.from_array(moved))
        true.append(fixed_by_id[name])
    if not pred:
        return None
    return evaluate(LandmarkPairSet(pred, true)).med


def iterate_alignment(
    pairs: list,
    train_cfg: TrainConfig,
    align_cfg: AlignConfig = AlignConfig(),
    augment_spec=None,
    weights: SimilarityWeights = SimilarityWeights(),
    fixpoint_cfg: FixpointConfig | None = None,
):
    """Bootstrap + margin-scheduled retraining over cross-modality pairs.

    Round 0 trains an intensity-agnostic model with aggressive augmentation
    on all individual volumes.  Each subsequent round aligns every pair with
    the latest model and the round's margin, then retrains on alternating
    self-supervised and registered-pair batches.  A pair whose alignment
    fails is skipped with a warning, never aborting the round.  Returns the
    model sequence (k = 0..len(margins)) and per-round metrics rows.
    """
    if not pairs:
        raise EmptyMask("no cross-modality pairs given")
    vols = [p.fixed for p in pairs] + [p.moving for p in pairs]
    model0, _ = train(vols, train_cfg, mode="aggressive", augment_spec=augment_spec)
    model0.round_index = 0
    models = [model0]
    rows: list[RoundMetrics] = []
    for j, margin in enumerate(align_cfg.margins):
        registered = []
        for pair in pairs:
            try:
                reg = register_and_crop(
                    pair.fixed, pair.moving, models[-1], align_cfg, margin,
                    weights=weights, fixpoint_cfg=fixpoint_cfg, round_index=j,
                )
            except (TooFewMatches, EmptyMask) as exc:
                log.warning("alignment skipped pair %s in round %d: %s", pair.pair_id, j, exc)
                continue
            registered.append(reg)
            rows.append(
                RoundMetrics(
                    j, pair.pair_id, reg.provenance.inlier_count,
                    reg.provenance.mean_residual_mm, _pair_med(reg.rigid, pair),
                )
            )
        round_cfg = replace(train_cfg, seed=train_cfg.seed + 1000 * (j + 1))
        next_model, _ = train(
            vols, round_cfg, mode="paired", augment_spec=augment_spec,
            registered_pairs=registered, init=models[-1],
        )
        next_model.round_index = j + 1
        models.append(next_model)
    return models, rows


def format_metrics_table(rows: list) -> str:
    """Line-oriented text table: k, pair id, inliers, residual mm, MED mm."""
    out = ["k pair inliers residual_mm med_mm"]
    for r in rows:
        med = "nan" if r.med_mm is None else f"{r.med_mm:.6g}"
        out.append(
            f"{r.round_index} {r.pair_id or '-'} {r.inliers} {r.mean_residual_mm:.6g} {med}"
        )
    return "\n".join(out)
