"""Template-query similarity, nearest-neighbour matching, and fixed-point structural matching.

Matching runs on half-resolution embedding grids; template points and match
results are expressed in full-resolution voxel coordinates of the respective
image grids (twice the embedding-grid index).  Nearest-neighbour argmaxes
break ties toward the smallest (z, y, x) index, so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, OutOfBounds, VoxelMatchError
from .geometry import Point3, fit_affine
from .volume import EmbeddingVolume, ScalarVolume, trilinear_sample_many

__all__ = [
    "EmbeddingSet",
    "SimilarityWeights",
    "FixpointConfig",
    "MatchResult",
    "similarity_map",
    "nn_match",
    "forward_backward",
    "fixed_point_iterate",
    "fixpoint_match",
    "grid_match",
]


@dataclass
class EmbeddingSet:
    """Coarse + fine (+ optional semantic) embedding volumes sharing one half-res grid."""

    coarse: EmbeddingVolume
    fine: EmbeddingVolume
    semantic: EmbeddingVolume | None = None

    def __post_init__(self):
        heads = [self.coarse, self.fine] + ([self.semantic] if self.semantic else [])
        for h in heads:
            if h.geometry != self.coarse.geometry:
                raise ValueError("embedding heads must share one geometry")
            if not h.normalized:
                raise ValueError("embedding heads must be normalized")

    @property
    def geometry(self):
        return self.coarse.geometry


@dataclass(frozen=True)
class SimilarityWeights:
    """Convex combination weights for the per-head inner products."""

    w_coarse: float = 0.5
    w_fine: float = 0.5
    w_semantic: float = 0.0

    def __post_init__(self):
        w = (self.w_coarse, self.w_fine, self.w_semantic)
        if any(x < 0 for x in w):
            raise ValueError("similarity weights must be non-negative")
        if abs(sum(w) - 1.0) > 1e-6:
            raise ValueError("similarity weights must sum to 1")


@dataclass(frozen=True)
class FixpointConfig:
    """Parameters of fixed-point structural matching.

    ``cube_side`` is the seed-cube edge length on the embedding grid (odd);
    ``tau_dis`` is the maximum distance, in full-resolution voxels, between
    the template point and a fixed point that may join the local fit.
    """

    cube_side: int = 5
    tau_dis: float = 5.0
    max_iter: int = 20
    min_points: int = 4

    def __post_init__(self):
        if self.cube_side < 3 or self.cube_side % 2 == 0:
            raise ValueError("cube_side must be an odd integer >= 3")
        if self.tau_dis <= 0:
            raise ValueError("tau_dis must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.min_points < 4:
            raise ValueError("min_points must be >= 4 for the affine fit")


@dataclass
class MatchResult:
    point: Point3            # full-resolution voxel coordinates in the query volume
    similarity: float
    method: str              # "nn" | "fixpoint" | "fixpoint_fallback_nn"
    n_fix: int = 0           # iterations until the center seed converged
    n_fixed_points_used: int = 0


def _as_xyz(p) -> np.ndarray:
    if isinstance(p, Point3):
        return p.to_array()
    return np.asarray(p, dtype=np.float64).reshape(3)


class _PairMatcher:
    """Caches flattened query matrices for repeated NN lookups in both directions."""

    def __init__(self, a: EmbeddingSet, b: EmbeddingSet, w: SimilarityWeights):
        self.a = a
        self.b = b
        self.w = w
        self.heads: list[tuple[str, float]] = []
        for name, weight in (("coarse", w.w_coarse), ("fine", w.w_fine), ("semantic", w.w_semantic)):
            if weight == 0.0:
                continue
            if getattr(a, name) is None or getattr(b, name) is None:
                raise ValueError(f"weight for missing head {name!r} must be zero")
            self.heads.append((name, weight))
        if not self.heads:
            raise ValueError("at least one head must have positive weight")
        self.q_a = self._stack(a)
        self.q_b = self._stack(b)

    def _stack(self, s: EmbeddingSet) -> np.ndarray:
        mats = [
            getattr(s, name).data.reshape(s.geometry.n_voxels, -1).astype(np.float64)
            for name, _ in self.heads
        ]
        return np.concatenate(mats, axis=1)

    def template_vectors(self, s: EmbeddingSet, pts_fullres: np.ndarray) -> np.ndarray:
        """Per-head trilinear samples at half coordinates, weighted and concatenated."""
        nx, ny, nz = s.geometry.dims
        half = np.asarray(pts_fullres, dtype=np.float64).reshape(-1, 3) / 2.0
        lims = np.array([nx - 1, ny - 1, nz - 1], dtype=np.float64)
        if np.any(half < -0.75) or np.any(half > lims + 0.75):
            raise OutOfBounds("template point outside the volume")
        half = np.clip(half, 0.0, lims)
        parts = []
        for name, weight in self.heads:
            parts.append(weight * trilinear_sample_many(getattr(s, name), half))
        return np.concatenate(parts, axis=1)

    def _nn(self, from_set, to_set, q_to, pts) -> tuple[np.ndarray, np.ndarray]:
        v = self.template_vectors(from_set, pts)
        sims = q_to @ v.T  # (n_query_voxels, n_points)
        flat = np.argmax(sims, axis=0)  # first max <=> smallest (z, y, x)
        best = sims[flat, np.arange(sims.shape[1])]
        nx, ny, _ = to_set.geometry.dims
        iz, rem = np.divmod(flat, ny * nx)
        iy, ix = np.divmod(rem, nx)
        matched = np.stack([ix, iy, iz], axis=1).astype(np.float64) * 2.0
        return matched, best

    def nn_a_to_b(self, pts):
        return self._nn(self.a, self.b, self.q_b, pts)

    def nn_b_to_a(self, pts):
        return self._nn(self.b, self.a, self.q_a, pts)

    def similarity_between(self, pts_a, pts_b) -> np.ndarray:
        """Weighted per-head similarity between sample points of A and of B."""
        pa = np.asarray(pts_a, dtype=np.float64).reshape(-1, 3) / 2.0
        pb = np.asarray(pts_b, dtype=np.float64).reshape(-1, 3) / 2.0
        la = np.array(self.a.geometry.dims, dtype=np.float64) - 1.0
        lb = np.array(self.b.geometry.dims, dtype=np.float64) - 1.0
        pa = np.clip(pa, 0.0, la)
        pb = np.clip(pb, 0.0, lb)
        total = np.zeros(len(pa), dtype=np.float64)
        for name, weight in self.heads:
            va = trilinear_sample_many(getattr(self.a, name), pa)
            vb = trilinear_sample_many(getattr(self.b, name), pb)
            total += weight * (va * vb).sum(axis=1)
        return total


def similarity_map(
    template: EmbeddingSet, t, query: EmbeddingSet, w: SimilarityWeights
) -> ScalarVolume:
    """Weighted inner-product map between the template vector at ``t`` and every query voxel."""
    matcher = _PairMatcher(template, query, w)
    v = matcher.template_vectors(template, _as_xyz(t).reshape(1, 3))[0]
    sims = matcher.q_b @ v
    shape = query.geometry.shape_zyx
    return ScalarVolume(query.geometry, sims.reshape(shape).astype(np.float32))


def nn_match(
    template: EmbeddingSet, t, query: EmbeddingSet, w: SimilarityWeights
) -> MatchResult:
    """Argmax of the similarity map, reported in full-resolution query voxels."""
    matcher = _PairMatcher(template, query, w)
    matched, sims = matcher.nn_a_to_b(_as_xyz(t).reshape(1, 3))
    return MatchResult(Point3.from_array(matched[0]), float(sims[0]), "nn")


def forward_backward(t, a: EmbeddingSet, b: EmbeddingSet, w: SimilarityWeights) -> Point3:
    """Match ``t`` into ``b`` and the result back into ``a``."""
    matcher = _PairMatcher(a, b, w)
    fwd, _ = matcher.nn_a_to_b(_as_xyz(t).reshape(1, 3))
    back, _ = matcher.nn_b_to_a(fwd)
    return Point3.from_array(back[0])


def _iterate_map(step, start: tuple, max_iter: int):
    """Iterate a point-to-point map with convergence and revisit detection.

    ``step`` maps a point tuple to ``(next_tuple, forward_similarity)``.
    Returns (status, fixed_point_tuple, trace, fwd_sims, n_converge).
    """
    trace = [start]
    sims: list[float] = []
    seen = {start}
    cur = start
    for i in range(max_iter):
        nxt, fwd = step(cur)
        sims.append(fwd)
        if nxt == cur:
            return "converged", cur, trace, sims, i
        if nxt in seen:
            best = int(np.argmax(np.asarray(sims)))
            return "cycled", trace[best], trace + [nxt], sims, i
        seen.add(nxt)
        trace.append(nxt)
        cur = nxt
    return "exhausted", cur, trace, sims, max_iter


def fixed_point_iterate(
    t0, a: EmbeddingSet, b: EmbeddingSet, w: SimilarityWeights, max_iter: int = 20
) -> tuple[str, Point3, list[Point3]]:
    """Iterate the forward-backward map from ``t0`` until it stops moving.

    Returns ``(status, fixed_point, trace)`` where status is ``converged``
    (the map reached a point it maps to itself), ``cycled`` (an earlier
    point recurred; the trace point with the highest forward similarity is
    reported), or ``exhausted``.
    """
    matcher = _PairMatcher(a, b, w)

    def step(cur: tuple):
        fwd, sim = matcher.nn_a_to_b(np.array([cur], dtype=np.float64))
        back, _ = matcher.nn_b_to_a(fwd)
        return tuple(back[0]), float(sim[0])

    start = tuple(_as_xyz(t0))
    status, fp, trace, _, _ = _iterate_map(step, start, max_iter)
    return status, Point3.from_array(np.asarray(fp)), [Point3.from_array(np.asarray(p)) for p in trace]


def _full_res_limits(s: EmbeddingSet) -> np.ndarray:
    nx, ny, nz = s.geometry.dims
    return 2.0 * (np.array([nx, ny, nz], dtype=np.float64) - 1.0)


def fixpoint_match(
    t,
    a: EmbeddingSet,
    b: EmbeddingSet,
    w: SimilarityWeights,
    cfg: FixpointConfig = FixpointConfig(),
) -> MatchResult:
    """Structural match of ``t`` through the fixed points of the forward-backward map.

    Every voxel of the ``cube_side``-wide cube of embedding-grid points
    around ``t`` is iterated (batched) until it converges, cycles, or the
    iteration budget runs out.  Converged fixed points within ``tau_dis``
    of ``t`` are deduplicated and paired with their forward matches; if at
    least ``min_points`` non-coplanar pairs survive, a local affine fit maps
    ``t`` into the query volume.  Otherwise the plain NN match is returned
    with method ``fixpoint_fallback_nn``.
    """
    t_arr = _as_xyz(t)
    matcher = _PairMatcher(a, b, w)
    nx, ny, nz = a.geometry.dims
    half = (cfg.cube_side - 1) // 2
    center = np.round(t_arr / 2.0).astype(np.int64)
    center = np.clip(center, 0, np.array([nx, ny, nz]) - 1)
    offs = np.arange(-half, half + 1)
    gx, gy, gz = np.meshgrid(offs, offs, offs, indexing="ij")
    cube = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1) + center
    cube = np.clip(cube, 0, np.array([nx, ny, nz]) - 1)
    seeds = np.unique(cube, axis=0).astype(np.float64) * 2.0
    center_seed = tuple(center.astype(np.float64) * 2.0)

    cur = [tuple(s) for s in seeds]
    center_idx = cur.index(center_seed)
    seen = [{c} for c in cur]
    alive = list(range(len(cur)))
    pairs: dict[tuple, tuple] = {}
    n_fix_center = cfg.max_iter
    for it in range(cfg.max_iter):
        if not alive:
            break
        pts = np.array([cur[i] for i in alive], dtype=np.float64)
        fwd, _ = matcher.nn_a_to_b(pts)
        back, _ = matcher.nn_b_to_a(fwd)
        next_alive = []
        for row, i in enumerate(alive):
            nxt = tuple(back[row])
            if nxt == cur[i]:
                pairs.setdefault(cur[i], tuple(fwd[row]))
                if i == center_idx:
                    n_fix_center = it
                continue
            if nxt in seen[i]:
                continue  # revisit without convergence: drop the seed
            seen[i].add(nxt)
            cur[i] = nxt
            next_alive.append(i)
        alive = next_alive

    kept = [
        (np.asarray(fp), np.asarray(fw))
        for fp, fw in sorted(pairs.items())
        if np.linalg.norm(np.asarray(fp) - t_arr) <= cfg.tau_dis
    ]
    if len(kept) >= cfg.min_points:
        src = np.array([k[0] for k in kept])
        dst = np.array([k[1] for k in kept])
        try:
            aff, _ = fit_affine(src, dst)
        except DegenerateGeometry:
            aff = None
        if aff is not None:
            q = aff.apply_array(t_arr.reshape(1, 3))[0]
            q = np.clip(q, 0.0, _full_res_limits(b))
            sim = float(matcher.similarity_between(t_arr.reshape(1, 3), q.reshape(1, 3))[0])
            return MatchResult(
                Point3.from_array(q), sim, "fixpoint", n_fix_center, len(kept)
            )
    matched, sims = matcher.nn_a_to_b(t_arr.reshape(1, 3))
    return MatchResult(
        Point3.from_array(matched[0]), float(sims[0]), "fixpoint_fallback_nn",
        n_fix_center, 0,
    )


def grid_match(
    points,
    a: EmbeddingSet,
    b: EmbeddingSet,
    w: SimilarityWeights,
    cfg: FixpointConfig | None = None,
) -> list[MatchResult | None]:
    """Match a list of template points; failed elements come back as ``None``.

    With ``cfg=None`` all points go through one batched NN lookup; otherwise
    each point runs fixed-point matching.
    """
    pts = [_as_xyz(p) for p in points]
    if not pts:
        return []
    if cfg is None:
        matcher = _PairMatcher(a, b, w)
        results: list[MatchResult | None] = []
        arr = np.array(pts, dtype=np.float64)
        try:
            matched, sims = matcher.nn_a_to_b(arr)
        except OutOfBounds:
            # match per point so in-bounds elements still succeed
            matched = None
        if matched is not None:
            return [
                MatchResult(Point3.from_array(matched[i]), float(sims[i]), "nn")
                for i in range(len(pts))
            ]
        for p in pts:
            try:
                m, s = matcher.nn_a_to_b(p.reshape(1, 3))
                results.append(MatchResult(Point3.from_array(m[0]), float(s[0]), "nn"))
            except VoxelMatchError:
                results.append(None)
        return results
    out: list[MatchResult | None] = []
    for p in pts:
        try:
            out.append(fixpoint_match(p, a, b, w, cfg))
        except VoxelMatchError:
            out.append(None)
    return out
