"""Mid-Fusion: two-view feature volume, keypoint heatmap fields, coarse-to-fine.

Grid layout: a :class:`VolumeSpec` is a regular lattice of voxel centers
aligned with the reference-camera axes. ``dims`` and ``cell`` are given per
camera axis (x, y, z). Voxel ``(i, j, k)`` sits at
``center + (idx - (dims - 1) / 2) * cell``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import EmptyField, InvalidPose, OutOfVolume
from .fusion import Keypoints3D
from .geometry import CameraView, Pose, pixel_rays, project_to_so3, relative, transform
from .scene import FeatureMap, ObjectModel
from .solver import kabsch

KL_FLOOR = 1e-12
COARSE_CELL = 0.01
COARSE_HALF_EXTENT = 0.3
FINE_CELL = 0.005
FINE_EXTENT_FACTOR = 0.75
DEFAULT_GUESS_DEPTH = 0.9
DEFAULT_TARGET_SIGMA = 0.02  # meters at the coarse level, halved at the fine one


@dataclass(frozen=True, eq=False)
class VolumeSpec:
    center: np.ndarray
    dims: tuple[int, int, int]
    cell: tuple[float, float, float]

    def __post_init__(self):
        center = np.asarray(self.center, dtype=float).reshape(3)
        dims = tuple(int(d) for d in self.dims)
        cell = tuple(float(c) for c in np.broadcast_to(np.asarray(self.cell, dtype=float), (3,)))
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError("need at least 2 voxels per axis")
        if min(cell) <= 0:
            raise ValueError("cell size must be positive")
        center.setflags(write=False)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "cell", cell)

    @classmethod
    def from_range(cls, center, half_extent, cell) -> "VolumeSpec":
        half = np.broadcast_to(np.asarray(half_extent, dtype=float), (3,))
        cell = np.broadcast_to(np.asarray(cell, dtype=float), (3,))
        dims = tuple(max(2, int(round(2 * h / c))) for h, c in zip(half, cell))
        return cls(center, dims, tuple(cell))

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def first_node(self) -> np.ndarray:
        return self.center - (np.array(self.dims) - 1) / 2.0 * np.array(self.cell)

    def axis_coords(self) -> list[np.ndarray]:
        lo, c = self.first_node, self.cell
        return [lo[a] + np.arange(self.dims[a]) * c[a] for a in range(3)]

    def node_coords(self) -> np.ndarray:
        """Voxel-center positions, shape ``dims + (3,)``."""
        xs, ys, zs = self.axis_coords()
        g = np.meshgrid(xs, ys, zs, indexing="ij")
        return np.stack(g, axis=-1)

    def outer_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        half = np.array(self.dims) * np.array(self.cell) / 2.0
        return self.center - half, self.center + half


@dataclass(frozen=True, eq=False)
class FeatureVolume:
    """Per-voxel concatenation of the reference and query features.

    ``ref_pixel`` / ``query_pixel`` record the flat pixel index each voxel
    sampled (-1 when it projected behind the camera or outside the image, in
    which case that half holds zeros). The dense ``features`` array, shape
    ``dims + (2C,)``, is gathered from the two maps on first access; the
    regularizers only pull the voxels they need through :meth:`gather`.
    """

    spec: VolumeSpec
    ref_pixel: np.ndarray  # dims, int
    query_pixel: np.ndarray  # dims, int
    ref_map: FeatureMap
    query_map: FeatureMap
    ref_view: CameraView
    query_view: CameraView

    @property
    def channels(self) -> int:
        return self.ref_map.channels

    def _side(self, which: str):
        if which == "ref":
            return self.ref_pixel, self.ref_map
        if which == "query":
            return self.query_pixel, self.query_map
        raise ValueError(f"unknown half {which!r}")

    def gather(self, which: str, mask: np.ndarray | None = None) -> np.ndarray:
        """Features of one half at the voxels selected by ``mask`` (all if None)."""
        pix, fmap = self._side(which)
        pix = pix.ravel() if mask is None else pix[mask]
        out = fmap.data.reshape(-1, fmap.channels)[np.maximum(pix, 0)]
        out[pix < 0] = 0.0
        return out

    @cached_property
    def features(self) -> np.ndarray:
        both = np.concatenate([self.gather("ref"), self.gather("query")], axis=1)
        return both.reshape(self.spec.dims + (2 * self.channels,))

    def half(self, which: str) -> np.ndarray:
        c = self.channels
        return self.features[..., :c] if which == "ref" else self.features[..., c:]

    def informative(self, which: str) -> np.ndarray:
        """Voxels whose ``which`` half carries an object descriptor."""
        pix, fmap = self._side(which)
        ok = pix >= 0
        ok[ok] = fmap.mask.ravel()[pix[ok]]
        return ok


@dataclass(frozen=True, eq=False)
class HeatmapField:
    """Per-keypoint probability mass over the voxel grid, shape ``(N,) + dims``."""

    spec: VolumeSpec
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape[1:] != self.spec.dims:
            raise ValueError(f"field shape {v.shape} does not match grid {self.spec.dims}")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite and nonnegative")
        sums = v.reshape(len(v), -1).sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ValueError("each keypoint field must sum to 1")
        object.__setattr__(self, "values", v)

    @classmethod
    def from_scores(cls, spec: VolumeSpec, scores) -> "HeatmapField":
        """Normalize nonnegative raw scores per keypoint."""
        s = np.asarray(scores, dtype=float)
        totals = s.reshape(len(s), -1).sum(axis=1)
        bad = ~(totals > 0) | ~np.isfinite(totals)
        if bad.any():
            raise EmptyField(f"no support for keypoint(s) {np.flatnonzero(bad).tolist()}")
        return cls(spec, s / totals.reshape((-1,) + (1,) * (s.ndim - 1)))

    @property
    def n_keypoints(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class TargetHeatmap:
    """Isotropic Gaussian target centered on a posed model keypoint."""

    mean: tuple[float, float, float]
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


# ---------------------------------------------------------------------------
# Volume construction
# ---------------------------------------------------------------------------


def _sample_pixels(view: CameraView, to_view: Pose | None, nodes: np.ndarray) -> np.ndarray:
    """Flat index of the nearest pixel for each node, -1 when it misses."""
    pc = nodes if to_view is None else transform(to_view, nodes)
    k = view.intrinsics
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = np.floor(k.fx * pc[:, 0] / z + k.cx + 0.5)
        row = np.floor(k.fy * pc[:, 1] / z + k.cy + 0.5)
    ok = (z > 1e-9) & (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)
    return np.where(ok, row * k.width + col, -1).astype(np.int64)


def build_volume(f_ref: FeatureMap, f_query: FeatureMap, ref: CameraView, query: CameraView, spec: VolumeSpec) -> FeatureVolume:
    """Copy the nearest-pixel feature of both views into every voxel.

    Voxel centers live in the reference-camera frame.
    """
    if f_query.channels != f_ref.channels:
        raise ValueError("feature maps disagree on channel count")
    for fmap, view in ((f_ref, ref), (f_query, query)):
        if (fmap.width, fmap.height) != (view.intrinsics.width, view.intrinsics.height):
            raise ValueError("feature map size does not match its camera")
    nodes = spec.node_coords().reshape(-1, 3)
    pr = _sample_pixels(ref, None, nodes).reshape(spec.dims)
    pq = _sample_pixels(query, relative(ref, query), nodes).reshape(spec.dims)
    return FeatureVolume(spec, pr, pq, f_ref, f_query, ref, query)


# ---------------------------------------------------------------------------
# Regularizers: FeatureVolume -> HeatmapField
# ---------------------------------------------------------------------------


class Regularizer(Protocol):
    def __call__(self, vol: FeatureVolume, model: ObjectModel) -> HeatmapField: ...


def _consistency(vol: FeatureVolume, tau_c: float):
    """``(ok, c, dec_ref, dec_query)``: the mask of voxels informative in both
    views, then consistency and decoded coordinates at those voxels only."""
    ok = vol.informative("ref") & vol.informative("query")
    dr = vol.gather("ref", ok)[:, :3]
    dq = vol.gather("query", ok)[:, :3]
    c = np.exp(-((dr - dq) ** 2).sum(-1) / tau_c**2)
    return ok, c, dr, dq


def _gaussian_scores(spec: VolumeSpec, centers: np.ndarray, tau: float) -> np.ndarray:
    # separable per axis: exp(-|x-m|^2/tau^2) = prod_a exp(-(x_a-m_a)^2/tau^2)
    xs = spec.axis_coords()
    out = []
    for m in centers:
        f = [np.exp(-((x - m[a]) ** 2) / tau**2) for a, x in enumerate(xs)]
        out.append(f[0][:, None, None] * f[1][None, :, None] * f[2][None, None, :])
    return np.array(out)


@dataclass(frozen=True)
class AffinityRegularizer:
    """Per-voxel cross-view consistency times keypoint affinity.

    ``score_i = exp(-|d_ref - d_query|^2 / tau_c^2) * exp(-|d_mean - P_i|^2 / tau_a^2)``
    where ``d_*`` are the decoded model coordinates of each half. Voxels only
    see the surface, so this cannot place interior or self-occluded keypoints.
    """

    tau_c: float = 0.03
    tau_a: float = 0.03

    def scaled(self, factor: float) -> "AffinityRegularizer":
        return replace(self, tau_c=self.tau_c * factor, tau_a=self.tau_a * factor)

    def __call__(self, vol: FeatureVolume, model: ObjectModel) -> HeatmapField:
        ok, c, dr, dq = _consistency(vol, self.tau_c)
        if not ok.any():
            raise EmptyField("no voxel is seen on the object by both views")
        dm = 0.5 * (dr + dq)
        scores = np.zeros((len(model.keypoints),) + vol.spec.dims)
        for s, p in zip(scores, model.keypoints):
            s[ok] = c * np.exp(-((dm - p) ** 2).sum(-1) / self.tau_a**2)
        return HeatmapField.from_scores(vol.spec, scores)


def _skew(a: np.ndarray) -> np.ndarray:
    z = np.zeros(a.shape[:-1])
    return np.stack(
        [np.stack([z, -a[..., 2], a[..., 1]], -1),
         np.stack([a[..., 2], z, -a[..., 0]], -1),
         np.stack([-a[..., 1], a[..., 0], z], -1)], -2)


def _expm_so3(w: np.ndarray) -> np.ndarray:
    th = np.linalg.norm(w)
    k = _skew(w)
    if th < 1e-12:
        return np.eye(3) + k
    return np.eye(3) + np.sin(th) / th * k + (1 - np.cos(th)) / th**2 * k @ k


def interior_mask(mask: np.ndarray) -> np.ndarray:
    """Object pixels whose four neighbours are object pixels too."""
    m = np.asarray(mask, dtype=bool)
    out = np.zeros_like(m)
    out[1:-1, 1:-1] = m[1:-1, 1:-1] & m[:-2, 1:-1] & m[2:, 1:-1] & m[1:-1, :-2] & m[1:-1, 2:]
    return out


def ray_cost(m, origins, dirs, w, pose: Pose) -> float:
    """Weighted squared point-to-ray distance of the posed model points."""
    x = transform(pose, m) - origins
    res = x - (x * dirs).sum(1, keepdims=True) * dirs
    return float(w @ (res**2).sum(1))


def linear_ray_pose(m, origins, dirs, w) -> Pose:
    """Closed-form pose from ``d x (R m + t - s o) = 0`` in the least-squares sense.

    The 3x3 block is projected onto SO(3) afterwards; this is only meant as a
    starting point for :func:`refine_ray_pose`. Needs non-coplanar points.
    """
    n = len(m)
    dx = _skew(dirs)
    rows = np.empty((n, 3, 13))
    # coefficient of R[a, b] in row i is dx[i, a] * m[b] (row-major vec)
    rows[:, :, :9] = np.einsum("nia,nb->niab", dx, m).reshape(n, 3, 9)
    rows[:, :, 9:12] = dx
    rows[:, :, 12] = -np.einsum("nij,nj->ni", dx, origins)
    a = (rows * np.sqrt(w)[:, None, None]).reshape(-1, 13)
    x = np.linalg.eigh(a.T @ a)[1][:, 0]
    rm = x[:9].reshape(3, 3)
    scale = np.cbrt(np.linalg.det(rm))
    if not abs(scale) > 0:
        raise EmptyField("point-ray correspondences do not fix a pose")
    return Pose(project_to_so3(rm / scale), x[9:12] / scale)


def refine_ray_pose(m, origins, dirs, w, r, t, max_iter=100, tol=1e-12):
    """Levenberg-Marquardt on weighted point-to-ray distances.

    Minimizes ``sum_j w_j |(I - d_j d_j^T)(R m_j + t - o_j)|^2`` over the rigid
    ``(R, t)``, where ray ``j`` starts at ``o_j`` with unit direction ``d_j``.
    The distance is measured in 3D, which keeps the estimate unbiased when the
    model points themselves carry isotropic noise.
    """
    shift = (w @ m) / w.sum()
    mc = m - shift
    tc = t + r @ shift
    proj = np.eye(3) - dirs[:, :, None] * dirs[:, None, :]
    sw = np.sqrt(w)

    def cost(r_, t_):
        a = mc @ r_.T
        res = np.einsum("nij,nj->ni", proj, a + t_ - origins)
        return float(w @ (res**2).sum(1)), res, a

    f, res, a = cost(r, tc)
    lam = 1e-3
    for _ in range(max_iter):
        # d/d(delta) of exp(delta) R m is -[Rm]_x, and -row @ [a]_x = a x row
        jac = np.concatenate([np.cross(a[:, None, :], proj), proj], axis=2) * sw[:, None, None]
        jf = jac.reshape(-1, 6)
        h = jf.T @ jf
        g = jf.T @ (res * sw[:, None]).reshape(-1)
        improved = False
        while lam < 1e12:
            step = np.linalg.solve(h + lam * np.diag(np.diag(h) + 1e-15), -g)
            r_new = _expm_so3(step[:3]) @ r
            t_new = tc + step[3:]
            f_new, res_new, a_new = cost(r_new, t_new)
            if f_new <= f:
                improved = True
                lam = max(lam / 10, 1e-12)
                break
            lam *= 10
        if not improved:
            break
        done = f - f_new <= tol * max(f, 1e-300)
        r, tc, f, res, a = r_new, t_new, f_new, res_new, a_new
        if done:
            break
    r = project_to_so3(r)
    return Pose(r, tc - r @ shift)


@dataclass(frozen=True)
class RegistrationRegularizer:
    """Dense two-view registration of the volume's descriptors.

    A pixel of either view takes part when some voxel sampling it is seen on
    the object by both cameras with cross-view consistency
    ``exp(-|d_ref - d_query|^2 / tau_c^2) >= min_consistency``. It contributes
    one point-ray correspondence: its decoded model coordinate and the ray
    through its center. Silhouette pixels (any 4-neighbour off the object)
    are left out, since the point they decode sits inside the object rather
    than on the ray and would make the object look larger. The object pose minimizing the summed point-to-ray
    distance is refined from a Kabsch fit of decoded coordinates to voxel
    centers, then each keypoint field is
    ``exp(-|X - pose(P_i)|^2 / tau_a^2)`` over voxel centers ``X``, normalized.
    """

    tau_c: float = 0.03
    tau_a: float = 0.03
    max_iter: int = 100
    tol: float = 1e-12
    min_correspondences: int = 6
    min_consistency: float = 1e-3
    interior_only: bool = True

    def scaled(self, factor: float) -> "RegistrationRegularizer":
        return replace(self, tau_c=self.tau_c * factor, tau_a=self.tau_a * factor)

    def correspondences(self, vol: FeatureVolume, consistency=None):
        """Merged point-ray matches ``(model_pts, origins, dirs, weights)``.

        Rays pass through pixel centers and are expressed in the reference
        camera frame.
        """
        ok, c, dr, dq = consistency or _consistency(vol, self.tau_c)
        # consistency gates a pixel in; grading by it (or counting voxels)
        # would select pixels by their noise and bias the depth
        keep = c >= self.min_consistency
        parts = []
        halves = ((vol.ref_view, vol.ref_map, vol.ref_pixel, dr), (vol.query_view, vol.query_map, vol.query_pixel, dq))
        for view, fmap, pix_map, dec in halves:
            uniq, first = np.unique(pix_map[ok][keep], return_index=True)
            if self.interior_only:
                inner = interior_mask(fmap.mask).ravel()[uniq]
                uniq, first = uniq[inner], first[inner]
            k = view.intrinsics
            uv = np.stack([uniq % k.width, uniq // k.width], axis=1).astype(float)
            to_ref = relative(view, vol.ref_view)
            d = pixel_rays(k, uv) @ to_ref.rotation.T
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            o = np.broadcast_to(to_ref.translation, d.shape)
            parts.append((dec[keep][first], o, d, np.ones(len(uniq))))
        m, o, d, w = (np.concatenate(p) for p in zip(*parts))
        return m, o, d, w

    def solve_pose(self, vol: FeatureVolume) -> Pose:
        """Model-to-reference-camera pose implied by the volume's descriptors."""
        cons = _consistency(vol, self.tau_c)
        m, o, d, w = self.correspondences(vol, cons)
        if len(m) < self.min_correspondences or not w.sum() > 0:
            raise EmptyField("too few consistent voxels to localize the object")
        # two starts: a fit of decoded coordinates to voxel centers, which
        # fails when the grid clips the object, and the linear ray solution
        ok, c, dr, dq = cons
        starts = [Pose(*kabsch(0.5 * (dr + dq), vol.spec.node_coords()[ok], c))]
        try:
            starts.append(linear_ray_pose(m, o, d, w))
        except (EmptyField, InvalidPose):
            pass
        init = min(starts, key=lambda p: ray_cost(m, o, d, w, p))
        return refine_ray_pose(m, o, d, w, init.rotation, init.translation, self.max_iter, self.tol)

    def __call__(self, vol: FeatureVolume, model: ObjectModel) -> HeatmapField:
        pose = self.solve_pose(vol)
        centers = transform(pose, model.keypoints)
        scores = _gaussian_scores(vol.spec, centers, self.tau_a)
        return HeatmapField.from_scores(vol.spec, scores)


def regularize_field(vol: FeatureVolume, model: ObjectModel, regularizer: Regularizer | None = None) -> HeatmapField:
    return (regularizer or RegistrationRegularizer())(vol, model)


# ---------------------------------------------------------------------------
# Field operations
# ---------------------------------------------------------------------------


def trilinear_weights(spec: VolumeSpec, p) -> tuple[np.ndarray, np.ndarray]:
    """Lower corner index and the 8 corner weights (ordered by bits x, y, z).

    Points in the half-cell rim outside the outermost voxel centers are clamped
    onto the lattice.
    """
    p = np.asarray(p, dtype=float).reshape(3)
    lo, hi = spec.outer_bounds()
    if np.any(p < lo) or np.any(p > hi) or not np.all(np.isfinite(p)):
        raise OutOfVolume(f"{p} lies outside the volume")
    dims = np.array(spec.dims)
    g = np.clip((p - spec.first_node) / np.array(spec.cell), 0.0, dims - 1.0)
    i0 = np.minimum(np.floor(g).astype(int), dims - 2)
    f = g - i0
    w = np.empty(8)
    for b in range(8):
        bits = np.array([(b >> 2) & 1, (b >> 1) & 1, b & 1])
        w[b] = np.prod(np.where(bits == 1, f, 1.0 - f))
    return i0, w


def trilinear_eval(field: HeatmapField, keypoint_index: int, p) -> float:
    """Field density at an arbitrary point from its 8 neighbouring voxels."""
    i0, w = trilinear_weights(field.spec, p)
    v = field.values[keypoint_index]
    total = 0.0
    for b in range(8):
        i, j, k = i0 + np.array([(b >> 2) & 1, (b >> 1) & 1, b & 1])
        total += w[b] * v[i, j, k]
    return float(total)


def discretize_targets(spec: VolumeSpec, targets) -> HeatmapField:
    """Gaussian targets sampled at voxel centers and normalized per keypoint."""
    xs = spec.axis_coords()
    scores = []
    for t in targets:
        m = np.asarray(t.mean, dtype=float)
        f = [np.exp(-((x - m[a]) ** 2) / (2 * t.sigma**2)) for a, x in enumerate(xs)]
        scores.append(f[0][:, None, None] * f[1][None, :, None] * f[2][None, None, :])
    return HeatmapField.from_scores(spec, scores)


def keypoint_targets(pose: Pose, model_keypoints, sigma: float = DEFAULT_TARGET_SIGMA) -> list[TargetHeatmap]:
    """Gaussian targets centered on the posed model keypoints."""
    return [TargetHeatmap(tuple(float(x) for x in p), sigma) for p in transform(pose, model_keypoints)]


def kl_divergence(field: HeatmapField, targets) -> float:
    """``sum_i KL(field_i || target_i)``; ``targets`` may be a HeatmapField or
    a list of :class:`TargetHeatmap` (discretized on the field's grid)."""
    q = targets if isinstance(targets, HeatmapField) else discretize_targets(field.spec, targets)
    if q.values.shape != field.values.shape:
        raise ValueError("field and targets differ in shape")
    p = field.values
    # the floor only stands in for exact zeros
    qk = np.where(q.values > 0, q.values, KL_FLOOR)
    pos = p > 0
    return float(np.sum(p[pos] * (np.log(p[pos]) - np.log(qk[pos]))))


def extract_keypoints(field: HeatmapField) -> Keypoints3D:
    """Expected voxel-center position under each keypoint's distribution."""
    xs, ys, zs = field.spec.axis_coords()
    v = field.values
    mass = v.sum(axis=(1, 2, 3))
    if np.any(~(mass > 0)):
        raise EmptyField("field has no mass")
    ex = np.einsum("nijk,i->n", v, xs) / mass
    ey = np.einsum("nijk,j->n", v, ys) / mass
    ez = np.einsum("nijk,k->n", v, zs) / mass
    return Keypoints3D.all_valid(np.stack([ex, ey, ez], axis=1))


# ---------------------------------------------------------------------------
# Coarse-to-fine
# ---------------------------------------------------------------------------


def initial_guess(det_keypoints, ref: CameraView, depth: float = DEFAULT_GUESS_DEPTH) -> np.ndarray:
    """Detection centroid of the reference view lifted to ``depth`` (ref frame)."""
    uv = np.asarray(det_keypoints, dtype=float).reshape(-1, 2)
    return pixel_rays(ref.intrinsics, uv.mean(axis=0)) * depth


def coarse_spec(center, half_extent: float = COARSE_HALF_EXTENT, cell: float = COARSE_CELL) -> VolumeSpec:
    return VolumeSpec.from_range(center, half_extent, cell)


@dataclass(frozen=True, eq=False)
class LevelResult:
    volume: FeatureVolume
    field: HeatmapField
    keypoints: Keypoints3D


def coarse_to_fine_levels(
    f_ref: FeatureMap,
    f_query: FeatureMap,
    ref: CameraView,
    query: CameraView,
    coarse: VolumeSpec,
    model: ObjectModel,
    regularizer: Regularizer | None = None,
    fine_cell: float = FINE_CELL,
    fine_extent_factor: float = FINE_EXTENT_FACTOR,
) -> list[LevelResult]:
    """Run build, regularize and extract at the coarse grid, then again on a
    finer grid centered on the coarse keypoint centroid."""
    reg = regularizer or RegistrationRegularizer()
    levels = []
    vol = build_volume(f_ref, f_query, ref, query, coarse)
    fld = reg(vol, model)
    levels.append(LevelResult(vol, fld, extract_keypoints(fld)))

    kps = levels[0].keypoints
    center = kps.points[kps.valid].mean(axis=0)
    fine = VolumeSpec.from_range(center, fine_extent_factor * model.diameter, fine_cell)
    factor = fine_cell / float(np.mean(coarse.cell))
    fine_reg = reg.scaled(factor) if hasattr(reg, "scaled") else reg
    vol = build_volume(f_ref, f_query, ref, query, fine)
    fld = fine_reg(vol, model)
    levels.append(LevelResult(vol, fld, extract_keypoints(fld)))
    return levels


def refine_coarse_to_fine(f_ref, f_query, ref, query, coarse: VolumeSpec, model: ObjectModel, **kwargs) -> Keypoints3D:
    return coarse_to_fine_levels(f_ref, f_query, ref, query, coarse, model, **kwargs)[-1].keypoints


def dump_field_slices(field: HeatmapField, keypoint_index: int, directory) -> list[Path]:
    """Write one CSV grid per z-slice (rows = y, columns = x)."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    v = field.values[keypoint_index]
    for k in range(v.shape[2]):
        path = out / f"kp{keypoint_index:02d}_z{k:03d}.csv"
        np.savetxt(path, v[:, :, k].T, delimiter=",", fmt="%.9e")
        paths.append(path)
    return paths
