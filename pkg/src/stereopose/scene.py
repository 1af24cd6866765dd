"""Synthetic objects, camera pairs and sensor oracles.

Everything that would come out of a trained network or a dataset in a real
pipeline is simulated here: 2D keypoint detections, a depth map for the
reference view, and dense feature maps whose descriptors encode the
model-frame coordinate of the visible surface point.

All generators are pure functions of their inputs and seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import ConvexHull, QhullError
from scipy.spatial.transform import Rotation

from .errors import ModelLoadError, SamplingExhausted, TooFewPoints
from .geometry import (
    CameraIntrinsics,
    CameraView,
    Pose,
    backproject,
    project_points,
    rotation_between,
    transform,
)

NULL_DESCRIPTOR = -1000.0
DEFAULT_CHANNELS = 9
ENCODING_PERIOD = 0.5  # meters
DEFAULT_SPACING = 0.0006
SPLAT_DEPTH_TOL = 0.005  # meters; points this close behind the front count as visible
_BRUTE_FORCE_LIMIT = 3000


# ---------------------------------------------------------------------------
# Object models
# ---------------------------------------------------------------------------


def max_pairwise_distance(points: np.ndarray) -> float:
    points = np.asarray(points, dtype=float)
    if len(points) < 2:
        return 0.0
    if len(points) > _BRUTE_FORCE_LIMIT:
        try:
            points = points[ConvexHull(points).vertices]
        except QhullError:
            pass
    best = 0.0
    for start in range(0, len(points), 512):
        block = points[start : start + 512]
        d2 = ((block[:, None, :] - points[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return math.sqrt(best)


def select_keypoints(model_points, n: int) -> np.ndarray:
    """Centroid followed by ``n - 1`` farthest-point-sampled surface points.

    Sampling starts from the surface point farthest from the centroid; ties
    resolve to the lowest index, so the result is deterministic.
    """
    pts = np.asarray(model_points, dtype=float).reshape(-1, 3)
    if n < 1:
        raise TooFewPoints("need at least one keypoint")
    centroid = pts.mean(axis=0) if len(pts) else None
    if centroid is None or len(pts) < n - 1:
        raise TooFewPoints(f"model has {len(pts)} points, need {n - 1}")
    out = [centroid]
    if n == 1:
        return np.array(out)
    idx = int(np.argmax(np.linalg.norm(pts - centroid, axis=1)))
    min_d = np.full(len(pts), np.inf)
    for _ in range(n - 1):
        out.append(pts[idx])
        min_d = np.minimum(min_d, np.linalg.norm(pts - pts[idx], axis=1))
        idx = int(np.argmax(min_d))
    return np.array(out)


@dataclass(frozen=True, eq=False)
class ObjectModel:
    """Point-set object model in its own frame (meters).

    ``diameter`` is always recomputed from ``surface_points``; passing a value
    that disagrees by more than 1e-9 raises ``ValueError``.
    """

    name: str
    surface_points: np.ndarray
    keypoints: np.ndarray
    diameter: float | None = None
    symmetric: bool = False

    def __post_init__(self):
        pts = np.asarray(self.surface_points, dtype=float).reshape(-1, 3)
        kps = np.asarray(self.keypoints, dtype=float).reshape(-1, 3)
        if len(kps) < 4:
            raise TooFewPoints("an object needs at least 4 keypoints")
        diam = max_pairwise_distance(pts)
        if self.diameter is not None and abs(self.diameter - diam) > 1e-9:
            raise ValueError(f"diameter {self.diameter} != recomputed {diam}")
        if len(pts):
            center = pts.mean(axis=0)
            radius = np.linalg.norm(pts - center, axis=1).max()
            if np.any(np.linalg.norm(kps - center, axis=1) > radius + 1e-9):
                raise ValueError("keypoint outside the model bounding sphere")
        pts.setflags(write=False)
        kps.setflags(write=False)
        object.__setattr__(self, "surface_points", pts)
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "diameter", diam)

    @classmethod
    def from_points(cls, name: str, points, n_keypoints: int = 9, symmetric: bool = False):
        pts = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(name, pts, select_keypoints(pts, n_keypoints), symmetric=symmetric)

    @property
    def n_keypoints(self) -> int:
        return len(self.keypoints)

    def metric_points(self, max_points: int = 1000) -> np.ndarray:
        """Deterministic evenly strided subset used by ADD / ADD-S."""
        step = max(1, math.ceil(len(self.surface_points) / max_points))
        return self.surface_points[::step]


def _face_grid(origin, e1, e2, spacing):
    l1, l2 = np.linalg.norm(e1), np.linalg.norm(e2)
    n1 = max(2, math.ceil(l1 / spacing) + 1)
    n2 = max(2, math.ceil(l2 / spacing) + 1)
    a, b = np.meshgrid(np.linspace(0, 1, n1), np.linspace(0, 1, n2), indexing="ij")
    return origin + a.reshape(-1, 1) * e1 + b.reshape(-1, 1) * e2


def box_points(size, center=(0.0, 0.0, 0.0), spacing=DEFAULT_SPACING) -> np.ndarray:
    sx, sy, sz = size
    lo = np.asarray(center, dtype=float) - np.array(size) / 2.0
    ex, ey, ez = np.array([sx, 0, 0.0]), np.array([0, sy, 0.0]), np.array([0, 0, sz])
    faces = [
        (lo, ey, ez), (lo + ex, ey, ez),
        (lo, ex, ez), (lo + ey, ex, ez),
        (lo, ex, ey), (lo + ez, ex, ey),
    ]
    return _dedupe(np.concatenate([_face_grid(o, a, b, spacing) for o, a, b in faces]))


def cylinder_points(radius, height, spacing=DEFAULT_SPACING) -> np.ndarray:
    n_theta = max(8, math.ceil(2 * math.pi * radius / spacing))
    theta = np.arange(n_theta) * (2 * math.pi / n_theta)
    zs = np.linspace(-height / 2, height / 2, max(2, math.ceil(height / spacing) + 1))
    t, z = np.meshgrid(theta, zs, indexing="ij")
    side = np.stack([radius * np.cos(t).ravel(), radius * np.sin(t).ravel(), z.ravel()], axis=1)
    rings = [np.zeros((1, 2))]
    n_rings = math.ceil(radius / spacing)
    for k in range(1, n_rings + 1):
        r = radius * k / n_rings
        m = max(6, math.ceil(2 * math.pi * r / spacing))
        a = np.arange(m) * (2 * math.pi / m)
        rings.append(np.stack([r * np.cos(a), r * np.sin(a)], axis=1))
    disc = np.concatenate(rings)
    caps = [np.column_stack([disc, np.full(len(disc), s * height / 2)]) for s in (-1, 1)]
    return _dedupe(np.concatenate([side] + caps))


TRIBLOCK_BOXES = (
    ((0.0, 0.0, 0.0), (0.12, 0.04, 0.04)),
    ((0.04, 0.035, 0.0), (0.04, 0.05, 0.04)),
    ((-0.045, 0.0, 0.035), (0.03, 0.03, 0.05)),
)


def triblock_points(scale=1.0, spacing=DEFAULT_SPACING) -> np.ndarray:
    """Surface of three interpenetrating boxes; no nontrivial symmetry."""
    boxes = [(np.array(c) * scale, np.array(s) * scale) for c, s in TRIBLOCK_BOXES]
    keep = []
    for i, (c, s) in enumerate(boxes):
        pts = box_points(s, c, spacing)
        inside = np.zeros(len(pts), dtype=bool)
        for j, (c2, s2) in enumerate(boxes):
            if i != j:
                inside |= np.all(np.abs(pts - c2) < s2 / 2 - 1e-9, axis=1)
        keep.append(pts[~inside])
    return _dedupe(np.concatenate(keep))


def _dedupe(points: np.ndarray) -> np.ndarray:
    _, idx = np.unique(np.round(points, 9), axis=0, return_index=True)
    return points[np.sort(idx)]


PARAMETRIC_DEFAULTS = {
    "box": (0.10, 0.07, 0.05),
    "cylinder": (0.035, 0.11),
    "triblock": (1.0,),
}


def parametric_model(spec: str, n_keypoints: int = 9, spacing: float = DEFAULT_SPACING) -> ObjectModel:
    """Build a model from ``"box"``, ``"box:0.1,0.06,0.04"``, ``"cylinder:r,h"``
    or ``"triblock:scale"``."""
    kind, _, args = spec.partition(":")
    kind = kind.strip().lower()
    if kind not in PARAMETRIC_DEFAULTS:
        raise ModelLoadError(f"unknown parametric shape {kind!r}")
    try:
        params = tuple(float(a) for a in args.split(",")) if args.strip() else PARAMETRIC_DEFAULTS[kind]
    except ValueError as exc:
        raise ModelLoadError(f"bad shape parameters in {spec!r}") from exc
    if len(params) != len(PARAMETRIC_DEFAULTS[kind]) or min(params) <= 0:
        raise ModelLoadError(f"bad shape parameters in {spec!r}")
    if kind == "box":
        pts, sym = box_points(params, spacing=spacing), False
    elif kind == "cylinder":
        pts, sym = cylinder_points(*params, spacing=spacing), True
    else:
        pts, sym = triblock_points(*params, spacing=spacing), False
    return ObjectModel.from_points(spec, pts, n_keypoints, symmetric=sym)


def read_ply(path) -> np.ndarray:
    """Vertex positions from an ASCII PLY file."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise ModelLoadError(str(exc)) from exc
    if not lines or lines[0].strip() != "ply":
        raise ModelLoadError(f"{path}: not a PLY file")
    n_vertex, props, fmt, header_end = None, [], None, None
    in_vertex = False
    for i, line in enumerate(lines[1:], start=1):
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                n_vertex = int(tok[2])
        elif tok[0] == "property" and in_vertex:
            props.append(tok[-1])
        elif tok[0] == "end_header":
            header_end = i
            break
    if fmt != "ascii" or n_vertex is None or header_end is None:
        raise ModelLoadError(f"{path}: only ASCII PLY with a vertex element is supported")
    try:
        cols = [props.index(a) for a in ("x", "y", "z")]
        rows = lines[header_end + 1 : header_end + 1 + n_vertex]
        data = np.array([[float(r.split()[c]) for c in cols] for r in rows])
    except (ValueError, IndexError) as exc:
        raise ModelLoadError(f"{path}: malformed vertex data") from exc
    if data.shape != (n_vertex, 3):
        raise ModelLoadError(f"{path}: expected {n_vertex} vertices")
    return data


def write_ply(path, points) -> None:
    points = np.asarray(points, dtype=float)
    header = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z", "end_header",
    ]
    body = [f"{x:.9g} {y:.9g} {z:.9g}" for x, y, z in points]
    Path(path).write_text("\n".join(header + body) + "\n")


def load_model(spec: str, n_keypoints: int = 9) -> ObjectModel:
    if spec.lower().endswith(".ply"):
        return ObjectModel.from_points(spec, read_ply(spec), n_keypoints)
    return parametric_model(spec, n_keypoints)


# ---------------------------------------------------------------------------
# Scenes and noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseModel:
    pixel_sigma: float = 1.0
    pixel_covariance_anisotropy: float = 1.0
    depth_sigma: float = 0.003
    depth_quantum: float = 0.0035
    feature_sigma: float = 0.005
    outlier_rate: float = 0.05
    outlier_magnitude: float = 20.0

    def __post_init__(self):
        for name in ("pixel_sigma", "depth_sigma", "depth_quantum", "feature_sigma", "outlier_magnitude"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.pixel_covariance_anisotropy < 1:
            raise ValueError("pixel_covariance_anisotropy must be >= 1")
        if not 0 <= self.outlier_rate <= 1:
            raise ValueError("outlier_rate must lie in [0, 1]")

    @classmethod
    def zero(cls) -> "NoiseModel":
        return cls(0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True, eq=False)
class SceneSample:
    gt_pose: Pose
    ref_view: CameraView
    query_view: CameraView
    baseline: float
    seed: int | None = None


def _in_bounds(uv, z, k: CameraIntrinsics) -> bool:
    return bool(
        np.all(z > 1e-9)
        and np.all((uv[:, 0] >= 0) & (uv[:, 0] <= k.width - 1))
        and np.all((uv[:, 1] >= 0) & (uv[:, 1] <= k.height - 1))
    )


def query_view_for(ref: CameraView, target, baseline: float, direction) -> CameraView:
    """Camera displaced by ``baseline`` along ``direction`` and re-aimed so the
    ray toward ``target`` keeps the same pixel as in ``ref``."""
    c_ref = ref.center
    c_q = c_ref + baseline * np.asarray(direction, dtype=float)
    r_cw_ref = ref.camera_to_world.rotation
    r_cw = rotation_between(target - c_ref, target - c_q) @ r_cw_ref
    return CameraView(ref.intrinsics, Pose(r_cw.T, -r_cw.T @ c_q))


def sample_scene(
    model: ObjectModel,
    baseline: float,
    rng_seed: int,
    intrinsics: CameraIntrinsics | None = None,
    depth_range=(0.6, 1.2),
    max_attempts: int = 100,
) -> SceneSample:
    """Random object pose seen from a reference camera at the world origin and a
    query camera ``baseline`` meters away, orthogonal to the line of sight."""
    if baseline < 0:
        raise ValueError("baseline must be >= 0")
    k = intrinsics or CameraIntrinsics.linemod()
    ref = CameraView(k)
    rng = np.random.default_rng(rng_seed)
    centroid = model.surface_points.mean(axis=0)
    for _ in range(max_attempts):
        depth = rng.uniform(*depth_range)
        pix = np.array([rng.uniform(0.2, 0.8) * (k.width - 1), rng.uniform(0.2, 0.8) * (k.height - 1)])
        center = backproject(ref, pix, depth)
        rot = Rotation.random(random_state=rng).as_matrix()
        gt = Pose(rot, center - rot @ centroid)
        axis = center / np.linalg.norm(center)
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        phi = rng.uniform(0, 2 * np.pi)
        direction = np.cos(phi) * e1 + np.sin(phi) * e2
        query = query_view_for(ref, center, baseline, direction)
        kps = transform(gt, model.keypoints)
        ok = True
        for view in (ref, query):
            uv, z = project_points(view, kps)
            _, zc = project_points(view, center)
            ok &= _in_bounds(uv, z, k) and zc > 1e-9
        if ok:
            b = float(np.linalg.norm(query.center - ref.center))
            return SceneSample(gt, ref, query, b, rng_seed)
    raise SamplingExhausted(f"no valid scene after {max_attempts} attempts")


# ---------------------------------------------------------------------------
# Rendering oracles
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DepthMap:
    width: int
    height: int
    data: np.ndarray  # (H, W) meters, NaN where invalid
    valid: np.ndarray  # (H, W) bool


@dataclass(frozen=True, eq=False)
class FeatureMap:
    width: int
    height: int
    channels: int
    data: np.ndarray  # (H, W, C)
    mask: np.ndarray  # (H, W) bool, True on object pixels


@dataclass(frozen=True, eq=False)
class Detection2D:
    keypoints: np.ndarray  # (N, 2)
    covariances: np.ndarray  # (N, 2, 2)


def _surface(model) -> np.ndarray:
    pts = model.surface_points if hasattr(model, "surface_points") else model
    return np.asarray(pts, dtype=float).reshape(-1, 3)


def render_visibility(model, view: CameraView, gt_pose: Pose, depth_tol: float = SPLAT_DEPTH_TOL) -> np.ndarray:
    """Per-pixel index of the visible splatted surface point (-1 = background).

    Each point lands on its nearest pixel. Points within ``depth_tol`` of the
    pixel's front-most depth count as the visible surface, and among those the
    one projecting closest to the pixel center wins (an epsilon z-buffer). Plain
    front-most selection would favour the near edge of every tilted pixel.
    """
    k = view.intrinsics
    index = np.full((k.height, k.width), -1, dtype=np.int64)
    pts = _surface(model)
    if len(pts) == 0:
        return index
    uv, z = project_points(view, transform(gt_pose, pts))
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
    ok = (z > 1e-9) & (col >= 0) & (col < k.width) & (row >= 0) & (row < k.height)
    src = np.flatnonzero(ok)
    if len(src) == 0:
        return index
    pix = row[src].astype(np.int64) * k.width + col[src].astype(np.int64)
    # three scatter-min passes: front depth, then center offset, then index
    npix = k.width * k.height
    zs = z[src]
    front = np.full(npix, np.inf)
    np.minimum.at(front, pix, zs)
    near = zs <= front[pix] + depth_tol
    src, pix = src[near], pix[near]
    off2 = (uv[src, 0] - col[src]) ** 2 + (uv[src, 1] - row[src]) ** 2
    best = np.full(npix, np.inf)
    np.minimum.at(best, pix, off2)
    win = off2 == best[pix]
    flat = np.full(npix, np.iinfo(np.int64).max)
    np.minimum.at(flat, pix[win], src[win])
    hit = flat < np.iinfo(np.int64).max
    index.ravel()[hit] = flat[hit]
    return index


def render_depth_oracle(model, view: CameraView, gt_pose: Pose, noise: NoiseModel, rng=None, visibility=None) -> DepthMap:
    """Splatted reference depth with additive Gaussian noise then quantization."""
    k = view.intrinsics
    vis = render_visibility(model, view, gt_pose) if visibility is None else visibility
    valid = vis >= 0
    data = np.full((k.height, k.width), np.nan)
    if valid.any():
        pts = transform(gt_pose, _surface(model)[vis[valid]])
        z = transform(view.world_to_camera, pts)[:, 2]
        if noise.depth_sigma > 0:
            z = z + np.random.default_rng(rng).normal(0.0, noise.depth_sigma, size=z.shape)
        if noise.depth_quantum > 0:
            z = np.round(z / noise.depth_quantum) * noise.depth_quantum
        bad = ~(z > 0)
        if bad.any():
            rows, cols = np.nonzero(valid)
            valid[rows[bad], cols[bad]] = False
            z = z[~bad]
        data[valid] = z
    return DepthMap(k.width, k.height, data, valid)


def encode_coordinates(coords: np.ndarray, channels: int = DEFAULT_CHANNELS) -> np.ndarray:
    """Descriptor for model-frame coordinates: xyz followed by sin/cos encodings."""
    coords = np.asarray(coords, dtype=float)
    if channels < 3:
        raise ValueError("need at least 3 channels")
    extra = []
    freq = 0
    while len(extra) * 3 < channels - 3:
        arg = coords * (2.0 ** freq * 2.0 * np.pi / ENCODING_PERIOD)
        extra += [np.sin(arg), np.cos(arg)]
        freq += 1
    out = np.concatenate([coords] + extra, axis=-1)
    return out[..., :channels]


def synth_feature_map(
    model, view: CameraView, gt_pose: Pose, noise: NoiseModel, rng=None,
    channels: int = DEFAULT_CHANNELS, visibility=None,
) -> FeatureMap:
    """Dense descriptors: model coordinates of the visible point plus encodings.

    Background pixels hold ``NULL_DESCRIPTOR`` in every channel.
    """
    k = view.intrinsics
    vis = render_visibility(model, view, gt_pose) if visibility is None else visibility
    mask = vis >= 0
    data = np.full((k.height, k.width, channels), NULL_DESCRIPTOR)
    if mask.any():
        desc = encode_coordinates(_surface(model)[vis[mask]], channels)
        if noise.feature_sigma > 0:
            desc = desc + np.random.default_rng(rng).normal(0.0, noise.feature_sigma, size=desc.shape)
        data[mask] = desc
    return FeatureMap(k.width, k.height, channels, data, mask)


def simulate_detector(keypoints_gt_2d, noise: NoiseModel, rng) -> Detection2D:
    """Perturb ground-truth pixels; outliers are displaced by a fixed magnitude."""
    gt = np.asarray(keypoints_gt_2d, dtype=float).reshape(-1, 2)
    rng = np.random.default_rng(rng)
    n = len(gt)
    # draw everything up front so the stream layout never depends on outcomes
    z = rng.standard_normal((n, 2))
    phi = rng.uniform(0, np.pi, n)
    is_outlier = rng.uniform(size=n) < noise.outlier_rate
    psi = rng.uniform(0, 2 * np.pi, n)
    a = noise.pixel_covariance_anisotropy
    sig = noise.pixel_sigma * np.array([math.sqrt(a), 1.0 / math.sqrt(a)])
    c, s = np.cos(phi), np.sin(phi)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)
    cov = rot @ np.diag(sig**2) @ np.swapaxes(rot, -1, -2)
    pts = gt + np.einsum("nij,nj->ni", rot, z * sig)
    disp = noise.outlier_magnitude * np.stack([np.cos(psi), np.sin(psi)], -1)
    pts[is_outlier] = gt[is_outlier] + disp[is_outlier]
    return Detection2D(pts, cov)


def keypoint_visibility(model: ObjectModel, view: CameraView, gt_pose: Pose, margin: float = 0.01) -> np.ndarray:
    """True where no surface point lies in front of the keypoint (by more than
    ``margin``) within one pixel of its projection."""
    uv_k, z_k = project_points(view, transform(gt_pose, model.keypoints))
    uv_s, z_s = project_points(view, transform(gt_pose, model.surface_points))
    vis = np.ones(len(z_k), dtype=bool)
    for i in range(len(z_k)):
        near = np.all(np.abs(uv_s - uv_k[i]) <= 1.0, axis=1)
        vis[i] = not np.any(z_s[near] < z_k[i] - margin)
    return vis


@dataclass(frozen=True, eq=False)
class SceneObservations:
    """Everything a fusion pipeline may look at for one scene."""

    scene: SceneSample
    det_ref: Detection2D
    det_query: Detection2D
    depth_ref: DepthMap
    feat_ref: FeatureMap
    feat_query: FeatureMap
    gt_keypoints: np.ndarray = field(repr=False)


def observe(model: ObjectModel, scene: SceneSample, noise: NoiseModel, seed: int, channels: int = DEFAULT_CHANNELS) -> SceneObservations:
    """Run every sensor oracle on a scene with independent per-oracle streams."""
    streams = np.random.SeedSequence([seed, 1]).spawn(5)
    rngs = [np.random.default_rng(s) for s in streams]
    kps = transform(scene.gt_pose, model.keypoints)
    uv_r, _ = project_points(scene.ref_view, kps)
    uv_q, _ = project_points(scene.query_view, kps)
    vis_r = render_visibility(model, scene.ref_view, scene.gt_pose)
    vis_q = render_visibility(model, scene.query_view, scene.gt_pose)
    return SceneObservations(
        scene=scene,
        det_ref=simulate_detector(uv_r, noise, rngs[0]),
        det_query=simulate_detector(uv_q, noise, rngs[1]),
        depth_ref=render_depth_oracle(model, scene.ref_view, scene.gt_pose, noise, rngs[2], vis_r),
        feat_ref=synth_feature_map(model, scene.ref_view, scene.gt_pose, noise, rngs[3], channels, vis_r),
        feat_query=synth_feature_map(model, scene.query_view, scene.gt_pose, noise, rngs[4], channels, vis_q),
        gt_keypoints=transform(scene.ref_view.world_to_camera, kps),
    )
