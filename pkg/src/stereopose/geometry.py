"""Rigid transforms and the pinhole camera model.

Points are plain numpy arrays of shape ``(3,)`` or ``(N, 3)`` (meters) and
pixels are ``(2,)`` or ``(N, 2)``. Pixel ``(u, v)`` = ``(0, 0)`` is the center
of the top-left pixel. All types are immutable once constructed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCamera, InvalidPose, NonPositiveDepth

ORTHO_TOL = 1e-9
REPAIR_TOL = 1e-6
MIN_DEPTH = 1e-9


def project_to_so3(m: np.ndarray) -> np.ndarray:
    """Nearest rotation to ``m`` in the Frobenius sense (SVD with det fix)."""
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt))
    if d == 0:
        d = 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> rotation @ x + translation``.

    A rotation whose orthonormality defect lies between 1e-9 and 1e-6 is
    snapped back onto SO(3); anything worse raises :class:`InvalidPose`.
    """

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float)
        t = np.asarray(self.translation, dtype=float).reshape(-1)
        if r.shape != (3, 3) or t.shape != (3,):
            raise InvalidPose(f"bad shapes {r.shape}, {t.shape}")
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise InvalidPose("non-finite pose")
        defect = np.linalg.norm(r.T @ r - np.eye(3))
        det = np.linalg.det(r)
        if defect > ORTHO_TOL or abs(det - 1.0) > ORTHO_TOL:
            if defect >= REPAIR_TOL or det <= 0:
                raise InvalidPose(f"rotation defect {defect:.3g}, det {det:.6f}")
            r = project_to_so3(r)
        object.__setattr__(self, "rotation", _frozen(r))
        object.__setattr__(self, "translation", _frozen(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_rotvec(cls, rotvec, translation=(0.0, 0.0, 0.0)) -> "Pose":
        from scipy.spatial.transform import Rotation

        return cls(Rotation.from_rotvec(rotvec).as_matrix(), translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def __matmul__(self, other):
        if isinstance(other, Pose):
            return compose(self, other)
        return transform(self, other)

    def __repr__(self):
        return f"Pose(rotation={self.rotation.tolist()}, translation={self.translation.tolist()})"


def transform(pose: Pose, p) -> np.ndarray:
    """Apply ``pose`` to one point or a stack of points."""
    p = np.asarray(p, dtype=float)
    return p @ pose.rotation.T + pose.translation


def compose(a: Pose, b: Pose) -> Pose:
    """``compose(a, b)`` applies ``b`` first, then ``a``."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def inverse(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def rotation_geodesic(a: Pose, b: Pose) -> float:
    """Angle in radians of the relative rotation ``a.R^T b.R``, in [0, pi]."""
    rel = a.rotation.T @ b.rotation
    # atan2 keeps full precision near 0, where arccos of the trace does not
    s = np.linalg.norm([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]]) / 2.0
    c = (np.trace(rel) - 1.0) / 2.0
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be at least 1x1")

    @classmethod
    def linemod(cls) -> "CameraIntrinsics":
        return cls(572.4114, 573.57043, 325.2611, 242.04899, 640, 480)

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class CameraView:
    intrinsics: CameraIntrinsics
    world_to_camera: Pose = field(default_factory=Pose.identity)

    @property
    def center(self) -> np.ndarray:
        """Focal point in world coordinates."""
        w2c = self.world_to_camera
        return -w2c.rotation.T @ w2c.translation

    @property
    def camera_to_world(self) -> Pose:
        return inverse(self.world_to_camera)


def relative(ref: CameraView, query: CameraView) -> Pose:
    """Pose mapping ref-camera coordinates to query-camera coordinates."""
    return compose(query.world_to_camera, inverse(ref.world_to_camera))


def project_points(view: CameraView, p_world) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection with no depth check; returns ``(uv, z)``."""
    pc = transform(view.world_to_camera, p_world)
    z = pc[..., 2]
    k = view.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * pc[..., 0] / z + k.cx
        v = k.fy * pc[..., 1] / z + k.cy
    return np.stack([u, v], axis=-1), z


def project(view: CameraView, p_world) -> tuple[np.ndarray, np.ndarray]:
    """Project world points to pixels; raises BehindCamera if any z <= 1e-9 m."""
    uv, z = project_points(view, p_world)
    if np.any(~(z > MIN_DEPTH)):
        raise BehindCamera("point at or behind the camera plane")
    return uv, z


def pixel_rays(intrinsics: CameraIntrinsics, pixel) -> np.ndarray:
    """Camera-frame ray directions with unit z-component."""
    pixel = np.asarray(pixel, dtype=float)
    x = (pixel[..., 0] - intrinsics.cx) / intrinsics.fx
    y = (pixel[..., 1] - intrinsics.cy) / intrinsics.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def backproject(view: CameraView, pixel, depth) -> np.ndarray:
    """World point seen at ``pixel`` whose camera-frame z equals ``depth``."""
    depth = np.asarray(depth, dtype=float)
    if np.any(~(depth > 0)):
        raise NonPositiveDepth("depth must be positive")
    pc = pixel_rays(view.intrinsics, pixel) * depth[..., None]
    return transform(view.camera_to_world, pc)


def rotation_between(a, b) -> np.ndarray:
    """Minimal rotation taking unit direction ``a`` onto unit direction ``b``."""
    a = np.asarray(a, dtype=float) / np.linalg.norm(a)
    b = np.asarray(b, dtype=float) / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    s = np.linalg.norm(v)
    if s < 1e-15:
        if c > 0:
            return np.eye(3)
        # antiparallel: rotate pi about any axis orthogonal to a
        axis = np.cross(a, [1.0, 0.0, 0.0])
        if np.linalg.norm(axis) < 1e-6:
            axis = np.cross(a, [0.0, 1.0, 0.0])
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    vx = np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])
    return np.eye(3) + vx + vx @ vx * ((1.0 - c) / s**2)
