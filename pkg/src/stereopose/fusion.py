"""Early-Fusion (depth lifting) and Late-Fusion (triangulation) keypoint routes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry
from .geometry import CameraView, pixel_rays, transform
from .scene import DepthMap, Detection2D

LIFT_WINDOW = 3  # pixels


@dataclass(frozen=True, eq=False)
class Keypoints3D:
    """Keypoints in the reference-camera frame with per-point validity.

    Invalid entries stay in place (as NaN) so indices keep matching the model
    keypoints.
    """

    points: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        pts = np.array(self.points, dtype=float).reshape(-1, 3)
        valid = np.array(self.valid, dtype=bool).reshape(-1)
        if len(valid) != len(pts):
            raise ValueError("points and validity differ in length")
        valid &= np.all(np.isfinite(pts), axis=1)
        pts[~valid] = np.nan
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "valid", valid)

    @classmethod
    def all_valid(cls, points) -> "Keypoints3D":
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return cls(points, np.ones(len(points), dtype=bool))

    def __len__(self):
        return len(self.points)


def nearest_valid_depth(depth: DepthMap, pixel, window: int = LIFT_WINDOW):
    """Depth at the valid pixel center closest to ``pixel`` within ``window`` px,
    or ``None``."""
    u, v = float(pixel[0]), float(pixel[1])
    if not (np.isfinite(u) and np.isfinite(v)):
        return None
    c0, r0 = int(np.floor(u + 0.5)), int(np.floor(v + 0.5))
    rows = np.arange(max(r0 - window, 0), min(r0 + window + 1, depth.height))
    cols = np.arange(max(c0 - window, 0), min(c0 + window + 1, depth.width))
    if len(rows) == 0 or len(cols) == 0:
        return None
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    d2 = (cc - u) ** 2 + (rr - v) ** 2
    ok = depth.valid[rr, cc] & (d2 <= window**2)
    if not ok.any():
        return None
    d2 = np.where(ok, d2, np.inf)
    i = np.unravel_index(np.argmin(d2), d2.shape)
    return float(depth.data[rr[i], cc[i]])


def lift_with_depth(det: Detection2D, depth: DepthMap, view: CameraView) -> Keypoints3D:
    """Assign each reference-view 2D keypoint the depth found near it."""
    n = len(det.keypoints)
    pts = np.full((n, 3), np.nan)
    for i, px in enumerate(det.keypoints):
        z = nearest_valid_depth(depth, px)
        if z is not None and z > 0:
            pts[i] = pixel_rays(view.intrinsics, px) * z
    return Keypoints3D(pts, np.all(np.isfinite(pts), axis=1))


def _normalized(view: CameraView, pixels: np.ndarray) -> np.ndarray:
    return pixel_rays(view.intrinsics, pixels)[:, :2]


def triangulate_pair(det_ref: Detection2D, det_query: Detection2D, ref: CameraView, query: CameraView) -> Keypoints3D:
    """Linear (DLT) two-view triangulation, returned in the reference-camera frame."""
    if np.linalg.norm(ref.center - query.center) < 1e-9:
        raise DegenerateGeometry("camera centers coincide")
    xr, xq = np.asarray(det_ref.keypoints, float), np.asarray(det_query.keypoints, float)
    if xr.shape != xq.shape:
        raise ValueError("detections differ in keypoint count")
    rows = []
    for view, x in ((ref, _normalized(ref, xr)), (query, _normalized(query, xq))):
        p = np.hstack([view.world_to_camera.rotation, view.world_to_camera.translation[:, None]])
        rows.append(x[:, 0:1] * p[2] - p[0])
        rows.append(x[:, 1:2] * p[2] - p[1])
    a = np.stack(rows, axis=1)  # (N, 4, 4)
    a = a / np.linalg.norm(a, axis=2, keepdims=True)
    _, _, vt = np.linalg.svd(a)
    xh = vt[:, -1, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        world = xh[:, :3] / xh[:, 3:4]
    valid = np.all(np.isfinite(world), axis=1)
    for view in (ref, query):
        z = transform(view.world_to_camera, np.where(valid[:, None], world, 0.0))[:, 2]
        valid &= z > 1e-9
    pts = transform(ref.world_to_camera, np.where(valid[:, None], world, 0.0))
    return Keypoints3D(pts, valid)
