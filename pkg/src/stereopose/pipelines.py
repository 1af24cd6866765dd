"""The three two-view fusion routes, run end to end on one observed scene.

Each route turns a scene's oracle observations into reference-frame 3D
keypoints, then soft RANSAC turns those into the object pose.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fusion import Keypoints3D, lift_with_depth, triangulate_pair
from .geometry import Pose, compose
from .scene import ObjectModel, SceneObservations
from .solver import SolverConfig, soft_ransac
from .volume import (
    COARSE_CELL,
    COARSE_HALF_EXTENT,
    DEFAULT_GUESS_DEPTH,
    FINE_CELL,
    FINE_EXTENT_FACTOR,
    AffinityRegularizer,
    RegistrationRegularizer,
    coarse_spec,
    initial_guess,
    refine_coarse_to_fine,
)

APPROACHES = ("early", "mid", "late")
GUESS_MODES = ("detection", "gt")
REGULARIZERS = {"registration": RegistrationRegularizer, "affinity": AffinityRegularizer}


@dataclass(frozen=True)
class VolumeConfig:
    """Mid-Fusion settings.

    ``guess`` picks the coarse volume center: the back-projected detection
    centroid at ``guess_depth``, or the ground-truth object center displaced
    by Gaussian noise of ``guess_sigma`` per axis (for controlled studies).
    """

    coarse_cell: float = COARSE_CELL
    coarse_half_extent: float = COARSE_HALF_EXTENT
    fine_cell: float = FINE_CELL
    fine_extent_factor: float = FINE_EXTENT_FACTOR
    guess: str = "detection"
    guess_depth: float = DEFAULT_GUESS_DEPTH
    guess_sigma: float = 0.0
    regularizer: str = "registration"
    tau_c: float = 0.03
    tau_a: float = 0.03

    def __post_init__(self):
        if self.guess not in GUESS_MODES:
            raise ValueError(f"guess must be one of {GUESS_MODES}")
        if self.regularizer not in REGULARIZERS:
            raise ValueError(f"regularizer must be one of {tuple(REGULARIZERS)}")
        for name in ("coarse_cell", "coarse_half_extent", "fine_cell", "fine_extent_factor", "guess_depth", "tau_c", "tau_a"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.guess_sigma < 0:
            raise ValueError("guess_sigma must be >= 0")

    def make_regularizer(self):
        return REGULARIZERS[self.regularizer](tau_c=self.tau_c, tau_a=self.tau_a)


def gt_pose_in_ref(obs: SceneObservations) -> Pose:
    """Ground-truth model-to-reference-camera pose."""
    return compose(obs.scene.ref_view.world_to_camera, obs.scene.gt_pose)


def _volume_center(model: ObjectModel, obs: SceneObservations, cfg: VolumeConfig, seed: int) -> np.ndarray:
    if cfg.guess == "detection":
        return initial_guess(obs.det_ref.keypoints, obs.scene.ref_view, cfg.guess_depth)
    center = obs.gt_keypoints.mean(axis=0)
    rng = np.random.default_rng([seed, 2])
    return center + rng.normal(0.0, cfg.guess_sigma, 3)


def estimate_keypoints(approach: str, model: ObjectModel, obs: SceneObservations,
                       volume: VolumeConfig | None = None, seed: int = 0) -> Keypoints3D:
    """3D keypoints in the reference-camera frame from one fusion route."""
    sc = obs.scene
    if approach == "early":
        return lift_with_depth(obs.det_ref, obs.depth_ref, sc.ref_view)
    if approach == "late":
        return triangulate_pair(obs.det_ref, obs.det_query, sc.ref_view, sc.query_view)
    if approach == "mid":
        cfg = volume or VolumeConfig()
        coarse = coarse_spec(_volume_center(model, obs, cfg, seed), cfg.coarse_half_extent, cfg.coarse_cell)
        return refine_coarse_to_fine(
            obs.feat_ref, obs.feat_query, sc.ref_view, sc.query_view, coarse, model,
            regularizer=cfg.make_regularizer(), fine_cell=cfg.fine_cell,
            fine_extent_factor=cfg.fine_extent_factor,
        )
    raise ValueError(f"unknown approach {approach!r}")


def estimate_pose(approach: str, model: ObjectModel, obs: SceneObservations,
                  solver: SolverConfig | None = None, volume: VolumeConfig | None = None,
                  seed: int = 0) -> tuple[Pose, Keypoints3D]:
    """Keypoints from ``approach`` followed by soft RANSAC; pose is model-to-reference."""
    kps = estimate_keypoints(approach, model, obs, volume, seed)
    pose, _ = soft_ransac(model.keypoints, kps, solver or SolverConfig())
    return pose, kps
