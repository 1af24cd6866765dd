"""Rigid alignment of keypoint sets and the soft RANSAC pose solver.

Every 3-subset of valid keypoints yields a Kabsch hypothesis. Each hypothesis
is scored by a sum of sigmoids of its keypoint residuals, and the final pose
is the score-weighted mean: a convex combination of translations, and the
chordal mean of rotations projected back onto SO(3).
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations

import numpy as np
from scipy.special import expit

from .errors import AllHypothesesDegenerate, DegenerateConfiguration, TooFewPoints, ZeroTotalWeight
from .fusion import Keypoints3D
from .geometry import Pose, project_to_so3, transform

DEGENERACY_RATIO = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    gamma1: float = 300.0  # 1/m, sigmoid sharpness
    gamma2: float = 0.02  # m, soft inlier distance
    min_hypothesis_weight: float = 1e-12

    def __post_init__(self):
        if not (self.gamma1 > 0 and self.gamma2 > 0):
            raise ValueError("gamma1 and gamma2 must be positive")
        if not self.min_hypothesis_weight >= 0:
            raise ValueError("min_hypothesis_weight must be nonnegative")


@dataclass(frozen=True, eq=False)
class HypothesisSet:
    """All non-degenerate triplet hypotheses with their soft inlier counts."""

    poses: list[Pose]
    weights: np.ndarray
    triplets: list[tuple[int, int, int]]
    n_degenerate: int = 0

    def __len__(self):
        return len(self.poses)


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta1, self.beta2, self.beta3) < 0:
            raise ValueError("loss weights must be nonnegative")


def _kabsch_batch(src: np.ndarray, dst: np.ndarray, w: np.ndarray):
    """Weighted Kabsch over a leading batch axis.

    Returns rotations, translations and a degeneracy flag per batch entry.
    """
    ws = w.sum(-1, keepdims=True)
    cs = np.einsum("bn,bni->bi", w, src) / ws
    cd = np.einsum("bn,bni->bi", w, dst) / ws
    h = np.einsum("bn,bni,bnj->bij", w, src - cs[:, None], dst - cd[:, None])
    u, sv, vt = np.linalg.svd(h)
    degenerate = ~(sv[:, 1] >= DEGENERACY_RATIO * sv[:, 0]) | ~(sv[:, 0] > 0)
    d = np.sign(np.linalg.det(vt.transpose(0, 2, 1) @ u.transpose(0, 2, 1)))
    d[d == 0] = 1.0
    fix = np.ones_like(sv)
    fix[:, 2] = d
    r = vt.transpose(0, 2, 1) @ (fix[:, :, None] * u.transpose(0, 2, 1))
    t = cd - np.einsum("bij,bj->bi", r, cs)
    return r, t, degenerate


def kabsch(src: np.ndarray, dst: np.ndarray, w=None) -> tuple[np.ndarray, np.ndarray]:
    """Weighted least-squares ``(R, t)`` taking ``src`` onto ``dst`` (no checks)."""
    src = np.asarray(src, dtype=float)
    w = np.ones(len(src)) if w is None else np.asarray(w, dtype=float)
    r, t, _ = _kabsch_batch(src[None], np.asarray(dst, dtype=float)[None], w[None])
    return r[0], t[0]


def _as_keypoints(pred) -> Keypoints3D:
    return pred if isinstance(pred, Keypoints3D) else Keypoints3D.all_valid(pred)


def kabsch_align(model_kps, pred_kps, weights=None) -> Pose:
    """Pose minimizing ``sum_i w_i |pose(P_i) - pred_i|^2`` over valid pairs."""
    model_kps = np.asarray(model_kps, dtype=float).reshape(-1, 3)
    pred = _as_keypoints(pred_kps)
    if len(pred) != len(model_kps):
        raise ValueError("model and predicted keypoints differ in count")
    w = np.ones(len(pred)) if weights is None else np.asarray(weights, dtype=float)
    use = pred.valid & (w > 0)
    if use.sum() < 3:
        raise TooFewPoints("need at least 3 valid weighted pairs")
    r, t, bad = _kabsch_batch(model_kps[use][None], pred.points[use][None], w[use][None])
    if bad[0]:
        raise DegenerateConfiguration("keypoints are collinear or coincident")
    return Pose(r[0], t[0])


def hypothesis_distances(theta: Pose, model_kps, pred_kps) -> np.ndarray:
    """``|theta(P_i) - pred_i|`` per keypoint; +inf where the prediction is invalid."""
    pred = _as_keypoints(pred_kps)
    d = np.linalg.norm(transform(theta, model_kps) - np.nan_to_num(pred.points), axis=1)
    return np.where(pred.valid, d, np.inf)


def soft_weights(distances, cfg: SolverConfig) -> np.ndarray:
    """Soft inlier count per hypothesis, ``sum_i sigmoid(gamma1 (gamma2 - d))``."""
    return expit(cfg.gamma1 * (cfg.gamma2 - np.asarray(distances, dtype=float))).sum(-1)


def soft_ransac(model_kps, pred_kps, cfg: SolverConfig | None = None) -> tuple[Pose, HypothesisSet]:
    """Aggregate all 3-point Kabsch hypotheses by their soft inlier counts."""
    cfg = cfg or SolverConfig()
    model_kps = np.asarray(model_kps, dtype=float).reshape(-1, 3)
    pred = _as_keypoints(pred_kps)
    if len(pred) != len(model_kps):
        raise ValueError("model and predicted keypoints differ in count")
    idx = np.flatnonzero(pred.valid)
    if len(idx) < 4:
        raise TooFewPoints(f"soft RANSAC needs 4 valid keypoints, got {len(idx)}")

    triplets = np.array(list(combinations(idx, 3)))
    src, dst = model_kps[triplets], pred.points[triplets]
    r, t, bad = _kabsch_batch(src, dst, np.ones(triplets.shape))
    if bad.all():
        raise AllHypothesesDegenerate(f"all {len(triplets)} triplets are degenerate")
    r, t, triplets = r[~bad], t[~bad], triplets[~bad]

    # residuals of every hypothesis at every keypoint, inf where invalid
    moved = np.einsum("kij,nj->kni", r, model_kps) + t[:, None, :]
    d = np.linalg.norm(moved - np.nan_to_num(pred.points)[None], axis=2)
    d[:, ~pred.valid] = np.inf
    s = soft_weights(d, cfg)
    total = s.sum()
    if not total >= cfg.min_hypothesis_weight or total <= 0:
        raise ZeroTotalWeight(f"total hypothesis weight {total:.3g}")

    a = s / total
    rot = project_to_so3(np.einsum("k,kij->ij", a, r))
    trans = a @ t
    hyps = HypothesisSet(
        poses=[Pose(project_to_so3(ri), ti) for ri, ti in zip(r, t)],
        weights=s,
        triplets=[tuple(int(i) for i in tr) for tr in triplets],
        n_degenerate=int(bad.sum()),
    )
    return Pose(rot, trans), hyps


def pose_loss(pred: Pose, gt: Pose, cfg: LossConfig | None = None) -> float:
    """``|t_pred - t_gt| + alpha |R_pred R_gt^T - I|_F``."""
    cfg = cfg or LossConfig()
    dt = np.linalg.norm(pred.translation - gt.translation)
    dr = np.linalg.norm(pred.rotation @ gt.rotation.T - np.eye(3))
    return float(dt + cfg.alpha * dr)


def keypoint_loss(pred, gt) -> float:
    """Mean Euclidean distance over valid predicted keypoints."""
    pred = _as_keypoints(pred)
    gt = np.asarray(gt.points if isinstance(gt, Keypoints3D) else gt, dtype=float)
    if not pred.valid.any():
        raise TooFewPoints("no valid keypoints")
    return float(np.linalg.norm(pred.points[pred.valid] - gt[pred.valid], axis=1).mean())


def joint_loss(levels, cfg: LossConfig | None = None) -> float:
    """Weighted sum over levels of ``(pose, keypoint, kl)`` loss triples."""
    cfg = cfg or LossConfig()
    total = 0.0
    for pose_term, kpt_term, kl_term in levels:
        total += cfg.beta1 * pose_term + cfg.beta2 * kpt_term + cfg.beta3 * kl_term
    return float(total)
