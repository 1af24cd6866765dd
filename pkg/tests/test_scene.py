import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stereopose.errors import ModelLoadError, SamplingExhausted, TooFewPoints
from stereopose.geometry import CameraIntrinsics, project_points, transform
from stereopose.scene import (
    NULL_DESCRIPTOR,
    SPLAT_DEPTH_TOL,
    NoiseModel,
    ObjectModel,
    encode_coordinates,
    keypoint_visibility,
    load_model,
    observe,
    parametric_model,
    read_ply,
    render_depth_oracle,
    render_visibility,
    sample_scene,
    select_keypoints,
    simulate_detector,
    synth_feature_map,
    write_ply,
)

CUBE = np.array(list(itertools.product((0.0, 1.0), repeat=3)))


def greedy_fps_oracle(points, n):
    """Plain-loop FPS used as an independent reference."""
    c = [sum(p[a] for p in points) / len(points) for a in range(3)]
    dist = lambda p, q: sum((p[a] - q[a]) ** 2 for a in range(3)) ** 0.5
    start = max(range(len(points)), key=lambda i: (dist(points[i], c), -i))
    chosen = [start]
    while len(chosen) < n - 1:
        best = max(range(len(points)), key=lambda i: (min(dist(points[i], points[j]) for j in chosen), -i))
        chosen.append(best)
    return [c] + [list(points[i]) for i in chosen]


# ---------------------------------------------------------------------------
# models and keypoints
# ---------------------------------------------------------------------------


def test_select_keypoints_cube_matches_exhaustive_fps():
    kps = select_keypoints(CUBE, 4)
    assert np.allclose(kps, greedy_fps_oracle(CUBE, 4))
    # all corners tie as the start, then the opposite corner, then ties at
    # distance 1 resolve to the lowest index
    assert np.allclose(kps, [[0.5, 0.5, 0.5], [0, 0, 0], [1, 1, 1], [0, 0, 1]])


def test_select_keypoints_single_is_centroid():
    assert np.allclose(select_keypoints(CUBE, 1), [[0.5, 0.5, 0.5]])


def test_select_keypoints_too_few():
    with pytest.raises(TooFewPoints):
        select_keypoints(CUBE[:3], 9)
    with pytest.raises(TooFewPoints):
        select_keypoints(np.empty((0, 3)), 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(4, 9))
def test_select_keypoints_greedy_step(seed, n):
    pts = np.random.default_rng(seed).normal(size=(60, 3))
    kps = select_keypoints(pts, n)
    assert np.allclose(kps, greedy_fps_oracle(pts, n))
    # every pick maximizes its distance to the previous picks
    for k in range(2, n):
        prev = kps[1:k]
        d_pick = np.min(np.linalg.norm(prev - kps[k], axis=1))
        d_all = np.min(np.linalg.norm(pts[:, None] - prev[None], axis=2), axis=1)
        assert d_pick == pytest.approx(d_all.max())


def test_object_model_invariants(models):
    for m in models.values():
        assert m.n_keypoints == 9
        pts = m.metric_points()
        assert len(pts) <= 1000
    m = models["box"]
    assert m.diameter == pytest.approx(np.sqrt(0.10**2 + 0.07**2 + 0.05**2), abs=1e-9)
    assert models["cylinder"].symmetric and not m.symmetric
    with pytest.raises(ValueError):
        ObjectModel("x", m.surface_points, m.keypoints, diameter=m.diameter + 1e-6)
    with pytest.raises(TooFewPoints):
        ObjectModel("x", m.surface_points, m.keypoints[:3])
    with pytest.raises(ValueError):
        ObjectModel("x", m.surface_points, np.vstack([m.keypoints[:8], [[1.0, 1.0, 1.0]]]))


def test_parametric_specs_and_errors():
    m = parametric_model("box:0.1,0.06,0.04")
    assert m.diameter == pytest.approx(np.sqrt(0.1**2 + 0.06**2 + 0.04**2), abs=1e-9)
    for bad in ("sphere", "box:1,2", "cylinder:a,b", "box:-1,1,1"):
        with pytest.raises(ModelLoadError):
            parametric_model(bad)


def test_ply_round_trip(tmp_path):
    pts = np.random.default_rng(0).uniform(-0.05, 0.05, (200, 3))
    path = tmp_path / "obj.ply"
    write_ply(path, pts)
    assert np.allclose(read_ply(path), pts, atol=1e-9)
    m = load_model(str(path))
    assert m.n_keypoints == 9
    (tmp_path / "bad.ply").write_text("not a ply\n")
    with pytest.raises(ModelLoadError):
        load_model(str(tmp_path / "bad.ply"))
    with pytest.raises(ModelLoadError):
        load_model(str(tmp_path / "missing.ply"))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------


def test_sample_scene_contract(models):
    k = CameraIntrinsics.linemod()
    for name, m in models.items():
        for seed in range(20):
            sc = sample_scene(m, 0.10, seed)
            assert abs(np.linalg.norm(sc.query_view.center - sc.ref_view.center) - 0.10) <= 1e-12
            center = transform(sc.gt_pose, m.surface_points.mean(axis=0))
            assert 0.6 <= center[2] <= 1.2
            for view in (sc.ref_view, sc.query_view):
                uv, z = project_points(view, transform(sc.gt_pose, m.keypoints))
                assert np.all(z > 0)
                assert np.all((uv >= 0) & (uv <= [k.width - 1, k.height - 1]))


def test_sample_scene_zero_baseline_and_determinism(models):
    m = models["triblock"]
    sc = sample_scene(m, 0.0, 3)
    assert np.allclose(sc.ref_view.world_to_camera.matrix(), sc.query_view.world_to_camera.matrix())
    a, b = sample_scene(m, 0.2, 11), sample_scene(m, 0.2, 11)
    assert np.array_equal(a.gt_pose.matrix(), b.gt_pose.matrix())
    assert np.array_equal(a.query_view.world_to_camera.matrix(), b.query_view.world_to_camera.matrix())


def test_sample_scene_errors(models):
    with pytest.raises(ValueError):
        sample_scene(models["box"], -0.1, 0)
    tiny = CameraIntrinsics(10.0, 10.0, 0.0, 0.0, 1, 1)
    with pytest.raises(SamplingExhausted):
        sample_scene(models["box"], 0.1, 0, intrinsics=tiny)


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------


def test_depth_at_keypoint_within_pixel_surface_spread(models):
    zero = NoiseModel.zero()
    for seed in range(6):
        m = models[("box", "cylinder", "triblock")[seed % 3]]
        sc = sample_scene(m, 0.1, seed)
        depth = render_depth_oracle(m, sc.ref_view, sc.gt_pose, zero)
        surf_uv, surf_z = project_points(sc.ref_view, transform(sc.gt_pose, m.surface_points))
        surf_px = np.floor(surf_uv + 0.5)
        uv, z = project_points(sc.ref_view, transform(sc.gt_pose, m.keypoints))
        vis = keypoint_visibility(m, sc.ref_view, sc.gt_pose)
        for k in np.flatnonzero(vis):
            px = np.floor(uv[k] + 0.5)
            c, r = int(px[0]), int(px[1])
            if not depth.valid[r, c]:
                continue
            zs = surf_z[np.all(surf_px == px, axis=1)]
            front = zs[zs <= zs.min() + SPLAT_DEPTH_TOL]
            assert abs(depth.data[r, c] - z[k]) <= np.max(np.abs(front - z[k])) + 1e-12


def test_depth_quantized_to_exact_multiples(models):
    m = models["box"]
    sc = sample_scene(m, 0.1, 0)
    noise = NoiseModel(depth_sigma=0.0, depth_quantum=0.0035)
    d = render_depth_oracle(m, sc.ref_view, sc.gt_pose, noise).data
    v = d[np.isfinite(d)]
    assert len(v) > 1000
    assert np.max(np.abs(v / 0.0035 - np.round(v / 0.0035))) <= 1e-9


def test_depth_invalid_pixels_are_nan_and_empty_model(models):
    m = models["box"]
    sc = sample_scene(m, 0.1, 0)
    d = render_depth_oracle(m, sc.ref_view, sc.gt_pose, NoiseModel())
    assert np.all(np.isnan(d.data[~d.valid]))
    assert np.all(d.data[d.valid] > 0)
    empty = render_depth_oracle(np.empty((0, 3)), sc.ref_view, sc.gt_pose, NoiseModel())
    assert not empty.valid.any()


def test_visibility_prefers_center_among_near_points():
    k = CameraIntrinsics(100.0, 100.0, 2.0, 2.0, 5, 5)
    from stereopose.geometry import CameraView, Pose

    view = CameraView(k)
    # all three hit pixel (2, 2); the first is in front but off-center, the
    # second is centered but within the depth tolerance, the third is far behind
    pts = np.array([[0.004, 0.0, 1.0], [0.0, 0.0, 1.003], [0.0, 0.0, 1.2]])
    idx = render_visibility(pts, view, Pose.identity())
    assert idx[2, 2] == 1
    pts[1, 2] = 1.0 + 2 * SPLAT_DEPTH_TOL
    assert render_visibility(pts, view, Pose.identity())[2, 2] == 0


def test_detector_examples():
    gt = np.random.default_rng(0).uniform(0, 600, (9, 2))
    none = NoiseModel(pixel_sigma=0.0, outlier_rate=0.0)
    assert np.array_equal(simulate_detector(gt, none, 0).keypoints, gt)

    out = simulate_detector(gt, NoiseModel(outlier_rate=1.0, outlier_magnitude=50.0), 1)
    assert np.allclose(np.linalg.norm(out.keypoints - gt, axis=1), 50.0, atol=1e-9)

    det = simulate_detector(gt, NoiseModel(pixel_sigma=1.5, pixel_covariance_anisotropy=4.0), 2)
    cov = det.covariances
    assert np.allclose(cov, np.swapaxes(cov, 1, 2))
    assert np.all(np.linalg.eigvalsh(cov) >= -1e-12)


def test_detector_rayleigh_mean():
    gt = np.zeros((100_000, 2))
    det = simulate_detector(gt, NoiseModel(pixel_sigma=2.0, outlier_rate=0.0), 5)
    mean = np.linalg.norm(det.keypoints, axis=1).mean()
    assert abs(mean - 2.0 * np.sqrt(np.pi / 2)) <= 0.03 * 2.0 * np.sqrt(np.pi / 2)


def test_feature_map_decodes_visible_surface(models):
    m = models["triblock"]
    sc = sample_scene(m, 0.1, 4)
    fmap = synth_feature_map(m, sc.ref_view, sc.gt_pose, NoiseModel.zero())
    assert np.all(fmap.data[~fmap.mask] == NULL_DESCRIPTOR)
    uv, _ = project_points(sc.ref_view, transform(sc.gt_pose, m.keypoints))
    vis = keypoint_visibility(m, sc.ref_view, sc.gt_pose)
    errs = []
    for k in np.flatnonzero(vis):
        c, r = (int(x) for x in np.floor(uv[k] + 0.5))
        assert fmap.mask[r, c]
        decoded = fmap.data[r, c, :3]
        # the decoded point lands in the keypoint's pixel
        duv, _ = project_points(sc.ref_view, transform(sc.gt_pose, decoded))
        assert np.array_equal(np.floor(duv + 0.5), [c, r])
        errs.append(np.linalg.norm(decoded - m.keypoints[k]))
    assert np.median(errs) < 0.002


def test_descriptors_are_view_independent(models):
    m = models["box"]
    sc = sample_scene(m, 0.2, 1)
    zero = NoiseModel.zero()
    fr = synth_feature_map(m, sc.ref_view, sc.gt_pose, zero)
    fq = synth_feature_map(m, sc.query_view, sc.gt_pose, zero)
    vr = render_visibility(m, sc.ref_view, sc.gt_pose)
    vq = render_visibility(m, sc.query_view, sc.gt_pose)
    common = np.intersect1d(vr[vr >= 0], vq[vq >= 0])
    assert len(common) > 100
    for i in common[:50]:
        a = fr.data[vr == i][0]
        b = fq.data[vq == i][0]
        assert np.array_equal(a, b)
        assert np.array_equal(a, encode_coordinates(m.surface_points[i]))


def test_encoding_stays_inside_range():
    x = np.random.default_rng(0).uniform(-0.3, 0.3, (1000, 3))
    enc = encode_coordinates(x, 9)
    assert enc.shape == (1000, 9)
    assert np.all(enc > NULL_DESCRIPTOR + 100)


def test_observe_masks_agree_and_is_deterministic(models):
    m = models["cylinder"]
    sc = sample_scene(m, 0.1, 2)
    a, b = observe(m, sc, NoiseModel(), 2), observe(m, sc, NoiseModel(), 2)
    assert np.array_equal(a.depth_ref.valid, a.feat_ref.mask)
    for f in ("det_ref", "det_query"):
        assert np.array_equal(getattr(a, f).keypoints, getattr(b, f).keypoints)
    assert np.array_equal(a.feat_query.data, b.feat_query.data)
    assert np.array_equal(a.depth_ref.data, b.depth_ref.data, equal_nan=True)


def test_noise_model_validation():
    with pytest.raises(ValueError):
        NoiseModel(pixel_sigma=-1.0)
    with pytest.raises(ValueError):
        NoiseModel(outlier_rate=1.5)
    with pytest.raises(ValueError):
        NoiseModel(pixel_covariance_anisotropy=0.5)
