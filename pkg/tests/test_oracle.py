"""Synthetic-scene oracle: analytic render geometry, ground-truth flow
against hand formulas, warp/flow closure, and training-set corruption
bookkeeping."""

import numpy as np
import pytest

from pointweave import (
    CameraIntrinsics,
    CameraRig,
    DcmNetwork,
    Plane,
    Pose,
    Scene,
    Sphere,
    ValidationError,
    consistency_loss,
    covisibility_mask,
    desk_intrinsics,
    ground_truth_flow,
    lift_to_points,
    make_scene,
    make_trajectory,
    make_training_set,
    render,
    render_trajectory,
    reproject,
    warp_by_flow,
)
from pointweave.oracle import raycast


def flat_tex(color=(0.5, 0.4, 0.3)):
    return dict(
        base=np.asarray(color, dtype=np.float64),
        amp=np.zeros(3),
        freq=np.zeros((3, 3)),
        phase=np.zeros(3),
    )


def wall(z=5.0, half=50.0, **tex):
    return Plane(axis=2, offset=z, lo=np.array([-half, -half]), hi=np.array([half, half]), **(tex or flat_tex()))


def axis_rig(w=64, h=64, fx=100.0, tx=0.0):
    # integer principal point so one pixel looks straight down the optical axis
    k = CameraIntrinsics(fx, fx, w // 2, h // 2, w, h)
    return CameraRig(k, Pose(np.eye(3), np.array([tx, 0.0, 0.0])))


# ----------------------------------------------------------------- render


def test_plane_depth_exact():
    frame = render(Scene((wall(z=5.0),), np.zeros(3)), axis_rig())
    assert frame.depth.valid.all()
    assert np.max(np.abs(frame.depth.values - 5.0)) < 1e-12


def test_sphere_center_pixel_depth():
    s = Sphere(center=np.array([0.0, 0.0, 6.0]), radius=1.5, **flat_tex())
    frame = render(Scene((s,), np.zeros(3)), axis_rig())
    assert frame.depth.valid[32, 32]
    assert abs(frame.depth.values[32, 32] - 4.5) < 1e-12


def test_nearest_primitive_wins():
    near, far = wall(z=3.0, **flat_tex((0.9, 0.1, 0.1))), wall(z=7.0, **flat_tex((0.1, 0.9, 0.1)))
    frame = render(Scene((far, near), np.zeros(3)), axis_rig())
    assert np.max(np.abs(frame.depth.values - 3.0)) < 1e-12
    assert (frame.prim_id == 1).all()
    assert np.allclose(frame.color, [0.9, 0.1, 0.1])


def test_background_pixels_invalid():
    # small plane covers only part of the frame
    frame = render(Scene((wall(z=5.0, half=1.0),), np.array([0.2, 0.3, 0.4])), axis_rig())
    assert frame.depth.valid.any() and not frame.depth.valid.all()
    outside = ~frame.depth.valid
    assert np.allclose(frame.color[outside], [0.2, 0.3, 0.4])
    assert (frame.depth.values[outside] == 0.0).all()
    assert (frame.prim_id[outside] == -1).all()


def test_render_deterministic():
    scene = make_scene(11)
    rig = CameraRig(desk_intrinsics(64), Pose.identity())
    a, b = render(scene, rig), render(scene, rig)
    assert a.color.tobytes() == b.color.tobytes()
    assert a.depth.values.tobytes() == b.depth.values.tobytes()
    assert np.array_equal(a.prim_id, b.prim_id)


def test_scene_coverage_floor():
    # every camera an oracle test uses must see mostly scene, not background
    for seed in (0, 5, 9):
        scene = make_scene(seed)
        rigs = make_trajectory(desk_intrinsics(64), 7, step_translation=(0.06, 0.02, 0.01))
        for frame in render_trajectory(scene, rigs):
            assert frame.depth.valid.mean() >= 0.3


# ----------------------------------------------------------------- flow


def test_identity_pair_zero_flow():
    scene = make_scene(3)
    rig = CameraRig(desk_intrinsics(64), Pose.identity())
    res = ground_truth_flow(scene, rig, rig)
    assert (res.flow == 0.0).all()
    hit = render(scene, rig).depth.valid
    assert np.array_equal(res.occlusion, hit.astype(np.float64))


def test_stereo_disparity_hand_value():
    # pure horizontal baseline before a fronto-parallel plane:
    # du = fx * baseline / z = 100 * 0.2 / 5 = 4, dv = 0
    scene = Scene((wall(z=5.0),), np.zeros(3))
    res = ground_truth_flow(scene, axis_rig(tx=0.0), axis_rig(tx=0.2))
    occ = res.occlusion == 1.0
    assert occ.mean() > 0.9
    assert np.max(np.abs(res.flow[occ][:, 0] - 4.0)) < 1e-9
    assert np.max(np.abs(res.flow[occ][:, 1])) < 1e-9


def smooth_tex(rng):
    base = rng.uniform(0.3, 0.7, 3)
    amp = np.minimum(rng.uniform(0.05, 0.25, 3), np.minimum(base, 1 - base) - 1e-3)
    return dict(base=base, amp=amp, freq=rng.uniform(-0.6, 0.6, (3, 3)), phase=rng.uniform(0, 2 * np.pi, 3))


def terrace_scene():
    """Fronto-parallel slabs at two depths plus a slanted side wall and
    floor, arranged so no two surfaces touch: every inter-surface boundary
    is a depth jump the occlusion gate removes, and every surviving
    sampling cell lies on a single plane."""
    rng = np.random.default_rng(1)
    return Scene(
        (
            Plane(axis=2, offset=8.0, lo=np.array([-9.0, -9.0]), hi=np.array([9.0, 9.0]), **smooth_tex(rng)),
            Plane(axis=2, offset=5.0, lo=np.array([-4.0, -4.0]), hi=np.array([0.0, 4.0]), **smooth_tex(rng)),
            Plane(axis=0, offset=2.5, lo=np.array([-4.0, 1.0]), hi=np.array([4.0, 7.5]), **smooth_tex(rng)),
            Plane(axis=1, offset=1.8, lo=np.array([-9.0, 1.0]), hi=np.array([2.3, 7.2]), **smooth_tex(rng)),
        ),
        np.zeros(3),
    )


def test_flow_depth_closure():
    # warping frame a's depth by the backward flow reproduces the
    # reprojected depth on trusted pixels, including slanted geometry
    scene = terrace_scene()
    res = 256
    rigs = make_trajectory(desk_intrinsics(res), 2, step_translation=(0.05, -0.04, 0.02), yaw_step_deg=1.5)
    r = ground_truth_flow(scene, rigs[0], rigs[1])
    warped = warp_by_flow(render(scene, rigs[0]).depth, r.flow)
    sel = (r.occlusion == 1.0) & warped.valid
    assert sel.mean() > 0.5
    # the check must cover depth that varies across the image, not just slabs
    _, pid_b = raycast(scene, rigs[1], *np.meshgrid(np.arange(res, dtype=float), np.arange(res, dtype=float)))
    assert (sel & (pid_b >= 2)).sum() > 1000
    assert np.max(np.abs(warped.values[sel] - r.source_depth[sel])) < 1e-3


def test_flow_color_closure():
    scene = terrace_scene()
    rigs = make_trajectory(desk_intrinsics(256), 2, step_translation=(0.05, -0.04, 0.02), yaw_step_deg=1.5)
    r = ground_truth_flow(scene, rigs[0], rigs[1])
    warped, ok = warp_by_flow(render(scene, rigs[0]).color, r.flow)
    sel = (r.occlusion == 1.0) & ok
    diff = np.abs(warped[sel] - render(scene, rigs[1]).color[sel])
    assert np.max(diff) <= 2.0 / 255.0


def test_mixed_scene_closure_bounds():
    # curved surfaces: trusted cells still interpolate within the occlusion
    # gate's depth-range budget, and texture stays within quantization
    worst_c = worst_d = 0.0
    for seed in range(8):
        scene = make_scene(seed)
        rigs = make_trajectory(desk_intrinsics(64), 2, step_translation=(0.08, 0.03, 0.0))
        r = ground_truth_flow(scene, rigs[0], rigs[1])
        fa, fb = render(scene, rigs[0]), render(scene, rigs[1])
        warped = warp_by_flow(fa.depth, r.flow)
        sel = (r.occlusion == 1.0) & warped.valid
        worst_d = max(worst_d, np.max(np.abs(warped.values[sel] - r.source_depth[sel])))
        cw, okc = warp_by_flow(fa.color, r.flow)
        selc = (r.occlusion == 1.0) & okc
        worst_c = max(worst_c, np.max(np.abs(cw[selc] - fb.color[selc])))
    assert worst_c <= 2.0 / 255.0
    # bilinear depth on a sphere limb errs up to O(cell depth range); the
    # 1% gate caps that range, bounding the error well under tau * z
    assert worst_d < 5e-3


def test_occlusion_flags_hidden_surface():
    # a small near plane hides part of a far wall from the left camera;
    # pixels of the right camera that see the wall there must be flagged
    blocker = Plane(
        axis=2, offset=2.0, lo=np.array([-0.4, -0.4]), hi=np.array([0.4, 0.4]), **flat_tex((0.8, 0.2, 0.2))
    )
    scene = Scene((wall(z=5.0), blocker), np.zeros(3))
    res = ground_truth_flow(scene, axis_rig(tx=0.0), axis_rig(tx=0.5))
    _, pid_b = raycast(
        scene,
        axis_rig(tx=0.5),
        *np.meshgrid(np.arange(64, dtype=np.float64), np.arange(64, dtype=np.float64)),
    )
    wall_px = pid_b == 0
    assert (res.occlusion[wall_px] == 0.0).any()
    assert (res.occlusion == 1.0).mean() > 0.4


# ----------------------------------------------------------------- cross-pose geometry


def continuous_recast_errors(scene, rig_a, rig_b):
    """Lift pose a, splat into pose b, then ray-cast the oracle at each
    splatted point's continuous subpixel projection. Returns |depth error|
    on pixels whose ray hits the same surface point, plus that mask."""
    fa = render(scene, rig_a)
    cloud = lift_to_points(fa.color, fa.depth, rig_a)
    repro = reproject(cloud, rig_b)
    covered = repro.point_index >= 0
    pts = cloud.positions[repro.point_index[covered]]

    k = rig_b.intrinsics
    p_cam = (pts - rig_b.pose.translation) @ rig_b.pose.rotation
    z = p_cam[:, 2]
    u = k.fx * p_cam[:, 0] / z + k.cx
    v = k.fy * p_cam[:, 1] / z + k.cy
    z_hit, pid = raycast(scene, rig_b, u, v)
    hit_world = rig_b.pose.translation + z_hit[:, None] * (k.pixel_rays(u, v) @ rig_b.pose.rotation.T)
    same_point = (pid >= 0) & (np.linalg.norm(hit_world - pts, axis=1) < 1e-4)
    return np.abs(z_hit[same_point] - repro.depth.values[covered][same_point]), same_point


def test_cross_pose_depth_against_oracle():
    scene = make_scene(4)
    rigs = make_trajectory(desk_intrinsics(64), 2, step_translation=(0.07, -0.02, 0.01), yaw_step_deg=2.0)
    errors, visible = continuous_recast_errors(scene, rigs[0], rigs[1])
    assert visible.mean() > 0.5
    assert errors.size and np.max(errors) < 1e-5


def test_covisibility_matches_reprojection_coverage():
    scene = make_scene(8)
    rigs = make_trajectory(desk_intrinsics(64), 2, step_translation=(0.05, 0.02, 0.0))
    fa = render(scene, rigs[0])
    covis = covisibility_mask(scene, rigs[0], rigs[1])  # pixels of a visible in b
    # a surface point visible in both views must be splattable into b
    cloud = lift_to_points(fa.color, fa.depth, rigs[0])
    covered = reproject(cloud, rigs[1]).point_index >= 0
    # coverage and covisibility measure the same region up to splat quantization
    assert abs(covered.mean() - covis.mean()) < 0.05


# ----------------------------------------------------------------- training sets


def test_training_set_shapes_and_anchor():
    seqs = make_training_set(5, 2, resolution=48)
    assert len(seqs) == 2
    for seq in seqs:
        assert len(seq.colors) == 7 and len(seq.depth_gt) == 7 and len(seq.depth_init) == 7
        assert len(seq.flows) == 6 and len(seq.occlusion) == 6
        assert seq.colors[0].shape == (48, 48, 3)
        assert seq.drift.shape == (7,) and seq.drift[0] == 1.0
        assert (seq.drift[1:] >= 0.8).all() and (seq.drift[1:] <= 1.25).all()


def test_training_set_needs_a_sequence():
    with pytest.raises(ValidationError):
        make_training_set(0, 0)


def test_training_set_deterministic():
    a = make_training_set(9, 1, resolution=32)[0]
    b = make_training_set(9, 1, resolution=32)[0]
    assert a.colors[3].tobytes() == b.colors[3].tobytes()
    assert a.depth_init[5].values.tobytes() == b.depth_init[5].values.tobytes()
    assert a.flows[2].tobytes() == b.flows[2].tobytes()
    assert np.array_equal(a.drift, b.drift)


def test_corruption_is_exactly_the_recorded_model():
    seq = make_training_set(2, 1, resolution=32)[0]
    for i in range(7):
        valid = seq.depth_gt[i].valid
        assert np.array_equal(seq.depth_init[i].valid, valid)
        expect = seq.drift[i] * seq.depth_gt[i].values[valid] + seq.noise[i][valid]
        assert np.max(np.abs(seq.depth_init[i].values[valid] - expect)) < 1e-12


def test_planted_drift_recovered_by_least_squares():
    seq = make_training_set(4, 1, resolution=32, noise_amp=0.0)[0]
    for i in range(7):
        valid = seq.depth_gt[i].valid
        gt = seq.depth_gt[i].values[valid]
        init = seq.depth_init[i].values[valid]
        s_hat = float(np.dot(init, gt) / np.dot(gt, gt))
        assert abs(s_hat - seq.drift[i]) < 1e-6


def test_uncorrupted_static_sequence_has_zero_loss():
    seq = make_training_set(6, 1, resolution=32, step_scale=0.0, corrupted=False)[0]
    for i in range(7):
        assert np.array_equal(seq.depth_init[i].values, seq.depth_gt[i].values)
    for i in range(6):
        assert (seq.flows[i] == 0.0).all()
    assert consistency_loss(seq, DcmNetwork(2, seed=0)) == 0.0
