"""Procedural synthetic scenes with analytic ray casting.

Renders RGB, exact depth, ground-truth backward flow, and occlusion masks
for axis-aligned textured planes and spheres. Every quantity is computed
in closed form at pixel centers (or at caller-supplied continuous
coordinates), so the renderer can serve as an independent oracle for the
projection, warping, and alignment code.

Textures are band-limited world-space sinusoids: smooth everywhere, with
spatial periods of a few meters, so bilinear interpolation error stays
well inside the tolerances the warping tests assert.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import CameraIntrinsics, CameraRig, DepthMap, Pose, make_trajectory
from .errors import ValidationError

TAU_OCC = 0.01  # relative depth tolerance for occlusion classification
_MISS = np.inf


def _frozen(a) -> np.ndarray:
    a = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Plane:
    """Axis-aligned bounded plane {p[axis] = offset}; bounds constrain the
    two remaining coordinates (in ascending axis order)."""

    axis: int
    offset: float
    lo: np.ndarray
    hi: np.ndarray
    base: np.ndarray
    amp: np.ndarray
    freq: np.ndarray  # (3, 3): per-channel world-frequency vector, cycles/m
    phase: np.ndarray

    def __post_init__(self):
        for name in ("lo", "hi", "base", "amp", "freq", "phase"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, z_near: float) -> np.ndarray:
        da = dirs[..., self.axis]
        safe = np.abs(da) > 1e-12
        z = np.where(safe, (self.offset - origin[self.axis]) / np.where(safe, da, 1.0), _MISS)
        # parallel rays carry z = inf; evaluate the hit point with a dummy
        # parameter there so no inf * 0 leaks into the bounds test
        p = origin + np.where(safe, z, 1.0)[..., None] * dirs
        others = [i for i in range(3) if i != self.axis]
        inside = (
            (p[..., others[0]] >= self.lo[0]) & (p[..., others[0]] <= self.hi[0])
            & (p[..., others[1]] >= self.lo[1]) & (p[..., others[1]] <= self.hi[1])
        )
        return np.where(safe & inside & (z > z_near), z, _MISS)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        others = [i for i in range(3) if i != self.axis]
        q = points[..., others]
        clamped = np.clip(q, self.lo, self.hi)
        return np.sqrt((points[..., self.axis] - self.offset) ** 2 + np.sum((q - clamped) ** 2, axis=-1))


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float
    base: np.ndarray
    amp: np.ndarray
    freq: np.ndarray
    phase: np.ndarray

    def __post_init__(self):
        for name in ("center", "base", "amp", "freq", "phase"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))

    def intersect(self, origin: np.ndarray, dirs: np.ndarray, z_near: float) -> np.ndarray:
        oc = origin - self.center
        a = np.sum(dirs * dirs, axis=-1)
        b = 2.0 * (dirs @ oc)
        c = oc @ oc - self.radius**2
        disc = b * b - 4.0 * a * c
        hit = disc >= 0
        sq = np.sqrt(np.where(hit, disc, 0.0))
        z0 = (-b - sq) / (2.0 * a)
        z1 = (-b + sq) / (2.0 * a)
        z = np.where(z0 > z_near, z0, np.where(z1 > z_near, z1, _MISS))
        return np.where(hit, z, _MISS)

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        return np.abs(np.linalg.norm(points - self.center, axis=-1) - self.radius)


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    background: np.ndarray

    def __post_init__(self):
        if not self.primitives:
            raise ValidationError("a scene needs at least one primitive")
        object.__setattr__(self, "background", _frozen(self.background))

    def surface_distance(self, points: np.ndarray) -> np.ndarray:
        """Exact distance from each point to the nearest scene surface."""
        points = np.asarray(points, dtype=np.float64)
        return np.min(np.stack([p.surface_distance(points) for p in self.primitives]), axis=0)


@dataclass
class OracleFrame:
    color: np.ndarray
    depth: DepthMap
    prim_id: np.ndarray


def _texture(prim, points: np.ndarray) -> np.ndarray:
    """base + amp * sin(2 pi <freq, p> + phase), per channel; construction
    keeps base +- amp inside [0, 1] so the field is smooth, never clipped."""
    channels = [
        prim.base[c] + prim.amp[c] * np.sin(2.0 * np.pi * (points @ prim.freq[c]) + prim.phase[c])
        for c in range(3)
    ]
    return np.stack(channels, axis=-1)


def raycast(scene: Scene, rig: CameraRig, u: np.ndarray, v: np.ndarray, z_near: float = 1e-4):
    """Cast rays through continuous pixel coordinates (u, v).

    Returns (z, prim_id): camera-frame z of the nearest hit (the ray
    parameter, because the camera-frame direction has unit z) and the
    winning primitive index, -1 where every primitive misses.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    dirs_cam = rig.intrinsics.pixel_rays(u, v)
    dirs = dirs_cam @ rig.pose.rotation.T
    origin = rig.pose.translation
    best_z = np.full(u.shape, _MISS)
    best_id = np.full(u.shape, -1, dtype=np.int64)
    for idx, prim in enumerate(scene.primitives):
        z = prim.intersect(origin, dirs, z_near)
        closer = z < best_z
        best_z = np.where(closer, z, best_z)
        best_id = np.where(closer, idx, best_id)
    return best_z, best_id


def _hit_points(rig: CameraRig, u, v, z):
    dirs = rig.intrinsics.pixel_rays(u, v) @ rig.pose.rotation.T
    return rig.pose.translation + z[..., None] * dirs


def render(scene: Scene, rig: CameraRig) -> OracleFrame:
    """Ray-cast the full pixel grid. Depth is exact camera-frame z;
    background pixels carry the scene background color and invalid depth."""
    k = rig.intrinsics
    vv, uu = np.mgrid[0 : k.height, 0 : k.width].astype(np.float64)
    z, pid = raycast(scene, rig, uu, vv)
    hit = pid >= 0
    color = np.broadcast_to(scene.background, (k.height, k.width, 3)).copy()
    for idx, prim in enumerate(scene.primitives):
        sel = pid == idx
        if np.any(sel):
            pts = _hit_points(rig, uu[sel], vv[sel], z[sel])
            color[sel] = _texture(prim, pts)
    return OracleFrame(color, DepthMap(np.where(hit, z, 0.0), hit), pid)


class FlowResult:
    """Ground-truth backward flow from frame b to frame a.

    flow: H x W x 2 (du, dv) such that frame a sampled at x + flow(x)
    shows the same surface point as frame b at x.
    occlusion: 1 where the correspondence is visible in a and bilinear
    sampling there is trustworthy, else 0.
    source_depth: camera-frame z of the surface point in frame a
    (0 where undefined).
    """

    def __init__(self, flow, occlusion, source_depth):
        self.flow = flow
        self.occlusion = occlusion
        self.source_depth = source_depth

    def __iter__(self):  # (flow, occlusion) unpacking for the common case
        return iter((self.flow, self.occlusion))


def ground_truth_flow(scene: Scene, rig_a: CameraRig, rig_b: CameraRig) -> FlowResult:
    """For each pixel of frame b: intersect its ray, reproject the hit into
    frame a, flow = (pixel in a) - (pixel in b).

    occlusion(x) = 1 requires: a valid hit in b; the landing position
    inside frame a with positive depth; frame a's rendered depth at the
    nearest landing pixel within TAU_OCC relative of the reprojected depth;
    and all 4 bilinear taps valid, on the same primitive the pixel sees,
    with a depth range within the same tolerance (a sampling cell
    straddling a silhouette or an inter-surface crease is not a reliable
    correspondence even when the surface point itself is visible; depth
    agreement alone misses equal-depth silhouettes, where the texture
    still jumps).
    """
    ka, kb = rig_a.intrinsics, rig_b.intrinsics
    frame_a = render(scene, rig_a)
    vv, uu = np.mgrid[0 : kb.height, 0 : kb.width].astype(np.float64)
    z_b, pid_b = raycast(scene, rig_b, uu, vv)
    hit_b = pid_b >= 0
    if ka == kb and np.array_equal(rig_a.pose.matrix, rig_b.pose.matrix):
        # identical viewpoints: the flow is identically zero; skip the
        # round trip so no floating-point residue leaks into the field
        zero = np.zeros((kb.height, kb.width, 2))
        return FlowResult(zero, hit_b.astype(np.float64), np.where(hit_b, z_b, 0.0))
    points = _hit_points(rig_b, uu, vv, np.where(hit_b, z_b, 1.0))

    p_cam_a = (points - rig_a.pose.translation) @ rig_a.pose.rotation
    z_a = p_cam_a[..., 2]
    in_front = z_a > 1e-4
    zs = np.where(in_front, z_a, 1.0)
    ua = ka.fx * p_cam_a[..., 0] / zs + ka.cx
    va = ka.fy * p_cam_a[..., 1] / zs + ka.cy

    flow = np.zeros((kb.height, kb.width, 2))
    defined = hit_b & in_front
    flow[..., 0] = np.where(defined, ua - uu, 0.0)
    flow[..., 1] = np.where(defined, va - vv, 0.0)

    in_bounds = (ua >= 0) & (ua <= ka.width - 1) & (va >= 0) & (va <= ka.height - 1)
    occ = defined & in_bounds

    # nearest-pixel depth agreement in frame a
    ur = np.clip(np.rint(ua), 0, ka.width - 1).astype(np.int64)
    vr = np.clip(np.rint(va), 0, ka.height - 1).astype(np.int64)
    near_val = frame_a.depth.values[vr, ur]
    near_ok = frame_a.depth.valid[vr, ur] & (np.abs(near_val - z_a) <= TAU_OCC * np.abs(zs))
    occ &= near_ok

    # bilinear-cell reliability: all 4 taps valid, depth range small
    j0 = np.clip(np.floor(ua), 0, ka.width - 1).astype(np.int64)
    i0 = np.clip(np.floor(va), 0, ka.height - 1).astype(np.int64)
    j1 = np.minimum(j0 + 1, ka.width - 1)
    i1 = np.minimum(i0 + 1, ka.height - 1)
    taps = np.stack(
        [frame_a.depth.values[i, j] for i, j in ((i0, j0), (i0, j1), (i1, j0), (i1, j1))]
    )
    taps_valid = np.stack(
        [frame_a.depth.valid[i, j] for i, j in ((i0, j0), (i0, j1), (i1, j0), (i1, j1))]
    )
    taps_prim = np.stack(
        [frame_a.prim_id[i, j] for i, j in ((i0, j0), (i0, j1), (i1, j0), (i1, j1))]
    )
    cell_ok = (
        np.all(taps_valid, axis=0)
        & np.all(taps_prim == pid_b, axis=0)
        & (np.ptp(taps, axis=0) <= TAU_OCC * np.abs(zs))
    )
    occ &= cell_ok

    return FlowResult(flow, occ.astype(np.float64), np.where(defined, z_a, 0.0))


def covisibility_mask(scene: Scene, rig_b: CameraRig, rig_a: CameraRig) -> np.ndarray:
    """Pure-visibility co-visibility: frame b pixels whose surface point
    projects inside frame a's splat grid and is the nearest surface along
    its own continuous ray there. No sampling-reliability exclusions; this
    is the quantity reprojection coverage is compared against."""
    ka, kb = rig_a.intrinsics, rig_b.intrinsics
    vv, uu = np.mgrid[0 : kb.height, 0 : kb.width].astype(np.float64)
    z_b, pid_b = raycast(scene, rig_b, uu, vv)
    hit_b = pid_b >= 0
    points = _hit_points(rig_b, uu, vv, np.where(hit_b, z_b, 1.0))
    p_cam_a = (points - rig_a.pose.translation) @ rig_a.pose.rotation
    z_a = p_cam_a[..., 2]
    in_front = z_a > 1e-4
    zs = np.where(in_front, z_a, 1.0)
    ua = ka.fx * p_cam_a[..., 0] / zs + ka.cx
    va = ka.fy * p_cam_a[..., 1] / zs + ka.cy
    lands = (ua >= -0.5) & (ua < ka.width - 0.5) & (va >= -0.5) & (va < ka.height - 0.5)
    z_hit, _ = raycast(scene, rig_a, ua, va)
    visible = np.abs(z_hit - z_a) <= 1e-6 * np.abs(zs)
    return hit_b & in_front & lands & visible


def n_workers() -> int:
    """Worker cap for embarrassingly parallel frame rendering, from the
    PW_THREADS environment variable (default 1)."""
    raw = os.environ.get("PW_THREADS", "1")
    try:
        n = int(raw)
    except ValueError as exc:
        raise ValidationError(f"PW_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ValidationError(f"PW_THREADS must be >= 1, got {n}")
    return n


def render_trajectory(scene: Scene, rigs: list) -> list:
    """Render each rig; frames are independent, so this may fan out over
    PW_THREADS workers. Output order and content match the sequential run."""
    workers = min(n_workers(), len(rigs))
    if workers <= 1:
        return [render(scene, rig) for rig in rigs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda rig: render(scene, rig), rigs))


def _rand_texture(rng) -> dict:
    periods = rng.uniform(2.5, 4.0, size=3)
    dirs = rng.normal(size=(3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return {
        "base": rng.uniform(0.3, 0.7, size=3),
        "amp": rng.uniform(0.08, 0.16, size=3),
        "freq": dirs / periods[:, None],
        "phase": rng.uniform(0.0, 2.0 * np.pi, size=3),
    }


def make_scene(seed_or_rng, n_spheres: int | None = None) -> Scene:
    """Deterministic random scene: a large fronto-parallel backdrop plane
    that covers every reasonable view, plus 1-3 spheres in front of it."""
    rng = np.random.default_rng(seed_or_rng) if isinstance(seed_or_rng, (int, np.integer)) else seed_or_rng
    backdrop = Plane(
        axis=2,
        offset=float(rng.uniform(8.0, 12.0)),
        lo=np.array([-40.0, -40.0]),
        hi=np.array([40.0, 40.0]),
        **_rand_texture(rng),
    )
    prims = [backdrop]
    count = int(rng.integers(1, 4)) if n_spheres is None else n_spheres
    for _ in range(count):
        prims.append(
            Sphere(
                center=np.array(
                    [rng.uniform(-1.8, 1.8), rng.uniform(-1.2, 1.2), rng.uniform(4.0, 6.5)]
                ),
                radius=float(rng.uniform(0.6, 1.5)),
                **_rand_texture(rng),
            )
        )
    return Scene(tuple(prims), rng.uniform(0.1, 0.3, size=3))


def desk_intrinsics(size: int = 64) -> CameraIntrinsics:
    """Square pinhole with a ~60 degree horizontal field of view."""
    f = 0.87 * size
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2, cy=size / 2, width=size, height=size)


def make_training_set(
    seed: int,
    n_sequences: int,
    resolution: int = 96,
    drift_range: tuple = (0.8, 1.25),
    noise_amp: float = 0.02,
    step_scale: float = 0.06,
    corrupted: bool = True,
):
    """Synthetic 7-frame training sequences with exact depth/flow/occlusion
    and recorded corruption.

    Input depths are D_init = s_i * D_gt + n_i with per-frame drift
    s_i drawn from drift_range and n_i a smooth low-frequency field of
    amplitude noise_amp (first frame keeps s_0 = 1: scales are relative
    to the sequence anchor). corrupted=False yields D_init = D_gt exactly;
    step_scale = 0 yields a static trajectory with zero flow.
    """
    from .consistency import TrainingSequence

    if n_sequences < 1:
        raise ValidationError("n_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    k = desk_intrinsics(resolution)
    sequences = []
    for _ in range(n_sequences):
        scene = make_scene(rng)
        direction = rng.normal(size=3) * np.array([1.0, 0.6, 0.3])
        norm = np.linalg.norm(direction)
        step = step_scale * direction / norm if (norm > 0 and step_scale > 0) else np.zeros(3)
        start = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.2, 0.2), 0.0])
        rigs = make_trajectory(k, 7, step_translation=step, start_translation=start)
        frames = render_trajectory(scene, rigs)

        flows, occs = [], []
        for i in range(6):
            res = ground_truth_flow(scene, rigs[i], rigs[i + 1])
            flows.append(res.flow)
            occs.append(res.occlusion)

        drift = np.ones(7)
        noises = [np.zeros((resolution, resolution)) for _ in range(7)]
        if corrupted:
            drift[1:] = rng.uniform(drift_range[0], drift_range[1], size=6)
            if noise_amp > 0:
                for i in range(7):
                    field = gaussian_filter(rng.standard_normal((resolution, resolution)), sigma=resolution / 6.0, mode="reflect")
                    peak = np.max(np.abs(field))
                    noises[i] = noise_amp * field / peak if peak > 0 else field * 0.0
        depth_init = []
        for i, fr in enumerate(frames):
            vals = drift[i] * fr.depth.values + np.where(fr.depth.valid, noises[i], 0.0)
            depth_init.append(DepthMap(np.where(fr.depth.valid, vals, 0.0), fr.depth.valid))

        sequences.append(
            TrainingSequence(
                colors=[fr.color for fr in frames],
                depth_gt=[fr.depth for fr in frames],
                depth_init=depth_init,
                flows=flows,
                occlusion=occs,
                rigs=rigs,
                drift=drift,
                noise=noises,
            )
        )
    return sequences
