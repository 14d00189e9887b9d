"""Pinhole camera model: depth lifting, point reprojection, flow warping,
and occlusion weighting. Pure functions; every other module composes these.

Conventions, fixed across the package (file formats and adapters must match):

  * pixel (u, v): u indexes columns, v indexes rows. Integer pixel
    coordinates map directly to normalized camera coordinates
    (u - cx)/fx, (v - cy)/fy. There is no half-pixel center offset.
  * camera frame: +x right, +y down, +z forward along the optical axis.
  * Pose maps camera-frame points to world-frame points,
    p_world = R @ p_cam + t.
  * flow fields are backward flow with channel 0 = du (columns) and
    channel 1 = dv (rows): output pixel x samples the source frame at
    x + flow(x).
  * depth is the camera-frame z coordinate, not ray length.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import DimensionError, ValidationError

Z_NEAR = 1e-4  # meters; points at or behind this camera-frame z are culled
_POSE_TOL = 1e-9


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (np.isfinite(self.fx) and self.fx > 0 and np.isfinite(self.fy) and self.fy > 0):
            raise ValidationError(f"focal lengths must be positive finite, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValidationError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} image"
            )
        if self.width < 1 or self.height < 1:
            raise ValidationError("image resolution must be at least 1x1")

    @property
    def matrix(self) -> np.ndarray:
        """3x3 K matrix."""
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=np.float64
        )

    def pixel_rays(self, u: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Unit-depth camera-frame ray K^-1 (u, v, 1) for integer or
        continuous pixel coordinates. Shape (..., 3)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        return np.stack(
            [(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], axis=-1
        )


@dataclass(frozen=True)
class Pose:
    """Rigid camera-to-world transform: p_world = rotation @ p_cam + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValidationError(f"rotation must be 3x3, got {r.shape}")
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise ValidationError("pose entries must be finite")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _POSE_TOL:
            raise ValidationError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > _POSE_TOL:
            raise ValidationError("rotation determinant is not +1 within 1e-9")
        object.__setattr__(self, "rotation", _freeze(r))
        object.__setattr__(self, "translation", _freeze(t))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """Returns the pose applying `other` first, then `self`."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    @property
    def matrix(self) -> np.ndarray:
        """4x4 homogeneous camera-to-world matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraRig:
    intrinsics: CameraIntrinsics
    pose: Pose


@dataclass
class DepthMap:
    """H x W metric depth with an explicit validity mask.

    Valid entries are finite and strictly positive; invalid entries are
    canonicalized to 0.0 (the file-format sentinel) at construction.
    """

    values: np.ndarray
    valid: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise DimensionError(f"depth must be 2-D, got shape {v.shape}")
        if self.valid is None:
            m = np.isfinite(v) & (v > 0)
        else:
            m = np.asarray(self.valid, dtype=bool)
            if m.shape != v.shape:
                raise DimensionError(f"valid mask shape {m.shape} != depth shape {v.shape}")
            bad = m & ~(np.isfinite(v) & (v > 0))
            if np.any(bad):
                raise ValidationError(f"{int(bad.sum())} valid depth entries are not finite positive")
        self.values = np.where(m, v, 0.0)
        self.valid = m

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def copy(self) -> "DepthMap":
        return DepthMap(self.values.copy(), self.valid.copy())


@dataclass
class PointCloud:
    """Colored world-frame points with per-point provenance.

    source_pixel rows are (frame id, row, col); source_depth is the
    camera-frame z each point was lifted from.
    """

    positions: np.ndarray
    colors: np.ndarray
    source_pixel: np.ndarray
    source_depth: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        self.source_pixel = np.asarray(self.source_pixel, dtype=np.int64).reshape(-1, 3)
        self.source_depth = np.asarray(self.source_depth, dtype=np.float64).reshape(-1)
        n = self.positions.shape[0]
        if not (self.colors.shape[0] == n and self.source_pixel.shape[0] == n and self.source_depth.shape[0] == n):
            raise DimensionError("point cloud field lengths disagree")
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError("point positions must be finite")
        if self.colors.size and (self.colors.min() < 0 or self.colors.max() > 1):
            raise ValidationError("point colors must lie in [0, 1]")
        if np.any(self.source_depth <= 0):
            raise ValidationError("source_depth must be strictly positive")

    def __len__(self) -> int:
        return self.positions.shape[0]

    def take(self, index: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.positions[index], self.colors[index], self.source_pixel[index], self.source_depth[index]
        )

    @staticmethod
    def concatenate(clouds: "list[PointCloud]") -> "PointCloud":
        return PointCloud(
            np.concatenate([c.positions for c in clouds]),
            np.concatenate([c.colors for c in clouds]),
            np.concatenate([c.source_pixel for c in clouds]),
            np.concatenate([c.source_depth for c in clouds]),
        )


class Reprojection(NamedTuple):
    """Result of splatting a cloud into a view. point_index holds, per
    covered pixel, the index of the cloud point the z-buffer selected
    (-1 at holes); it is what makes alignment correspondences pixel-exact."""

    color: np.ndarray
    depth: DepthMap
    hole_mask: np.ndarray
    point_index: np.ndarray


def check_color_image(image: np.ndarray, name: str = "image") -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise DimensionError(f"{name} must be H x W x 3, got {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ValidationError(f"{name} has non-finite entries")
    if img.min() < 0 or img.max() > 1:
        raise ValidationError(f"{name} values must lie in [0, 1]")
    return img


def check_flow_field(flow: np.ndarray) -> np.ndarray:
    f = np.asarray(flow, dtype=np.float64)
    if f.ndim != 3 or f.shape[2] != 2:
        raise DimensionError(f"flow must be H x W x 2, got {f.shape}")
    if not np.all(np.isfinite(f)):
        raise ValidationError("flow has non-finite entries")
    return f


def lift_to_points(image: np.ndarray, depth: DepthMap, rig: CameraRig, frame_id: int = 0) -> PointCloud:
    """Lift every valid depth pixel to a colored world-frame point.

    Camera-frame point for pixel (u, v) at depth d is
    d * ((u - cx)/fx, (v - cy)/fy, 1), transformed by the rig pose.
    """
    img = check_color_image(image)
    k = rig.intrinsics
    if depth.shape != (k.height, k.width) or img.shape[:2] != (k.height, k.width):
        raise DimensionError(
            f"image {img.shape[:2]} / depth {depth.shape} do not match intrinsics "
            f"{k.height}x{k.width}"
        )
    rows, cols = np.nonzero(depth.valid)
    d = depth.values[rows, cols]
    rays = k.pixel_rays(cols.astype(np.float64), rows.astype(np.float64))
    p_cam = rays * d[:, None]
    positions = rig.pose.apply(p_cam)
    source_pixel = np.stack([np.full_like(rows, frame_id, dtype=np.int64), rows, cols], axis=1)
    return PointCloud(positions, img[rows, cols], source_pixel, d)


def reproject(cloud: PointCloud, rig: CameraRig, z_near: float = Z_NEAR) -> Reprojection:
    """Splat a cloud into a view with z-buffering.

    Each point writes exactly one pixel (nearest-integer projection).
    Nearest camera-frame z wins per pixel; exact ties go to the lowest
    point index. Points with z <= z_near are culled. An all-behind cloud
    yields an all-hole output, not an error.
    """
    if len(cloud) == 0:
        raise ValidationError("cannot reproject an empty cloud")
    k = rig.intrinsics
    h, w = k.height, k.width
    p_cam = (cloud.positions - rig.pose.translation) @ rig.pose.rotation
    z = p_cam[:, 2]
    front = z > z_near
    zs = np.where(front, z, 1.0)
    uf = np.rint(k.fx * p_cam[:, 0] / zs + k.cx)
    vf = np.rint(k.fy * p_cam[:, 1] / zs + k.cy)
    ok = front & (uf >= 0) & (uf < w) & (vf >= 0) & (vf < h)
    # cast only after masking so distant projections cannot overflow int64
    u = np.where(ok, uf, -1.0).astype(np.int64)
    v = np.where(ok, vf, -1.0).astype(np.int64)
    cand = np.nonzero(ok)[0]

    color = np.zeros((h, w, 3), dtype=np.float64)
    depth_vals = np.zeros((h, w), dtype=np.float64)
    point_index = np.full((h, w), -1, dtype=np.int64)
    if cand.size:
        # Sort candidates by (z, index); the first occurrence per pixel in
        # that order is the z-buffer winner with the documented tie-break.
        order = cand[np.lexsort((cand, z[cand]))]
        flat = v[order] * w + u[order]
        _, first = np.unique(flat, return_index=True)
        winners = order[first]
        rr, cc = v[winners], u[winners]
        color[rr, cc] = cloud.colors[winners]
        depth_vals[rr, cc] = z[winners]
        point_index[rr, cc] = winners
    covered = point_index >= 0
    hole_mask = np.where(covered, 0.0, 1.0)
    return Reprojection(color, DepthMap(depth_vals, covered), hole_mask, point_index)


def _bilinear_gather(
    values: np.ndarray, source_valid: np.ndarray | None, cu: np.ndarray, cv: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Sample `values` at continuous (cu, cv). A tap only counts toward
    bounds/validity when its weight is nonzero, so integer coordinates on
    the image border behave like exact lookups."""
    h, w = values.shape[:2]
    j0 = np.floor(cu)
    i0 = np.floor(cv)
    fu = cu - j0
    fv = cv - i0
    j0 = j0.astype(np.int64)
    i0 = i0.astype(np.int64)

    out = np.zeros(cu.shape + values.shape[2:], dtype=np.float64)
    ok = np.ones(cu.shape, dtype=bool)
    for di, dj, wt in (
        (0, 0, (1 - fv) * (1 - fu)),
        (0, 1, (1 - fv) * fu),
        (1, 0, fv * (1 - fu)),
        (1, 1, fv * fu),
    ):
        ii, jj = i0 + di, j0 + dj
        inb = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        live = wt > 0
        tap_ok = ~live | (inb & (source_valid[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1)] if source_valid is not None else True))
        ok &= np.asarray(tap_ok, dtype=bool)
        iic = np.clip(ii, 0, h - 1)
        jjc = np.clip(jj, 0, w - 1)
        contrib = np.where(live & inb, wt, 0.0)
        if values.ndim == 3:
            out += contrib[..., None] * values[iic, jjc]
        else:
            out += contrib * values[iic, jjc]
    if values.ndim == 3:
        out[~ok] = 0.0
    else:
        out = np.where(ok, out, 0.0)
    return out, ok


def warp_by_flow(source, flow: np.ndarray):
    """Backward-warp `source` by a flow field: output pixel x samples the
    source at x + flow(x) with bilinear interpolation.

    DepthMap input returns a DepthMap whose mask is false wherever any
    contributing tap is out of bounds or invalid. ColorImage input returns
    (warped, valid_mask) with out-of-frame pixels zeroed and flagged.
    """
    f = check_flow_field(flow)
    h, w = f.shape[:2]
    vv, uu = np.mgrid[0:h, 0:w].astype(np.float64)
    cu = uu + f[:, :, 0]
    cv = vv + f[:, :, 1]
    if isinstance(source, DepthMap):
        if source.shape != (h, w):
            raise DimensionError(f"source {source.shape} / flow {f.shape[:2]} resolution mismatch")
        out, ok = _bilinear_gather(source.values, source.valid, cu, cv)
        return DepthMap(out, ok)
    img = check_color_image(source, "source")
    if img.shape[:2] != (h, w):
        raise DimensionError(f"source {img.shape[:2]} / flow {f.shape[:2]} resolution mismatch")
    out, ok = _bilinear_gather(img, None, cu, cv)
    return np.clip(out, 0.0, 1.0), ok


def occlusion_weights(o_next: np.ndarray, o_warped: np.ndarray, alpha: float = 50.0) -> np.ndarray:
    """Per-pixel w = exp(-alpha * sum_c (o_next - o_warped)^2)."""
    a = check_color_image(o_next, "o_next")
    b = check_color_image(o_warped, "o_warped")
    if a.shape != b.shape:
        raise DimensionError(f"image shapes {a.shape} / {b.shape} disagree")
    if alpha < 0:
        raise ValidationError(f"alpha must be >= 0, got {alpha}")
    return np.exp(-alpha * np.sum((a - b) ** 2, axis=2))


def yaw_rotation(degrees: float) -> np.ndarray:
    """Rotation about the +y (down) axis; positive turns the view right."""
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_trajectory(
    intrinsics: CameraIntrinsics,
    n_poses: int,
    step_translation=(0.08, 0.0, 0.0),
    yaw_step_deg: float = 0.0,
    start_translation=(0.0, 0.0, 0.0),
    start_yaw_deg: float = 0.0,
) -> list[CameraRig]:
    """Parametric dolly + pan trajectory: every pose advances by a fixed
    world-frame translation step and yaw increment."""
    if n_poses < 1:
        raise ValidationError("trajectory needs at least one pose")
    step = np.asarray(step_translation, dtype=np.float64)
    start = np.asarray(start_translation, dtype=np.float64)
    rigs = []
    for i in range(n_poses):
        rot = yaw_rotation(start_yaw_deg + i * yaw_step_deg)
        rigs.append(CameraRig(intrinsics, Pose(rot, start + i * step)))
    return rigs
