"""Point-cloud map maintenance and the lift -> reproject -> inpaint -> fuse
pipeline.

The map is an append-only sequence of point-cloud fragments, one per fused
frame. Each new view reprojects the existing map (z-buffered splatting),
fills the uncovered pixels via an inpainting callback, estimates depth for
the composite image, aligns that depth to the map with a single global
scale, and fuses only the new (non-overlap) content.

Scale alignment is an exact 1-D weighted-median solve: a lifted point is
affine in its depth, p = s * a + t with a = R (d K^-1 u), so each overlap
correspondence contributes three one-dimensional residuals |s a - b| and
the L1-optimal s is the weighted median of b/a with weights |a|.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraRig, DepthMap, PointCloud, check_color_image, lift_to_points, reproject
from .errors import (
    AlignmentError,
    DegenerateGeometryError,
    DimensionError,
    PipelineError,
    ValidationError,
)

EPS_A = 1e-8  # meters; coordinates with |a| below this cannot vote on the scale


@dataclass(frozen=True)
class PointCloudMap:
    """Ordered point-cloud fragments keyed by strictly increasing frame ids.

    Instances are immutable; fuse returns an extended copy, so snapshots
    can be shared freely.
    """

    fragments: tuple = ()

    def __post_init__(self):
        prev = None
        for frame_id, cloud in self.fragments:
            if prev is not None and frame_id <= prev:
                raise ValidationError(
                    f"fragment frame ids must be strictly increasing, got {frame_id} after {prev}"
                )
            if len(cloud) == 0:
                raise ValidationError(f"fragment {frame_id} is empty")
            prev = frame_id

    def with_fragment(self, frame_id: int, cloud: PointCloud) -> "PointCloudMap":
        return PointCloudMap(self.fragments + ((int(frame_id), cloud),))

    @property
    def frame_ids(self) -> list:
        return [fid for fid, _ in self.fragments]

    @property
    def point_count(self) -> int:
        return sum(len(c) for _, c in self.fragments)

    @property
    def global_points(self) -> PointCloud:
        """Merged view of every fragment, in fusion order."""
        if not self.fragments:
            empty = np.zeros((0, 3))
            return PointCloud(empty, empty, np.zeros((0, 3), dtype=np.int64), np.zeros(0))
        return PointCloud.concatenate([c for _, c in self.fragments])


@dataclass
class FrameRecord:
    """One pipeline frame: composite color (holes filled), the raw
    reprojection it was built from, working depth, and the overlap/inpaint
    bookkeeping the alignment and export stages need."""

    frame_id: int
    rig: CameraRig
    color: np.ndarray
    raw_color: np.ndarray
    depth: DepthMap
    overlap: np.ndarray
    inpaint_mask: np.ndarray

    def __post_init__(self):
        k = self.rig.intrinsics
        hw = (k.height, k.width)
        self.color = check_color_image(self.color, "color")
        self.raw_color = check_color_image(self.raw_color, "raw_color")
        if self.color.shape[:2] != hw or self.raw_color.shape[:2] != hw or self.depth.shape != hw:
            raise DimensionError(f"frame buffers do not match intrinsics {hw}")
        ov = np.asarray(self.overlap)
        if ov.shape != hw:
            raise DimensionError(f"overlap mask shape {ov.shape} != {hw}")
        self.overlap = ov.astype(bool)
        im = np.asarray(self.inpaint_mask, dtype=np.float64)
        if im.shape != hw:
            raise DimensionError(f"inpaint mask shape {im.shape} != {hw}")
        if not np.all(np.isin(im, (0.0, 1.0))):
            raise ValidationError("inpaint mask entries must be exactly 0 or 1")
        self.inpaint_mask = im


def initial_record(frame_id: int, rig: CameraRig, color: np.ndarray, depth: DepthMap) -> FrameRecord:
    """FrameRecord for a source frame: nothing reprojected, nothing inpainted."""
    hw = (rig.intrinsics.height, rig.intrinsics.width)
    return FrameRecord(
        frame_id=frame_id,
        rig=rig,
        color=color,
        raw_color=color,
        depth=depth,
        overlap=np.zeros(hw, dtype=bool),
        inpaint_mask=np.zeros(hw),
    )


def compute_overlap(hole_mask: np.ndarray) -> np.ndarray:
    """Overlap = NOT hole: pixels whose content came from existing geometry."""
    m = np.asarray(hole_mask, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"hole mask must be 2-D, got shape {m.shape}")
    if not np.all(np.isin(m, (0.0, 1.0))):
        raise ValidationError("hole mask entries must be exactly 0 or 1")
    return m == 0.0


def solve_scale(frame: FrameRecord, target: PointCloud, eps_a: float = EPS_A) -> tuple:
    """L1-optimal global scale aligning the frame's lifted depth to target
    map points.

    target.source_pixel rows name the (frame, row, col) overlap pixel each
    point corresponds to; rows whose pixel lacks valid depth contribute no
    constraint. Returns (s, residual) with residual the full objective
    sum_j ||s a_j - b_j||_1 at the optimum.
    """
    if len(target) == 0:
        raise AlignmentError("alignment target is empty: no overlap correspondences")
    k = frame.rig.intrinsics
    rows = target.source_pixel[:, 1]
    cols = target.source_pixel[:, 2]
    if rows.min() < 0 or rows.max() >= k.height or cols.min() < 0 or cols.max() >= k.width:
        raise ValidationError("target source_pixel coordinates fall outside the frame")
    if not np.all(frame.overlap[rows, cols]):
        raise ValidationError("target contains correspondences at non-overlap pixels")
    usable = frame.depth.valid[rows, cols]
    if not np.any(usable):
        raise AlignmentError("no overlap correspondence has valid frame depth")
    rows, cols = rows[usable], cols[usable]

    d = frame.depth.values[rows, cols]
    rays = k.pixel_rays(cols.astype(np.float64), rows.astype(np.float64))
    a = (rays * d[:, None]) @ frame.rig.pose.rotation.T
    b = target.positions[usable] - frame.rig.pose.translation

    af = a.ravel()
    bf = b.ravel()
    vote = np.abs(af) > eps_a
    if not np.any(vote):
        raise DegenerateGeometryError(f"every alignment coordinate has |a| <= {eps_a}")
    ratios = bf[vote] / af[vote]
    weights = np.abs(af[vote])
    order = np.argsort(ratios, kind="stable")
    cum = np.cumsum(weights[order])
    s = float(ratios[order][np.searchsorted(cum, 0.5 * cum[-1])])
    if not (np.isfinite(s) and s > 0):
        raise DegenerateGeometryError(f"alignment produced a non-positive scale {s}")
    residual = float(np.sum(np.abs(s * af - bf)))
    return s, residual


def fuse(map_: PointCloudMap, frame: FrameRecord, scale: float) -> PointCloudMap:
    """Append the frame's new content (valid depth at non-overlap pixels),
    lifted with scale * depth. Existing fragments are untouched; a fully
    overlapping frame leaves the map as is."""
    if not (np.isfinite(scale) and scale > 0):
        raise ValidationError(f"fusion scale must be positive finite, got {scale}")
    new_mask = frame.depth.valid & ~frame.overlap
    if not np.any(new_mask):
        return map_
    scaled = DepthMap(np.where(new_mask, scale * frame.depth.values, 0.0), new_mask)
    cloud = lift_to_points(frame.color, scaled, frame.rig, frame.frame_id)
    return map_.with_fragment(frame.frame_id, cloud)


def _correspondence_cloud(map_points: PointCloud, point_index: np.ndarray, overlap: np.ndarray, frame_id: int) -> PointCloud:
    """Target cloud for solve_scale: per overlap pixel, the map point the
    z-buffer selected there, tagged with that pixel's coordinates."""
    rows, cols = np.nonzero(overlap)
    idx = point_index[rows, cols]
    pix = np.stack([np.full(rows.size, frame_id, dtype=np.int64), rows, cols], axis=1)
    return PointCloud(
        map_points.positions[idx], map_points.colors[idx], pix, map_points.source_depth[idx]
    )


def run_pipeline(
    initial: FrameRecord,
    trajectory: list,
    inpaint,
    depth_est,
    dcm=None,
    on_frame=None,
) -> PointCloudMap:
    """Iterate the map over a trajectory.

    Per pose: reproject the map -> fill holes with inpaint(frame_index,
    rig, raw_color, hole_mask) -> estimate depth with depth_est(frame_index,
    rig, color) -> optionally refine with the consistency net -> solve the
    global scale against the map -> fuse new content. Callback failures
    abort with the offending frame index attached; so does a degenerate
    alignment. on_frame, when given, observes (record, scale, residual)
    after each pose.

    With a consistency net, apply_dcm refines depth only where the map
    reprojection provides a reference (its validity demands both inputs);
    hole pixels keep the estimator's depth, since there is nothing there to
    correct toward.
    """
    if not trajectory:
        raise ValidationError("trajectory must contain at least one pose")
    map_ = fuse(PointCloudMap(), initial, 1.0)
    if map_.point_count == 0:
        raise PipelineError(
            f"initial frame {initial.frame_id} has no valid depth to seed the map",
            frame_index=initial.frame_id,
        )
    if dcm is not None:
        from .consistency import apply_dcm

    for k, rig in enumerate(trajectory):
        fid = initial.frame_id + 1 + k
        repro = reproject(map_.global_points, rig)
        overlap = compute_overlap(repro.hole_mask)

        try:
            filled = inpaint(fid, rig, repro.color, repro.hole_mask)
        except Exception as exc:
            raise PipelineError(f"inpaint callback failed at frame {fid}: {exc}", frame_index=fid) from exc
        filled = check_color_image(np.asarray(filled, dtype=np.float64), "inpainted color")
        color = np.where(overlap[..., None], repro.color, filled)

        try:
            est = depth_est(fid, rig, color)
        except Exception as exc:
            raise PipelineError(f"depth callback failed at frame {fid}: {exc}", frame_index=fid) from exc
        if dcm is not None:
            refined = apply_dcm(dcm, repro.depth, est)
            depth = DepthMap(
                np.where(refined.valid, refined.values, est.values),
                refined.valid | est.valid,
            )
        else:
            depth = est

        record = FrameRecord(
            frame_id=fid,
            rig=rig,
            color=color,
            raw_color=repro.color,
            depth=depth,
            overlap=overlap,
            inpaint_mask=repro.hole_mask,
        )
        target = _correspondence_cloud(map_.global_points, repro.point_index, overlap, fid)
        try:
            s, residual = solve_scale(record, target)
        except (AlignmentError, DegenerateGeometryError) as exc:
            raise PipelineError(f"scale alignment failed at frame {fid}: {exc}", frame_index=fid) from exc
        map_ = fuse(map_, record, s)
        if on_frame is not None:
            on_frame(record, s, residual)
    return map_
