"""pointweave: depth-map to point-cloud scene weaving.

Projection geometry, overlap-masked scale alignment, a trainable
depth-consistency residual network with its own reverse-mode autodiff,
toy-UNet attention recording/injection, a procedural scene oracle, and
bit-exact interchange formats.
"""

from .camera import (
    CameraIntrinsics,
    CameraRig,
    DepthMap,
    PointCloud,
    Pose,
    Reprojection,
    lift_to_points,
    make_trajectory,
    occlusion_weights,
    reproject,
    warp_by_flow,
)
from .consistency import (
    Adam,
    DcmNetwork,
    TrainConfig,
    TrainingSequence,
    apply_dcm,
    consistency_loss,
    correct_sequence,
    dcm_forward,
    depth_domain_loss,
    grad_check,
    load_network,
    save_network,
    sequence_scale,
    train_dcm,
)
from .errors import (
    AlignmentError,
    DegenerateGeometryError,
    DimensionError,
    FormatError,
    PipelineError,
    PointweaveError,
    TrainingError,
    ValidationError,
)
from .formats import (
    FrameManifest,
    GaussianSeedCloud,
    frame_dir_name,
    list_frame_manifests,
    read_color_ppm,
    read_container,
    read_depth_pfm,
    read_flow_flo2,
    read_gray_pgm,
    read_loss_mask,
    read_manifest,
    read_ply_seeds,
    write_color_ppm,
    write_container,
    write_depth_pfm,
    write_flow_flo2,
    write_frame,
    write_gray_pgm,
    write_loss_mask,
    write_manifest,
    write_ply_seeds,
)
from .mapping import (
    FrameRecord,
    PointCloudMap,
    compute_overlap,
    fuse,
    initial_record,
    run_pipeline,
    solve_scale,
)
from .oracle import (
    OracleFrame,
    Plane,
    Scene,
    Sphere,
    covisibility_mask,
    desk_intrinsics,
    ground_truth_flow,
    make_scene,
    make_training_set,
    render,
    render_trajectory,
)
from .transfer import (
    BLOCK_NAMES,
    FeatureBank,
    ToyUNet,
    denoise,
    denoise_inject,
    denoise_record,
    load_bank,
    save_bank,
    self_attention,
)

__version__ = "0.1.0"
