"""Extrinsic camera calibration by semantic registration of a camera
segmentation against rendered views of a labeled point cloud."""

from .core import (
    CameraIntrinsics,
    ExtrinsicMatrix,
    LabeledPointCloud,
    Palette,
    PoseParams,
    SemanticImage,
    pose_from_extrinsic,
    pose_to_extrinsic,
    project,
)
from .loss import L2, Huber, LossTermKind, masked_loss
from .optimize import (
    CalibrationOptions,
    CalibrationResult,
    NmParams,
    SearchBounds,
    calibrate,
    initial_simplex,
    nelder_mead,
    verify,
)
from .reconstruction import IcpParams, Scan, icp_align, merge_recursive, remove_dynamic
from .render import RenderConfig, render

__version__ = "0.1.0"
