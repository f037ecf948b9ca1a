"""satref: reference-based onboard satellite imagery compression.

Onboard pipeline (cloud masking, illumination alignment, downsampled
reference change detection, budgeted layered tile encoding), the ground
segment (archive, reference selection, uplink planning), and a
deterministic event-driven constellation simulator with synthetic worlds.
"""

from .changedet import (
    ChangeMap,
    DetectionConfig,
    calibrate_theta,
    detect_changes,
    false_positive_rate,
    miss_rate,
)
from .codec import (
    EncodedPayload,
    RateConfig,
    Reconstruction,
    encode,
    reconstruct,
    truncate_layers,
)
from .errors import (
    CalibrationFailedError,
    RateInfeasibleError,
    ReconstructionImpossibleError,
    SatrefError,
)
from .ground import (
    GroundArchive,
    UplinkPlan,
    plan_uplink,
    redetect_clouds_ground,
    reference_raster,
    schedule_guaranteed_download,
)
from .preprocess import (
    CloudDecisionTree,
    CloudMask,
    IlluminationFit,
    align,
    detect_clouds_onboard,
    fit_illumination,
    should_drop,
    train_cloud_tree,
)
from .raster import (
    Band,
    Image,
    TileGrid,
    downsample,
    psnr,
    read_raster,
    tile_mean_abs_diff,
    write_raster,
)
from .refstore import ReferenceEntry, ReferenceStore, apply_diff, make_diff
from .synth import CaptureTruth, WorldConfig, WorldModel, generate_capture

__version__ = "0.1.0"

__all__ = [
    "Band",
    "CalibrationFailedError",
    "CaptureTruth",
    "ChangeMap",
    "CloudDecisionTree",
    "CloudMask",
    "DetectionConfig",
    "EncodedPayload",
    "GroundArchive",
    "IlluminationFit",
    "Image",
    "RateConfig",
    "RateInfeasibleError",
    "Reconstruction",
    "ReconstructionImpossibleError",
    "ReferenceEntry",
    "ReferenceStore",
    "SatrefError",
    "TileGrid",
    "UplinkPlan",
    "WorldConfig",
    "WorldModel",
    "align",
    "apply_diff",
    "calibrate_theta",
    "detect_changes",
    "detect_clouds_onboard",
    "downsample",
    "encode",
    "false_positive_rate",
    "fit_illumination",
    "generate_capture",
    "make_diff",
    "miss_rate",
    "plan_uplink",
    "psnr",
    "read_raster",
    "reconstruct",
    "redetect_clouds_ground",
    "reference_raster",
    "schedule_guaranteed_download",
    "should_drop",
    "tile_mean_abs_diff",
    "train_cloud_tree",
    "truncate_layers",
    "write_raster",
]
