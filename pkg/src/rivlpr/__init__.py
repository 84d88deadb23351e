"""LiDAR place recognition on cylindrical range-image views.

Pipeline: scans are projected to three-channel range images, encoded into
patch features by a frozen toy backbone refined with trainable adapters,
pooled into global descriptors by optimal-transport aggregation, trained
with a patch contrastive loss plus a smooth ranking loss on pairs mined
geometrically, and evaluated with standard retrieval metrics.
"""

from .aggregate import (
    AggregateParams,
    Descriptor,
    aggregate,
    descriptor_distance,
    load_descriptors,
    save_descriptors,
    sinkhorn,
)
from .augment import AugmentSpec, apply_masks, augment, yaw_shift
from .encoder import (
    AdapterParams,
    BlockStack,
    PatchFeatureGrid,
    adapter_forward,
    encode,
    load_adapter,
    save_adapter,
    toy_encode,
)
from .loss import LossConfig, LossValue, combined_loss, patch_infonce, tsap
from .mining import (
    MiningConfig,
    MiningUnavailableError,
    PatchPairSet,
    load_pairs,
    mine_negatives,
    mine_pair,
    mine_positives,
    reproject,
    save_pairs,
)
from .riv import (
    RivConfig,
    RivImage,
    load_riv,
    normal_ratio,
    project_point,
    project_scan,
    resize_vertical,
    save_riv,
    wrap_pad,
)
from .scan_geometry import (
    AlignmentError,
    MalformedFileError,
    Pose,
    RigidTransform,
    Scan,
    icp_align,
    knn,
    load_poses,
    load_scan,
    save_poses,
    save_scan,
    voxel_downsample,
)

__version__ = "0.1.0"
