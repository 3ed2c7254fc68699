"""splitreg: region-wise diffeomorphic registration with
discontinuity-preserving field composition.

Label maps split a moving/fixed pair into per-region sub-problems; each is
solved independently by instance optimization of a stationary velocity
field; the per-region displacements are recombined by hard selection on the
fixed segmentation, giving one global field that is smooth inside every
region and free to jump across region boundaries.
"""

from .config import PRESETS, RunConfig, apply_preset, load_config, parse_config
from .edt import EdtMask, exact_edt, normalized_edt_mask
from .errors import SplitregError
from .fields import (
    DisplacementField,
    VelocityField,
    compose_fields,
    folding_count,
    integrate_velocity,
    jacobian_determinant,
    sdlogj,
    uncrop_displacement,
    warp_labelmap,
    warp_volume,
)
from .losses import (
    LossValueGrad,
    LossWeights,
    backprop_through_warp_and_integration,
    edt_loss,
    l2_diffusion,
    lncc_loss,
    mask_loss,
    mse_loss,
    soft_dice_loss,
    total_loss,
)
from .metrics import MetricsReport, compute_report, dice, field_smoothness, hd95
from .nrrd_io import read_nrrd, write_nrrd
from .optimizer import (
    AdamState,
    OptimizerConfig,
    RegionPair,
    RegionResult,
    adam_update,
    register_region,
)
from .phantom import (
    BUILTIN_SPECS,
    PhantomData,
    PhantomSpec,
    RegionMotion,
    builtin_phantom,
    gt_field_error,
    make_phantom,
)
from .pipeline import (
    SegRegResult,
    degrade_segmentation,
    merge_labels,
    merge_sweep,
    run_segreg,
    segmentation_sweep,
    split_regions,
)
from .volume import (
    Box,
    Grid,
    LabelMap,
    Volume,
    bounding_box,
    crop,
    mask_apply,
    nearest_sample,
    trilinear_sample,
)

__version__ = "0.1.0"
