"""Cascaded deformable registration and multi-atlas segmentation."""

import os

# numba fixes its thread pool size on first import; leave room for --threads 8
# even on small machines so thread-count determinism can be exercised.
os.environ.setdefault("NUMBA_NUM_THREADS", str(max(8, os.cpu_count() or 1)))
# concurrent atlas registrations call parallel kernels from several threads
os.environ.setdefault("NUMBA_THREADING_LAYER", "threadsafe")

__version__ = "0.1.0"

from casreg.volume import (  # noqa: E402
    BoundingBox,
    Volume,
    crop_to_foreground,
    load_volume,
    normalize,
    resize,
    save_volume,
)
from casreg.phantom import make_phantom, phantom_bank, phantom_pair  # noqa: E402
from casreg.deform import (  # noqa: E402
    JacobianReport,
    add_fields,
    jacobian_report,
    random_smooth_field,
    upsample_field,
    warp_labels,
    warp_scalar,
)
from casreg.similarity import (  # noqa: E402
    LossBreakdown,
    global_ncc,
    local_ncc,
    loss_gradient,
    mse,
    smoothness_penalty,
    ssim,
    total_loss,
)
from casreg.registration import (  # noqa: E402
    RegistrationConfig,
    RegistrationResult,
    RigidTransform,
    apply_rigid,
    cascade_register,
    rigid_register,
)
from casreg.mas import (  # noqa: E402
    Atlas,
    AtlasAlignment,
    FusionConfig,
    fuse_lwv,
    fuse_majority,
    propagate_labels,
    register_atlases,
    segment,
    select_atlases,
)
from casreg.evaluation import DiceReport, dice, dice_report, experiment_suite  # noqa: E402
