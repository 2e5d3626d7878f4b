"""Motion-artifact inpainting for OCT-angiography volumes with vessel-aware multi-axis supervision."""

from .corruption import CorruptionConfig, apply_mask, corrupt_for_target, generate_fixed_masks
from .loss import LossBreakdown, LossConfig, projection_l1, vamos_loss, weighted_mse
from .volume import (PhantomConfig, SliceStack, ValidityMask, Volume, extract_stack,
                     generate_phantom, load_volume, save_volume)

__version__ = "0.1.0"
