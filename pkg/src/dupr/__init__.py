"""Multi-level image and patch contrastive pretraining on a numpy autodiff core."""

from .contrastive import LossWeights, MemoryBank, info_nce, image_loss_level, patch_loss_level, total_loss
from .encoder import EncoderConfig, EncoderPair, forward_pyramid, init_params, project_image
from .geometry import AugmentConfig, Box, ViewTransform, intersection_boxes, patch_correspondence
from .patches import extract_patch_grids, roi_align
from .trainer import TrainConfig, load_checkpoint, run, save_checkpoint

__all__ = [
    "LossWeights", "MemoryBank", "info_nce", "image_loss_level", "patch_loss_level", "total_loss",
    "EncoderConfig", "EncoderPair", "forward_pyramid", "init_params", "project_image",
    "AugmentConfig", "Box", "ViewTransform", "intersection_boxes", "patch_correspondence",
    "extract_patch_grids", "roi_align",
    "TrainConfig", "load_checkpoint", "run", "save_checkpoint",
]

__version__ = "0.1.0"
