"""Synthetic RGB-D scenes, sample I/O, augmentation, patchify and masking."""

from .dataset import RgbdDataset, load_dataset, scene_seed, split_assignment, synthetic_dataset, write_dataset
from .fileio import DatasetManifest, decode_sample, encode_sample, read_manifest, read_sample, write_manifest, write_sample
from .masking import MaskPattern, full_mask, sample_mask, sample_masks, visible_count
from .scenes import GENERATOR_VERSION, RgbdSample, SceneConfig, SceneObject, generate_synthetic_scene
from .transforms import (
    AugmentConfig,
    PatchTensor,
    augment,
    augment_batch,
    depth_to_patch_input,
    gaussian_blur,
    gaussian_kernel,
    normalize_depth,
    normalize_depth_array,
    patchify,
    patchify_array,
    per_patch_denormalize,
    per_patch_normalize,
    unpatchify,
    unpatchify_array,
)
