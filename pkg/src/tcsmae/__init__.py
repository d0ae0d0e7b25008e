"""Tissue-masked dual-branch autoencoder pretraining for CT segmentation."""

from .imaging import RgbTransformer, build_rgb
from .masking import PatchMasker, PatchMaskSpec, TissueMasker, TissueMaskSpec
from .metrics import MetricReport, dsc, hausdorff
from .model import ModelConfig, UNet, swap_head
from .phantom import PhantomSpec, generate_batch, generate_slice
from .training import (
    FinetuneConfig, LesionSegmenter, PretrainConfig, TCSMAEPretrainer, finetune, pretrain,
)

__version__ = "0.1.0"

__all__ = [
    "FinetuneConfig", "LesionSegmenter", "MetricReport", "ModelConfig", "PatchMaskSpec",
    "PatchMasker", "PhantomSpec", "PretrainConfig", "RgbTransformer", "TCSMAEPretrainer",
    "TissueMaskSpec", "TissueMasker", "UNet", "build_rgb", "dsc", "finetune", "generate_batch",
    "generate_slice", "hausdorff", "pretrain", "swap_head",
]
