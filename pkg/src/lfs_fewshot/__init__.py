"""Local Foreground Selection attention for few-shot fine-grained classification."""
from .lfs_attention import AttentionConfig, LFSModule, fs_threshold_mask
from .model import FewShotModel, ModelConfig

__version__ = "0.1.0"

__all__ = ["AttentionConfig", "LFSModule", "fs_threshold_mask", "FewShotModel", "ModelConfig"]
