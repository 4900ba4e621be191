"""Episodic data pipeline, synthetic data, training and evaluation."""
from .manifest import DatasetManifest, ImageEntry, ImageStore, load_manifest, write_manifest
from .sampling import Episode, EpisodeSpec, augment, episode_tensors, sample_episode
from .synth import SynthConfig, synth_generate
from .training import EvalReport, TrainConfig, TrainResult, evaluate, evaluate_logits, evaluate_model, train

__all__ = [
    "DatasetManifest", "ImageEntry", "ImageStore", "load_manifest", "write_manifest",
    "Episode", "EpisodeSpec", "augment", "episode_tensors", "sample_episode",
    "SynthConfig", "synth_generate",
    "EvalReport", "TrainConfig", "TrainResult", "evaluate", "evaluate_logits", "evaluate_model", "train",
]
