"""Desk-scale synthetic world: dataset, tiny models, end-to-end harness."""

from .data import SynthDataset, SynthDatasetConfig, SynthExample, synth_dataset
from .models import (
    BlockCodec,
    IdentityCodec,
    TinyMlpClassifier,
    ToyBundle,
    ToyClassifier,
    ToyNoisePredictor,
    ToyTextEncoder,
    ToyTrainSpec,
    build_toy_models,
    load_toy_bundle,
    load_toy_classifier,
    pretrain_toy_diffusion,
    save_toy_bundle,
    save_toy_classifier,
    train_toy_classifier,
)
from .pipeline import (
    PRESETS,
    ArmSpec,
    ToyRunConfig,
    ToyRunReport,
    cached_toy_bundle,
    run_end_to_end,
)

__all__ = [
    "SynthDataset",
    "SynthDatasetConfig",
    "SynthExample",
    "synth_dataset",
    "BlockCodec",
    "IdentityCodec",
    "TinyMlpClassifier",
    "ToyBundle",
    "ToyClassifier",
    "ToyNoisePredictor",
    "ToyTextEncoder",
    "ToyTrainSpec",
    "build_toy_models",
    "load_toy_bundle",
    "load_toy_classifier",
    "pretrain_toy_diffusion",
    "save_toy_bundle",
    "save_toy_classifier",
    "train_toy_classifier",
    "PRESETS",
    "ArmSpec",
    "ToyRunConfig",
    "ToyRunReport",
    "cached_toy_bundle",
    "run_end_to_end",
]
