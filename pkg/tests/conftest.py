import os
from pathlib import Path

import pytest
import torch
from hypothesis import settings

from spurgen.diffusion import DiffusionModels, NoiseSchedule
from spurgen.toy.data import SynthDatasetConfig, synth_dataset
from spurgen.toy.models import (
    IdentityCodec,
    TinyMlpClassifier,
    ToyNoisePredictor,
    ToyTextEncoder,
)
from spurgen.toy.pipeline import cached_second_classifier, cached_toy_bundle

settings.register_profile("default", deadline=None)
settings.load_profile("default")

CACHE_DIR = Path(os.environ.get("SPURGEN_CACHE_DIR", Path(__file__).parent / ".cache"))


@pytest.fixture(scope="session")
def toy_dataset():
    return synth_dataset(SynthDatasetConfig())


@pytest.fixture(scope="session")
def toy_bundle(toy_dataset):
    # pretrained once per config+seed, then loaded from the on-disk cache
    return cached_toy_bundle(toy_dataset, 0, cache_dir=CACHE_DIR)


@pytest.fixture(scope="session")
def second_classifier(toy_dataset):
    return cached_second_classifier(toy_dataset, 1, cache_dir=CACHE_DIR)


def make_micro_stack(seed: int = 0, dtype: torch.dtype = torch.float64, image_size: int = 4):
    """Smallest stack that exercises every loss path: identity codec,
    few-hundred-parameter predictor, trainable embeddings, MLP extractor.
    Double precision by default so finite-difference checks are sharp.
    """
    torch.manual_seed(seed)
    codec = IdentityCodec(image_size)
    predictor = ToyNoisePredictor(channels=3, hidden=4, embed_dim=4, time_dim=4).to(dtype)
    text_encoder = ToyTextEncoder(embed_dim=4).to(dtype)
    models = DiffusionModels(codec=codec, predictor=predictor, text_encoder=text_encoder)
    extractor = TinyMlpClassifier(image_size=image_size, feature_dim=6, num_classes=3).to(dtype)
    for p in extractor.parameters():
        p.requires_grad_(False)
    schedule = NoiseSchedule.linear()
    return models, extractor, schedule


@pytest.fixture
def micro_stack():
    return make_micro_stack()
