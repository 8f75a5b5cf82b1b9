from dataclasses import replace

import pytest
import torch
from scipy import stats

from spurgen.diffusion import SamplerConfig
from spurgen.errors import ConfigurationError, SpurgenError, StageError
from spurgen.evaluation import classify, spurious_accuracy
from spurgen.toy.data import (
    CLASS_NOUNS,
    PATCH_COLORS,
    SynthDataset,
    SynthDatasetConfig,
    synth_dataset,
)
from spurgen.toy.models import (
    BlockCodec,
    IdentityCodec,
    ToyClassifier,
    ToyTextEncoder,
    ToyTrainSpec,
    build_toy_models,
    train_toy_classifier,
)
from spurgen.toy.pipeline import ToyRunConfig, cached_toy_bundle, run_end_to_end
from spurgen.training import generate_prior_set

TINY_SPEC = ToyTrainSpec(
    classifier_max_epochs=40,
    classifier_min_accuracy=0.6,
    diffusion_steps=30,
    diffusion_batch=8,
    hidden=8,
    embed_dim=8,
    time_dim=8,
)


class TestSynthDatasetConfig:
    @pytest.mark.parametrize("strength", [-0.1, 1.1])
    def test_correlation_strength_bounds(self, strength):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(correlation_strength=strength)

    def test_image_size_floor(self):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(image_size=4)

    @pytest.mark.parametrize("n", [1, 5])
    def test_num_classes_bounds(self, n):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(num_classes=n)

    def test_counts_positive(self):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(train_count=0)

    def test_rule_class_in_range(self):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(spurious_rule={7: "red_patch"})

    def test_rule_feature_known(self):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(spurious_rule={0: "plaid"})

    def test_rule_nonempty(self):
        with pytest.raises(ConfigurationError):
            SynthDatasetConfig(spurious_rule={})


def corner_blocks(image, patch):
    size = image.shape[1]
    return [
        image[:, :patch, :patch],
        image[:, :patch, size - patch :],
        image[:, size - patch :, :patch],
        image[:, size - patch :, size - patch :],
    ]


def has_red_patch(image, patch_size):
    color = torch.tensor(PATCH_COLORS["red_patch"]).view(3, 1, 1)
    return any(
        torch.allclose(block, color.expand_as(block), atol=1e-6)
        for block in corner_blocks(image, patch_size)
    )


class TestSynthDataset:
    def test_full_correlation_rule(self, toy_dataset):
        config = toy_dataset.config
        assert config.correlation_strength == 1.0
        for ex in toy_dataset.train:
            (label,) = ex.labels.present_classes
            if label == 0:
                assert ex.labels.has_spurious_feature
                assert ex.labels.feature_id == "red_patch"
                assert has_red_patch(ex.image, config.patch_size)
            else:
                assert not ex.labels.has_spurious_feature
                assert ex.labels.feature_id is None

    def test_zero_correlation_is_independent(self):
        config = SynthDatasetConfig(correlation_strength=0.0, train_count=667, seed=11)
        dataset = synth_dataset(config)
        assert len(dataset.train) >= 2000
        table = torch.zeros((3, 2))
        for ex in dataset.train:
            (label,) = ex.labels.present_classes
            table[label, int(ex.labels.has_spurious_feature)] += 1
        _, p_value, _, _ = stats.chi2_contingency(table.numpy())
        assert p_value > 0.01

    def test_feature_without_class_split_nonempty(self, toy_dataset):
        assert len(toy_dataset.feature_only) > 0
        for ex in toy_dataset.feature_only:
            assert ex.labels.present_classes == frozenset()
            assert ex.labels.has_spurious_feature
            assert has_red_patch(ex.image, toy_dataset.config.patch_size)

    def test_clean_split_has_no_patches(self, toy_dataset):
        for ex in toy_dataset.test_clean:
            assert not ex.labels.has_spurious_feature
            assert len(ex.labels.present_classes) == 1

    def test_feature_with_class_split(self, toy_dataset):
        count = toy_dataset.config.feature_with_class_count
        assert len(toy_dataset.feature_with_class) == count * 2
        for ex in toy_dataset.feature_with_class:
            (label,) = ex.labels.present_classes
            assert label != 0
            assert ex.labels.has_spurious_feature

    def test_values_in_unit_range(self, toy_dataset):
        for ex in toy_dataset.train[:20]:
            assert float(ex.image.min()) >= 0.0
            assert float(ex.image.max()) <= 1.0

    def test_same_config_same_dataset(self):
        config = SynthDatasetConfig(train_count=5, test_count=2, feature_only_count=3)
        a = synth_dataset(config)
        b = synth_dataset(config)
        for split in ("train", "test_clean", "feature_only", "feature_with_class"):
            for ex_a, ex_b in zip(a.splits()[split], b.splits()[split]):
                assert torch.equal(ex_a.image, ex_b.image)
                assert ex_a.labels == ex_b.labels

    def test_save_load_round_trip(self, tmp_path):
        config = SynthDatasetConfig(train_count=4, test_count=2, feature_only_count=2)
        dataset = synth_dataset(config)
        dataset.save(tmp_path / "ds")
        loaded = SynthDataset.load(tmp_path / "ds", config)
        for split, examples in dataset.splits().items():
            got = loaded.splits()[split]
            assert [e.labels for e in got] == [e.labels for e in examples]
            for ex, ex_l in zip(examples, got):
                # PNG stores 8-bit: reload is the quantized image, exactly
                expected = (ex.image * 255.0).round() / 255.0
                assert torch.allclose(ex_l.image, expected, atol=1e-6)


class TestCodecs:
    def test_identity_round_trip_error_zero(self):
        codec = IdentityCodec(16)
        x = torch.rand((2, 3, 16, 16))
        assert torch.equal(codec.decode(codec.encode(x)), x)

    def test_block_codec_lossless(self):
        codec = BlockCodec(image_size=16, block=2)
        x = torch.rand((4, 3, 16, 16))
        back = codec.decode(codec.encode(x))
        assert torch.allclose(back, x, atol=1e-6)

    def test_block_codec_shapes(self):
        codec = BlockCodec(image_size=16, block=2)
        assert codec.latent_shape == (12, 8, 8)
        z = codec.encode(torch.rand((1, 3, 16, 16)))
        assert tuple(z.shape) == (1, 12, 8, 8)

    def test_block_codec_centers_range(self):
        codec = BlockCodec(image_size=16, block=2)
        z = codec.encode(torch.zeros((1, 3, 16, 16)))
        assert torch.allclose(z, torch.full_like(z, -1.0))

    def test_block_must_divide_size(self):
        with pytest.raises(ConfigurationError):
            BlockCodec(image_size=15, block=2)

    def test_codecs_declare_differentiable_decode(self):
        assert IdentityCodec().differentiable_decode
        assert BlockCodec().differentiable_decode


class TestToyTextEncoder:
    def test_identifier_in_vocabulary(self):
        enc = ToyTextEncoder()
        assert "sks" in enc.vocab
        for noun in CLASS_NOUNS:
            assert noun in enc.vocab

    def test_prompt_encodes_one_row_per_token(self):
        enc = ToyTextEncoder(embed_dim=8)
        out = enc.encode("a photo of a sks blob")
        assert tuple(out.shape) == (6, 8)

    def test_known_prompt_avoids_unk(self):
        enc = ToyTextEncoder()
        unk = enc.index["<unk>"]
        assert unk not in enc.tokenize("a photo of a sks cross")

    def test_unknown_word_maps_to_unk(self):
        enc = ToyTextEncoder()
        ids = enc.tokenize("a photo of a zebra")
        assert ids[-1] == enc.index["<unk>"]

    def test_empty_prompt_is_null_token(self):
        enc = ToyTextEncoder(embed_dim=8)
        assert enc.tokenize("") == [enc.index["<null>"]]
        assert tuple(enc.encode("").shape) == (1, 8)

    def test_tokenization_lowercases(self):
        enc = ToyTextEncoder()
        assert enc.tokenize("SKS Blob") == enc.tokenize("sks blob")

    def test_embedding_table_is_trainable(self):
        enc = ToyTextEncoder()
        assert enc.embedding.weight.requires_grad


@pytest.fixture(scope="module")
def oracle(toy_dataset):
    return train_toy_classifier(toy_dataset, 0)


class TestToyClassifier:
    def test_reaches_train_accuracy_target(self, oracle):
        _, accuracy = oracle
        assert accuracy >= 0.95

    def test_feature_only_images_fool_it(self, toy_dataset, oracle):
        classifier, _ = oracle
        images = torch.stack([ex.image for ex in toy_dataset.feature_only])
        ids = [ex.labels.image_id for ex in toy_dataset.feature_only]
        log = classify(images, ids, classifier, target_class=0)
        accuracy = spurious_accuracy(log, 0, ids)
        chance = 100.0 / toy_dataset.config.num_classes
        assert accuracy >= chance + 30.0

    def test_single_planted_feature_image_predicted_as_class_zero(self, toy_dataset, oracle):
        classifier, _ = oracle
        ex = toy_dataset.feature_only[0]
        log = classify(ex.image[None], [ex.labels.image_id], classifier)
        assert log.records[0].predicted_class == 0

    def test_logits_decompose_through_feature_head(self):
        torch.manual_seed(0)
        clf = ToyClassifier()
        x = torch.rand((2, 3, 16, 16))
        phi = clf.features(x)
        weights = [clf.class_weights(k) for k in range(clf.num_classes)]
        manual = torch.stack([phi @ w.weights for w in weights], dim=1) + clf.fc2.bias
        assert torch.allclose(clf.logits(x), manual, atol=1e-6)

    def test_class_weights_bounds_checked(self):
        clf = ToyClassifier()
        with pytest.raises(ConfigurationError):
            clf.class_weights(3)


class TestBuildToyModels:
    def test_same_seed_identical_parameters(self, toy_dataset):
        a = build_toy_models(toy_dataset, seed=0, spec=TINY_SPEC)
        b = build_toy_models(toy_dataset, seed=0, spec=TINY_SPEC)
        for part in ("predictor", "text_encoder"):
            sa = getattr(a.models, part).state_dict()
            sb = getattr(b.models, part).state_dict()
            for name in sa:
                assert torch.equal(sa[name], sb[name]), f"{part}.{name}"
        for name, tensor in a.classifier.state_dict().items():
            assert torch.equal(tensor, b.classifier.state_dict()[name]), name

    def test_budget_exhaustion_reports_accuracy(self, toy_dataset):
        spec = replace(TINY_SPEC, classifier_max_epochs=1, classifier_min_accuracy=0.9999)
        with pytest.raises(SpurgenError) as err:
            build_toy_models(toy_dataset, seed=0, spec=spec)
        assert "accuracy" in str(err.value)

    def test_cache_round_trip(self, toy_dataset, tmp_path):
        built = cached_toy_bundle(toy_dataset, 0, TINY_SPEC, cache_dir=tmp_path)
        assert len(list(tmp_path.glob("toy_bundle_*.spg"))) == 1
        loaded = cached_toy_bundle(toy_dataset, 0, TINY_SPEC, cache_dir=tmp_path)
        sa = built.models.predictor.state_dict()
        sb = loaded.models.predictor.state_dict()
        for name in sa:
            assert torch.equal(sa[name], sb[name]), name
        assert loaded.metrics == built.metrics

    def test_metrics_recorded(self, toy_bundle):
        assert toy_bundle.metrics["classifier_train_accuracy"] >= 0.95
        assert toy_bundle.metrics["diffusion_tail_loss"] > 0.0


class TestUnconditionalCensus:
    def test_prior_samples_match_dataset_class_prior(self, toy_dataset, toy_bundle):
        """Unconditionally generated priors, classified by the oracle, land
        near the uniform class balance of the pretraining split."""
        sampler = SamplerConfig(steps=50, guidance_scale=0.0, seed=9000)
        prior = generate_prior_set("", 256, toy_bundle.models, toy_bundle.schedule, sampler)
        ids = [f"prior_{i:03d}" for i in range(prior.images.shape[0])]
        log = classify(prior.images, ids, toy_bundle.classifier)
        counts = torch.zeros(3)
        for record in log.records:
            counts[record.predicted_class] += 1
        statistic, p_value = stats.chisquare(counts.numpy())
        assert p_value > 0.01, f"census {counts.tolist()} chi2={statistic:.2f}"


class TestStageTagging:
    def test_failing_stage_is_named(self, toy_dataset, tmp_path):
        spec = replace(TINY_SPEC, classifier_max_epochs=1, classifier_min_accuracy=0.9999)
        config = ToyRunConfig(train_spec=spec)
        with pytest.raises(StageError) as err:
            run_end_to_end(config, tmp_path / "run", cache_dir=None)
        assert err.value.stage == "pretrain"
        assert isinstance(err.value.cause, SpurgenError)
