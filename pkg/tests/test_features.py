import math

import pytest
import torch
from hypothesis import given, strategies as st

from spurgen.errors import ConfigurationError, DegenerateFeatureError
from spurgen.features import (
    REDUCTION_MEAN_PAIRWISE,
    REDUCTION_MEAN_VECTOR,
    SIGN_NEGATIVE,
    ClassWeights,
    ClassWiseFeature,
    FeatureBank,
    class_wise_feature,
    cosine_similarity,
    feature_similarity_loss,
    norm_floor,
    penultimate_features,
    reference_feature_bank,
)
from spurgen.toy.models import TinyMlpClassifier

# cos((1,2,3), (4,5,6)) = 32 / sqrt(14 * 77), evaluated independently
COS_123_456 = 0.9746318461970762
INV_SQRT2 = 0.7071067811865476


def vec(*values, dtype=torch.float64):
    return torch.tensor(values, dtype=dtype)


def bank_from_vectors(vectors, reduction, class_id=0):
    entries = [ClassWiseFeature(class_id=class_id, values=v) for v in vectors]
    return FeatureBank(class_id=class_id, entries=entries, reduction=reduction)


class TestCosineSimilarity:
    def test_frozen_reference_value(self):
        got = cosine_similarity(vec(1.0, 2.0, 3.0), vec(4.0, 5.0, 6.0))
        assert abs(float(got) - COS_123_456) < 1e-12

    def test_orthogonal_and_opposite(self):
        assert float(cosine_similarity(vec(1.0, 0.0), vec(0.0, 1.0))) == 0.0
        assert float(cosine_similarity(vec(1.0, 0.0), vec(-2.0, 0.0))) == -1.0

    def test_degenerate_zero_vector(self):
        with pytest.raises(DegenerateFeatureError):
            cosine_similarity(vec(0.0, 0.0, 0.0), vec(1.0, 0.0, 0.0))

    def test_degenerate_nan(self):
        with pytest.raises(DegenerateFeatureError):
            cosine_similarity(vec(float("nan"), 1.0), vec(1.0, 0.0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine_similarity(vec(1.0, 2.0), vec(1.0, 2.0, 3.0))

    def test_norm_floor_per_dtype(self):
        assert norm_floor(torch.float64) == 1e-12
        assert norm_floor(torch.float32) == 1e-8

    @given(
        st.lists(st.floats(-100, 100), min_size=2, max_size=8),
        st.lists(st.floats(-100, 100), min_size=2, max_size=8),
    )
    def test_range_and_symmetry(self, a_values, b_values):
        n = min(len(a_values), len(b_values))
        a, b = vec(*a_values[:n]), vec(*b_values[:n])
        if float(a.norm()) <= 1e-12 or float(b.norm()) <= 1e-12:
            return
        ab = float(cosine_similarity(a, b))
        ba = float(cosine_similarity(b, a))
        assert -1.0 <= ab <= 1.0
        assert abs(ab - ba) < 1e-12

    @given(
        st.lists(st.floats(-50, 50), min_size=3, max_size=6),
        st.floats(0.01, 100.0),
    )
    def test_positive_scale_invariance(self, values, scale):
        a = vec(*values)
        if float(a.norm()) <= 1e-9:
            return
        b = vec(*[v * 0.5 + 1.0 for v in values])
        base = float(cosine_similarity(a, b))
        scaled = float(cosine_similarity(a * scale, b))
        assert abs(base - scaled) < 1e-9

    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
    def test_self_similarity_one(self, values):
        a = vec(*values)
        if float(a.norm()) <= 1e-9:
            return
        assert abs(float(cosine_similarity(a, a)) - 1.0) < 1e-12


class TestClassWiseFeature:
    def test_elementwise_product_vs_loop(self):
        g = torch.Generator().manual_seed(7)
        phi = torch.rand((9,), generator=g, dtype=torch.float64) * 4 - 2
        w = ClassWeights(class_id=2, weights=torch.rand((9,), generator=g, dtype=torch.float64))
        feature = class_wise_feature(phi, w)
        assert feature.class_id == 2
        for i in range(9):
            assert abs(float(feature.values[i]) - float(phi[i]) * float(w.weights[i])) < 1e-15

    def test_dimension_mismatch(self):
        w = ClassWeights(class_id=0, weights=torch.ones(4))
        with pytest.raises(ValueError, match="mismatch"):
            class_wise_feature(torch.ones(5), w)

    def test_weights_must_be_vector(self):
        with pytest.raises(ValueError):
            ClassWeights(class_id=0, weights=torch.ones(2, 2))


class TestPenultimateFeatures:
    def test_shape_and_grad(self):
        extractor = TinyMlpClassifier(image_size=4).double()
        images = torch.rand((5, 3, 4, 4), dtype=torch.float64, requires_grad=True)
        phi = penultimate_features(images, extractor)
        assert phi.shape == (5, extractor.feature_dim)
        assert phi.requires_grad

    def test_declared_dim_enforced(self):
        extractor = TinyMlpClassifier(image_size=4)
        extractor.feature_dim = 99  # adapter lies about its output width
        with pytest.raises(ConfigurationError):
            penultimate_features(torch.rand(2, 3, 4, 4), extractor)


class TestFeatureBank:
    def test_mean_vector_precomputed(self):
        bank = bank_from_vectors([vec(1.0, 0.0), vec(0.0, 1.0)], REDUCTION_MEAN_VECTOR)
        assert torch.equal(bank.mean_values, vec(0.5, 0.5))

    def test_class_mismatch_rejected(self):
        entries = [ClassWiseFeature(class_id=1, values=vec(1.0, 2.0))]
        with pytest.raises(ValueError, match="class"):
            FeatureBank(class_id=0, entries=entries, reduction=REDUCTION_MEAN_VECTOR)

    def test_unknown_reduction_rejected(self):
        entries = [ClassWiseFeature(class_id=0, values=vec(1.0))]
        with pytest.raises(ConfigurationError):
            FeatureBank(class_id=0, entries=entries, reduction="median")

    def test_save_load_round_trip(self, tmp_path):
        bank = bank_from_vectors([vec(1.5, -2.0, 3.0), vec(0.5, 0.25, -1.0)], REDUCTION_MEAN_PAIRWISE)
        path = tmp_path / "bank.spg"
        bank.save(path)
        loaded = FeatureBank.load(path)
        assert loaded.class_id == bank.class_id
        assert loaded.reduction == bank.reduction
        assert loaded.image_ids == bank.image_ids
        for a, b in zip(loaded.entries, bank.entries):
            assert torch.equal(a.values, b.values)

    def test_save_bytes_deterministic(self, tmp_path):
        bank = bank_from_vectors([vec(1.0, 2.0)], REDUCTION_MEAN_VECTOR)
        bank.save(tmp_path / "a.spg")
        bank.save(tmp_path / "b.spg")
        assert (tmp_path / "a.spg").read_bytes() == (tmp_path / "b.spg").read_bytes()

    def test_stale_cache_version_rejected(self, tmp_path):
        from spurgen.container import load_arrays, save_arrays

        bank = bank_from_vectors([vec(1.0, 2.0)], REDUCTION_MEAN_VECTOR)
        path = tmp_path / "bank.spg"
        bank.save(path)
        arrays, metadata = load_arrays(path)
        metadata["cache_version"] = 999
        save_arrays(path, arrays, metadata)
        with pytest.raises(ValueError, match="version"):
            FeatureBank.load(path)


class TestFeatureSimilarityLoss:
    def test_mean_vector_oracle(self):
        bank = bank_from_vectors([vec(1.0, 0.0), vec(0.0, 1.0)], REDUCTION_MEAN_VECTOR)
        generated = [ClassWiseFeature(class_id=0, values=vec(1.0, 1.0))]
        assert abs(float(feature_similarity_loss(bank, generated)) - 1.0) < 1e-12

    def test_mean_pairwise_oracle(self):
        bank = bank_from_vectors([vec(1.0, 0.0), vec(0.0, 1.0)], REDUCTION_MEAN_PAIRWISE)
        generated = [ClassWiseFeature(class_id=0, values=vec(1.0, 1.0))]
        got = float(feature_similarity_loss(bank, generated))
        assert abs(got - INV_SQRT2) < 1e-12

    def test_sign_flips_value_only(self):
        bank = bank_from_vectors([vec(1.0, 2.0, 3.0)], REDUCTION_MEAN_VECTOR)
        generated = [ClassWiseFeature(class_id=0, values=vec(4.0, 5.0, 6.0))]
        plus = float(feature_similarity_loss(bank, generated))
        minus = float(feature_similarity_loss(bank, generated, sign=SIGN_NEGATIVE))
        assert abs(plus - COS_123_456) < 1e-12
        assert minus == -plus

    def test_class_mismatch(self):
        bank = bank_from_vectors([vec(1.0, 0.0)], REDUCTION_MEAN_VECTOR, class_id=1)
        generated = [ClassWiseFeature(class_id=0, values=vec(1.0, 1.0))]
        with pytest.raises(ValueError, match="class"):
            feature_similarity_loss(bank, generated)

    def test_empty_generated(self):
        bank = bank_from_vectors([vec(1.0, 0.0)], REDUCTION_MEAN_VECTOR)
        with pytest.raises(ValueError, match="empty"):
            feature_similarity_loss(bank, [])

    def test_gradient_reaches_generated(self):
        bank = bank_from_vectors([vec(1.0, 0.5, 0.2)], REDUCTION_MEAN_VECTOR)
        values = vec(0.3, 0.8, -0.4).requires_grad_(True)
        loss = feature_similarity_loss(bank, [ClassWiseFeature(class_id=0, values=values)])
        loss.backward()
        assert values.grad is not None
        assert float(values.grad.abs().sum()) > 0


class TestReferenceFeatureBank:
    def test_entries_match_manual_composition(self):
        torch.manual_seed(3)
        extractor = TinyMlpClassifier(image_size=4).double()
        images = torch.rand((4, 3, 4, 4), dtype=torch.float64)
        bank = reference_feature_bank(images, extractor, class_id=1)
        phi = extractor.features(images)
        w = extractor.class_weights(1)
        for i, entry in enumerate(bank.entries):
            assert torch.allclose(entry.values, phi[i] * w.weights, atol=0, rtol=1e-12)
        assert bank.extractor_id == extractor.checkpoint_id
        assert bank.image_ids == ("ref_000", "ref_001", "ref_002", "ref_003")

    def test_entries_detached(self):
        extractor = TinyMlpClassifier(image_size=4)
        bank = reference_feature_bank(torch.rand(2, 3, 4, 4), extractor, class_id=0)
        for entry in bank.entries:
            assert not entry.values.requires_grad
