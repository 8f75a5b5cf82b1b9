"""Class-weighted neural features and the feature-similarity training signal.

A classifier's penultimate activations phi(x), weighted elementwise by the
final-layer weight row of a target class, give a per-class feature vector.
Cosine similarity between such vectors of generated images and of a frozen
reference set is the extra loss term the trainer optimizes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .container import load_arrays, save_arrays
from .errors import ConfigurationError, DegenerateFeatureError

REDUCTION_MEAN_VECTOR = "mean_vector"
REDUCTION_MEAN_PAIRWISE = "mean_pairwise"
REDUCTIONS = (REDUCTION_MEAN_VECTOR, REDUCTION_MEAN_PAIRWISE)

#: Sign convention for the similarity term added to the training objective.
#: "positive" adds the raw mean similarity (gradient descent then pushes
#: similarity down); "negative" adds its negation (descent pulls generated
#: features toward the reference direction).
SIGN_POSITIVE = "positive"
SIGN_NEGATIVE = "negative"
SIGNS = (SIGN_POSITIVE, SIGN_NEGATIVE)

CACHE_VERSION = 1


def norm_floor(dtype: torch.dtype) -> float:
    """Smallest admissible vector norm: below this the input is degenerate."""
    return 1e-12 if dtype == torch.float64 else 1e-8


@runtime_checkable
class FeatureExtractorAdapter(Protocol):
    """Backbone classifier exposing penultimate features and class weights.

    Implementations declare `feature_dim`, whether gradients propagate to
    the input pixels (`differentiable`), and a `checkpoint_id` naming the
    frozen weights. Same input and checkpoint must give the same output.
    """

    feature_dim: int
    differentiable: bool
    checkpoint_id: str

    def features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) image batch -> (B, D) penultimate activations."""
        ...

    def class_weights(self, class_id: int) -> "ClassWeights":
        """Final-layer weight row for one class."""
        ...


@dataclass(frozen=True)
class ClassWeights:
    class_id: int
    weights: torch.Tensor  # (D,)

    def __post_init__(self):
        if self.weights.ndim != 1:
            raise ValueError(f"weights must be 1-D, got shape {tuple(self.weights.shape)}")


@dataclass(frozen=True)
class ClassWiseFeature:
    """Elementwise product of class weights and penultimate activations."""

    class_id: int
    values: torch.Tensor  # (D,)


def penultimate_features(images: torch.Tensor, extractor: FeatureExtractorAdapter) -> torch.Tensor:
    """Run the extractor on an image batch, checking its declared dimension."""
    phi = extractor.features(images)
    if phi.ndim != 2 or phi.shape[1] != extractor.feature_dim:
        raise ConfigurationError(
            f"extractor returned shape {tuple(phi.shape)}, expected (B, {extractor.feature_dim})"
        )
    return phi


def class_wise_feature(phi: torch.Tensor, w: ClassWeights) -> ClassWiseFeature:
    """Elementwise product w * phi, carrying the class id through."""
    if phi.ndim != 1:
        raise ValueError(f"phi must be 1-D, got shape {tuple(phi.shape)}")
    if phi.shape[0] != w.weights.shape[0]:
        raise ValueError(
            f"dimension mismatch: phi has {phi.shape[0]} entries, weights have {w.weights.shape[0]}"
        )
    return ClassWiseFeature(class_id=w.class_id, values=w.weights * phi)


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    Raises DegenerateFeatureError when either norm is at or below the
    dtype's floor (which also catches NaN/inf inputs); silent NaNs would
    corrupt training.
    """
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("cosine_similarity expects 1-D vectors")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    floor = norm_floor(a.dtype)
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if not (float(na.detach()) > floor and float(nb.detach()) > floor):
        raise DegenerateFeatureError(
            f"degenerate feature vector: norms ({float(na.detach()):.3e}, "
            f"{float(nb.detach()):.3e}) not above floor {floor:.0e}"
        )
    return torch.clamp((a @ b) / (na * nb), -1.0, 1.0)


class FeatureBank:
    """Frozen reference features of one class; immutable after construction."""

    def __init__(
        self,
        class_id: int,
        entries: Sequence[ClassWiseFeature],
        reduction: str,
        *,
        extractor_id: str = "",
        image_ids: Sequence[str] | None = None,
    ):
        if not entries:
            raise ValueError("feature bank needs at least one entry")
        if reduction not in REDUCTIONS:
            raise ConfigurationError(f"unknown reduction {reduction!r}, expected one of {REDUCTIONS}")
        dim = entries[0].values.shape[0]
        for e in entries:
            if e.class_id != class_id:
                raise ValueError(f"entry class {e.class_id} != bank class {class_id}")
            if e.values.shape[0] != dim:
                raise ValueError("entries disagree on feature dimension")
        if image_ids is None:
            image_ids = [f"ref_{i:03d}" for i in range(len(entries))]
        if len(image_ids) != len(entries):
            raise ValueError("image_ids and entries differ in length")
        self.class_id = class_id
        self.entries = tuple(entries)
        self.reduction = reduction
        self.extractor_id = extractor_id
        self.image_ids = tuple(image_ids)
        self.dim = dim
        self.mean_values = torch.stack([e.values for e in entries]).mean(dim=0)

    def __len__(self) -> int:
        return len(self.entries)

    def save(self, path: str | Path) -> None:
        arrays = {
            image_id: entry.values.detach().cpu().numpy()
            for image_id, entry in zip(self.image_ids, self.entries)
        }
        metadata = {
            "cache_version": CACHE_VERSION,
            "class_id": self.class_id,
            "dim": self.dim,
            "reduction": self.reduction,
            "extractor_id": self.extractor_id,
            "image_ids": list(self.image_ids),
        }
        save_arrays(path, arrays, metadata)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureBank":
        arrays, metadata = load_arrays(path)
        if metadata.get("cache_version") != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported feature cache version {metadata.get('cache_version')}")
        class_id = metadata["class_id"]
        entries = [
            ClassWiseFeature(class_id=class_id, values=torch.from_numpy(arrays[image_id]))
            for image_id in metadata["image_ids"]
        ]
        return cls(
            class_id=class_id,
            entries=entries,
            reduction=metadata["reduction"],
            extractor_id=metadata["extractor_id"],
            image_ids=metadata["image_ids"],
        )


def feature_similarity_loss(
    reference: FeatureBank,
    generated: Sequence[ClassWiseFeature],
    sign: str = SIGN_POSITIVE,
) -> torch.Tensor:
    """Mean cosine similarity between reference and generated features.

    With mean_vector reduction each generated feature is compared against
    the mean reference vector; with mean_pairwise every reference/generated
    pair contributes. `sign` selects whether the returned scalar is the
    mean similarity or its negation (see SIGN_* above).
    """
    if sign not in SIGNS:
        raise ConfigurationError(f"unknown sign {sign!r}, expected one of {SIGNS}")
    if not generated:
        raise ValueError("generated feature batch is empty")
    for g in generated:
        if g.class_id != reference.class_id:
            raise ValueError(
                f"class mismatch: generated feature has class {g.class_id}, bank has {reference.class_id}"
            )
    if reference.reduction == REDUCTION_MEAN_VECTOR:
        anchor = reference.mean_values.to(generated[0].values.dtype)
        sims = [cosine_similarity(anchor, g.values) for g in generated]
    else:
        sims = [
            cosine_similarity(entry.values.to(g.values.dtype), g.values)
            for entry in reference.entries
            for g in generated
        ]
    mean_sim = torch.stack(sims).mean()
    return mean_sim if sign == SIGN_POSITIVE else -mean_sim


def reference_feature_bank(
    images: torch.Tensor,
    extractor: FeatureExtractorAdapter,
    class_id: int,
    reduction: str = REDUCTION_MEAN_VECTOR,
    *,
    image_ids: Sequence[str] | None = None,
) -> FeatureBank:
    """Precompute frozen class-weighted features for the reference images.

    Runs without gradient tracking; the bank never changes during a run.
    """
    if images.ndim != 4 or images.shape[0] < 1:
        raise ValueError(f"expected a nonempty (B, 3, H, W) batch, got shape {tuple(images.shape)}")
    with torch.no_grad():
        phi = penultimate_features(images, extractor)
        w = extractor.class_weights(class_id)
        entries = [
            class_wise_feature(phi[i].detach().clone(), w) for i in range(phi.shape[0])
        ]
    return FeatureBank(
        class_id=class_id,
        entries=entries,
        reduction=reduction,
        extractor_id=extractor.checkpoint_id,
        image_ids=image_ids,
    )
