"""Synthetic image world with a planted spurious feature.

Every image is a noisy gray background; class objects are white shapes
(disc, box outline, diagonal cross) and the planted feature is a saturated
color patch in one corner. Ground-truth content labels are exact by
construction, which makes the spurious predicates decidable without any
human labeling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import torch

from ..errors import ConfigurationError
from ..evaluation import ContentLabels
from ..imaging import load_image, save_image

#: feature id -> RGB color of the planted corner patch
PATCH_COLORS: dict[str, tuple[float, float, float]] = {
    "red_patch": (0.95, 0.05, 0.10),
    "blue_patch": (0.10, 0.20, 0.95),
    "green_patch": (0.10, 0.90, 0.15),
    "yellow_patch": (0.95, 0.90, 0.10),
}

#: prompt nouns per class index, shared with the toy text encoder vocabulary
CLASS_NOUNS = ("blob", "box", "cross", "wave")


@dataclass(frozen=True)
class SynthDatasetConfig:
    image_size: int = 16
    num_classes: int = 3
    spurious_rule: Mapping[int, str] = field(default_factory=lambda: {0: "red_patch"})
    correlation_strength: float = 1.0
    train_count: int = 200  # per class
    test_count: int = 25  # per class, object without patch
    feature_only_count: int = 48  # per feature, patch without any object
    feature_with_class_count: int = 8  # per (feature, other class) pair
    patch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigurationError("image_size must be >= 8")
        if not 2 <= self.num_classes <= len(CLASS_NOUNS):
            raise ConfigurationError(f"num_classes must be in [2, {len(CLASS_NOUNS)}]")
        if not 0.0 <= self.correlation_strength <= 1.0:
            raise ConfigurationError("correlation_strength must lie in [0, 1]")
        if min(self.train_count, self.test_count, self.feature_only_count) <= 0:
            raise ConfigurationError("split counts must be positive")
        if self.feature_with_class_count < 0:
            raise ConfigurationError("feature_with_class_count must be nonnegative")
        if not 2 <= self.patch_size <= self.image_size // 2:
            raise ConfigurationError("patch_size must be in [2, image_size/2]")
        for k, feature in self.spurious_rule.items():
            if not 0 <= k < self.num_classes:
                raise ConfigurationError(f"spurious_rule class {k} out of range")
            if feature not in PATCH_COLORS:
                raise ConfigurationError(f"unknown feature {feature!r} in spurious_rule")
        if not self.spurious_rule:
            raise ConfigurationError("spurious_rule must map at least one class")


@dataclass
class SynthExample:
    image: torch.Tensor  # (3, H, W) in [0, 1]
    labels: ContentLabels


@dataclass
class SynthDataset:
    config: SynthDatasetConfig
    train: list[SynthExample]
    test_clean: list[SynthExample]
    feature_only: list[SynthExample]
    feature_with_class: list[SynthExample]

    def splits(self) -> dict[str, list[SynthExample]]:
        return {
            "train": self.train,
            "test_clean": self.test_clean,
            "feature_only": self.feature_only,
            "feature_with_class": self.feature_with_class,
        }

    def save(self, directory: str | Path) -> None:
        """Raster-file directory: one subdir per split plus a labels manifest."""
        directory = Path(directory)
        manifest = []
        for split, examples in self.splits().items():
            for ex in examples:
                save_image(ex.image, directory / split / f"{ex.labels.image_id}.png")
                manifest.append(
                    {
                        "split": split,
                        "image_id": ex.labels.image_id,
                        "present_classes": sorted(ex.labels.present_classes),
                        "has_spurious_feature": ex.labels.has_spurious_feature,
                        "feature_id": ex.labels.feature_id,
                    }
                )
        lines = [json.dumps(row, sort_keys=True) for row in manifest]
        (directory / "labels.jsonl").write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, directory: str | Path, config: SynthDatasetConfig) -> "SynthDataset":
        directory = Path(directory)
        splits: dict[str, list[SynthExample]] = {
            "train": [],
            "test_clean": [],
            "feature_only": [],
            "feature_with_class": [],
        }
        for line in (directory / "labels.jsonl").read_text().splitlines():
            row = json.loads(line)
            labels = ContentLabels(
                image_id=row["image_id"],
                present_classes=frozenset(row["present_classes"]),
                has_spurious_feature=row["has_spurious_feature"],
                feature_id=row["feature_id"],
            )
            image = load_image(directory / row["split"] / f"{row['image_id']}.png")
            splits[row["split"]].append(SynthExample(image=image, labels=labels))
        return cls(config=config, **splits)


def _background(size: int, rng: torch.Generator) -> torch.Tensor:
    level = 0.15 + 0.2 * torch.rand((), generator=rng)
    img = torch.full((3, size, size), float(level))
    img += 0.03 * torch.randn((3, size, size), generator=rng)
    return img


def _draw_object(img: torch.Tensor, class_id: int, rng: torch.Generator) -> None:
    """White-ish shape per class; position jittered so nets can't memorize pixels."""
    size = img.shape[1]
    ys, xs = torch.meshgrid(
        torch.arange(size, dtype=torch.float32),
        torch.arange(size, dtype=torch.float32),
        indexing="ij",
    )
    jitter = lambda: int(torch.randint(-2, 3, (1,), generator=rng).item())
    cy = size / 2 - 0.5 + jitter()
    cx = size / 2 - 0.5 + jitter()
    bright = 0.75 + 0.2 * float(torch.rand((), generator=rng))
    if class_id == 0:  # filled disc
        mask = ((ys - cy) ** 2 + (xs - cx) ** 2) <= 3.2**2
    elif class_id == 1:  # box outline
        half = 4
        inside = (abs(ys - cy) <= half) & (abs(xs - cx) <= half)
        hollow = (abs(ys - cy) <= half - 2) & (abs(xs - cx) <= half - 2)
        mask = inside & ~hollow
    elif class_id == 2:  # diagonal cross
        mask = (abs((ys - cy) - (xs - cx)) <= 1.0) | (abs((ys - cy) + (xs - cx)) <= 1.0)
        mask &= (abs(ys - cy) <= 5) & (abs(xs - cx) <= 5)
    else:  # horizontal wave bands
        mask = ((ys - cy).abs() % 4) <= 1.0
        mask &= (abs(xs - cx) <= 5) & (abs(ys - cy) <= 5)
    img[:, mask] = bright


def _plant_patch(img: torch.Tensor, feature_id: str, rng: torch.Generator, patch: int) -> None:
    size = img.shape[1]
    corner = int(torch.randint(0, 4, (1,), generator=rng).item())
    y0 = 0 if corner in (0, 1) else size - patch
    x0 = 0 if corner in (0, 2) else size - patch
    color = torch.tensor(PATCH_COLORS[feature_id]).view(3, 1, 1)
    img[:, y0 : y0 + patch, x0 : x0 + patch] = color


def _label(image_id: str, present: frozenset[int], feature: str | None) -> ContentLabels:
    return ContentLabels(
        image_id=image_id,
        present_classes=present,
        has_spurious_feature=feature is not None,
        feature_id=feature,
    )


def synth_dataset(config: SynthDatasetConfig) -> SynthDataset:
    """Generate the labeled synthetic world for one config/seed.

    Train images follow the correlation rule: with probability
    `correlation_strength` the patch appears iff the class is mapped by
    `spurious_rule`; otherwise presence is a fair coin flip with a feature
    drawn uniformly from the rule's feature set. Test splits are built
    directly: clean object images, patch-only images (the nonempty
    "feature without class" set), and patch + other-class images.
    """
    rng = torch.Generator().manual_seed(config.seed)
    features = sorted(set(config.spurious_rule.values()))

    train: list[SynthExample] = []
    for class_id in range(config.num_classes):
        for i in range(config.train_count):
            img = _background(config.image_size, rng)
            _draw_object(img, class_id, rng)
            ruled = float(torch.rand((), generator=rng)) < config.correlation_strength
            feature = None
            if ruled:
                feature = config.spurious_rule.get(class_id)
            else:
                coin = float(torch.rand((), generator=rng)) < 0.5
                if coin:
                    pick = int(torch.randint(0, len(features), (1,), generator=rng).item())
                    feature = features[pick]
            if feature is not None:
                _plant_patch(img, feature, rng, config.patch_size)
            train.append(
                SynthExample(
                    image=img.clamp(0.0, 1.0),
                    labels=_label(f"train_{class_id}_{i:04d}", frozenset({class_id}), feature),
                )
            )

    test_clean: list[SynthExample] = []
    for class_id in range(config.num_classes):
        for i in range(config.test_count):
            img = _background(config.image_size, rng)
            _draw_object(img, class_id, rng)
            test_clean.append(
                SynthExample(
                    image=img.clamp(0.0, 1.0),
                    labels=_label(f"clean_{class_id}_{i:04d}", frozenset({class_id}), None),
                )
            )

    feature_only: list[SynthExample] = []
    for feature in features:
        for i in range(config.feature_only_count):
            img = _background(config.image_size, rng)
            _plant_patch(img, feature, rng, config.patch_size)
            feature_only.append(
                SynthExample(
                    image=img.clamp(0.0, 1.0),
                    labels=_label(f"feat_{feature}_{i:04d}", frozenset(), feature),
                )
            )

    feature_with_class: list[SynthExample] = []
    for feature in features:
        for class_id in range(config.num_classes):
            if config.spurious_rule.get(class_id) == feature:
                continue
            for i in range(config.feature_with_class_count):
                img = _background(config.image_size, rng)
                _draw_object(img, class_id, rng)
                _plant_patch(img, feature, rng, config.patch_size)
                feature_with_class.append(
                    SynthExample(
                        image=img.clamp(0.0, 1.0),
                        labels=_label(
                            f"featcls_{feature}_{class_id}_{i:04d}",
                            frozenset({class_id}),
                            feature,
                        ),
                    )
                )

    return SynthDataset(
        config=config,
        train=train,
        test_clean=test_clean,
        feature_only=feature_only,
        feature_with_class=feature_with_class,
    )
