"""Measurement harness: prediction logs, spurious accuracy, filtering,
ablation and quality tables, recontextualization prompts, ratings.

Accuracies are percentages rounded to two decimals (round-half-even).
Prediction logs and ratings serialize as line-delimited JSON; tables
render as CSV and markdown.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol, Sequence, runtime_checkable

import torch

from .errors import ConfigurationError, ShortfallError

PREDICATE_CLASS_EXTENSION = "class_extension"
PREDICATE_SHARED_FEATURE = "shared_feature"
PREDICATE_NOT_SPURIOUS = "not_spurious"


@runtime_checkable
class ClassifierAdapter(Protocol):
    """Image batch -> class logits; deterministic under a fixed checkpoint."""

    classifier_id: str
    num_classes: int
    preprocessing: str

    def logits(self, images: torch.Tensor) -> torch.Tensor: ...


@runtime_checkable
class QualityScorerAdapter(Protocol):
    """Image batch -> per-image quality scores in [0, 1]."""

    scorer_id: str

    def score(self, images: torch.Tensor) -> torch.Tensor: ...


@dataclass(frozen=True)
class PredictionRecord:
    image_id: str
    classifier_id: str
    predicted_class: int
    confidence: float

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


class PredictionLog:
    """Per-image, per-classifier prediction records with unique keys."""

    def __init__(self, records: Iterable[PredictionRecord] = (), meta: dict | None = None):
        self.records: list[PredictionRecord] = []
        self.meta = dict(meta or {})
        self._keys: set[tuple[str, str]] = set()
        for record in records:
            self.append(record)

    def append(self, record: PredictionRecord) -> None:
        key = (record.image_id, record.classifier_id)
        if key in self._keys:
            raise ValueError(f"duplicate record for image {key[0]!r}, classifier {key[1]!r}")
        self._keys.add(key)
        self.records.append(record)

    def extend(self, records: Iterable[PredictionRecord]) -> None:
        for record in records:
            self.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def image_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for r in self.records:
            seen.setdefault(r.image_id, None)
        return list(seen)

    def by_image(self) -> dict[str, PredictionRecord]:
        """image_id -> record; requires a single classifier in the log."""
        classifiers = {r.classifier_id for r in self.records}
        if len(classifiers) > 1:
            raise ValueError(f"log mixes classifiers {sorted(classifiers)}")
        return {r.image_id: r for r in self.records}

    def to_jsonl(self, path: str | Path) -> None:
        lines = []
        if self.meta:
            lines.append(json.dumps({"_meta": self.meta}, sort_keys=True))
        for r in self.records:
            lines.append(
                json.dumps(
                    {
                        "image_id": r.image_id,
                        "classifier_id": r.classifier_id,
                        "predicted_class": r.predicted_class,
                        "confidence": r.confidence,
                    },
                    sort_keys=True,
                )
            )
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path) -> "PredictionLog":
        log = cls()
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            row = json.loads(line)
            if "_meta" in row:
                log.meta.update(row["_meta"])
                continue
            log.append(
                PredictionRecord(
                    image_id=row["image_id"],
                    classifier_id=row["classifier_id"],
                    predicted_class=row["predicted_class"],
                    confidence=row["confidence"],
                )
            )
        return log


@dataclass(frozen=True)
class ContentLabels:
    """Ground truth for one image: what it depicts and whether the planted
    feature is present."""

    image_id: str
    present_classes: frozenset[int]
    has_spurious_feature: bool
    feature_id: str | None = None


def classify(
    images: torch.Tensor,
    image_ids: Sequence[str],
    classifier: ClassifierAdapter,
    *,
    target_class: int | None = None,
) -> PredictionLog:
    """Argmax class and max softmax confidence for each image."""
    if images.ndim != 4 or images.shape[0] != len(image_ids):
        raise ValueError(
            f"expected (B, 3, H, W) batch matching {len(image_ids)} ids, got {tuple(images.shape)}"
        )
    if target_class is not None and not 0 <= target_class < classifier.num_classes:
        raise ConfigurationError(
            f"target class {target_class} outside label space of size {classifier.num_classes}"
        )
    with torch.no_grad():
        logits = classifier.logits(images)
    if logits.shape != (images.shape[0], classifier.num_classes):
        raise ValueError(
            f"classifier returned shape {tuple(logits.shape)}, "
            f"expected ({images.shape[0]}, {classifier.num_classes})"
        )
    probs = torch.softmax(logits, dim=1)
    confidences, predictions = probs.max(dim=1)
    log = PredictionLog(meta={"preprocessing": {classifier.classifier_id: classifier.preprocessing}})
    for image_id, pred, conf in zip(image_ids, predictions.tolist(), confidences.tolist()):
        log.append(
            PredictionRecord(
                image_id=image_id,
                classifier_id=classifier.classifier_id,
                predicted_class=int(pred),
                confidence=float(conf),
            )
        )
    return log


def round2(value: float) -> float:
    return round(value, 2)


def spurious_accuracy(log: PredictionLog, target_class: int, universe: Sequence[str]) -> float:
    """Percentage of universe images predicted as the target class."""
    if len(universe) == 0:
        raise ValueError("universe is empty")
    if len(set(universe)) != len(universe):
        raise ValueError("universe contains duplicate image ids")
    by_image = log.by_image()
    missing = [i for i in universe if i not in by_image]
    if missing:
        raise ValueError(f"universe ids missing from log: {missing[:5]}{'...' if len(missing) > 5 else ''}")
    hits = sum(1 for i in universe if by_image[i].predicted_class == target_class)
    return round2(100.0 * hits / len(universe))


def consistency_filter(
    logs: Sequence[PredictionLog], target_class: int, select_n: int
) -> list[str]:
    """Image ids predicted as the target class by every classifier.

    When more images qualify than requested, the select_n with the highest
    minimum confidence across classifiers win, ties broken by image id.
    """
    if select_n < 1:
        raise ConfigurationError("select_n must be >= 1")
    if not logs:
        raise ValueError("need at least one prediction log")
    per_log = [log.by_image() for log in logs]
    universe = set(per_log[0])
    for m in per_log[1:]:
        if set(m) != universe:
            raise ValueError("prediction logs cover different image universes")
    qualifying = []
    for image_id in sorted(universe):
        records = [m[image_id] for m in per_log]
        if all(r.predicted_class == target_class for r in records):
            qualifying.append((image_id, min(r.confidence for r in records)))
    if len(qualifying) < select_n:
        raise ShortfallError(
            f"only {len(qualifying)} image(s) are unanimously predicted as class "
            f"{target_class}, but {select_n} were requested",
            qualifying=len(qualifying),
            requested=select_n,
        )
    qualifying.sort(key=lambda pair: (-pair[1], pair[0]))
    return [image_id for image_id, _ in qualifying[:select_n]]


def spurious_predicate(labels: ContentLabels, prediction: PredictionRecord, k: int) -> str:
    """Classify one prediction against ground truth.

    class_extension: feature present, class object absent entirely, and
    the classifier still predicts k. shared_feature: same, except some
    other class object is present (the feature outweighs it). Everything
    else, including any image that truly contains class k, is not_spurious.
    """
    if labels.image_id != prediction.image_id:
        raise ValueError(
            f"labels are for image {labels.image_id!r} but prediction is for {prediction.image_id!r}"
        )
    if k in labels.present_classes:
        return PREDICATE_NOT_SPURIOUS
    if not labels.has_spurious_feature or prediction.predicted_class != k:
        return PREDICATE_NOT_SPURIOUS
    if labels.present_classes:
        return PREDICATE_SHARED_FEATURE
    return PREDICATE_CLASS_EXTENSION


@dataclass(frozen=True)
class AblationRun:
    """One configuration's accuracy grid over (class, classifier) cells."""

    config_tag: str
    cells: Mapping[tuple[int, str], float]


@dataclass
class AblationTable:
    rows: list[tuple[str, float]]  # (config_tag, mean accuracy) in input order

    def to_markdown(self) -> str:
        lines = ["| Configuration | Average Spurious Accuracy (%) |", "| --- | --- |"]
        for tag, mean in self.rows:
            lines.append(f"| {tag} | {mean:.2f} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["config_tag,average_spurious_accuracy"]
        for tag, mean in self.rows:
            lines.append(f"{tag},{mean:.2f}")
        return "\n".join(lines) + "\n"


def ablation_report(runs: Sequence[AblationRun]) -> AblationTable:
    """Mean accuracy over every grid cell, one row per configuration."""
    if not runs:
        raise ValueError("need at least one run")
    reference_keys = set(runs[0].cells)
    if not reference_keys:
        raise ValueError("runs have empty grids")
    for run in runs:
        if set(run.cells) != reference_keys:
            raise ValueError(
                f"run {run.config_tag!r} covers a different class x classifier grid"
            )
    rows = []
    for run in runs:
        values = [run.cells[key] for key in sorted(reference_keys)]
        rows.append((run.config_tag, round2(sum(values) / len(values))))
    return AblationTable(rows=rows)


@dataclass
class QualityTable:
    """Per-class mean quality scores for real and generated sets."""

    rows: list[tuple[str, float | None, float | None]]  # (class label, real, generated)
    counts: tuple[int, int]  # (n real, n generated) for the header

    def _fmt(self, value: float | None) -> str:
        return "N/A" if value is None else f"{value:.2f}"

    def to_markdown(self) -> str:
        n_real, n_gen = self.counts
        lines = [
            f"| Class | Real (n = {n_real}) | Generated (n = {n_gen}) |",
            "| --- | --- | --- |",
        ]
        for label, real, gen in self.rows:
            lines.append(f"| {label} | {self._fmt(real)} | {self._fmt(gen)} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        lines = ["class,real_mean,generated_mean"]
        for label, real, gen in self.rows:
            lines.append(f"{label},{self._fmt(real)},{self._fmt(gen)}")
        return "\n".join(lines) + "\n"


def quality_scores(
    real: Mapping[str, torch.Tensor],
    generated: Mapping[str, torch.Tensor],
    scorer: QualityScorerAdapter | None,
) -> QualityTable:
    """Mean score per class for real and generated image sets.

    A missing scorer yields a table of N/A cells rather than an error, so
    reports stay structurally complete when the metric is unavailable.
    """
    if set(real) != set(generated):
        raise ValueError("real and generated sets must cover the same classes")
    labels = list(real)
    n_real = max((real[c].shape[0] for c in labels), default=0)
    n_gen = max((generated[c].shape[0] for c in labels), default=0)
    rows: list[tuple[str, float | None, float | None]] = []
    for label in labels:
        if scorer is None:
            rows.append((label, None, None))
            continue
        means = []
        for batch in (real[label], generated[label]):
            scores = scorer.score(batch)
            if scores.ndim != 1 or scores.shape[0] != batch.shape[0]:
                raise ValueError("scorer must return one score per image")
            if ((scores < 0) | (scores > 1)).any():
                raise ValueError("scorer returned values outside [0, 1]")
            means.append(round2(float(scores.mean())))
        rows.append((label, means[0], means[1]))
    return QualityTable(rows=rows, counts=(n_real, n_gen))


def recontextualize_prompts(base, contexts: Sequence[str]) -> list[str]:
    """Render the identifier prompt once per context, order preserved.

    An empty context string yields the base prompt unchanged; nonempty
    contexts are appended after a space.
    """
    if not contexts:
        raise ValueError("contexts must be nonempty")
    rendered = base.render(with_identifier=True)
    prompts = []
    for context in contexts:
        context = context.strip()
        prompts.append(rendered if not context else f"{rendered} {context}")
    return prompts


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    image_id: str
    score: int

    def __post_init__(self):
        if not 1 <= self.score <= 5 or int(self.score) != self.score:
            raise ValueError(f"score must be an integer in 1..5, got {self.score}")


def ingest_ratings(path: str | Path) -> list[RatingRecord]:
    """Read line-delimited {user_id, image_id, score} rating records."""
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        row = json.loads(line)
        records.append(
            RatingRecord(user_id=row["user_id"], image_id=row["image_id"], score=int(row["score"]))
        )
    return records


def rating_distribution(
    records: Sequence[RatingRecord], source_of: Mapping[str, str]
) -> dict[str, dict[int, float]]:
    """Percentage of ratings at each score 1..5, per image source."""
    if not records:
        raise ValueError("no rating records")
    counts: dict[str, dict[int, int]] = {}
    for record in records:
        if record.image_id not in source_of:
            raise ValueError(f"no source mapping for rated image {record.image_id!r}")
        source = source_of[record.image_id]
        counts.setdefault(source, {s: 0 for s in range(1, 6)})[record.score] += 1
    distribution: dict[str, dict[int, float]] = {}
    for source, histogram in counts.items():
        total = sum(histogram.values())
        distribution[source] = {
            score: round2(100.0 * n / total) for score, n in histogram.items()
        }
    return distribution


@dataclass
class SpuriousAccuracyTable:
    """Rows per classifier, columns per (class label, source) pair."""

    classifiers: list[str]
    columns: list[tuple[str, str]]  # (class label, source)
    cells: Mapping[tuple[str, str, str], float]  # (classifier, class label, source) -> pct

    def __post_init__(self):
        for classifier in self.classifiers:
            for label, source in self.columns:
                if (classifier, label, source) not in self.cells:
                    raise ValueError(f"missing cell ({classifier}, {label}, {source})")

    def to_markdown(self) -> str:
        header = "| Model | " + " | ".join(f"{label} ({source})" for label, source in self.columns) + " |"
        rule = "| --- |" + " --- |" * len(self.columns)
        lines = [header, rule]
        for classifier in self.classifiers:
            cells = " | ".join(
                f"{self.cells[(classifier, label, source)]:.2f}" for label, source in self.columns
            )
            lines.append(f"| {classifier} | {cells} |")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        header = "classifier," + ",".join(f"{label}_{source}" for label, source in self.columns)
        lines = [header]
        for classifier in self.classifiers:
            cells = ",".join(
                f"{self.cells[(classifier, label, source)]:.2f}" for label, source in self.columns
            )
            lines.append(f"{classifier},{cells}")
        return "\n".join(lines) + "\n"
