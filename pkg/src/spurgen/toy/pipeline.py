"""End-to-end run over the synthetic world: build or load the pretrained
stack, pick reference images with the classifier ensemble, fine-tune one
arm per similarity-weight setting, sample, and score.

Every stage is seeded; a failure is re-raised tagged with its stage name
so partial runs are diagnosable. The pretrained stack is cached on disk
(SPURGEN_CACHE_DIR or an explicit directory) keyed by a hash of the
dataset config, training spec, and seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import torch

from .. import imaging
from ..diffusion import SamplerConfig, sample
from ..errors import StageError
from ..evaluation import (
    AblationRun,
    PredictionLog,
    ablation_report,
    classify,
    consistency_filter,
    spurious_accuracy,
)
from ..features import (
    REDUCTION_MEAN_VECTOR,
    SIGN_NEGATIVE,
    SIGN_POSITIVE,
    FeatureBank,
    reference_feature_bank,
)
from ..training import (
    PriorSet,
    TrainingConfig,
    finetune,
    generate_prior_set,
)
from .data import CLASS_NOUNS, SynthDataset, SynthDatasetConfig, synth_dataset
from .models import (
    ToyBundle,
    ToyTrainSpec,
    build_toy_models,
    load_toy_bundle,
    load_toy_classifier,
    save_toy_bundle,
    save_toy_classifier,
    train_toy_classifier,
)

CACHE_ENV = "SPURGEN_CACHE_DIR"


@dataclass(frozen=True)
class ArmSpec:
    """One fine-tuning configuration in the similarity-weight sweep."""

    tag: str
    similarity_weight: float
    similarity_sign: str = SIGN_POSITIVE


DEFAULT_ARMS = (
    ArmSpec("baseline_prior_only", 0.0),
    ArmSpec("sim_1.0_positive", 1.0, SIGN_POSITIVE),
    ArmSpec("sim_0.8_positive", 0.8, SIGN_POSITIVE),
    ArmSpec("sim_0.8_negative", 0.8, SIGN_NEGATIVE),
)


@dataclass(frozen=True)
class ToyRunConfig:
    dataset: SynthDatasetConfig = SynthDatasetConfig()
    train_spec: ToyTrainSpec = ToyTrainSpec()
    bundle_seed: int = 0
    target_class: int = 0
    select_n: int = 6
    prior_multiplier: int = 8
    identifier: str = "sks"
    finetune_steps: int = 200
    finetune_lr: float = 1e-3
    finetune_seed: int = 0
    sample_count: int = 64
    sample_steps: int = 25
    sample_guidance: float = 3.0
    sample_seed: int = 1000
    prior_seed: int = 500
    arms: tuple[ArmSpec, ...] = DEFAULT_ARMS

    def prior_count(self) -> int:
        return self.prior_multiplier * self.select_n


PRESETS = {
    "acceptance": ToyRunConfig(),
    "ci": ToyRunConfig(
        finetune_steps=50,
        sample_count=16,
        arms=(
            ArmSpec("baseline_prior_only", 0.0),
            ArmSpec("sim_1.0_positive", 1.0, SIGN_POSITIVE),
            ArmSpec("sim_1.0_negative", 1.0, SIGN_NEGATIVE),
        ),
    ),
}


def _cache_key(config: SynthDatasetConfig, spec: ToyTrainSpec, seed: int) -> str:
    payload = json.dumps(
        {"dataset": vars(config), "spec": vars(spec), "seed": seed},
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def cache_directory(cache_dir: str | Path | None = None) -> Path | None:
    if cache_dir is not None:
        return Path(cache_dir)
    env = os.environ.get(CACHE_ENV)
    return Path(env) if env else None


def cached_toy_bundle(
    dataset: SynthDataset,
    seed: int = 0,
    spec: ToyTrainSpec = ToyTrainSpec(),
    cache_dir: str | Path | None = None,
) -> ToyBundle:
    """build_toy_models with a disk cache; a stale or unreadable cache
    entry is rebuilt rather than trusted."""
    directory = cache_directory(cache_dir)
    if directory is None:
        return build_toy_models(dataset, seed, spec)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"toy_bundle_{_cache_key(dataset.config, spec, seed)}.spg"
    if path.exists():
        try:
            return load_toy_bundle(path)
        except Exception:
            path.unlink()
    bundle = build_toy_models(dataset, seed, spec)
    save_toy_bundle(bundle, path)
    return bundle


def cached_second_classifier(
    dataset: SynthDataset,
    seed: int,
    spec: ToyTrainSpec = ToyTrainSpec(),
    cache_dir: str | Path | None = None,
):
    directory = cache_directory(cache_dir)
    if directory is None:
        return train_toy_classifier(dataset, seed, spec)[0]
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"toy_classifier_{_cache_key(dataset.config, spec, seed)}.spg"
    if path.exists():
        try:
            return load_toy_classifier(path)
        except Exception:
            path.unlink()
    classifier = train_toy_classifier(dataset, seed, spec)[0]
    save_toy_classifier(classifier, path)
    return classifier


@dataclass
class ToyRunReport:
    out_dir: Path
    selected_ids: list[str]
    reference_accuracy: dict[str, float]  # classifier_id -> pct on dataset images
    arm_accuracy: dict[str, dict[str, float]]  # arm tag -> classifier_id -> pct
    arm_means: dict[str, float]
    identity_max_rel_err: float
    report_md: Path
    report_csv: Path
    summary_json: Path


def _stage(name: str):
    class _StageGuard:
        def __enter__(self):
            return self

        def __exit__(self, exc_type, exc, tb):
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False

    return _StageGuard()


def _component_identity_error(records: list[dict], prior_weight: float, similarity_weight: float) -> float:
    worst = 0.0
    for record in records:
        expected = (
            record["denoising"]
            + prior_weight * record["prior"]
            + similarity_weight * record["similarity"]
        )
        scale = max(abs(record["total"]), abs(expected), 1e-12)
        worst = max(worst, abs(record["total"] - expected) / scale)
    return worst


def run_end_to_end(
    config: ToyRunConfig,
    out_dir: str | Path,
    cache_dir: str | Path | None = None,
) -> ToyRunReport:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    noun = CLASS_NOUNS[config.target_class]

    with _stage("dataset"):
        dataset = synth_dataset(config.dataset)
        dataset.save(out_dir / "dataset")

    with _stage("pretrain"):
        bundle = cached_toy_bundle(dataset, config.bundle_seed, config.train_spec, cache_dir)
        second = cached_second_classifier(
            dataset, config.bundle_seed + 1, config.train_spec, cache_dir
        )
        classifiers = [bundle.classifier, second]

    with _stage("filter"):
        pool = torch.stack([ex.image for ex in dataset.feature_only])
        pool_ids = [ex.labels.image_id for ex in dataset.feature_only]
        logs = []
        for classifier in classifiers:
            log = classify(pool, pool_ids, classifier, target_class=config.target_class)
            log.to_jsonl(out_dir / f"filter_log_{classifier.classifier_id}.jsonl")
            logs.append(log)
        selected_ids = consistency_filter(logs, config.target_class, config.select_n)
        reference_dir = out_dir / "references"
        reference_dir.mkdir(exist_ok=True)
        by_id = {i: ex.image for ex, i in zip(dataset.feature_only, pool_ids)}
        reference_images = torch.stack([by_id[i] for i in selected_ids])
        for image_id in selected_ids:
            imaging.save_image(by_id[image_id], reference_dir / f"{image_id}.png")
        (out_dir / "filter_selected.json").write_text(
            json.dumps({"selected": selected_ids, "target_class": config.target_class}, indent=2)
            + "\n"
        )
        reference_accuracy = {
            c.classifier_id: spurious_accuracy(log, config.target_class, pool_ids)
            for c, log in zip(classifiers, logs)
        }

    with _stage("feature_bank"):
        bank = reference_feature_bank(
            reference_images,
            bundle.classifier,
            config.target_class,
            reduction=REDUCTION_MEAN_VECTOR,
            image_ids=selected_ids,
        )
        bank.save(out_dir / "feature_bank.spg")

    with _stage("prior_set"):
        prior_prompt = f"a photo of a {noun}"
        prior = generate_prior_set(
            prior_prompt,
            config.prior_count(),
            bundle.models,
            bundle.schedule,
            SamplerConfig(
                steps=config.sample_steps,
                guidance_scale=config.sample_guidance,
                seed=config.prior_seed,
            ),
        )
        prior.save(out_dir / "prior")

    arm_accuracy: dict[str, dict[str, float]] = {}
    arm_means: dict[str, float] = {}
    arm_components: dict[str, dict[str, float]] = {}
    identity_worst = 0.0
    ablation_runs = [
        AblationRun(
            config_tag="reference_dataset",
            cells={
                (config.target_class, c.classifier_id): reference_accuracy[c.classifier_id]
                for c in classifiers
            },
        )
    ]
    instance_prompt = f"a photo of a {config.identifier} {noun}"
    for arm in config.arms:
        with _stage(f"arm:{arm.tag}"):
            arm_dir = out_dir / "arms" / arm.tag
            models = copy.deepcopy(bundle.models)
            train_config = TrainingConfig(
                steps=config.finetune_steps,
                learning_rate=config.finetune_lr,
                similarity_weight=arm.similarity_weight,
                similarity_sign=arm.similarity_sign,
                identifier=config.identifier,
                class_noun=noun,
                class_id=config.target_class,
                seed=config.finetune_seed,
            )
            result = finetune(
                train_config,
                models,
                prior,
                bundle.schedule,
                arm_dir,
                bank=bank,
                extractor=bundle.classifier,
                reference_images=reference_images,
            )
            identity_worst = max(
                identity_worst,
                _component_identity_error(
                    result.records, train_config.prior_weight, arm.similarity_weight
                ),
            )
            arm_components[arm.tag] = {
                k: v for k, v in result.records[-1].items() if k != "step"
            }

            samples_dir = arm_dir / "samples"
            samples_dir.mkdir(exist_ok=True)
            images = []
            sample_ids = []
            for i in range(config.sample_count):
                image = sample(
                    instance_prompt,
                    models,
                    bundle.schedule,
                    SamplerConfig(
                        steps=config.sample_steps,
                        guidance_scale=config.sample_guidance,
                        seed=config.sample_seed + i,
                    ),
                )
                sample_id = f"{arm.tag}_{i:04d}"
                imaging.save_image(image, samples_dir / f"{sample_id}.png")
                images.append(image)
                sample_ids.append(sample_id)
            batch = torch.stack(images)
            imaging.contact_sheet(batch, arm_dir / "contact_sheet.png")

            cells = {}
            per_classifier = {}
            for classifier in classifiers:
                log = classify(batch, sample_ids, classifier, target_class=config.target_class)
                log.to_jsonl(arm_dir / f"predictions_{classifier.classifier_id}.jsonl")
                pct = spurious_accuracy(log, config.target_class, sample_ids)
                per_classifier[classifier.classifier_id] = pct
                cells[(config.target_class, classifier.classifier_id)] = pct
            arm_accuracy[arm.tag] = per_classifier
            ablation_runs.append(AblationRun(config_tag=arm.tag, cells=cells))

    with _stage("report"):
        table = ablation_report(ablation_runs)
        arm_means.update({tag: mean for tag, mean in table.rows if tag != "reference_dataset"})
        report_csv = out_dir / "report.csv"
        report_csv.write_text(table.to_csv())
        report_md = out_dir / "report.md"
        report_md.write_text(
            _render_report(config, bundle, reference_accuracy, arm_accuracy, arm_components, table)
        )
        summary = {
            "dataset": vars(config.dataset),
            "bundle_metrics": bundle.metrics,
            "selected_references": selected_ids,
            "reference_accuracy": reference_accuracy,
            "arms": {
                arm.tag: {
                    "similarity_weight": arm.similarity_weight,
                    "similarity_sign": arm.similarity_sign,
                    "final_losses": arm_components[arm.tag],
                    "spurious_accuracy": arm_accuracy[arm.tag],
                    "mean_spurious_accuracy": arm_means[arm.tag],
                }
                for arm in config.arms
            },
            "component_identity_max_rel_err": identity_worst,
        }
        summary_json = out_dir / "run_summary.json"
        summary_json.write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")

    return ToyRunReport(
        out_dir=out_dir,
        selected_ids=selected_ids,
        reference_accuracy=reference_accuracy,
        arm_accuracy=arm_accuracy,
        arm_means=arm_means,
        identity_max_rel_err=identity_worst,
        report_md=report_md,
        report_csv=report_csv,
        summary_json=summary_json,
    )


def _render_report(
    config: ToyRunConfig,
    bundle: ToyBundle,
    reference_accuracy: dict[str, float],
    arm_accuracy: dict[str, dict[str, float]],
    arm_components: dict[str, dict[str, float]],
    table,
) -> str:
    lines = ["# Synthetic spurious-feature run", ""]
    lines.append(
        f"Target class {config.target_class} ({CLASS_NOUNS[config.target_class]}), "
        f"{config.select_n} reference images, {config.prior_count()} prior images, "
        f"{config.finetune_steps} fine-tune steps, {config.sample_count} samples per arm."
    )
    lines.append("")
    lines.append("## Pretrained stack")
    for key, value in sorted(bundle.metrics.items()):
        lines.append(f"- {key}: {value:.4f}" if isinstance(value, float) else f"- {key}: {value}")
    lines.append("")
    lines.append("## Spurious accuracy on dataset feature-only images")
    lines.append("")
    lines.append("| Classifier | Accuracy (%) |")
    lines.append("| --- | --- |")
    for classifier_id, pct in sorted(reference_accuracy.items()):
        lines.append(f"| {classifier_id} | {pct:.2f} |")
    lines.append("")
    lines.append("## Fine-tuning arms")
    lines.append("")
    for tag, components in arm_components.items():
        lines.append(f"### {tag}")
        lines.append("")
        lines.append(
            "final step losses: "
            + ", ".join(f"{k} {v:.6f}" for k, v in components.items() if k != "lr")
        )
        lines.append("")
        lines.append("| Classifier | Spurious accuracy (%) |")
        lines.append("| --- | --- |")
        for classifier_id, pct in sorted(arm_accuracy[tag].items()):
            lines.append(f"| {classifier_id} | {pct:.2f} |")
        lines.append("")
    lines.append("## Similarity-weight sweep")
    lines.append("")
    lines.append(table.to_markdown())
    return "\n".join(lines)
