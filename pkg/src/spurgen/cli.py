"""Operator surface: filter, finetune, sample, evaluate, ablate, toy,
report, replay.

Every command writes its outputs plus a RunManifest recording the
resolved configuration and input hashes; `replay --manifest` re-runs any
command from that snapshot. Exit codes: 0 success, 2 usage or invalid
configuration, 3 missing data or qualifying-image shortfall, 4 training
divergence. Failures emit one machine-readable JSON record on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import torch

from . import __version__, imaging
from .diffusion import SamplerConfig, sample as sample_images
from .errors import (
    ConfigurationError,
    ReplayError,
    ShortfallError,
    SpurgenError,
    StageError,
    TrainingDivergedError,
)
from .evaluation import (
    AblationRun,
    SpuriousAccuracyTable,
    ablation_report,
    classify,
    consistency_filter,
    ingest_ratings,
    rating_distribution,
    spurious_accuracy,
)
from .features import FeatureBank
from .manifest import RunManifest, build_manifest
from .training import PriorSet, TrainingConfig, finetune, load_checkpoint
from .toy.models import load_toy_bundle, load_toy_classifier
from .toy.pipeline import PRESETS, run_end_to_end

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4


def _abspath(value: str | None) -> str | None:
    return None if value is None else os.path.abspath(value)


def _load_classifiers(paths: list[str]):
    classifiers = []
    for path in paths:
        if not Path(path).exists():
            raise FileNotFoundError(f"classifier checkpoint not found: {path}")
        classifiers.append(load_toy_classifier(path))
    return classifiers


def handle_filter(config: dict) -> dict:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    classifiers = _load_classifiers(config["classifiers"])
    images, ids = imaging.load_image_dir(config["images_dir"])
    logs = []
    for classifier in classifiers:
        log = classify(images, ids, classifier, target_class=config["class_id"])
        log.to_jsonl(out / f"log_{classifier.classifier_id}.jsonl")
        logs.append(log)
    selected = consistency_filter(logs, config["class_id"], config["select_n"])
    references = out / "references"
    references.mkdir(exist_ok=True)
    by_id = dict(zip(ids, images))
    for image_id in selected:
        imaging.save_image(by_id[image_id], references / f"{image_id}.png")
    (out / "selected.json").write_text(
        json.dumps({"selected": selected, "target_class": config["class_id"]}, indent=2) + "\n"
    )
    return {"images_dir": config["images_dir"], **{p: p for p in config["classifiers"]}}


def handle_finetune(config: dict) -> dict:
    out = Path(config["out"])
    if config.get("config_path"):
        train_config = TrainingConfig.from_json(config["config_path"])
    else:
        train_config = TrainingConfig()
    overrides = {
        key: config[key]
        for key in (
            "steps",
            "learning_rate",
            "similarity_weight",
            "similarity_sign",
            "seed",
            "reference_image_dir",
        )
        if config.get(key) is not None
    }
    if overrides:
        train_config = dataclasses.replace(train_config, **overrides)
    config["training_config"] = vars(train_config)
    bundle = load_toy_bundle(config["bundle"])
    prior = PriorSet.load(config["prior_dir"])
    bank = FeatureBank.load(config["bank"]) if config.get("bank") else None
    finetune(
        train_config,
        bundle.models,
        prior,
        bundle.schedule,
        out,
        bank=bank,
        extractor=bundle.classifier,
    )
    inputs = {"bundle": config["bundle"], "prior_dir": config["prior_dir"]}
    if config.get("bank"):
        inputs["bank"] = config["bank"]
    if config.get("config_path"):
        inputs["config_path"] = config["config_path"]
    if train_config.reference_image_dir:
        inputs["references"] = train_config.reference_image_dir
    return inputs


def handle_sample(config: dict) -> dict:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    if config["n"] <= 0:
        raise ConfigurationError(f"--n must be positive, got {config['n']}")
    bundle = load_toy_bundle(config["bundle"])
    if config.get("checkpoint"):
        load_checkpoint(bundle.models, config["checkpoint"])
    images = []
    for i in range(config["n"]):
        image = sample_images(
            config["prompt"],
            bundle.models,
            bundle.schedule,
            SamplerConfig(
                steps=config["steps"],
                guidance_scale=config["guidance"],
                seed=config["seed"] + i,
            ),
        )
        imaging.save_image(image, out / f"sample_{i:04d}.png")
        images.append(image)
    imaging.contact_sheet(torch.stack(images), out / "contact_sheet.png")
    inputs = {"bundle": config["bundle"]}
    if config.get("checkpoint"):
        inputs["checkpoint"] = config["checkpoint"]
    return inputs


def handle_evaluate(config: dict) -> dict:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    classifiers = _load_classifiers(config["classifiers"])
    images, ids = imaging.load_image_dir(config["images"])
    class_label = str(config["class_id"])
    source = config["source"]
    cells = {}
    results = {}
    for classifier in classifiers:
        log = classify(images, ids, classifier, target_class=config["class_id"])
        log.to_jsonl(out / f"log_{classifier.classifier_id}.jsonl")
        pct = spurious_accuracy(log, config["class_id"], ids)
        cells[(classifier.classifier_id, class_label, source)] = pct
        results[classifier.classifier_id] = pct
    table = SpuriousAccuracyTable(
        classifiers=[c.classifier_id for c in classifiers],
        columns=[(class_label, source)],
        cells=cells,
    )
    (out / "accuracy.md").write_text(table.to_markdown())
    (out / "accuracy.csv").write_text(table.to_csv())
    (out / "accuracy.json").write_text(json.dumps(results, indent=2, sort_keys=True) + "\n")
    return {"images": config["images"], **{p: p for p in config["classifiers"]}}


def handle_ablate(config: dict) -> dict:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    rows = json.loads(Path(config["grids"]).read_text())
    runs = []
    for row in rows:
        cells = {
            (cell["class_id"], cell["classifier_id"]): cell["accuracy"]
            for cell in row["cells"]
        }
        runs.append(AblationRun(config_tag=row["config_tag"], cells=cells))
    table = ablation_report(runs)
    (out / "ablation.md").write_text(table.to_markdown())
    (out / "ablation.csv").write_text(table.to_csv())
    return {"grids": config["grids"]}


def handle_toy(config: dict) -> dict:
    preset = config["preset"]
    if preset not in PRESETS:
        raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    run_end_to_end(PRESETS[preset], config["out"], cache_dir=config.get("cache_dir"))
    return {}


def handle_report(config: dict) -> dict:
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    records = ingest_ratings(config["ratings"])
    source_of = json.loads(Path(config["sources"]).read_text())
    distribution = rating_distribution(records, source_of)
    lines = ["# Rating distribution", ""]
    lines.append("| Source | " + " | ".join(f"score {s} (%)" for s in range(1, 6)) + " |")
    lines.append("| --- |" + " --- |" * 5)
    csv_lines = ["source,score,percent"]
    for source in sorted(distribution):
        histogram = distribution[source]
        lines.append(
            f"| {source} | " + " | ".join(f"{histogram[s]:.2f}" for s in range(1, 6)) + " |"
        )
        for s in range(1, 6):
            csv_lines.append(f"{source},{s},{histogram[s]:.2f}")
    (out / "ratings.md").write_text("\n".join(lines) + "\n")
    (out / "ratings.csv").write_text("\n".join(csv_lines) + "\n")
    return {"ratings": config["ratings"], "sources": config["sources"]}


HANDLERS = {
    "filter": handle_filter,
    "finetune": handle_finetune,
    "sample": handle_sample,
    "evaluate": handle_evaluate,
    "ablate": handle_ablate,
    "toy": handle_toy,
    "report": handle_report,
}


def run_command(command: str, config: dict) -> None:
    handler = HANDLERS[command]
    input_paths = handler(config)
    manifest = build_manifest(
        command=command,
        effective_config=config,
        input_paths=input_paths,
        out_dir=config["out"],
        package_version=__version__,
    )
    manifest.write(config["out"])


def handle_replay(manifest_path: str, out_override: str | None) -> None:
    manifest = RunManifest.read(manifest_path)
    if manifest.command not in HANDLERS:
        raise ConfigurationError(f"manifest names unknown command {manifest.command!r}")
    stale = manifest.verify_inputs()
    if stale:
        raise ReplayError(f"recorded inputs changed or vanished: {stale}")
    config = dict(manifest.effective_config)
    if out_override:
        config["out"] = os.path.abspath(out_override)
    run_command(manifest.command, config)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spurgen",
        description="Fine-tune a diffusion model toward a class's spurious feature and measure it.",
    )
    parser.add_argument("--version", action="version", version=f"spurgen {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="pick images every classifier calls the target class")
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--images-dir", required=True)
    p.add_argument("--classifiers", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--select-n", dest="select_n", type=int, default=6)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="fine-tune on reference images with the combined loss")
    p.add_argument("--config", dest="config_path")
    p.add_argument("--bundle", required=True)
    p.add_argument("--prior-dir", dest="prior_dir", required=True)
    p.add_argument("--bank")
    p.add_argument("--references", dest="reference_image_dir")
    p.add_argument("--steps", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--similarity-weight", dest="similarity_weight", type=float)
    p.add_argument("--similarity-sign", dest="similarity_sign", choices=("positive", "negative"))
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="sample images from a (fine-tuned) toy checkpoint")
    p.add_argument("--bundle", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--prompt", required=True)
    p.add_argument("--n", type=int, default=75)
    p.add_argument("--steps", type=int, default=25)
    p.add_argument("--guidance", type=float, default=7.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="spurious accuracy of an image directory")
    p.add_argument("--images", required=True)
    p.add_argument("--classifiers", nargs="+", required=True, metavar="CKPT")
    p.add_argument("--class", dest="class_id", type=int, required=True)
    p.add_argument("--source", default="generated")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="aggregate per-config accuracy grids into one table")
    p.add_argument("--grids", required=True, help="JSON list of {config_tag, cells}")
    p.add_argument("--out", required=True)

    p = sub.add_parser("toy", help="run the synthetic end-to-end experiment")
    p.add_argument("--preset", choices=sorted(PRESETS), default="ci")
    p.add_argument("--out", required=True)
    p.add_argument("--cache-dir", dest="cache_dir")

    p = sub.add_parser("report", help="summarize a subjective ratings file")
    p.add_argument("--ratings", required=True)
    p.add_argument("--sources", required=True, help="JSON mapping image_id to source label")
    p.add_argument("--out", required=True)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out")

    return parser


_PATH_KEYS = (
    "images_dir",
    "images",
    "out",
    "config_path",
    "bundle",
    "prior_dir",
    "bank",
    "reference_image_dir",
    "checkpoint",
    "grids",
    "cache_dir",
    "ratings",
    "sources",
    "manifest",
)


def _exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return _exit_code_for(exc.cause)
    if isinstance(exc, TrainingDivergedError):
        return EXIT_DIVERGED
    if isinstance(exc, ConfigurationError):
        return EXIT_USAGE
    if isinstance(exc, (ShortfallError, ReplayError, FileNotFoundError)):
        return EXIT_DATA
    return 1


def entrypoint(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    config = vars(args)
    command = config.pop("command")
    for key in _PATH_KEYS:
        if key in config:
            config[key] = _abspath(config[key])
    if "classifiers" in config:
        config["classifiers"] = [os.path.abspath(p) for p in config["classifiers"]]
    try:
        if command == "replay":
            handle_replay(config["manifest"], config.get("out"))
        else:
            run_command(command, config)
    except Exception as exc:  # error record on stderr, coded exit
        code = _exit_code_for(exc)
        stage = exc.stage if isinstance(exc, StageError) else None
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "stage": stage,
            "exit_code": code,
        }
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(entrypoint())
