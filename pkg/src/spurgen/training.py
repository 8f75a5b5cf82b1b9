"""Fine-tuning: identifier prompts, frozen prior sets, and the combined
objective (denoising + prior preservation + feature similarity).

The feature-similarity term cannot act on fixed images (their features are
constants with zero gradient), so it is evaluated on the decoded one-step
denoised estimates of the prior branch. Reference features stay frozen in
the bank; gradients reach the noise predictor through predict -> denoised
estimate -> decode -> extractor.

RNG contract per loss evaluation: reference items draw first (timestep,
then noise, per item), prior items after, so a zero-weight similarity run
consumes the identical stream as a plain prior-preservation run.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import container, imaging
from .diffusion import (
    DiffusionModels,
    NoiseSchedule,
    SamplerConfig,
    denoised_estimate,
    denoising_loss,
    draw_noise,
    draw_timestep,
    forward_noise,
    sample,
)
from .errors import ConfigurationError, DegenerateFeatureError, TrainingDivergedError
from .features import (
    SIGN_POSITIVE,
    SIGNS,
    FeatureBank,
    FeatureExtractorAdapter,
    class_wise_feature,
    feature_similarity_loss,
    penultimate_features,
)

DEFAULT_TEMPLATE = "a photo of a {identifier} {class_noun}"
PRIOR_SET_MULTIPLIER = 8  # prior images per reference image, by default


@dataclass(frozen=True)
class PromptTemplate:
    """Prompt with {identifier} and {class_noun} slots.

    The identifier is a short unique token (three characters in practice)
    marking the personalized subject; eliding it yields the generic class
    prompt used for the prior set.
    """

    template: str = DEFAULT_TEMPLATE
    identifier: str = "sks"
    class_noun: str = "flower"

    def __post_init__(self):
        if not self.identifier:
            raise ConfigurationError("identifier must be nonempty")
        for placeholder in ("{identifier}", "{class_noun}"):
            if placeholder not in self.template:
                raise ConfigurationError(f"template is missing the {placeholder} placeholder")
        if not self.class_noun:
            raise ConfigurationError("class_noun must be nonempty")

    def render(self, with_identifier: bool) -> str:
        text = self.template.format(
            identifier=self.identifier if with_identifier else "",
            class_noun=self.class_noun,
        )
        # eliding the identifier leaves a double space behind
        return " ".join(text.split())


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the prior-preservation and feature-similarity terms."""

    prior_weight: float = 1.0
    similarity_weight: float = 1.0
    similarity_sign: str = SIGN_POSITIVE

    def __post_init__(self):
        for name in ("prior_weight", "similarity_weight"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigurationError(f"{name} must be finite and nonnegative, got {value}")
        if self.similarity_sign not in SIGNS:
            raise ConfigurationError(
                f"similarity_sign must be one of {SIGNS}, got {self.similarity_sign!r}"
            )


class PriorSet:
    """Images generated from the identifier-free class prompt, frozen
    before fine-tuning starts and reused verbatim every step.

    Images are quantized to 8-bit levels on construction so an instance
    reloaded from disk is numerically identical to the one in memory.
    """

    def __init__(self, images: torch.Tensor, prompts: Sequence[str], provenance: dict):
        if images.ndim != 4 or images.shape[0] == 0:
            raise ValueError("prior set needs a nonempty (N, 3, H, W) image batch")
        if images.shape[0] != len(prompts):
            raise ValueError(f"{images.shape[0]} images but {len(prompts)} prompts")
        self.images = (images.clamp(0.0, 1.0) * 255.0).round().div(255.0)
        self.prompts = list(prompts)
        self.provenance = dict(provenance)

    def __len__(self) -> int:
        return self.images.shape[0]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for i in range(len(self)):
            imaging.save_image(self.images[i], directory / f"prior_{i:04d}.png")
        payload = {"prompts": self.prompts, "provenance": self.provenance}
        container.atomic_write_bytes(
            directory / "provenance.json",
            (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode(),
        )

    @classmethod
    def load(cls, directory: str | Path) -> "PriorSet":
        directory = Path(directory)
        payload = json.loads((directory / "provenance.json").read_text())
        images, ids = imaging.load_image_dir(directory, pattern="prior_*.png")
        if len(ids) != len(payload["prompts"]):
            raise ValueError(
                f"{len(ids)} prior images on disk but {len(payload['prompts'])} recorded prompts"
            )
        return cls(images, payload["prompts"], payload["provenance"])


def generate_prior_set(
    class_prompt: str,
    n: int,
    models: DiffusionModels,
    schedule: NoiseSchedule,
    sampler: SamplerConfig,
) -> PriorSet:
    """Sample n images for the identifier-free prompt, seeds base..base+n-1."""
    if n <= 0:
        raise ConfigurationError(f"prior set size must be positive, got {n}")
    images = []
    seeds = []
    for i in range(n):
        config = replace(sampler, seed=sampler.seed + i)
        seeds.append(config.seed)
        images.append(sample(class_prompt, models, schedule, config))
    provenance = {
        "prompt": class_prompt,
        "seeds": seeds,
        "sampler": {
            "steps": sampler.steps,
            "guidance_scale": sampler.guidance_scale,
            "scheduler_kind": sampler.scheduler_kind,
        },
    }
    return PriorSet(torch.stack(images), [class_prompt] * n, provenance)


@dataclass(frozen=True)
class TrainingConfig:
    """Fine-tuning hyperparameters. Defaults are the reference recipe:
    800 steps, lr 2e-6, decay 0.01, betas (0.9, 0.999), eps 1e-8, batch 1,
    unit weights on both auxiliary terms.
    """

    steps: int = 800
    learning_rate: float = 2e-6
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 1
    prior_weight: float = 1.0
    similarity_weight: float = 1.0
    similarity_sign: str = SIGN_POSITIVE
    prompt_template: str = DEFAULT_TEMPLATE
    identifier: str = "sks"
    class_noun: str = "flower"
    reference_image_dir: str = ""
    class_id: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigurationError(f"steps must be positive, got {self.steps}")
        if not self.learning_rate > 0:
            raise ConfigurationError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.class_id < 0:
            raise ConfigurationError(f"class_id must be nonnegative, got {self.class_id}")
        self.loss_weights()  # validates weight fields
        self.prompt()  # validates prompt fields

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            prior_weight=self.prior_weight,
            similarity_weight=self.similarity_weight,
            similarity_sign=self.similarity_sign,
        )

    def prompt(self) -> PromptTemplate:
        return PromptTemplate(
            template=self.prompt_template,
            identifier=self.identifier,
            class_noun=self.class_noun,
        )

    def to_json(self, path: str | Path) -> None:
        container.atomic_write_bytes(
            Path(path), (json.dumps(vars(self), indent=2, sort_keys=True) + "\n").encode()
        )

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainingConfig":
        row = json.loads(Path(path).read_text())
        unknown = set(row) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**row)


@dataclass
class LossBreakdown:
    """One evaluation of the combined objective, components separated."""

    denoising: torch.Tensor
    prior: torch.Tensor
    similarity: torch.Tensor
    total: torch.Tensor

    def detached(self) -> dict[str, float]:
        return {
            "denoising": float(self.denoising.detach()),
            "prior": float(self.prior.detach()),
            "similarity": float(self.similarity.detach()),
            "total": float(self.total.detach()),
        }


def _prior_branch(
    prior_images: torch.Tensor,
    prior_prompts: Sequence[str],
    models: DiffusionModels,
    schedule: NoiseSchedule,
    rng: torch.Generator,
) -> tuple[torch.Tensor, list[tuple[torch.Tensor, int]]]:
    """Prior-set denoising term, keeping (noised latent - prediction)
    intermediates so the denoised estimates can be rebuilt.

    Draw order and arithmetic match `denoising_loss` exactly.
    """
    terms = []
    intermediates = []
    for i in range(prior_images.shape[0]):
        t = draw_timestep(rng, schedule.timesteps)
        eps = draw_noise(rng, models.codec.latent_shape, prior_images.dtype)
        z0 = models.codec.encode(prior_images[i : i + 1])[0]
        z_t = forward_noise(z0, t, eps, schedule)
        cond = models.text_encoder.encode(prior_prompts[i])
        eps_pred = models.predictor.predict(z_t.unsqueeze(0), t, cond)[0]
        if eps_pred.shape != z_t.shape:
            raise ValueError(
                f"predictor output shape {tuple(eps_pred.shape)} != latent shape {tuple(z_t.shape)}"
            )
        terms.append(((eps - eps_pred) ** 2).mean())
        intermediates.append((z_t, t, eps_pred))
    return torch.stack(terms).mean(), intermediates


def _similarity_on_estimates(
    intermediates: Sequence[tuple[torch.Tensor, int, torch.Tensor]],
    models: DiffusionModels,
    schedule: NoiseSchedule,
    bank: FeatureBank,
    extractor: FeatureExtractorAdapter,
    sign: str,
) -> torch.Tensor:
    """Similarity between the frozen bank and features of decoded one-step
    denoised estimates of the prior branch. Decoded values are not clamped
    here: clamping would cut the gradient on saturated pixels.
    """
    estimates = []
    for z_t, t, eps_pred in intermediates:
        x0 = denoised_estimate(z_t, eps_pred, schedule.alpha_bar(t))
        estimates.append(x0)
    decoded = models.codec.decode(torch.stack(estimates))
    phi = penultimate_features(decoded, extractor)
    weights = extractor.class_weights(bank.class_id)
    generated = [
        class_wise_feature(phi[i], weights) for i in range(decoded.shape[0])
    ]
    return feature_similarity_loss(bank, generated, sign)


def combined_loss(
    reference_images: torch.Tensor,
    reference_prompts: Sequence[str],
    prior_images: torch.Tensor,
    prior_prompts: Sequence[str],
    models: DiffusionModels,
    schedule: NoiseSchedule,
    weights: LossWeights,
    rng: torch.Generator,
    *,
    bank: FeatureBank | None = None,
    extractor: FeatureExtractorAdapter | None = None,
) -> LossBreakdown:
    """denoising + prior_weight * prior + similarity_weight * similarity.

    With similarity_weight 0 the similarity term is detached (logged when a
    bank and extractor are at hand, else 0), and the total is bitwise equal
    to the two-term objective: the weighted add contributes exact zero.
    """
    if prior_images.ndim != 4 or prior_images.shape[0] == 0:
        raise ValueError("prior batch must be a nonempty (B, 3, H, W) tensor")
    if len(prior_prompts) != prior_images.shape[0]:
        raise ValueError(f"{prior_images.shape[0]} prior images but {len(prior_prompts)} prompts")
    use_similarity = weights.similarity_weight != 0.0
    if use_similarity:
        if bank is None or extractor is None:
            raise ConfigurationError(
                "similarity_weight > 0 requires a reference feature bank and an extractor"
            )
        if not models.codec.differentiable_decode:
            raise ConfigurationError(
                "similarity_weight > 0 requires a codec with a differentiable decode"
            )
        if not extractor.differentiable:
            raise ConfigurationError(
                "similarity_weight > 0 requires a differentiable feature extractor"
            )

    denoising = denoising_loss(reference_images, reference_prompts, models, schedule, rng)
    prior, intermediates = _prior_branch(prior_images, prior_prompts, models, schedule, rng)

    if use_similarity:
        similarity = _similarity_on_estimates(
            intermediates, models, schedule, bank, extractor, weights.similarity_sign
        )
    elif bank is not None and extractor is not None:
        # diagnostics only: a zero-weight run must behave exactly like one
        # without a bank, so a degenerate feature here logs 0 instead of raising
        with torch.no_grad():
            try:
                similarity = _similarity_on_estimates(
                    intermediates, models, schedule, bank, extractor, weights.similarity_sign
                )
            except DegenerateFeatureError:
                similarity = torch.zeros((), dtype=denoising.dtype)
    else:
        similarity = torch.zeros((), dtype=denoising.dtype)

    total = (
        denoising
        + weights.prior_weight * prior
        + weights.similarity_weight * similarity
    )
    return LossBreakdown(denoising=denoising, prior=prior, similarity=similarity, total=total)


def trainable_parameters(models: DiffusionModels) -> list[torch.nn.Parameter]:
    params = [p for p in models.predictor.parameters() if p.requires_grad]
    params += [p for p in models.text_encoder.parameters() if p.requires_grad]
    if not params:
        raise ConfigurationError("no trainable parameters in predictor or text encoder")
    return params


def _module_state_arrays(module, prefix: str) -> dict[str, np.ndarray]:
    if not hasattr(module, "state_dict"):
        raise ConfigurationError(f"{prefix} adapter does not expose state_dict for checkpointing")
    return {
        f"{prefix}.{name}": tensor.detach().cpu().numpy()
        for name, tensor in module.state_dict().items()
    }


def save_checkpoint(models: DiffusionModels, path: str | Path, metadata: dict) -> None:
    arrays = _module_state_arrays(models.predictor, "predictor")
    arrays.update(_module_state_arrays(models.text_encoder, "text_encoder"))
    container.save_arrays(path, arrays, metadata)


def load_checkpoint(models: DiffusionModels, path: str | Path) -> dict:
    """Restore predictor and text-encoder state in place; returns metadata."""
    arrays, metadata = container.load_arrays(path)
    for prefix, module in (("predictor", models.predictor), ("text_encoder", models.text_encoder)):
        state = {
            name[len(prefix) + 1 :]: torch.from_numpy(value.copy())
            for name, value in arrays.items()
            if name.startswith(prefix + ".")
        }
        current = module.state_dict()
        if set(state) != set(current):
            raise ConfigurationError(
                f"checkpoint {prefix} entries do not match the module "
                f"(missing {sorted(set(current) - set(state))[:3]}, "
                f"unexpected {sorted(set(state) - set(current))[:3]})"
            )
        for name, tensor in state.items():
            if tuple(tensor.shape) != tuple(current[name].shape):
                raise ConfigurationError(
                    f"checkpoint {prefix}.{name} has shape {tuple(tensor.shape)}, "
                    f"module expects {tuple(current[name].shape)}"
                )
        module.load_state_dict(state)
    return metadata


@dataclass
class FinetuneResult:
    checkpoint_path: Path
    log_path: Path
    records: list[dict] = field(default_factory=list)


def finetune(
    config: TrainingConfig,
    models: DiffusionModels,
    prior: PriorSet,
    schedule: NoiseSchedule,
    out_dir: str | Path,
    *,
    bank: FeatureBank | None = None,
    extractor: FeatureExtractorAdapter | None = None,
    reference_images: torch.Tensor | None = None,
) -> FinetuneResult:
    """Optimize predictor and text encoder on the combined objective.

    Per step, batch_size reference images and batch_size prior images are
    picked by cycling deterministically through each set (index
    (step * batch_size + j) mod set size). Every step appends one record
    {step, denoising, prior, similarity, total, lr} to the training log.
    A non-finite total aborts with a diagnostic dump next to the log.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if reference_images is None:
        if not config.reference_image_dir:
            raise ConfigurationError("no reference images given and reference_image_dir unset")
        reference_images, _ = imaging.load_image_dir(config.reference_image_dir)
    if reference_images.shape[0] == 0:
        raise ConfigurationError("reference image set is empty")

    weights = config.loss_weights()
    template = config.prompt()
    instance_prompt = template.render(with_identifier=True)
    params = trainable_parameters(models)
    optimizer = torch.optim.AdamW(
        params,
        lr=config.learning_rate,
        betas=(config.beta1, config.beta2),
        eps=config.adam_epsilon,
        weight_decay=config.weight_decay,
    )
    rng = torch.Generator().manual_seed(config.seed)

    n_ref = reference_images.shape[0]
    n_prior = len(prior)
    log_path = out_dir / "training_log.jsonl"
    records: list[dict] = []
    with open(log_path, "w") as log_file:
        for step in range(config.steps):
            ref_idx = [(step * config.batch_size + j) % n_ref for j in range(config.batch_size)]
            prior_idx = [
                (step * config.batch_size + j) % n_prior for j in range(config.batch_size)
            ]
            breakdown = combined_loss(
                reference_images[ref_idx],
                [instance_prompt] * config.batch_size,
                prior.images[prior_idx],
                [prior.prompts[i] for i in prior_idx],
                models,
                schedule,
                weights,
                rng,
                bank=bank,
                extractor=extractor,
            )
            components = breakdown.detached()
            if not all(math.isfinite(v) for v in components.values()):
                dump_path = out_dir / "divergence.json"
                dump = {"step": step, "components": components, "config": vars(config)}
                dump_path.write_text(json.dumps(dump, indent=2, sort_keys=True) + "\n")
                raise TrainingDivergedError(
                    f"non-finite loss at step {step} (diagnostics in {dump_path})", step=step
                )
            optimizer.zero_grad(set_to_none=True)
            breakdown.total.backward()
            optimizer.step()
            record = {"step": step, **components, "lr": config.learning_rate}
            records.append(record)
            log_file.write(json.dumps(record, sort_keys=True) + "\n")

    checkpoint_path = out_dir / "checkpoint.spg"
    save_checkpoint(
        models,
        checkpoint_path,
        {
            "steps": config.steps,
            "seed": config.seed,
            "class_id": config.class_id,
            "learning_rate": config.learning_rate,
            "similarity_weight": config.similarity_weight,
            "similarity_sign": config.similarity_sign,
        },
    )
    config.to_json(out_dir / "training_config.json")
    return FinetuneResult(checkpoint_path=checkpoint_path, log_path=log_path, records=records)
