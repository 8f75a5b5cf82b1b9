"""Desk-scale model stack for the synthetic world: an invertible pixel
codec, a tiny conditional noise predictor, a bag-of-tokens text encoder,
and small classifiers that double as feature extractors.

Everything runs on CPU in seconds to minutes; the point is that every
loss, gradient, and sampling path of the full toolkit is exercised end to
end on models small enough to check numerically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from ..diffusion import DiffusionModels, NoiseSchedule, diffuse
from ..errors import ConfigurationError, SpurgenError
from ..features import ClassWeights
from .data import CLASS_NOUNS, SynthDataset


class IdentityCodec:
    """Latent space == pixel space. Used where the codec should vanish."""

    def __init__(self, image_size: int = 16):
        self.image_shape = (3, image_size, image_size)
        self.latent_shape = (3, image_size, image_size)
        self.differentiable_decode = True

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return images

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return latents


class BlockCodec:
    """Exactly invertible latent transform: center to [-1, 1], then fold
    block x block pixel neighborhoods into channels. Stands in for a
    learned autoencoder while keeping encode/decode lossless.
    """

    def __init__(self, image_size: int = 16, block: int = 2):
        if image_size % block != 0:
            raise ConfigurationError(f"image size {image_size} not divisible by block {block}")
        self.block = block
        self.image_shape = (3, image_size, image_size)
        self.latent_shape = (3 * block * block, image_size // block, image_size // block)
        self.differentiable_decode = True

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        return F.pixel_unshuffle(images * 2.0 - 1.0, self.block)

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        return (F.pixel_shuffle(latents, self.block) + 1.0) / 2.0


class ToyTextEncoder(nn.Module):
    """Bag-of-tokens embedding lookup.

    Lowercased whitespace tokenization over a fixed vocabulary; tokens
    outside it map to <unk>, the empty prompt to the single <null> token.
    The embedding table is the trainable surface.
    """

    def __init__(self, embed_dim: int = 16, extra_tokens: Sequence[str] = ()):
        super().__init__()
        vocab = ["<null>", "<unk>", "a", "photo", "of", "sks"]
        vocab += [noun for noun in CLASS_NOUNS if noun not in vocab]
        vocab += [tok for tok in extra_tokens if tok not in vocab]
        self.vocab = tuple(vocab)
        self.index = {token: i for i, token in enumerate(self.vocab)}
        self.embedding = nn.Embedding(len(self.vocab), embed_dim)
        self.embed_dim = embed_dim

    def tokenize(self, prompt: str) -> list[int]:
        words = prompt.lower().split()
        if not words:
            return [self.index["<null>"]]
        return [self.index.get(word, self.index["<unk>"]) for word in words]

    def encode(self, prompt: str) -> torch.Tensor:
        ids = torch.tensor(self.tokenize(prompt), dtype=torch.long)
        return self.embedding(ids)


def sinusoidal_time_embedding(
    t: int | torch.Tensor, dim: int, dtype: torch.dtype
) -> torch.Tensor:
    """Fixed sin/cos features of the (1-based) timestep.

    Accepts a scalar timestep (returns (dim,)) or a 1-D batch of timesteps
    (returns (B, dim)).
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"time embedding dim must be even, got {dim}")
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half - 1, 1)
    )
    if isinstance(t, torch.Tensor) and t.ndim == 1:
        angles = t.to(torch.float64)[:, None] * freqs[None, :]
        emb = torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)
    else:
        angles = float(t) * freqs
        emb = torch.cat([torch.sin(angles), torch.cos(angles)])
    return emb.to(dtype)


class ToyNoisePredictor(nn.Module):
    """Conv net over latents with per-layer scale-and-shift conditioning
    projected from the pooled prompt embedding and a timestep embedding.
    """

    def __init__(
        self,
        channels: int = 12,
        hidden: int = 64,
        embed_dim: int = 16,
        time_dim: int = 16,
    ):
        super().__init__()
        self.channels = channels
        self.time_dim = time_dim
        self.conv_in = nn.Conv2d(channels, hidden, 3, padding=1)
        self.conv_mid = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_mid2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(hidden, channels, 3, padding=1)
        self.cond_mlp = nn.Sequential(
            nn.Linear(embed_dim + time_dim, 2 * hidden),
            nn.SiLU(),
            nn.Linear(2 * hidden, 6 * hidden),
        )

    def predict(self, z_t: torch.Tensor, t: int, cond: torch.Tensor) -> torch.Tensor:
        if z_t.ndim != 4 or z_t.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W) latents, got {tuple(z_t.shape)}")
        dtype = self.conv_in.weight.dtype
        pooled = cond.mean(dim=0)
        temb = sinusoidal_time_embedding(t, self.time_dim, dtype)
        film = self.cond_mlp(torch.cat([pooled, temb]))
        s1, b1, s2, b2, s3, b3 = film.chunk(6)

        def mod(h, scale, shift):
            return h * (1.0 + scale[None, :, None, None]) + shift[None, :, None, None]

        h = F.silu(mod(self.conv_in(z_t), s1, b1))
        h = F.silu(mod(self.conv_mid(h), s2, b2))
        h = F.silu(mod(self.conv_mid2(h), s3, b3))
        return self.conv_out(h)

    def predict_each(
        self, z_t: torch.Tensor, t: torch.Tensor, pooled: torch.Tensor
    ) -> torch.Tensor:
        """Batched variant for pretraining: per-item timesteps (B,) and
        per-item pooled prompt embeddings (B, E) in one predictor call.
        """
        if z_t.ndim != 4 or z_t.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W) latents, got {tuple(z_t.shape)}")
        dtype = self.conv_in.weight.dtype
        temb = sinusoidal_time_embedding(t, self.time_dim, dtype)
        film = self.cond_mlp(torch.cat([pooled, temb], dim=1))
        s1, b1, s2, b2, s3, b3 = film.chunk(6, dim=1)

        def mod(h, scale, shift):
            return h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]

        h = F.silu(mod(self.conv_in(z_t), s1, b1))
        h = F.silu(mod(self.conv_mid(h), s2, b2))
        h = F.silu(mod(self.conv_mid2(h), s3, b3))
        return self.conv_out(h)

    forward = predict


class ToyClassifier(nn.Module):
    """Small conv net over images; also the feature extractor.

    Penultimate activations are the post-ReLU outputs of the first fully
    connected layer; per-class weights are the matching rows of the final
    linear layer.
    """

    def __init__(
        self,
        num_classes: int = 3,
        image_size: int = 16,
        feature_dim: int = 32,
        classifier_id: str = "toy_conv",
    ):
        super().__init__()
        if image_size % 4 != 0:
            raise ConfigurationError(f"image size {image_size} must be divisible by 4")
        self.conv1 = nn.Conv2d(3, 8, 3, padding=1)
        self.conv2 = nn.Conv2d(8, 16, 3, padding=1)
        self.flat_dim = 16 * (image_size // 4) ** 2
        self.fc1 = nn.Linear(self.flat_dim, feature_dim)
        self.fc2 = nn.Linear(feature_dim, num_classes)
        self.image_size = image_size
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.differentiable = True
        self.classifier_id = classifier_id
        self.checkpoint_id = classifier_id
        self.preprocessing = "unit-range RGB, no resize"

    def features(self, images: torch.Tensor) -> torch.Tensor:
        h = F.max_pool2d(F.relu(self.conv1(images)), 2)
        h = F.max_pool2d(F.relu(self.conv2(h)), 2)
        return F.relu(self.fc1(h.flatten(1)))

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(images))

    forward = logits

    def class_weights(self, class_id: int) -> ClassWeights:
        if not 0 <= class_id < self.num_classes:
            raise ConfigurationError(
                f"class {class_id} outside label space of size {self.num_classes}"
            )
        return ClassWeights(class_id=class_id, weights=self.fc2.weight[class_id].detach().clone())


class TinyMlpClassifier(nn.Module):
    """Two-layer MLP used where every matrix product must be checkable by
    hand: flatten, linear, ReLU (the penultimate features), linear.
    """

    def __init__(
        self,
        image_size: int = 4,
        feature_dim: int = 6,
        num_classes: int = 3,
        classifier_id: str = "tiny_mlp",
    ):
        super().__init__()
        self.fc1 = nn.Linear(3 * image_size * image_size, feature_dim)
        self.fc2 = nn.Linear(feature_dim, num_classes)
        self.num_classes = num_classes
        self.feature_dim = feature_dim
        self.differentiable = True
        self.classifier_id = classifier_id
        self.checkpoint_id = classifier_id
        self.preprocessing = "unit-range RGB, no resize"

    def features(self, images: torch.Tensor) -> torch.Tensor:
        return F.relu(self.fc1(images.flatten(1)))

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        return self.fc2(self.features(images))

    forward = logits

    def class_weights(self, class_id: int) -> ClassWeights:
        if not 0 <= class_id < self.num_classes:
            raise ConfigurationError(
                f"class {class_id} outside label space of size {self.num_classes}"
            )
        return ClassWeights(class_id=class_id, weights=self.fc2.weight[class_id].detach().clone())


@dataclass(frozen=True)
class ToyTrainSpec:
    """Budgets and sizes for pretraining the toy stack."""

    classifier_max_epochs: int = 80
    classifier_lr: float = 2e-3
    classifier_batch: int = 32
    classifier_min_accuracy: float = 0.95
    diffusion_steps: int = 30000
    diffusion_lr: float = 2e-3
    diffusion_batch: int = 32
    null_prompt_rate: float = 0.25
    ema_decay: float = 0.999
    hidden: int = 64
    embed_dim: int = 16
    time_dim: int = 16
    codec_block: int = 2

    def __post_init__(self):
        if not 0.0 <= self.null_prompt_rate < 1.0:
            raise ConfigurationError(
                f"null_prompt_rate must be in [0, 1), got {self.null_prompt_rate}"
            )
        if not 0.0 < self.classifier_min_accuracy <= 1.0:
            raise ConfigurationError("classifier_min_accuracy must be in (0, 1]")


def class_prompt(class_id: int) -> str:
    return f"a photo of a {CLASS_NOUNS[class_id]}"


def _train_split_tensors(dataset: SynthDataset) -> tuple[torch.Tensor, torch.Tensor]:
    images = torch.stack([ex.image for ex in dataset.train])
    labels = []
    for ex in dataset.train:
        (label,) = ex.labels.present_classes  # train images carry exactly one class
        labels.append(label)
    return images, torch.tensor(labels, dtype=torch.long)


def train_toy_classifier(
    dataset: SynthDataset,
    seed: int,
    spec: ToyTrainSpec = ToyTrainSpec(),
    classifier_id: str | None = None,
) -> tuple[ToyClassifier, float]:
    """Cross-entropy training until the train split accuracy target is hit.

    Raises if the budget runs out first; the message carries the reached
    accuracy so a failed build is diagnosable from the error alone.
    """
    torch.manual_seed(seed)
    config = dataset.config
    classifier = ToyClassifier(
        num_classes=config.num_classes,
        image_size=config.image_size,
        classifier_id=classifier_id or f"toy_conv_s{seed}",
    )
    images, labels = _train_split_tensors(dataset)
    optimizer = torch.optim.Adam(classifier.parameters(), lr=spec.classifier_lr)
    order_rng = torch.Generator().manual_seed(seed)
    accuracy = 0.0
    for epoch in range(spec.classifier_max_epochs):
        perm = torch.randperm(images.shape[0], generator=order_rng)
        for start in range(0, images.shape[0], spec.classifier_batch):
            idx = perm[start : start + spec.classifier_batch]
            optimizer.zero_grad(set_to_none=True)
            loss = F.cross_entropy(classifier.logits(images[idx]), labels[idx])
            loss.backward()
            optimizer.step()
        with torch.no_grad():
            accuracy = float((classifier.logits(images).argmax(1) == labels).float().mean())
        if accuracy >= spec.classifier_min_accuracy:
            break
    else:
        raise SpurgenError(
            f"toy classifier stuck at {accuracy:.3f} train accuracy after "
            f"{spec.classifier_max_epochs} epochs (target {spec.classifier_min_accuracy})"
        )
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    return classifier, accuracy


def pretrain_toy_diffusion(
    dataset: SynthDataset,
    seed: int,
    spec: ToyTrainSpec = ToyTrainSpec(),
) -> tuple[DiffusionModels, NoiseSchedule, float]:
    """Conditional denoising pretraining over the train split.

    Prompts name the image's class; a fixed fraction of items per step is
    trained against the empty prompt so guided sampling has an
    unconditional branch to lean on. Every batch item gets its own
    timestep and prompt (one batched predictor call per step) and the
    learning rate follows a cosine decay to a 5% floor. Returns the
    running mean loss over the last tenth of training as a convergence
    metric.
    """
    torch.manual_seed(seed)
    config = dataset.config
    codec = BlockCodec(image_size=config.image_size, block=spec.codec_block)
    predictor = ToyNoisePredictor(
        channels=codec.latent_shape[0],
        hidden=spec.hidden,
        embed_dim=spec.embed_dim,
        time_dim=spec.time_dim,
    )
    text_encoder = ToyTextEncoder(embed_dim=spec.embed_dim)
    models = DiffusionModels(codec=codec, predictor=predictor, text_encoder=text_encoder)
    schedule = NoiseSchedule.linear()

    images, labels = _train_split_tensors(dataset)
    params = list(predictor.parameters()) + list(text_encoder.parameters())
    optimizer = torch.optim.AdamW(params, lr=spec.diffusion_lr, weight_decay=0.0)
    scheduler = torch.optim.lr_scheduler.LambdaLR(
        optimizer,
        lambda step: 0.05 + 0.95 * 0.5 * (1.0 + math.cos(math.pi * step / spec.diffusion_steps)),
    )
    rng = torch.Generator().manual_seed(seed)
    # exponential moving average of the weights; the averaged copy is what
    # ships, the live weights only drive the gradient steps
    ema = [p.detach().clone() for p in params]
    tail_losses: list[float] = []
    tail_start = spec.diffusion_steps - max(1, spec.diffusion_steps // 10)
    for step in range(spec.diffusion_steps):
        idx = torch.randint(0, images.shape[0], (spec.diffusion_batch,), generator=rng)
        drop = torch.rand((spec.diffusion_batch,), generator=rng) < spec.null_prompt_rate
        prompts = [
            "" if drop[j] else class_prompt(int(labels[i]))
            for j, i in enumerate(idx.tolist())
        ]
        pooled_by_prompt = {
            prompt: text_encoder.encode(prompt).mean(dim=0) for prompt in sorted(set(prompts))
        }
        pooled = torch.stack([pooled_by_prompt[prompt] for prompt in prompts])
        t = torch.randint(
            1, schedule.timesteps + 1, (spec.diffusion_batch,), generator=rng
        )
        eps = torch.randn((spec.diffusion_batch, *codec.latent_shape), generator=rng)
        z0 = codec.encode(images[idx])
        signal = schedule.alpha_bars[t - 1].to(images.dtype)[:, None, None, None]
        z_t = diffuse(z0, eps, signal)
        optimizer.zero_grad(set_to_none=True)
        loss = ((eps - predictor.predict_each(z_t, t, pooled)) ** 2).mean()
        loss.backward()
        optimizer.step()
        scheduler.step()
        with torch.no_grad():
            # ramp the decay in so early shadows track the fast-moving start
            decay = min(spec.ema_decay, (1.0 + step) / (10.0 + step))
            for shadow, p in zip(ema, params):
                shadow.mul_(decay).add_(p, alpha=1.0 - decay)
        if step >= tail_start:
            tail_losses.append(float(loss.detach()))
    with torch.no_grad():
        for shadow, p in zip(ema, params):
            p.copy_(shadow)
    return models, schedule, sum(tail_losses) / len(tail_losses)


@dataclass
class ToyBundle:
    """Pretrained toy stack: diffusion models, schedule, oracle classifier."""

    models: DiffusionModels
    schedule: NoiseSchedule
    classifier: ToyClassifier
    spec: ToyTrainSpec
    metrics: dict = field(default_factory=dict)


def build_toy_models(
    dataset: SynthDataset,
    seed: int = 0,
    spec: ToyTrainSpec = ToyTrainSpec(),
) -> ToyBundle:
    classifier, accuracy = train_toy_classifier(dataset, seed, spec)
    models, schedule, diffusion_loss = pretrain_toy_diffusion(dataset, seed, spec)
    return ToyBundle(
        models=models,
        schedule=schedule,
        classifier=classifier,
        spec=spec,
        metrics={"classifier_train_accuracy": accuracy, "diffusion_tail_loss": diffusion_loss},
    )


def save_toy_classifier(classifier: ToyClassifier, path) -> None:
    from .. import container

    arrays = {
        name: tensor.detach().cpu().numpy() for name, tensor in classifier.state_dict().items()
    }
    container.save_arrays(
        path,
        arrays,
        {
            "num_classes": classifier.num_classes,
            "image_size": classifier.image_size,
            "feature_dim": classifier.feature_dim,
            "classifier_id": classifier.classifier_id,
        },
    )


def load_toy_classifier(path) -> ToyClassifier:
    from .. import container

    arrays, metadata = container.load_arrays(path)
    classifier = ToyClassifier(
        num_classes=metadata["num_classes"],
        image_size=metadata["image_size"],
        feature_dim=metadata["feature_dim"],
        classifier_id=metadata["classifier_id"],
    )
    classifier.load_state_dict(
        {name: torch.from_numpy(value.copy()) for name, value in arrays.items()}
    )
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    return classifier


def save_toy_bundle(bundle: ToyBundle, path) -> None:
    from .. import container

    arrays = {}
    for prefix, module in (
        ("predictor", bundle.models.predictor),
        ("text_encoder", bundle.models.text_encoder),
        ("classifier", bundle.classifier),
    ):
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}.{name}"] = tensor.detach().cpu().numpy()
    arrays["schedule.betas"] = bundle.schedule.betas.numpy()
    metadata = {
        "spec": vars(bundle.spec),
        "num_classes": bundle.classifier.num_classes,
        "image_size": bundle.models.codec.image_shape[1],
        "classifier_id": bundle.classifier.classifier_id,
        "metrics": bundle.metrics,
    }
    container.save_arrays(path, arrays, metadata)


def load_toy_bundle(path) -> ToyBundle:
    from .. import container

    arrays, metadata = container.load_arrays(path)
    spec = ToyTrainSpec(**metadata["spec"])
    image_size = metadata["image_size"]
    codec = BlockCodec(image_size=image_size, block=spec.codec_block)
    predictor = ToyNoisePredictor(
        channels=codec.latent_shape[0],
        hidden=spec.hidden,
        embed_dim=spec.embed_dim,
        time_dim=spec.time_dim,
    )
    text_encoder = ToyTextEncoder(embed_dim=spec.embed_dim)
    classifier = ToyClassifier(
        num_classes=metadata["num_classes"],
        image_size=image_size,
        classifier_id=metadata["classifier_id"],
    )
    for prefix, module in (
        ("predictor", predictor),
        ("text_encoder", text_encoder),
        ("classifier", classifier),
    ):
        state = {
            name[len(prefix) + 1 :]: torch.from_numpy(value.copy())
            for name, value in arrays.items()
            if name.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    classifier.eval()
    for p in classifier.parameters():
        p.requires_grad_(False)
    schedule = NoiseSchedule.from_betas(torch.from_numpy(arrays["schedule.betas"].copy()))
    models = DiffusionModels(codec=codec, predictor=predictor, text_encoder=text_encoder)
    return ToyBundle(
        models=models,
        schedule=schedule,
        classifier=classifier,
        spec=spec,
        metrics=dict(metadata["metrics"]),
    )
