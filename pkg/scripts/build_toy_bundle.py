"""Pretrain the synthetic-world model stack and cache it on disk.

Running this once warms the cache that the tests and the end-to-end
pipeline reuse, so the slow step happens on your schedule rather than in
the middle of a test run. Optionally samples an unconditional census to
sanity-check the generator's class balance.
"""

import argparse
import time
from pathlib import Path

import torch

from spurgen.diffusion import SamplerConfig
from spurgen.evaluation import classify
from spurgen.toy.data import SynthDatasetConfig, synth_dataset
from spurgen.toy.pipeline import cached_second_classifier, cached_toy_bundle
from spurgen.training import generate_prior_set


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--cache-dir", default="tests/.cache")
    parser.add_argument(
        "--census", type=int, default=0, metavar="N",
        help="also draw N unconditional samples and print their class counts",
    )
    args = parser.parse_args()

    dataset = synth_dataset(SynthDatasetConfig())
    start = time.perf_counter()
    bundle = cached_toy_bundle(dataset, args.seed, cache_dir=args.cache_dir)
    cached_second_classifier(dataset, args.seed + 1, cache_dir=args.cache_dir)
    print(f"bundle ready in {time.perf_counter() - start:.0f}s")
    for key, value in sorted(bundle.metrics.items()):
        print(f"  {key}: {value:.4f}")
    print(f"  cache: {Path(args.cache_dir).resolve()}")

    if args.census > 0:
        prior = generate_prior_set(
            "",
            args.census,
            bundle.models,
            bundle.schedule,
            SamplerConfig(steps=50, guidance_scale=0.0, seed=9000),
        )
        ids = [f"census_{i:04d}" for i in range(args.census)]
        log = classify(prior.images, ids, bundle.classifier)
        counts = torch.zeros(bundle.classifier.num_classes, dtype=torch.long)
        for record in log.records:
            counts[record.predicted_class] += 1
        print(f"  census over {args.census} unconditional samples: {counts.tolist()}")


if __name__ == "__main__":
    main()
