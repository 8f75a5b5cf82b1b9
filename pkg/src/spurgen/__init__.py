"""spurgen: fine-tune a text-to-image diffusion model toward a class's
spurious feature and measure what classifiers make of the results.

The package splits into a diffusion substrate (`diffusion`), class-aware
feature math (`features`), the fine-tuning procedure (`training`), the
measurement harness (`evaluation`), a fully synthetic desk-scale stack
(`toy`), and an operator CLI (`cli`).
"""

__version__ = "0.1.0"

from . import container, diffusion, errors, evaluation, features, imaging, training  # noqa: F401,E402
