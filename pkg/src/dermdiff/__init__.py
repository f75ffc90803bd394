"""DermDiff: attribute-balanced dermoscopic image synthesis and bias evaluation.

A self-contained numpy implementation of the full pipeline: a deterministic
differentiable kernel, a procedural lesion corpus with known tone/disease
ground truth, colorimetric skin-tone estimation, a prompt-conditioned latent
diffusion generator, focal-loss classifiers, and fidelity / diversity /
fairness metrics.
"""

__version__ = "0.1.0"

VERSION_STRING = f"dermdiff-{__version__}"
