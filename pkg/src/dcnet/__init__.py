"""dcnet: spherical-harmonic convolutional scoring of diffusion-MRI cubes.

Subpackages cover SH math (:mod:`dcnet.sh`), the scoring network
(:mod:`dcnet.network`), training (:mod:`dcnet.training`), diffusion-tensor
metrics (:mod:`dcnet.metrics`), classifiers and evaluation
(:mod:`dcnet.classify`), synthetic cohorts (:mod:`dcnet.phantom`), file
formats (:mod:`dcnet.volio`) and the CLI (:mod:`dcnet.cli`).
"""

__version__ = "0.1.0"

from . import backends

__all__ = ["backends", "__version__"]
