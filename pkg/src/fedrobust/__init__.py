"""fedrobust: federated adversarial-training simulator for multichannel
time-series classification, with batch-specific normalization, adversarial
weight perturbation, and an l-inf attack suite."""

from .kernels import BACKEND

__all__ = ["BACKEND"]
__version__ = "0.1.0"
