"""Face segmentation with a CNN-parameterized four-connected CRF, mean-field recurrence and adversarial training."""

__version__ = "0.1.0"
