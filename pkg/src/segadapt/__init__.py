"""Unsupervised domain adaptation for a toy fully convolutional segmentation model.

Provides a small dilated FCN with built-in reverse-mode gradients, per-unit
domain-adversarial alignment, size-constrained multiple-instance
pseudo-labeling, synthetic paired-domain generation, IoU evaluation, and a
training/report CLI.
"""

IGNORE_LABEL = 255

__version__ = "0.1.0"
