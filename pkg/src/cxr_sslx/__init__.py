"""Self-supervised transfer learning toolkit for chest X-ray classification.

Three stages: an externally supplied backbone initialization, two-branch
self-supervised pre-training on unlabeled images, and supervised fine-tuning
of a small classification head. Evaluation reports sensitivity, specificity,
their harmonic mean, ROC AUC, and multi-class accuracy under a
positive-vs-rest binarization, plus Grad-CAM++ attention overlays.
"""

from cxr_sslx.config import TrainConfig

__all__ = ["TrainConfig"]
__version__ = "0.1.0"
