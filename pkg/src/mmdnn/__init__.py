"""Multimodal multiscale patch networks for prodromal Alzheimer's classification.

Pipeline stages: synthetic cohort generation, spatial k-means patch atlas,
patch featurization, MMDNN training with SAE pretraining, and subject-level
cross-validated ensemble evaluation.
"""

__version__ = "0.1.0"
