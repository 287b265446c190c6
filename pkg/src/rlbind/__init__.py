"""Adversarially robust cross-modal alignment of small modality encoders to frozen class anchors."""

__version__ = "0.1.0"
