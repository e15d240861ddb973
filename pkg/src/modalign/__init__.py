"""Adversarial alignment of textual and cognitive-signal modalities for
sequence labeling and sentence classification, on a small self-contained
reverse-mode autodiff core."""

__version__ = "0.1.0"
