"""Desk-scale contrastive language-audio pretraining for paralinguistics."""

__version__ = "0.1.0"
