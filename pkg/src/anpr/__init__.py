"""Automatic number-plate recognition: annotations, preprocessing, RPnet-style model, training and evaluation."""

__version__ = "0.1.0"
