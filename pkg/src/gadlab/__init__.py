"""Generative vs discriminative vs generation-assisted classifiers on synthetic action streams."""

__version__ = "0.1.0"
