"""Latent conservative objective models for crystal structure search on a synthetic pair-potential oracle."""

__version__ = "0.1.0"
