"""Representation-aligned guidance for inverse problems with flow priors, at desk scale."""

__version__ = "0.1.0"
