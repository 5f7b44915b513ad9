"""Enriched Dirichlet process mixtures of linear mixed models for longitudinal outcomes."""

__version__ = '0.3.0'
