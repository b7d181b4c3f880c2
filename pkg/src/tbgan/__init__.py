"""Coupled texture/normals/shape face synthesis with trunk-branch GANs."""

__version__ = "0.1.0"
