"""Scale-covariant Gaussian-derivative residual networks.

Discrete scale-space primitives, learnable jet layers, residual scale
channels with selection over space and scale, a small training engine, and a
CLI harness for covariance checks and scale-generalisation experiments.
"""

__version__ = "0.1.0"
