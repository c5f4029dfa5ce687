"""Flow-based P2P botnet detection with a Bayesian-regularized neural network."""

__version__ = "0.1.0"
