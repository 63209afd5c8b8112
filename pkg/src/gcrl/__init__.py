"""Graph-convolutional multi-agent Q-learning with relation kernels, the
battle/jungle/routing environments, and classical routing baselines."""

__version__ = "0.1.0"
