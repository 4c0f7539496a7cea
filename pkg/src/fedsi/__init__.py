"""Federated training simulator for scale-invariant CIFG and Transformer
language models, with FedAdam, stochastic upload quantization and DP-FTRL
tree aggregation."""

__version__ = "0.1.0"
