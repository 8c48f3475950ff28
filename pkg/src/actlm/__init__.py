"""Latent-action language modeling: a numpy research stack with its own
reverse-mode autodiff, a small pre-norm transformer, discrete latent action
learning, multi-stage training, Q-guided tree search, and binary
checkpoints."""

__version__ = "0.1.0"
