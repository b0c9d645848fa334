"""Data generation, training, evaluation, checkpoints and the CLI."""
