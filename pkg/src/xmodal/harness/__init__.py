"""Evaluation metrics, decoding, experiments and the CLI."""
