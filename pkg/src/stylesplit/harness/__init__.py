"""Run harness: configs, synthetic data, checkpoints, metrics, reports, CLI."""
