"""Metrics, synthetic data, Monte Carlo validators and the command line."""
