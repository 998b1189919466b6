"""Blind raw-image denoising: Poisson-Gaussian noise estimation, expectation-matched VST and SNR-guided denoisers."""

__version__ = "0.1.0"
