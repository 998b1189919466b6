"""Slow reference implementations kept independent of the library code paths."""
import numpy as np


def direct_window_stats(img, p):
    """Per-pixel mean and two-pass population std over a reflect-101 padded p x p window."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    r = p // 2
    padded = np.pad(img, r, mode="reflect")
    mean = np.empty_like(img)
    std = np.empty_like(img)
    for i in range(h):
        for j in range(w):
            win = padded[i:i + p, j:j + p]
            m = win.sum() / win.size
            mean[i, j] = m
            std[i, j] = np.sqrt(((win - m) ** 2).sum() / win.size)
    return mean, std


def mc_gat_bias(chi, sigma_hat, n, seed):
    """Monte Carlo E[f(z)] - f(chi) with its standard error."""
    rng = np.random.default_rng(seed)
    z = rng.poisson(chi, n) + sigma_hat * rng.standard_normal(n)
    f = 2.0 * np.sqrt(np.maximum(z + 0.375 + sigma_hat ** 2, 0.0))
    f0 = 2.0 * np.sqrt(chi + 0.375 + sigma_hat ** 2)
    return f.mean() - f0, f.std() / np.sqrt(n)
