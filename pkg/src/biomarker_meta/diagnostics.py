"""Convergence diagnostics: split R-hat, effective sample size, Monte Carlo SE."""

from __future__ import annotations

import math

import numpy as np

__all__ = ["split_rhat", "effective_sample_size", "mcse_mean"]


def _split_chains(draws: np.ndarray) -> np.ndarray:
    """(n_chains, n_draws) -> (2*n_chains, n_draws//2), dropping an odd tail draw."""
    draws = np.asarray(draws, dtype=float)
    if draws.ndim != 2:
        raise ValueError("expected draws with shape (n_chains, n_draws)")
    n = (draws.shape[1] // 2) * 2
    half = n // 2
    return draws[:, :n].reshape(draws.shape[0] * 2, half)


def split_rhat(draws: np.ndarray) -> float:
    """Potential scale reduction factor on split chains.

    Values near 1 indicate the split halves agree. Returns 1.0 exactly when
    every draw is identical (constant parameter), NaN when there are too few
    draws to split.
    """
    x = _split_chains(draws)
    m, n = x.shape
    if n < 2:
        return float("nan")
    if np.ptp(x) == 0.0:
        return 1.0
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w == 0.0:
        return float("inf")
    var_plus = (n - 1) / n * w + b / n
    return max(float(np.sqrt(var_plus / w)), 1.0)


def _autocovariance(x: np.ndarray) -> np.ndarray:
    """Biased (1/n) autocovariance of each row, via FFT. x: (m, n)."""
    m, n = x.shape
    xc = x - x.mean(axis=1, keepdims=True)
    size = 1
    while size < 2 * n:
        size *= 2
    f = np.fft.rfft(xc, n=size, axis=1)
    acov = np.fft.irfft(f * np.conj(f), n=size, axis=1)[:, :n].real
    return acov / n


def effective_sample_size(draws: np.ndarray) -> float:
    """ESS of the pooled draws via Geyer's initial monotone positive sequence.

    Autocorrelations are estimated within split chains and pooled against the
    between-chain variance, so unmixed chains are penalised. The result is
    capped at the actual number of draws.
    """
    draws = np.asarray(draws, dtype=float)
    total = draws.size
    x = _split_chains(draws)
    m, n = x.shape
    if n < 4 or np.ptp(x) == 0.0:
        return float(total)
    acov = _autocovariance(x)
    w = acov[:, 0].mean() * n / (n - 1.0)
    var_plus = acov[:, 0].mean()
    if m > 1:
        var_plus += x.mean(axis=1).var(ddof=1)
    if var_plus == 0.0:
        return float(total)
    rho = 1.0 - (w - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0

    # sum Geyer pairs G_k = rho[2k] + rho[2k+1] while positive, forcing
    # monotone non-increase; tau = -1 + 2 * sum(G_k)
    gamma_sum = 0.0
    prev = float("inf")
    k = 0
    while 2 * k + 1 < n:
        g = rho[2 * k] + rho[2 * k + 1]
        if g <= 0.0:
            break
        g = min(g, prev)
        prev = g
        gamma_sum += g
        k += 1
    tau = max(-1.0 + 2.0 * gamma_sum, 1.0 / math.log10(total + 10.0))
    return float(min(total / tau, total))


def mcse_mean(draws: np.ndarray) -> float:
    """Monte Carlo standard error of the posterior mean estimate."""
    x = np.asarray(draws, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    sd = x.std(ddof=1)
    if sd == 0.0:
        return 0.0
    return float(sd / np.sqrt(effective_sample_size(x)))
