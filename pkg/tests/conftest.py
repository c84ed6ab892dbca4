"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np


def random_spd(rng: np.random.Generator, n: int, cond: float = 1e3) -> np.ndarray:
    """Random SPD matrix with condition number at most `cond`."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if n == 1:
        eigs = np.array([1.0])
    else:
        eigs = np.exp(np.linspace(0.0, np.log(cond), n))
    eigs = eigs / eigs.max() * rng.uniform(0.5, 2.0)
    a = (q * eigs) @ q.T
    return (a + a.T) / 2


def random_symmetric_with_spectrum(
    rng: np.random.Generator, eigs: np.ndarray
) -> np.ndarray:
    """Symmetric matrix with exactly the given spectrum (up to roundoff)."""
    n = len(eigs)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    a = (q * np.asarray(eigs)) @ q.T
    return (a + a.T) / 2
