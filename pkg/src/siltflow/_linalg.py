"""Cholesky factorization with the shared diagonal-jitter escalation policy."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError

JITTER_START = 1e-12
JITTER_MAX = 1e-6


@dataclass(frozen=True)
class Factor:
    lower: np.ndarray
    jitter: float  # absolute diagonal shift that was added
    clipped: bool = False  # eigenvalue-clipping fallback was used


def factorize(cov: np.ndarray, clip_fallback: bool = False) -> Factor:
    """Lower factor ``L`` with ``L @ L.T ~= cov``.

    Tries jitter 0, then ``1e-12 * trace/n`` escalating by 10x up to
    ``1e-6 * trace/n``. With ``clip_fallback`` a symmetric eigendecomposition
    with negative eigenvalues clipped to 0 is used when every jitter level
    fails (rank-deficient kernels from coalesced particles).
    """
    cov = np.asarray(cov, dtype=float)
    n = cov.shape[0]
    scale = float(np.trace(cov)) / n if n else 0.0
    if not np.isfinite(scale):
        raise NumericalError("covariance matrix contains non-finite entries")
    levels = [0.0]
    j = JITTER_START
    while j <= JITTER_MAX * (1 + 1e-9):
        levels.append(j * scale)
        j *= 10
    eye = np.eye(n)
    for jit in levels:
        try:
            return Factor(np.linalg.cholesky(cov + jit * eye), jit)
        except np.linalg.LinAlgError:
            continue
    if clip_fallback:
        w, v = np.linalg.eigh(cov)
        return Factor(v * np.sqrt(np.clip(w, 0.0, None)), 0.0, clipped=True)
    w = np.linalg.eigvalsh(cov)
    cond = np.inf if w[0] <= 0 else w[-1] / w[0]
    raise NumericalError(
        f"factorization failed at max jitter {levels[-1]:.3e}: n={n}, "
        f"min eig={w[0]:.3e}, max eig={w[-1]:.3e}, cond={cond:.3e}"
    )
