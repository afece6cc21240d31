"""Spectral summaries of a matrix: singular values and rank surrogates."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import ObservationSet
from .errors import DimensionMismatchError

__all__ = [
    "SpectrumMetrics",
    "ZERO_RELATIVE_THRESHOLD",
    "effective_rank",
    "reconstruction_error",
    "spectrum",
    "spectrum_metrics",
    "stable_rank",
]

#: Singular values below this fraction of the largest count as zero.
ZERO_RELATIVE_THRESHOLD = 1e-12


def spectrum(matrix: np.ndarray) -> np.ndarray:
    """Singular values in descending order."""
    m = np.asarray(matrix, dtype=float)
    if m.ndim != 2:
        raise DimensionMismatchError(f"expected a 2-D matrix, got shape {m.shape}")
    if m.size == 0:
        return np.zeros(0)
    return np.linalg.svd(m, compute_uv=False)


def _nonzero_spectrum(sv: np.ndarray, name: str) -> np.ndarray:
    if sv.size == 0 or sv[0] == 0.0:
        raise ValueError(f"{name} is undefined for the zero matrix")
    return sv


def stable_rank(matrix: np.ndarray) -> float:
    """Squared Frobenius norm over squared spectral norm."""
    sv = _nonzero_spectrum(spectrum(matrix), "stable rank")
    return float(np.sum((sv / sv[0]) ** 2))


def effective_rank(matrix: np.ndarray) -> float:
    """Exponential of the Shannon entropy of the normalised singular values.

    Uses natural logs and ``0 log 0 = 0``. Values below
    ``ZERO_RELATIVE_THRESHOLD * sigma_max`` are dropped first.
    """
    sv = _nonzero_spectrum(spectrum(matrix), "effective rank")
    sv = sv[sv > ZERO_RELATIVE_THRESHOLD * sv[0]]
    p = sv / sv.sum()
    return float(np.exp(-np.sum(p * np.log(p))))


def reconstruction_error(
    estimate: np.ndarray,
    truth: np.ndarray,
    *,
    unobserved_only: Optional[ObservationSet] = None,
) -> float:
    """Relative Frobenius error ``||W - W*||_F / ||W*||_F``.

    With ``unobserved_only`` set, both norms are taken over the entries that
    are *not* in that observation set.
    """
    w = np.asarray(estimate, dtype=float)
    t = np.asarray(truth, dtype=float)
    if w.shape != t.shape:
        raise DimensionMismatchError(f"shape mismatch: {w.shape} vs {t.shape}")
    if unobserved_only is not None:
        if unobserved_only.dim != t.shape[0] or t.shape[0] != t.shape[1]:
            raise DimensionMismatchError("observation set does not match the matrix shape")
        keep = unobserved_only.mask() == 0
        w, t = w[keep], t[keep]
    denom = float(np.linalg.norm(t))
    if denom == 0.0:
        raise ValueError("reconstruction error is undefined for a zero reference")
    return float(np.linalg.norm(w - t)) / denom


@dataclass(frozen=True)
class SpectrumMetrics:
    singulars: np.ndarray
    stable_rank: float
    effective_rank: float
    spectral_norm: float
    frobenius_norm: float


def spectrum_metrics(matrix: np.ndarray) -> SpectrumMetrics:
    """All spectral summaries from a single SVD.

    The zero matrix gets ``nan`` rank values instead of raising, so long
    trajectories can be recorded without special cases.
    """
    sv = spectrum(matrix)
    top = float(sv[0]) if sv.size else 0.0
    if top == 0.0:
        srank = erank = float("nan")
    else:
        srank = float(np.sum((sv / top) ** 2))
        kept = sv[sv > ZERO_RELATIVE_THRESHOLD * top]
        p = kept / kept.sum()
        erank = float(np.exp(-np.sum(p * np.log(p))))
    return SpectrumMetrics(
        singulars=sv,
        stable_rank=srank,
        effective_rank=erank,
        spectral_norm=top,
        frobenius_norm=math.hypot(*sv.tolist()),
    )
