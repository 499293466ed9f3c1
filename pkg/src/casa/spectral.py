"""Per-layer SVD machinery: thin SVD with a fixed sign convention, spectral
rigidity, singular-subspace similarity, energy-based top-k and optimal
low-rank factorization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, NumericalError, ShapeError


@dataclass(frozen=True)
class SvdTriple:
    """Thin SVD ``W = U @ diag(S) @ V.T`` with ``m = min(W.shape)`` components."""

    U: np.ndarray  # d_out x m
    S: np.ndarray  # m, nonincreasing
    V: np.ndarray  # d_in x m

    @property
    def m(self) -> int:
        return self.S.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return (self.U.shape[0], self.V.shape[0])

    def reconstruct(self) -> np.ndarray:
        return (self.U * self.S) @ self.V.T


def svd(W: np.ndarray) -> SvdTriple:
    """Thin SVD of a finite 2-D matrix.

    Each left singular vector is flipped so its largest-magnitude entry is
    positive (first such entry on ties); the matching right vector flips with
    it. Without this, repeated runs could disagree by column signs.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise ShapeError(f"svd expects a 2-D matrix, got shape {W.shape}")
    try:
        U, S, Vh = np.linalg.svd(W, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"SVD did not converge: {exc}") from None
    cols = np.arange(U.shape[1])
    pivot = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[pivot, cols])
    signs[signs == 0] = 1.0
    U = np.ascontiguousarray(U * signs)
    V = np.ascontiguousarray(Vh.T * signs)
    S = np.ascontiguousarray(S)
    for a in (U, S, V):
        a.setflags(write=False)
    return SvdTriple(U=U, S=S, V=V)


def _rescaled(*arrays: np.ndarray) -> list[np.ndarray]:
    """Scale arrays by a common power of two (exact) so their largest entry is
    near 1; keeps sums of squares away from underflow and overflow."""
    peak = max((float(np.abs(a).max()) for a in arrays if a.size), default=0.0)
    if peak == 0 or not np.isfinite(peak):
        return list(arrays)
    shift = -np.frexp(peak)[1]
    return [np.ldexp(a, shift) for a in arrays]


def spectral_rigidity(S: np.ndarray, S_prime: np.ndarray) -> float:
    """Relative l2 change ``||S' - S|| / ||S||`` of a singular-value vector."""
    S = np.asarray(S, dtype=np.float64)
    S_prime = np.asarray(S_prime, dtype=np.float64)
    if S.shape != S_prime.shape:
        raise ShapeError(f"spectra differ in length: {S.shape} vs {S_prime.shape}")
    if not np.any(S):
        raise DegenerateError("reference spectrum has zero norm")
    S, S_prime = _rescaled(S, S_prime)
    return float(np.linalg.norm(S_prime - S) / np.linalg.norm(S))


def subspace_similarity(U: np.ndarray, U_prime: np.ndarray) -> np.ndarray:
    """Absolute cosine between every column of ``U`` and every column of ``U_prime``."""
    if U.shape[0] != U_prime.shape[0]:
        raise ShapeError(f"bases live in different spaces: {U.shape[0]} vs {U_prime.shape[0]} rows")
    return np.abs(U.T @ U_prime)


def topk_energy(S: np.ndarray, fraction: float = 0.9) -> int:
    """Smallest k whose leading singular values hold ``fraction`` of sum(S**2)."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must lie in (0, 1], got {fraction}")
    S = np.asarray(S, dtype=np.float64)
    if S.size == 0:
        raise DegenerateError("empty spectrum")
    if not np.any(S):
        raise DegenerateError("all singular values are zero")
    (S,) = _rescaled(S)
    energy = S * S
    total = energy.sum()
    ratio = np.cumsum(energy) / total
    hits = np.flatnonzero(ratio >= fraction)
    # cumulative rounding can leave the last ratio a hair below 1.0
    return int(hits[0]) + 1 if hits.size else S.size


def truncated_factorize(delta: np.ndarray, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Best rank-``r`` approximation of ``delta`` split as ``B @ A``.

    ``B = U_r sqrt(S_r)`` and ``A = sqrt(S_r) V_r^T``, so both factors carry
    half of the spectrum. If ``r`` exceeds ``min(delta.shape)`` the extra
    rank slots are zero-padded to keep the requested shapes.
    """
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    trip = svd(delta)
    keep = min(r, trip.m)
    root = np.sqrt(trip.S[:keep])
    B = np.zeros((delta.shape[0], r))
    A = np.zeros((r, delta.shape[1]))
    B[:, :keep] = trip.U[:, :keep] * root
    A[:keep, :] = root[:, None] * trip.V[:, :keep].T
    return B, A


def tail_energy(S: np.ndarray, r: int) -> float:
    """Frobenius norm of what a rank-``r`` truncation leaves behind."""
    S = np.asarray(S, dtype=np.float64)
    tail = S[r:]
    if not tail.size or not np.any(tail):
        return 0.0
    peak = float(np.abs(tail).max())
    return float(peak * np.sqrt(np.sum((tail / peak) ** 2)))
