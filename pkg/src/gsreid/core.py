"""Shared types, errors and vector helpers.

Feature matrices are plain ``float64`` numpy arrays of shape ``(n, dim)``;
row ``i`` belongs to sample ``i``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

OUTLIER = -1
ZERO_NORM_EPS = 1e-12
UNIT_TOL = 1e-6


class ZeroNorm(ValueError):
    """Raised when a vector is too short to be normalized."""


class ShapeMismatch(ValueError):
    pass


class NonFinite(ValueError):
    pass


class NotNormalized(ValueError):
    pass


def normalize(v):
    """Return ``v / ||v||``; raises :class:`ZeroNorm` for a (near) zero vector."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ShapeMismatch(f"expected a non-empty vector, got shape {v.shape}")
    norm = np.sqrt(np.dot(v, v))
    if norm < ZERO_NORM_EPS:
        raise ZeroNorm(f"vector norm {norm:.3e} is below {ZERO_NORM_EPS}")
    return v / norm


def normalize_rows(x):
    """Row-wise :func:`normalize` for a 2-d array."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.sqrt(np.einsum("ij,ij->i", x, x))
    if np.any(norms < ZERO_NORM_EPS):
        bad = int(np.argmax(norms < ZERO_NORM_EPS))
        raise ZeroNorm(f"row {bad} has norm {norms[bad]:.3e}")
    return x / norms[:, None]


def validate_matrix(F, normalized=False, tol=UNIT_TOL):
    """Check that ``F`` is a finite ``(n, dim)`` matrix with ``n, dim >= 1``.

    With ``normalized=True`` every row must also have unit L2 norm within
    ``tol``. Returns ``F`` as a float64 array.
    """
    try:
        F = np.asarray(F, dtype=np.float64)
    except ValueError as exc:  # ragged nested lists
        raise ShapeMismatch(str(exc)) from exc
    if F.ndim != 2 or F.shape[0] < 1 or F.shape[1] < 1:
        raise ShapeMismatch(f"expected a non-empty 2-d matrix, got shape {F.shape}")
    if not np.all(np.isfinite(F)):
        raise NonFinite("matrix contains NaN or infinite values")
    if normalized:
        norms = np.sqrt(np.einsum("ij,ij->i", F, F))
        off = np.abs(norms - 1.0)
        if np.any(off > tol):
            bad = int(np.argmax(off))
            raise NotNormalized(f"row {bad} has norm {norms[bad]:.6f}")
    return F


@dataclass(frozen=True)
class GroundTruth:
    """Per-sample identity and camera labels."""

    identity: np.ndarray
    camera: np.ndarray

    def __post_init__(self):
        identity = np.asarray(self.identity, dtype=np.int64)
        camera = np.asarray(self.camera, dtype=np.int64)
        if identity.ndim != 1 or identity.shape != camera.shape:
            raise ShapeMismatch("identity and camera must be 1-d arrays of equal length")
        object.__setattr__(self, "identity", identity)
        object.__setattr__(self, "camera", camera)

    def __len__(self):
        return len(self.identity)

    def subset(self, idx):
        return GroundTruth(self.identity[idx], self.camera[idx])
