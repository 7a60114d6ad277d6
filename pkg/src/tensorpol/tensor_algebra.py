"""Closed-form operations on 3x3 tensors.

All routines operate on numpy arrays of shape (3, 3) (or (..., 3, 3) where
noted) in float64. Polarizability tensors are in Bohr^3; basis tensors and
rotations are dimensionless.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SYMMETRY_TOL = 1e-8
ROTATION_TOL = 1e-10


class NonSymmetricInput(ValueError):
    """Input tensor is asymmetric beyond the accepted tolerance."""


class InvalidRotation(ValueError):
    """Matrix is not proper orthogonal within tolerance."""


@dataclass
class SphericalDecomp:
    """Isotropic scalar + traceless anisotropic part of a symmetric tensor."""

    iso: float
    aniso: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return self.iso * np.eye(3) + self.aniso


def sym(a: np.ndarray) -> np.ndarray:
    """Symmetric part (A + A^T) / 2, over the last two axes."""
    a = np.asarray(a, dtype=np.float64)
    return 0.5 * (a + np.swapaxes(a, -1, -2))


def traceless(a: np.ndarray) -> np.ndarray:
    """Symmetric traceless projection: sym(A) - tr(A)/3 * I."""
    a = np.asarray(a, dtype=np.float64)
    s = sym(a)
    tr = np.trace(s, axis1=-2, axis2=-1)
    return s - tr[..., None, None] / 3.0 * np.eye(3)


def dyadic(u: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Dyadic (outer) product u ⊗ w of two 3-vectors."""
    u = np.asarray(u, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    return u[..., :, None] * w[..., None, :]


def frob_norm(a: np.ndarray) -> float:
    """Frobenius norm over the last two axes."""
    a = np.asarray(a, dtype=np.float64)
    return np.sqrt(np.sum(a * a, axis=(-2, -1)))


def decompose(alpha: np.ndarray, tol: float = SYMMETRY_TOL) -> SphericalDecomp:
    """Split a symmetric tensor into isotropic scalar and traceless part.

    Inputs asymmetric within `tol` are symmetrized first; beyond that it is
    an error rather than a silent repair.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    asym = frob_norm(alpha - alpha.T)
    if asym > tol:
        raise NonSymmetricInput(
            f"tensor asymmetry {asym:.3e} exceeds tolerance {tol:.1e}"
        )
    alpha = sym(alpha)
    iso = float(np.trace(alpha)) / 3.0
    return SphericalDecomp(iso=iso, aniso=alpha - iso * np.eye(3))


def check_rotation(r: np.ndarray, tol: float = ROTATION_TOL) -> np.ndarray:
    """Validate that `r` is proper orthogonal; returns it as float64."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise InvalidRotation(f"expected shape (3, 3), got {r.shape}")
    ortho_err = np.max(np.abs(r.T @ r - np.eye(3)))
    det = np.linalg.det(r)
    if ortho_err > tol or abs(det - 1.0) > tol:
        raise InvalidRotation(
            f"orthogonality error {ortho_err:.3e}, det {det:.12f}"
        )
    return r


def conjugate(r: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Rotate a rank-2 tensor: alpha' = R alpha R^T."""
    r = check_rotation(r)
    alpha = np.asarray(alpha, dtype=np.float64)
    return r @ alpha @ r.T


def sample_rotation(rng: np.random.Generator) -> np.ndarray:
    """Draw a rotation matrix uniformly over SO(3).

    Uses the unit-quaternion construction: a 4d standard normal, normalized,
    maps to a uniformly distributed rotation.
    """
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def sample_rotations(n: int, rng: np.random.Generator) -> np.ndarray:
    """Stack of `n` uniform rotations, shape (n, 3, 3)."""
    return np.stack([sample_rotation(rng) for _ in range(n)])
