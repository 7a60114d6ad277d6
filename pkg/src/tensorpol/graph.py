"""Directed radius graph and per-edge geometric features for one molecule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor_algebra import NonSymmetricInput, frob_norm

SUPPORTED_ELEMENTS = (1, 6, 7, 8, 16, 17)
MIN_ATOM_SEPARATION = 1e-6  # Angstrom


class DegenerateGeometry(ValueError):
    """Two atoms coincide within the minimum separation."""


class OutOfRange(ValueError):
    """Distance outside the open interval (0, cutoff)."""


@dataclass
class Molecule:
    """Atomic numbers + Cartesian coordinates (Angstrom), optional target tensor (Bohr^3)."""

    mol_id: str
    atomic_numbers: np.ndarray
    positions: np.ndarray
    target_alpha: np.ndarray | None = None

    def __post_init__(self):
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.int64)
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = len(self.atomic_numbers)
        if n < 1:
            raise ValueError(f"{self.mol_id}: molecule needs at least one atom")
        if self.positions.shape != (n, 3):
            raise ValueError(
                f"{self.mol_id}: positions shape {self.positions.shape} for {n} atoms"
            )
        if not np.all(np.isfinite(self.positions)):
            raise ValueError(f"{self.mol_id}: non-finite coordinates")
        if self.target_alpha is not None:
            self.target_alpha = np.asarray(self.target_alpha, dtype=np.float64)
            asym = frob_norm(self.target_alpha - self.target_alpha.T)
            if asym > 1e-8:
                raise NonSymmetricInput(
                    f"{self.mol_id}: target tensor asymmetry {asym:.3e}"
                )

    @property
    def n_atoms(self) -> int:
        return len(self.atomic_numbers)

    def heavy_atom_count(self) -> int:
        return int(np.sum(self.atomic_numbers > 1))

    def rotated(self, r: np.ndarray) -> "Molecule":
        target = None
        if self.target_alpha is not None:
            target = r @ self.target_alpha @ r.T
        return Molecule(self.mol_id, self.atomic_numbers, self.positions @ r.T, target)


@dataclass
class EdgeFeatures:
    """Struct-of-arrays edge features for the directed radius graph.

    Edge e runs src[e] -> dst[e]; r[e] = x[src] - x[dst] points from the
    receiving atom to the sender, matching the message-passing convention.
    """

    src: np.ndarray
    dst: np.ndarray
    r: np.ndarray
    d: np.ndarray
    rhat: np.ndarray
    rbf: np.ndarray
    envelope: np.ndarray
    n_atoms: int = field(default=0)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def bessel_rbf(d, cutoff: float, k: int) -> np.ndarray:
    """Bessel radial basis: component n = sqrt(2/c) * sin(n pi d / c) / d.

    d may be a scalar or a length-E array; result has shape (..., k).
    """
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0.0) or np.any(d >= cutoff):
        raise OutOfRange(f"distance outside (0, {cutoff})")
    if k < 1:
        raise ValueError("need at least one basis function")
    n = np.arange(1, k + 1, dtype=np.float64)
    return np.sqrt(2.0 / cutoff) * np.sin(n * np.pi * d[..., None] / cutoff) / d[..., None]


def cosine_envelope(d, cutoff: float) -> np.ndarray:
    """Smooth cutoff (cos(pi d / c) + 1) / 2: 1 at d->0, 0 at d->cutoff."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0.0) or np.any(d >= cutoff):
        raise OutOfRange(f"distance outside (0, {cutoff})")
    return 0.5 * (np.cos(np.pi * d / cutoff) + 1.0)


def build_graph(mol: Molecule, cutoff: float, n_rbf: int = 20) -> EdgeFeatures:
    """All directed edges (j -> i) with 0 < d_ij < cutoff, no self-edges.

    Edges come out sorted by (dst, src) so aggregation order is canonical
    for a given atom ordering. Brute-force O(N^2) pair search; molecules
    here have a few dozen atoms at most.
    """
    if cutoff <= 0.0:
        raise ValueError("cutoff must be positive")
    x = mol.positions
    n = mol.n_atoms
    diff = x[None, :, :] - x[:, None, :]  # diff[i, j] = x_j - x_i
    dist = np.linalg.norm(diff, axis=-1)
    off_diag = ~np.eye(n, dtype=bool)
    if np.any(dist[off_diag] < MIN_ATOM_SEPARATION):
        i, j = np.argwhere((dist < MIN_ATOM_SEPARATION) & off_diag)[0]
        raise DegenerateGeometry(
            f"{mol.mol_id}: atoms {i} and {j} separated by {dist[i, j]:.2e} A"
        )
    mask = off_diag & (dist < cutoff)
    dst, src = np.nonzero(mask)  # row-major: sorted by (dst, src)
    r = diff[dst, src]
    d = dist[dst, src]
    rhat = r / d[:, None] if len(d) else r.reshape(0, 3)
    if len(d):
        rbf = bessel_rbf(d, cutoff, n_rbf)
        env = cosine_envelope(d, cutoff)
    else:
        rbf = np.zeros((0, n_rbf))
        env = np.zeros((0,))
    return EdgeFeatures(
        src=src, dst=dst, r=r, d=d, rhat=rhat, rbf=rbf, envelope=env, n_atoms=n
    )
