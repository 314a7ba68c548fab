"""Canonical-frame cell construction for molecules and mesh-point generation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AtomSystem, GeometryError

DEFAULT_PADDING = 0.5  # Angstrom, per side

# eigenvalue gap below this fraction of the covariance trace marks a
# symmetry-degenerate spectrum; frames of such molecules are not canonical
DEGENERACY_RTOL = 1e-6


@dataclass
class CanonicalFrame:
    """Rotation (rows = covariance eigenvectors) and centroid normalizing a molecule."""

    U: np.ndarray  # (3, 3) orthonormal, det +1
    mu: np.ndarray  # (3,)
    degenerate: bool = False


@dataclass
class Mesh:
    """Regular grid of points spanning a cell, flattened row-major (z fastest)."""

    counts: tuple[int, int, int]
    points: np.ndarray  # (Nx*Ny*Nz, 3)
    cell: np.ndarray
    grid_volume: float

    @property
    def n_points(self) -> int:
        return self.points.shape[0]


def canonical_frame(positions: np.ndarray, weights: np.ndarray | None = None) -> CanonicalFrame:
    """Eigenframe of the position covariance matrix with deterministic signs.

    Eigenvectors are ordered by descending eigenvalue. Each axis sign is fixed
    by requiring positive weighted third moment of the projected coordinates
    (weights default to 1); if that moment is negligible the sign of the
    largest-magnitude component is used. det(U) = +1 is enforced by flipping
    the last axis if needed.
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    n = positions.shape[0]
    mu = positions.mean(axis=0)
    centered = positions - mu
    cov = centered.T @ centered
    trace = np.trace(cov)
    if trace < 1e-12:
        # single atom or coincident points: identity fallback
        return CanonicalFrame(np.eye(3), mu, degenerate=False)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = evals[order]
    U = evecs[:, order].T  # rows are eigenvectors
    gaps = np.abs(np.diff(evals))
    degenerate = bool(np.any(gaps < DEGENERACY_RTOL * trace))
    if weights is None:
        weights = np.ones(n)
    for a in range(3):
        proj = centered @ U[a]
        skew = float(np.sum(weights * proj**3))
        if abs(skew) > 1e-9:
            if skew < 0:
                U[a] = -U[a]
        else:
            k = int(np.argmax(np.abs(U[a])))
            if U[a, k] < 0:
                U[a] = -U[a]
    if np.linalg.det(U) < 0:
        U[2] = -U[2]
    return CanonicalFrame(U, mu, degenerate=degenerate)


def construct_cell(system: AtomSystem, padding_d: float = DEFAULT_PADDING):
    """Axis-aligned cell around the canonicalized molecule with padding per side.

    Returns (cell, repositioned system, frame). The returned system carries the
    cell and coordinates shifted so every atom sits padding_d from the lower
    faces; the cell length per axis is the canonical coordinate span plus
    2 * padding_d.
    """
    if system.is_periodic:
        raise GeometryError("construct_cell applies to non-periodic systems only")
    frame = canonical_frame(system.positions, weights=system.species.astype(np.float64))
    canon = (system.positions - frame.mu) @ frame.U.T
    lo = canon.min(axis=0)
    hi = canon.max(axis=0)
    lengths = hi - lo + 2.0 * padding_d
    cell = np.diag(lengths)
    repositioned = canon - (lo - padding_d)
    new_system = system.replace(positions=repositioned, cell=cell)
    return cell, new_system, frame


def generate_mesh(cell: np.ndarray, counts) -> Mesh:
    """Mesh points (n + 1/2)/N along each cell vector, flattened z-fastest."""
    cell = np.asarray(cell, dtype=np.float64).reshape(3, 3)
    nx, ny, nz = (int(c) for c in counts)
    if min(nx, ny, nz) < 1:
        raise GeometryError("mesh counts must be >= 1")
    fx = (np.arange(nx) + 0.5) / nx
    fy = (np.arange(ny) + 0.5) / ny
    fz = (np.arange(nz) + 0.5) / nz
    frac = np.stack(np.meshgrid(fx, fy, fz, indexing="ij"), axis=-1).reshape(-1, 3)
    points = frac @ cell
    volume = abs(np.linalg.det(cell))
    return Mesh((nx, ny, nz), points, cell, volume / (nx * ny * nz))


def choose_mesh_counts(cell: np.ndarray, r_assign: float) -> tuple[int, int, int]:
    """Mesh counts so that count * r_assign roughly matches each cell length."""
    if r_assign <= 0:
        raise GeometryError("r_assign must be positive")
    cell = np.asarray(cell, dtype=np.float64).reshape(3, 3)
    lengths = np.linalg.norm(cell, axis=1)
    return tuple(max(1, round(float(length) / r_assign)) for length in lengths)
