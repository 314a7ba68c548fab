"""Atomic systems, periodic displacement arithmetic, and radius graphs."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)

_NEIGHBOR_OFFSETS = np.array(
    [[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.int64
)

# brute-force pair scan below this many atoms, cell-list binning above
_CELL_LIST_THRESHOLD = 256


class GeometryError(ValueError):
    pass


@dataclass
class AtomSystem:
    """A set of point particles, optionally in a periodic cell.

    positions : (N, 3) float, Angstrom
    species   : (N,) int, atomic numbers >= 1
    charges   : (N,) float in units of e, or None
    cell      : (3, 3) float, rows are the cell vectors c_x, c_y, c_z, or None
    pbc       : (3,) bool
    """

    positions: np.ndarray
    species: np.ndarray
    charges: np.ndarray | None = None
    cell: np.ndarray | None = None
    pbc: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=bool))

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        self.pbc = np.asarray(self.pbc, dtype=bool).reshape(3)
        if self.positions.shape[0] < 1:
            raise GeometryError("system must contain at least one atom")
        if self.species.shape[0] != self.n_atoms:
            raise GeometryError("species length does not match atom count")
        if np.any(self.species < 1):
            raise GeometryError("atomic numbers must be >= 1")
        if self.charges is not None:
            self.charges = np.asarray(self.charges, dtype=np.float64).reshape(-1)
            if self.charges.shape[0] != self.n_atoms:
                raise GeometryError("charges length does not match atom count")
        if self.cell is not None:
            self.cell = np.asarray(self.cell, dtype=np.float64).reshape(3, 3)
            if np.linalg.det(self.cell) <= 0:
                raise GeometryError("cell must have positive determinant")
        if np.any(self.pbc) and self.cell is None:
            raise GeometryError("periodic system requires a cell")

    @property
    def n_atoms(self) -> int:
        return self.positions.shape[0]

    @property
    def is_periodic(self) -> bool:
        return bool(np.any(self.pbc))

    @property
    def volume(self) -> float:
        if self.cell is None:
            raise GeometryError("system has no cell")
        return float(abs(np.linalg.det(self.cell)))

    def replace(self, **kwargs) -> "AtomSystem":
        data = dict(
            positions=self.positions, species=self.species, charges=self.charges,
            cell=self.cell, pbc=self.pbc,
        )
        data.update(kwargs)
        return AtomSystem(**data)


@dataclass
class RadiusGraph:
    """Directed atom-atom radius graph; both edge directions are present.

    An edge (src, dst, shift) connects atom src to atom dst through the
    periodic image displacement x_src - x_dst + shift @ cell.
    """

    cutoff: float
    src: np.ndarray
    dst: np.ndarray
    shift: np.ndarray  # (E, 3) integer image shifts

    @property
    def n_edges(self) -> int:
        return self.src.shape[0]


@dataclass
class BipartiteGraph:
    """Mesh-to-atom radius graph with per-edge distances."""

    cutoff: float
    mesh_index: np.ndarray
    atom_index: np.ndarray
    shift: np.ndarray  # (E, 3), applied to the atom position
    dist: np.ndarray

    @property
    def n_edges(self) -> int:
        return self.mesh_index.shape[0]


def cell_heights(cell: np.ndarray) -> np.ndarray:
    """Perpendicular distance between opposite cell faces, per axis."""
    cell = np.asarray(cell, dtype=np.float64)
    vol = abs(np.linalg.det(cell))
    if vol == 0.0:
        raise GeometryError("degenerate cell")
    heights = np.empty(3)
    for a in range(3):
        cross = np.cross(cell[(a + 1) % 3], cell[(a + 2) % 3])
        heights[a] = vol / np.linalg.norm(cross)
    return heights


def minimum_image_displacement(r_i, r_j, cell=None, pbc=(False, False, False)):
    """Displacement r_i - r_j + shift @ cell with minimal norm over image shifts.

    Returns (displacement, shift); shift is zero on non-periodic axes.
    """
    r_i = np.asarray(r_i, dtype=np.float64)
    r_j = np.asarray(r_j, dtype=np.float64)
    pbc = np.asarray(pbc, dtype=bool)
    disp = r_i - r_j
    if not np.any(pbc):
        return disp, np.zeros(3, dtype=np.int64)
    if cell is None:
        raise GeometryError("periodic axes require a cell")
    cell = np.asarray(cell, dtype=np.float64)
    if abs(np.linalg.det(cell)) < 1e-12:
        raise GeometryError("degenerate cell")
    frac = disp @ np.linalg.inv(cell)
    base = np.where(pbc, -np.round(frac), 0.0).astype(np.int64)
    # search +-1 around the rounded shift; sufficient for skewed cells in our use
    candidates = base + np.where(pbc, _NEIGHBOR_OFFSETS, 0)
    candidates = np.unique(candidates, axis=0)
    trial = disp + candidates @ cell
    best = np.argmin(np.einsum("ij,ij->i", trial, trial))
    return trial[best], candidates[best]


def _sort_edges(src, dst, shift):
    order = np.lexsort((shift[:, 2], shift[:, 1], shift[:, 0], src, dst))
    return src[order], dst[order], shift[order]


def _pairs_brute(positions: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = positions.shape[0]
    ii, jj = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    mask = ii != jj
    return ii[mask], jj[mask]


def _pairs_cell_list(positions: np.ndarray, cutoff: float) -> tuple[np.ndarray, np.ndarray]:
    """Candidate (i, j) pairs from open-boundary bin search (supersets allowed)."""
    lo = positions.min(axis=0)
    span = positions.max(axis=0) - lo
    nbins = np.maximum(1, np.floor(span / cutoff).astype(int))
    idx = np.minimum((positions - lo) / np.where(span > 0, span, 1.0) * nbins, nbins - 1)
    idx = idx.astype(int)
    bins: dict[tuple, list] = {}
    for a, key in enumerate(map(tuple, idx)):
        bins.setdefault(key, []).append(a)
    src, dst = [], []
    for key, members in bins.items():
        neigh = []
        for off in _NEIGHBOR_OFFSETS:
            nk = tuple(np.array(key) + off)
            if nk in bins:
                neigh.extend(bins[nk])
        for a in members:
            for b in neigh:
                if a != b:
                    src.append(a)
                    dst.append(b)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def build_radius_graph(system: AtomSystem, r_short: float, multi_image: bool = False) -> RadiusGraph:
    """Directed radius graph of atom pairs within r_short, incl. periodic images.

    For periodic systems without multi_image, r_short must not exceed half the
    smallest cell height so the minimum-image search is exhaustive.
    """
    if r_short <= 0:
        raise GeometryError("cutoff must be positive")
    pos = system.positions
    n = system.n_atoms

    if not system.is_periodic:
        if n > _CELL_LIST_THRESHOLD:
            ii, jj = _pairs_cell_list(pos, r_short)
        else:
            ii, jj = _pairs_brute(pos)
        if ii.size:
            d = np.linalg.norm(pos[ii] - pos[jj], axis=1)
            keep = d <= r_short
            ii, jj = ii[keep], jj[keep]
        shift = np.zeros((ii.size, 3), dtype=np.int64)
        src, dst, shift = _sort_edges(ii, jj, shift)
        return RadiusGraph(r_short, src, dst, shift)

    heights = cell_heights(system.cell)
    if not multi_image and r_short > 0.5 * heights.min() + 1e-12:
        raise GeometryError(
            f"cutoff {r_short} exceeds half the smallest cell height "
            f"{0.5 * heights.min():.6g}; enable multi_image"
        )

    if multi_image:
        reach = np.where(system.pbc, np.ceil(r_short / heights).astype(int), 0)
        shifts = np.array(
            [[i, j, k]
             for i in range(-reach[0], reach[0] + 1)
             for j in range(-reach[1], reach[1] + 1)
             for k in range(-reach[2], reach[2] + 1)],
            dtype=np.int64,
        )
        src_l, dst_l, shift_l = [], [], []
        for sh in shifts:
            disp = pos[:, None, :] - pos[None, :, :] + sh @ system.cell
            d = np.linalg.norm(disp, axis=-1)
            mask = d <= r_short
            if not np.any(sh):
                np.fill_diagonal(mask, False)
            ii, jj = np.nonzero(mask)
            src_l.append(ii)
            dst_l.append(jj)
            shift_l.append(np.broadcast_to(sh, (ii.size, 3)))
        src = np.concatenate(src_l)
        dst = np.concatenate(dst_l)
        shift = np.concatenate(shift_l).astype(np.int64)
        src, dst, shift = _sort_edges(src, dst, shift)
        return RadiusGraph(r_short, src, dst, shift)

    # minimum-image pair search (vectorized over all pairs)
    inv = np.linalg.inv(system.cell)
    if n > _CELL_LIST_THRESHOLD:
        ii, jj = _pairs_cell_list_periodic(system, r_short)
    else:
        ii, jj = _pairs_brute(pos)
    disp = pos[ii] - pos[jj]
    frac = disp @ inv
    sh = np.where(system.pbc, -np.round(frac), 0.0).astype(np.int64)
    disp = disp + sh @ system.cell
    d = np.linalg.norm(disp, axis=1)
    keep = d <= r_short
    src, dst, shift = _sort_edges(ii[keep], jj[keep], sh[keep])
    return RadiusGraph(r_short, src, dst, shift)


def _pairs_cell_list_periodic(system: AtomSystem, cutoff: float):
    """Candidate pairs from fractional-coordinate binning with wraparound."""
    cell = system.cell
    inv = np.linalg.inv(cell)
    frac = (system.positions @ inv) % 1.0
    heights = cell_heights(cell)
    nbins = np.maximum(1, np.floor(heights / cutoff).astype(int))
    idx = np.minimum((frac * nbins).astype(int), nbins - 1)
    bins: dict[tuple, list] = {}
    for a, key in enumerate(map(tuple, idx)):
        bins.setdefault(key, []).append(a)
    src, dst = [], []
    for key, members in bins.items():
        neigh = []
        for off in _NEIGHBOR_OFFSETS:
            nk = tuple((np.array(key) + off) % nbins)
            if nk in bins:
                neigh.extend(bins[nk])
        neigh = sorted(set(neigh))
        for a in members:
            for b in neigh:
                if a != b:
                    src.append(a)
                    dst.append(b)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64)


def build_assignment_graph(system: AtomSystem, mesh, r_assign: float) -> BipartiteGraph:
    """Bipartite mesh-atom radius graph; periodic systems use minimum images."""
    if r_assign <= 0:
        raise GeometryError("cutoff must be positive")
    pos = system.positions
    mpos = mesh.points
    disp = mpos[:, None, :] - pos[None, :, :]  # (M, N, 3)
    shift = np.zeros(disp.shape, dtype=np.int64)
    if system.is_periodic:
        inv = np.linalg.inv(system.cell)
        frac = disp @ inv
        shift = np.where(system.pbc, -np.round(frac), 0.0).astype(np.int64)
        disp = disp + shift @ system.cell
    d = np.linalg.norm(disp, axis=-1)
    mi, ai = np.nonzero(d <= r_assign)
    covered = np.zeros(system.n_atoms, dtype=bool)
    covered[ai] = True
    if not covered.all():
        logger.warning(
            "%d atom(s) have no mesh point within r_assign=%.3g and receive "
            "no long-range exchange", int((~covered).sum()), r_assign,
        )
    order = np.lexsort((shift[mi, ai, 2], shift[mi, ai, 1], shift[mi, ai, 0], mi, ai))
    mi, ai = mi[order], ai[order]
    return BipartiteGraph(r_assign, mi, ai, shift[mi, ai], d[mi, ai])
