"""Reference electrostatics: direct sums and the classical Ewald decomposition.

Units are fixed repo-wide: lengths in Angstrom, charges in e, Coulomb constant
k = 1, so energies come out in e^2/A and forces in e^2/A^2. EwaldParams carries
a single unit_scale for users who want eV.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcinv

from .geometry import AtomSystem, GeometryError, build_radius_graph, cell_heights

NEUTRALITY_TOL = 1e-10
_RCUT_CAP = 9.0  # Angstrom, tune_params real-space cap


class ElectrostaticsError(ValueError):
    pass


@dataclass
class EwaldParams:
    """Splitting parameter and truncation settings for the Ewald sum."""

    beta: float  # 1/Angstrom
    r_cut: float  # Angstrom
    m_max: int  # reciprocal index bound per axis (inf-norm)
    unit_scale: float = 1.0

    def __post_init__(self):
        if self.beta <= 0 or self.r_cut <= 0 or self.m_max < 1:
            raise ElectrostaticsError("invalid Ewald parameters")


@dataclass
class EnergyBreakdown:
    e_short: float
    e_long: float
    e_self: float
    total: float
    forces: np.ndarray  # (N, 3)


def _require_charges(system: AtomSystem):
    if system.charges is None:
        raise ElectrostaticsError("system has no charges")


def direct_coulomb(system: AtomSystem):
    """Open-boundary pairwise Coulomb energy and analytic forces."""
    _require_charges(system)
    if system.is_periodic:
        raise ElectrostaticsError("direct_coulomb requires a non-periodic system")
    pos, q = system.positions, system.charges
    n = system.n_atoms
    energy = 0.0
    forces = np.zeros((n, 3))
    ii, jj = np.triu_indices(n, k=1)
    if ii.size:
        disp = pos[ii] - pos[jj]
        r = np.linalg.norm(disp, axis=1)
        if np.any(r < 1e-12):
            raise ElectrostaticsError("singular pair: coincident charged atoms")
        pair_e = q[ii] * q[jj] / r
        energy = float(np.sum(pair_e))
        f = (pair_e / r**2)[:, None] * disp  # force on i from j
        np.add.at(forces, ii, f)
        np.add.at(forces, jj, -f)
    return energy, forces


def dipole_moment(system: AtomSystem) -> np.ndarray:
    _require_charges(system)
    return system.charges @ system.positions


def direct_periodic(system: AtomSystem, n_shells: int, tinfoil: bool = True) -> float:
    """Shell-truncated periodic image sum of the Coulomb energy.

    Sums over image shifts with inf-norm <= n_shells, excluding i == j only in
    the home cell. With tinfoil=True the shape-dependent cell-dipole surface
    term 2*pi*|P|^2/(3V) is subtracted so the n_shells -> inf limit matches the
    Ewald (conducting boundary) convention.
    """
    _require_charges(system)
    if not system.is_periodic:
        raise ElectrostaticsError("direct_periodic requires a periodic system")
    q = system.charges
    if abs(q.sum()) > NEUTRALITY_TOL:
        import warnings

        warnings.warn("non-neutral cell: shell sum is conditionally convergent")
    pos, cell = system.positions, system.cell
    rng = range(-n_shells, n_shells + 1)
    shifts = np.array([[i, j, k] for i in rng for j in rng for k in rng], dtype=np.float64)
    offsets = shifts @ cell  # (S, 3)
    disp = pos[:, None, None, :] - pos[None, :, None, :] + offsets[None, None, :, :]
    r = np.linalg.norm(disp, axis=-1)  # (N, N, S)
    home = np.all(shifts == 0, axis=1)
    eye = np.eye(system.n_atoms, dtype=bool)
    mask = ~(eye[:, :, None] & home[None, None, :])
    with np.errstate(divide="ignore"):
        inv_r = np.where(mask, 1.0 / np.where(r > 0, r, 1.0), 0.0)
    energy = 0.5 * float(np.einsum("i,j,ijs->", q, q, inv_r))
    if tinfoil:
        p = dipole_moment(system)
        energy -= 2.0 * np.pi * float(p @ p) / (3.0 * system.volume)
    return energy


def extrapolate_shells(system: AtomSystem, shells=(6, 8, 10)) -> float:
    """Polynomial-in-1/n Richardson extrapolation of direct_periodic to n -> inf."""
    shells = list(shells)
    values = np.array([direct_periodic(system, n) for n in shells])
    x = 1.0 / np.array(shells, dtype=np.float64)
    coeffs = np.vander(x, len(shells), increasing=True)
    sol = np.linalg.solve(coeffs, values)
    return float(sol[0])


def _reciprocal_vectors(cell: np.ndarray, m_max: int):
    """All 2*pi * cell^-T k for integer k with inf-norm <= m_max, k != 0."""
    rng = np.arange(-m_max, m_max + 1)
    kx, ky, kz = np.meshgrid(rng, rng, rng, indexing="ij")
    k = np.stack([kx, ky, kz], axis=-1).reshape(-1, 3)
    k = k[np.any(k != 0, axis=1)]
    recip = 2.0 * np.pi * np.linalg.inv(cell).T
    return k @ recip.T  # rows m = 2 pi cell^-T k


def short_range_part(system: AtomSystem, beta: float, r_cut: float, multi_image: bool = False):
    """Erfc-screened real-space pair sum over the r_cut radius graph."""
    q, pos, cell = system.charges, system.positions, system.cell
    graph = build_radius_graph(system, r_cut, multi_image=multi_image)
    forces = np.zeros((system.n_atoms, 3))
    e_short = 0.0
    if graph.n_edges:
        disp = pos[graph.src] - pos[graph.dst] + graph.shift @ cell
        r = np.linalg.norm(disp, axis=1)
        if np.any(r < 1e-12):
            raise ElectrostaticsError("singular pair: coincident charged atoms")
        qq = q[graph.src] * q[graph.dst]
        screened = erfc(beta * r)
        # each (i, j) pair appears in both directions; the 1/2 removes the double count
        e_short = 0.5 * float(np.sum(qq * screened / r))
        # d/dr [erfc(beta r)/r]
        dpair = -(screened / r**2 + 2.0 * beta / np.sqrt(np.pi) * np.exp(-(beta * r) ** 2) / r)
        f_edge = -(qq * dpair / r)[:, None] * disp  # force on src atom, full pair force
        np.add.at(forces, graph.src, f_edge)
    return e_short, forces


def self_energy(system: AtomSystem, beta: float) -> float:
    """Correction removing the smeared self interaction of each charge."""
    return -(beta / np.sqrt(np.pi)) * float(np.sum(system.charges**2))


def check_neutral_periodic(system: AtomSystem):
    _require_charges(system)
    if not bool(np.all(system.pbc)):
        raise ElectrostaticsError("full periodicity required")
    net = float(system.charges.sum())
    if abs(net) > NEUTRALITY_TOL:
        raise ElectrostaticsError(f"net charge {net:.3e}: Ewald m=0 term is dropped")


def ewald_components(
    system: AtomSystem, params: EwaldParams, multi_image: bool = False
) -> EnergyBreakdown:
    """Classical Ewald decomposition with analytic forces.

    e_short sums erfc-screened pair terms over the r_cut radius graph,
    e_long is the reciprocal sum over modes with inf-norm index <= m_max,
    e_self removes the smeared self interaction. Forces are the analytic
    negative gradients of the position-dependent terms.
    """
    check_neutral_periodic(system)
    beta = params.beta
    q, pos, cell = system.charges, system.positions, system.cell
    scale = params.unit_scale

    e_short, forces = short_range_part(system, beta, params.r_cut, multi_image=multi_image)

    m = _reciprocal_vectors(cell, params.m_max)
    m2 = np.einsum("ij,ij->i", m, m)
    g = 4.0 * np.pi / m2
    gamma = np.exp(-m2 / (4.0 * beta**2))
    phase = np.exp(-1j * (pos @ m.T))  # (N, M)
    rho = q @ phase  # (M,)
    volume = system.volume
    e_long = float(np.sum(g * gamma * np.abs(rho) ** 2)) / (2.0 * volume)
    # F_j = -(q_j / V) sum_m g gamma m Im(e^{-i m r_j} conj(rho))
    im_part = np.imag(phase * np.conj(rho)[None, :])  # (N, M)
    forces -= (q[:, None] * (im_part * (g * gamma)[None, :]) @ m) / volume

    e_self = self_energy(system, beta)
    total = e_short + e_long + e_self
    return EnergyBreakdown(
        e_short * scale, e_long * scale, e_self * scale, total * scale, forces * scale
    )


def tune_params(system: AtomSystem, tolerance: float, beta: float | None = None) -> EwaldParams:
    """Truncation settings reaching roughly `tolerance` relative accuracy.

    With beta=None: r_cut = min(half min cell height, 9 A) and beta = p/r_cut
    where erfc(p) = tolerance. With a fixed beta, r_cut = p/beta instead (which
    may exceed the minimum-image bound; evaluate with multi_image=True then).
    m_max is chosen so the Gaussian damping at the cutoff mode is <= tolerance.
    """
    if not system.is_periodic:
        raise ElectrostaticsError("tune_params requires a periodic system")
    p = float(erfcinv(tolerance))
    if beta is None:
        r_cut = min(0.5 * cell_heights(system.cell).min(), _RCUT_CAP)
        beta = p / r_cut
    else:
        r_cut = p / beta
    k_cut = 2.0 * beta * np.sqrt(np.log(1.0 / tolerance))
    b_norms = 2.0 * np.pi * np.linalg.norm(np.linalg.inv(system.cell), axis=0)
    m_max = max(1, int(np.ceil(k_cut / b_norms.min())))
    return EwaldParams(beta=beta, r_cut=r_cut, m_max=m_max)
