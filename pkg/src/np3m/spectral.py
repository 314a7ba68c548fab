"""3D discrete Fourier transforms on mesh grids, fast path plus dense oracle."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SpectralGrid:
    """Complex scalar field on an (Nx, Ny, Nz) grid, flattened z-fastest."""

    counts: tuple[int, int, int]
    values: np.ndarray

    def __post_init__(self):
        nx, ny, nz = self.counts
        self.values = np.asarray(self.values, dtype=np.complex128).reshape(-1)
        if self.values.size != nx * ny * nz:
            raise ValueError("value count does not match grid counts")

    def as_grid(self) -> np.ndarray:
        return self.values.reshape(self.counts)


def fft3(grid: SpectralGrid) -> SpectralGrid:
    """Unnormalized forward DFT over all three grid axes."""
    out = np.fft.fftn(grid.as_grid())
    return SpectralGrid(grid.counts, out.reshape(-1))


def ifft3(grid: SpectralGrid) -> SpectralGrid:
    """Inverse DFT with 1/(Nx*Ny*Nz) normalization; inverts fft3 exactly."""
    out = np.fft.ifftn(grid.as_grid())
    return SpectralGrid(grid.counts, out.reshape(-1))


def dense_dft_matrix(n: int) -> np.ndarray:
    """The n x n forward DFT matrix with entries exp(-2*pi*i*j*k/n)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    j = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(j, j) / n)


def dense_fft3(grid: SpectralGrid) -> SpectralGrid:
    """Forward 3D DFT via explicit separable matrix products (oracle path)."""
    nx, ny, nz = grid.counts
    x = grid.as_grid()
    x = np.einsum("ai,ijk->ajk", dense_dft_matrix(nx), x)
    x = np.einsum("bj,ajk->abk", dense_dft_matrix(ny), x)
    x = np.einsum("ck,abk->abc", dense_dft_matrix(nz), x)
    return SpectralGrid(grid.counts, x.reshape(-1))


def dense_ifft3(grid: SpectralGrid) -> SpectralGrid:
    """Inverse 3D DFT via conjugated dense matrices with 1/M normalization."""
    nx, ny, nz = grid.counts
    x = grid.as_grid()
    x = np.einsum("ai,ijk->ajk", np.conj(dense_dft_matrix(nx)), x)
    x = np.einsum("bj,ajk->abk", np.conj(dense_dft_matrix(ny)), x)
    x = np.einsum("ck,abk->abc", np.conj(dense_dft_matrix(nz)), x)
    return SpectralGrid(grid.counts, x.reshape(-1) / (nx * ny * nz))
