"""Tests for the 3D transform fast path against the dense matrix oracle."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from np3m.spectral import (
    SpectralGrid,
    dense_dft_matrix,
    dense_fft3,
    dense_ifft3,
    fft3,
    ifft3,
)


def _random_grid(seed, counts=(3, 4, 5)):
    rng = np.random.default_rng(seed)
    n = int(np.prod(counts))
    values = rng.normal(size=n) + 1j * rng.normal(size=n)
    return SpectralGrid(counts, values)


def test_dense_dft_matrix_is_symmetric_unitary_up_to_scale():
    for n in (1, 2, 5):
        m = dense_dft_matrix(n)
        assert np.allclose(m, m.T)
        assert np.allclose(m @ np.conj(m.T), n * np.eye(n))
    with pytest.raises(ValueError):
        dense_dft_matrix(0)


def test_fast_forward_matches_dense_oracle():
    grid = _random_grid(0)
    fast = fft3(grid).values
    dense = dense_fft3(grid).values
    assert np.abs(fast - dense).max() < 1e-10


def test_fast_inverse_matches_dense_oracle():
    grid = _random_grid(1)
    fast = ifft3(grid).values
    dense = dense_ifft3(grid).values
    assert np.abs(fast - dense).max() < 1e-10


def test_roundtrip_is_identity():
    grid = _random_grid(2)
    back = ifft3(fft3(grid)).values
    assert np.abs(back - grid.values).max() < 1e-12


def test_single_mode_lands_in_single_bin():
    counts = (4, 4, 4)
    nx, ny, nz = counts
    x = np.arange(nx)[:, None, None]
    wave = np.exp(2j * np.pi * x / nx) * np.ones(counts)
    out = fft3(SpectralGrid(counts, wave.reshape(-1))).as_grid()
    expected = np.zeros(counts, complex)
    expected[1, 0, 0] = nx * ny * nz
    assert np.abs(out - expected).max() < 1e-10


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_parseval_identity(seed):
    grid = _random_grid(seed)
    energy = np.sum(np.abs(grid.values) ** 2)
    spectral = np.sum(np.abs(fft3(grid).values) ** 2) / np.prod(grid.counts)
    assert np.isclose(energy, spectral)


def test_grid_shape_validation():
    with pytest.raises(ValueError):
        SpectralGrid((2, 2, 2), np.zeros(7))
