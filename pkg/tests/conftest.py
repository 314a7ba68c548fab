"""Shared helpers for the test suite."""
import numpy as np
import pytest

from np3m import AtomSystem


def random_ionic_system(seed, n_atoms=8, box=10.0, periodic=True,
                        min_separation=1.5):
    """Neutral random system of +-1 charges with a minimum-separation rule."""
    rng = np.random.default_rng(seed)
    while True:
        pos = rng.uniform(0.0, box, size=(n_atoms, 3))
        delta = pos[:, None] - pos[None, :]
        if periodic:
            delta -= box * np.round(delta / box)
        dist = np.linalg.norm(delta, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() > min_separation:
            break
    charges = np.array([1.0, -1.0] * (n_atoms // 2))
    species = np.where(charges > 0, 11, 17)
    cell = np.eye(3) * box if periodic else None
    return AtomSystem(
        positions=pos, species=species, charges=charges, cell=cell,
        pbc=(periodic,) * 3,
    )


def randomize_final_layers(model, seed=42, scale=0.3):
    """Give the zero-initialized decoder/output layers random values so the
    model is a non-trivial function of its inputs."""
    rng = np.random.default_rng(seed)
    for name, tensor in model.weights.items():
        if ".w2" in name or ".b2" in name:
            tensor.data = rng.normal(0.0, scale, size=tensor.shape)
    return model


def rocksalt_system(a=2.0):
    """Conventional 8-ion rock-salt cell; nearest-neighbor distance a/2."""
    basis = np.array(
        [
            [0.0, 0.0, 0.0],
            [0.5, 0.5, 0.0],
            [0.5, 0.0, 0.5],
            [0.0, 0.5, 0.5],
            [0.5, 0.0, 0.0],
            [0.0, 0.5, 0.0],
            [0.0, 0.0, 0.5],
            [0.5, 0.5, 0.5],
        ]
    )
    charges = np.array([1.0, 1.0, 1.0, 1.0, -1.0, -1.0, -1.0, -1.0])
    species = np.where(charges > 0, 11, 17)
    return AtomSystem(
        positions=basis * a, species=species, charges=charges,
        cell=np.eye(3) * a, pbc=(True, True, True),
    )


def cscl_system(a=1.0):
    """Two-ion cesium-chloride cell; nearest-neighbor distance a*sqrt(3)/2."""
    positions = np.array([[0.0, 0.0, 0.0], [0.5, 0.5, 0.5]]) * a
    return AtomSystem(
        positions=positions,
        species=np.array([55, 17]),
        charges=np.array([1.0, -1.0]),
        cell=np.eye(3) * a,
        pbc=(True, True, True),
    )


@pytest.fixture
def ionic_system():
    return random_ionic_system(3)
