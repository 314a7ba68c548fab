"""Tests for systems, minimum images, and neighbor graphs."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from np3m import (
    AtomSystem,
    GeometryError,
    build_assignment_graph,
    build_radius_graph,
    generate_mesh,
    minimum_image_displacement,
)
from np3m.geometry import _pairs_brute, _pairs_cell_list, cell_heights

from conftest import random_ionic_system


def test_atom_system_validation():
    with pytest.raises(GeometryError):
        AtomSystem(
            positions=np.zeros((2, 3)),
            species=np.array([1]),  # wrong length
            charges=None,
            cell=None,
            pbc=(False, False, False),
        )
    with pytest.raises(GeometryError):
        AtomSystem(
            positions=np.zeros((1, 3)),
            species=np.array([1]),
            charges=None,
            cell=None,
            pbc=(True, True, True),  # periodic but no cell
        )


def test_minimum_image_cubic():
    cell = np.eye(3) * 10.0
    disp, shift = minimum_image_displacement(
        np.array([9.5, 0.0, 0.0]), np.array([0.5, 0.0, 0.0]), cell, (True,) * 3
    )
    assert np.allclose(disp, [-1.0, 0.0, 0.0])
    assert shift[0] == -1


def test_minimum_image_nonperiodic_axis():
    cell = np.eye(3) * 10.0
    disp, shift = minimum_image_displacement(
        np.array([9.5, 9.5, 0.0]), np.array([0.5, 0.5, 0.0]), cell,
        (True, False, False),
    )
    assert np.allclose(disp, [-1.0, 9.0, 0.0])
    assert shift[1] == 0


def test_minimum_image_skewed_cell():
    # a sheared cell where naive rounding of fractional coords is not optimal
    cell = np.array([[10.0, 0.0, 0.0], [9.0, 4.0, 0.0], [0.0, 0.0, 10.0]])
    rng = np.random.default_rng(0)
    for _ in range(50):
        r_i, r_j = rng.uniform(-5, 15, size=(2, 3))
        disp, _ = minimum_image_displacement(r_i, r_j, cell, (True,) * 3)
        # exhaustive reference over a generous shift range
        best = np.inf
        for a in range(-3, 4):
            for b in range(-3, 4):
                for c in range(-3, 4):
                    cand = r_i - r_j + np.array([a, b, c], float) @ cell
                    best = min(best, np.linalg.norm(cand))
        assert np.linalg.norm(disp) <= best + 1e-10


def test_radius_graph_nonperiodic_matches_brute_force():
    system = random_ionic_system(1, n_atoms=12, periodic=False)
    graph = build_radius_graph(system, 4.0)
    dist = np.linalg.norm(
        system.positions[:, None] - system.positions[None, :], axis=-1
    )
    expected = {(i, j) for i in range(12) for j in range(12)
                if i != j and dist[i, j] <= 4.0}
    assert set(zip(graph.src.tolist(), graph.dst.tolist())) == expected


def test_radius_graph_symmetric_pairs():
    system = random_ionic_system(2)
    graph = build_radius_graph(system, 4.5)
    forward = set(zip(graph.src.tolist(), graph.dst.tolist()))
    assert {(j, i) for i, j in forward} == forward


def test_radius_graph_cutoff_exceeds_half_height():
    system = random_ionic_system(2, box=6.0)
    with pytest.raises(GeometryError):
        build_radius_graph(system, 4.0)
    graph = build_radius_graph(system, 4.0, multi_image=True)
    assert graph.n_edges > 0


def test_multi_image_graph_counts_every_image():
    # two atoms on a small cell axis: images at 1, 3, 5, ... apart
    system = AtomSystem(
        positions=np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]),
        species=np.array([11, 17]),
        charges=np.array([1.0, -1.0]),
        cell=np.eye(3) * 4.0,
        pbc=(True, True, True),
    )
    graph = build_radius_graph(system, 6.1, multi_image=True)
    # pair (0,1): displacements 2-4k with |d|<=6.1 -> -6,-2,2,6 plus y/z image combos
    d = np.linalg.norm(
        system.positions[graph.src] - system.positions[graph.dst]
        + graph.shift @ system.cell,
        axis=1,
    )
    assert (d <= 6.1 + 1e-12).all()
    # self-images of each atom at distance 4 along each axis must be present
    self_edges = graph.src == graph.dst
    assert np.isclose(d[self_edges].min(), 4.0)


def test_cell_list_matches_brute_force():
    rng = np.random.default_rng(5)
    pos = rng.uniform(0, 30.0, size=(300, 3))
    cutoff = 4.0
    ii, jj = _pairs_brute(pos)
    d = np.linalg.norm(pos[ii] - pos[jj], axis=1)
    brute = {(a, b) for a, b, dd in zip(ii, jj, d) if dd <= cutoff}
    ci, cj = _pairs_cell_list(pos, cutoff)
    dc = np.linalg.norm(pos[ci] - pos[cj], axis=1)
    cl = {(a, b) for a, b, dd in zip(ci.tolist(), cj.tolist(), dc) if dd <= cutoff}
    assert cl == brute


def test_large_periodic_system_uses_binning_consistently():
    system = random_ionic_system(8, n_atoms=300, box=25.0, min_separation=0.3)
    graph = build_radius_graph(system, 4.0)
    # reference via brute-force minimum image
    pos, cell = system.positions, system.cell
    delta = pos[:, None] - pos[None, :]
    delta -= 25.0 * np.round(delta / 25.0)
    dist = np.linalg.norm(delta, axis=-1)
    np.fill_diagonal(dist, np.inf)
    expected = set(zip(*np.nonzero(dist <= 4.0)))
    assert set(zip(graph.src.tolist(), graph.dst.tolist())) == expected


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 1000))
def test_graph_edges_permutation_equivariant(seed):
    system = random_ionic_system(seed)
    perm = np.random.default_rng(seed + 1).permutation(system.n_atoms)
    permuted = system.replace(
        positions=system.positions[perm],
        species=system.species[perm],
        charges=system.charges[perm],
    )
    g1 = build_radius_graph(system, 4.0)
    g2 = build_radius_graph(permuted, 4.0)
    inv = np.argsort(perm)
    edges1 = set(zip(inv[g1.src].tolist(), inv[g1.dst].tolist()))
    edges2 = set(zip(g2.src.tolist(), g2.dst.tolist()))
    assert edges1 == edges2


def test_edges_sorted_deterministically():
    system = random_ionic_system(4)
    g1 = build_radius_graph(system, 4.5)
    g2 = build_radius_graph(system, 4.5)
    assert np.array_equal(g1.src, g2.src)
    assert np.array_equal(g1.dst, g2.dst)
    order = np.lexsort((g1.shift[:, 2], g1.shift[:, 1], g1.shift[:, 0],
                        g1.src, g1.dst))
    assert np.array_equal(order, np.arange(g1.n_edges))


def test_assignment_graph_minimum_image_distances():
    system = random_ionic_system(6)
    mesh = generate_mesh(system.cell, (3, 3, 3))
    graph = build_assignment_graph(system, mesh, 4.0)
    assert graph.n_edges > 0
    disp = (
        mesh.points[graph.mesh_index]
        - system.positions[graph.atom_index]
        + graph.shift @ system.cell
    )
    assert np.allclose(np.linalg.norm(disp, axis=1), graph.dist)
    assert (graph.dist <= 4.0).all()


def test_assignment_graph_atom_on_mesh_point():
    mesh = generate_mesh(np.eye(3) * 4.0, (2, 2, 2))
    system = AtomSystem(
        positions=mesh.points[:1].copy(),
        species=np.array([11]),
        charges=np.array([1.0]),
        cell=np.eye(3) * 4.0,
        pbc=(True, True, True),
    )
    graph = build_assignment_graph(system, mesh, 1.5)
    pair = (graph.mesh_index == 0) & (graph.atom_index == 0)
    assert pair.any()
    assert graph.dist[pair].min() == 0.0


def test_assignment_graph_warns_on_uncovered_atom(caplog):
    system = random_ionic_system(7)
    mesh = generate_mesh(system.cell, (1, 1, 1))
    with caplog.at_level("WARNING"):
        build_assignment_graph(system, mesh, 0.5)
    assert any("no mesh point" in rec.message for rec in caplog.records)


def test_cell_heights_cubic_and_sheared():
    assert np.allclose(cell_heights(np.eye(3) * 7.0), 7.0)
    sheared = np.array([[10.0, 0, 0], [5.0, 10.0, 0], [0, 0, 10.0]])
    heights = cell_heights(sheared)
    assert np.isclose(heights[1], 10.0 * 10.0 * 10.0 / np.linalg.norm(
        np.cross(sheared[2], sheared[0])
    ))
