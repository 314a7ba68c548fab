"""Graph/mesh neural interatomic potential: short-range message passing on the
atom graph, a spectral-convolution block on the mesh, bidirectional
atom-mesh exchange, and energy/force decoding.

Energies are predicted in standardized label units and de-standardized with
constants stored alongside the weights. Forces are the negative gradient of
the energy with respect to atom positions; gradients flow through distances
and the molecular centroid but not through the canonical-frame rotation or
the mesh-point coordinates.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cellmesh import choose_mesh_counts, construct_cell, generate_mesh
from .geometry import AtomSystem, build_assignment_graph, build_radius_graph

CHECKPOINT_VERSION = 1


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters."""

    hidden_dim: int = 16
    num_layers: int = 1
    num_rbf: int = 16
    r_short: float = 4.0
    r_assign: float = 4.0
    mesh_counts: object = "auto"  # (Nx, Ny, Nz) or "auto"
    padding: float = 0.5
    lambda_e: float = 0.05
    lambda_f: float = 0.95
    seed: int = 0
    max_species: int = 100
    ablate_mesh: bool = False

    def __post_init__(self):
        if min(self.hidden_dim, self.num_layers, self.num_rbf) < 1:
            raise ModelError("hidden_dim, num_layers, num_rbf must be positive")
        if min(self.r_short, self.r_assign, self.padding) <= 0 and self.padding != 0:
            raise ModelError("cutoffs must be positive")
        if self.mesh_counts != "auto":
            self.mesh_counts = tuple(int(c) for c in self.mesh_counts)

    def resolve_counts(self, cell: np.ndarray) -> tuple[int, int, int]:
        if self.mesh_counts != "auto":
            return self.mesh_counts
        return choose_mesh_counts(cell, self.r_assign)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mesh_counts"] = (
            "auto" if self.mesh_counts == "auto" else list(self.mesh_counts)
        )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# weights


def _uniform(rng, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def _ln_params(prefix: str, dim: int, weights: dict):
    weights[f"{prefix}.ln_scale"] = Tensor(np.ones(dim), requires_grad=True)
    weights[f"{prefix}.ln_offset"] = Tensor(np.zeros(dim), requires_grad=True)


def _mlp2_params(prefix: str, rng, dim_in: int, dim_hidden: int, dim_out: int,
                 weights: dict, zero_last: bool = False):
    weights[f"{prefix}.w1"] = _uniform(rng, dim_in, (dim_in, dim_hidden))
    weights[f"{prefix}.b1"] = _uniform(rng, dim_in, (dim_hidden,))
    if zero_last:
        weights[f"{prefix}.w2"] = Tensor(
            np.zeros((dim_hidden, dim_out)), requires_grad=True
        )
        weights[f"{prefix}.b2"] = Tensor(np.zeros(dim_out), requires_grad=True)
    else:
        weights[f"{prefix}.w2"] = _uniform(rng, dim_hidden, (dim_hidden, dim_out))
        weights[f"{prefix}.b2"] = _uniform(rng, dim_hidden, (dim_out,))


def init_weights(config: ModelConfig, counts: tuple[int, int, int]) -> dict:
    """Deterministic weight dictionary for a fixed mesh-count allocation."""
    rng = np.random.default_rng(config.seed)
    c, k = config.hidden_dim, config.num_rbf
    w: dict[str, Tensor] = {}
    w["embed.table"] = Tensor(
        rng.uniform(-1.0, 1.0, size=(config.max_species, c)), requires_grad=True
    )
    for layer in range(config.num_layers):
        p = f"block{layer}"
        _ln_params(f"{p}.a2a", c, w)
        w[f"{p}.a2a.w_in"] = _uniform(rng, c, (c, c))
        w[f"{p}.a2a.b_in"] = _uniform(rng, c, (c,))
        w[f"{p}.a2a.w_filter"] = _uniform(rng, k, (k, c))
        _mlp2_params(f"{p}.a2a", rng, c, c, c, w)
        if not config.ablate_mesh:
            _ln_params(f"{p}.m2m", c, w)
            w[f"{p}.m2m.w_long"] = _uniform(rng, c, (c, c))
            w[f"{p}.m2m.g_re"] = Tensor(
                rng.normal(0.0, 1.0 / c, size=tuple(counts) + (c, c)),
                requires_grad=True,
            )
            w[f"{p}.m2m.g_im"] = Tensor(
                rng.normal(0.0, 1.0 / c, size=tuple(counts) + (c, c)),
                requires_grad=True,
            )
            w[f"{p}.a2m.w_filter"] = _uniform(rng, k, (k, c))
            _mlp2_params(f"{p}.a2m", rng, c, c, c, w)
            w[f"{p}.m2a.w_filter"] = _uniform(rng, k, (k, c))
            _mlp2_params(f"{p}.m2a", rng, c, c, c, w)
            _ln_params(f"{p}.upd_m", c, w)
            _ln_params(f"{p}.upd_h", c, w)
    _ln_params("dec_atom", c, w)
    _mlp2_params("dec_atom", rng, c, c, 1, w, zero_last=True)
    if not config.ablate_mesh:
        _ln_params("dec_mesh", c, w)
        _mlp2_params("dec_mesh", rng, c, c, 1, w, zero_last=True)
    return w


def n_parameters(weights: dict) -> int:
    return int(sum(t.size for t in weights.values()))


# ---------------------------------------------------------------------------
# batch preparation (constant geometry; built once per step)


@dataclass
class PreparedBatch:
    """Merged constant geometry for a list of structures."""

    n_structures: int
    n_atoms: int
    n_mesh: int
    counts: tuple[int, int, int]
    species_index: np.ndarray  # (N,)
    positions: np.ndarray  # (N, 3) raw input coordinates
    atom_struct: np.ndarray  # (N,) structure id per atom
    mesh_struct: np.ndarray  # (M,)
    atoms_per_struct: np.ndarray  # (B,)
    mesh_points: np.ndarray  # (M, 3)
    # short-range graph (global atom indices)
    src: np.ndarray
    dst: np.ndarray
    edge_offset: np.ndarray  # (E, 3) periodic shift @ cell
    # assignment graph (global indices)
    a_mesh: np.ndarray
    a_atom: np.ndarray
    a_offset: np.ndarray  # (Ea, 3)
    # non-periodic canonicalization constants per structure (None if periodic)
    frames: list  # per structure: None or (U, const_shift (3,))
    atom_slices: list  # per structure: (start, stop) into atom rows


def prepare_batch(systems: list[AtomSystem], config: ModelConfig) -> PreparedBatch:
    """Build graphs, mesh points, and canonicalization constants for a batch.

    All structures in a batch must resolve to the same mesh counts (the
    spectral weights are allocated per mode).
    """
    species, positions, atom_struct = [], [], []
    mesh_points, mesh_struct = [], []
    src, dst, edge_offset = [], [], []
    a_mesh, a_atom, a_offset = [], [], []
    frames, atom_slices = [], []
    counts = None
    atoms_per_struct = []
    n_off = m_off = 0
    for s_id, system in enumerate(systems):
        if system.species.max() >= config.max_species:
            raise ModelError(
                f"atomic number {int(system.species.max())} outside embedding table"
            )
        if system.is_periodic:
            work = system
            frames.append(None)
        else:
            _, work, frame = construct_cell(system, padding_d=config.padding)
            # differentiable canonical coords: (x - centroid) @ U.T + shift
            shift = work.positions - (
                (system.positions - system.positions.mean(axis=0)) @ frame.U.T
            )
            frames.append((frame.U, shift[0].copy()))
        c = config.resolve_counts(work.cell)
        if counts is None:
            counts = c
        elif c != counts:
            raise ModelError(f"mesh counts differ within batch: {c} vs {counts}")
        mesh = generate_mesh(work.cell, c)
        graph = build_radius_graph(work, config.r_short)
        bip = build_assignment_graph(work, mesh, config.r_assign)
        n = system.n_atoms
        species.append(system.species)
        positions.append(system.positions)
        atom_struct.append(np.full(n, s_id))
        atoms_per_struct.append(n)
        atom_slices.append((n_off, n_off + n))
        mesh_points.append(mesh.points)
        mesh_struct.append(np.full(mesh.n_points, s_id))
        src.append(graph.src + n_off)
        dst.append(graph.dst + n_off)
        edge_offset.append(graph.shift @ work.cell)
        a_mesh.append(bip.mesh_index + m_off)
        a_atom.append(bip.atom_index + n_off)
        a_offset.append(bip.shift @ work.cell)
        n_off += n
        m_off += mesh.n_points
    return PreparedBatch(
        n_structures=len(systems),
        n_atoms=n_off,
        n_mesh=m_off,
        counts=counts,
        species_index=np.concatenate(species),
        positions=np.concatenate(positions, axis=0),
        atom_struct=np.concatenate(atom_struct),
        mesh_struct=np.concatenate(mesh_struct),
        atoms_per_struct=np.array(atoms_per_struct),
        mesh_points=np.concatenate(mesh_points, axis=0),
        src=np.concatenate(src),
        dst=np.concatenate(dst),
        edge_offset=np.concatenate(edge_offset, axis=0),
        a_mesh=np.concatenate(a_mesh),
        a_atom=np.concatenate(a_atom),
        a_offset=np.concatenate(a_offset, axis=0),
        frames=frames,
        atom_slices=atom_slices,
    )


# ---------------------------------------------------------------------------
# differentiable building blocks


def rbf_features(dist: Tensor, cutoff: float, num_rbf: int) -> Tensor:
    """Gaussian radial basis (centers uniform on [0, cutoff], width = spacing)
    times the cosine envelope (cos(pi d / cutoff) + 1) / 2."""
    centers = np.linspace(0.0, cutoff, num_rbf)
    width = cutoff / max(num_rbf - 1, 1)
    d = ad.reshape(dist, (-1, 1))
    gauss = ad.exp(ad.mul(ad.square(ad.sub(d, centers)), -0.5 / width**2))
    envelope = ad.mul(ad.add(ad.cos(ad.mul(d, np.pi / cutoff)), 1.0), 0.5)
    return ad.mul(gauss, envelope)


def _ln(x, weights: dict, prefix: str) -> Tensor:
    return ad.layer_norm(
        x, weights[f"{prefix}.ln_scale"], weights[f"{prefix}.ln_offset"]
    )


def _mlp2(x, weights: dict, prefix: str) -> Tensor:
    hidden = ad.silu(ad.add(ad.matmul(x, weights[f"{prefix}.w1"]), weights[f"{prefix}.b1"]))
    return ad.add(ad.matmul(hidden, weights[f"{prefix}.w2"]), weights[f"{prefix}.b2"])


def embed(weights: dict, batch: PreparedBatch, f_assign: Tensor):
    """Initial atom states from the species table; initial mesh states as the
    mean of neighboring atom states over the assignment graph."""
    h0 = ad.gather(weights["embed.table"], batch.species_index)
    neigh = ad.scatter_add(ad.gather(h0, batch.a_atom), batch.a_mesh, batch.n_mesh)
    counts = np.bincount(batch.a_mesh, minlength=batch.n_mesh).astype(np.float64)
    m0 = ad.mul(neigh, (1.0 / np.maximum(counts, 1.0))[:, None])
    return h0, m0


def short_range_block(h, batch: PreparedBatch, f_short, weights: dict, layer: int):
    """Atom-to-atom continuous-filter convolution with pre-normalization."""
    p = f"block{layer}.a2a"
    x = _ln(h, weights, p)
    x = ad.add(ad.matmul(x, weights[f"{p}.w_in"]), weights[f"{p}.b_in"])
    filt = ad.matmul(f_short, weights[f"{p}.w_filter"])
    agg = ad.scatter_add(ad.mul(ad.gather(x, batch.src), filt), batch.dst, batch.n_atoms)
    return _mlp2(agg, weights, p)


def long_range_block(m, batch: PreparedBatch, weights: dict, layer: int):
    """Mesh-to-mesh spectral convolution plus a pointwise linear path.

    The per-mode complex channel mixing is Hermitian-symmetrized so the
    inverse transform is exactly real.
    """
    p = f"block{layer}.m2m"
    g_re, g_im = weights[f"{p}.g_re"], weights[f"{p}.g_im"]
    nx, ny, nz = batch.counts
    if g_re.shape[:3] != (nx, ny, nz):
        raise ModelError(
            f"mesh counts {batch.counts} do not match spectral weights {g_re.shape[:3]}"
        )
    c = m.shape[-1]
    b = batch.n_structures
    y = _ln(m, weights, p)
    pointwise = ad.matmul(y, weights[f"{p}.w_long"])

    grid = ad.reshape(y, (1, b, nx, ny, nz, c))
    pair = ad.concatenate([grid, Tensor(np.zeros((1, b, nx, ny, nz, c)))], axis=0)
    spec = ad.fft_pair(pair, axes=(1, 2, 3))
    z_re = ad.reshape(ad.narrow(spec, 0, 0, 1), (b, nx, ny, nz, 1, c))
    z_im = ad.reshape(ad.narrow(spec, 0, 1, 1), (b, nx, ny, nz, 1, c))
    # complex per-mode matvec via four real contractions
    out_re = ad.sub(
        ad.sum_(ad.mul(g_re, z_re), axis=-1), ad.sum_(ad.mul(g_im, z_im), axis=-1)
    )
    out_im = ad.add(
        ad.sum_(ad.mul(g_re, z_im), axis=-1), ad.sum_(ad.mul(g_im, z_re), axis=-1)
    )
    # Hermitian symmetrization: average with the conjugate at negated modes
    def negate(t):
        for axis, n in zip((1, 2, 3), (nx, ny, nz)):
            t = ad.permute_axis(t, (-np.arange(n)) % n, axis=axis)
        return t

    sym_re = ad.mul(ad.add(out_re, negate(out_re)), 0.5)
    sym_im = ad.mul(ad.sub(out_im, negate(out_im)), 0.5)
    pair2 = ad.concatenate(
        [
            ad.reshape(sym_re, (1, b, nx, ny, nz, c)),
            ad.reshape(sym_im, (1, b, nx, ny, nz, c)),
        ],
        axis=0,
    )
    spatial = ad.reshape(
        ad.narrow(ad.ifft_pair(pair2, axes=(1, 2, 3)), 0, 0, 1), (b * nx * ny * nz, c)
    )
    return ad.silu(ad.add(pointwise, spatial))


def atom_to_mesh(h_tilde, batch: PreparedBatch, f_assign, weights: dict, layer: int):
    """Gated aggregation of atom states onto mesh points, then an MLP."""
    p = f"block{layer}.a2m"
    filt = ad.matmul(f_assign, weights[f"{p}.w_filter"])
    agg = ad.scatter_add(
        ad.mul(ad.gather(h_tilde, batch.a_atom), filt), batch.a_mesh, batch.n_mesh
    )
    return _mlp2(agg, weights, p)


def mesh_to_atom(m_tilde, batch: PreparedBatch, f_assign, weights: dict, layer: int):
    """Back-interpolation of mesh states onto atoms, mirrored weights."""
    p = f"block{layer}.m2a"
    filt = ad.matmul(f_assign, weights[f"{p}.w_filter"])
    agg = ad.scatter_add(
        ad.mul(ad.gather(m_tilde, batch.a_mesh), filt), batch.a_atom, batch.n_atoms
    )
    return _mlp2(agg, weights, p)


def block_update(h, h_tilde, from_mesh, m, m_tilde, from_atoms, weights, layer):
    """Residual update: state + own-branch increment + normalized exchange."""
    h_new = ad.add(ad.add(h, h_tilde), _ln(from_mesh, weights, f"block{layer}.upd_h"))
    m_new = ad.add(ad.add(m, m_tilde), _ln(from_atoms, weights, f"block{layer}.upd_m"))
    return h_new, m_new


def decode(h, m, batch: PreparedBatch, weights: dict, ablate_mesh: bool):
    """Per-atom and per-mesh energy heads summed per structure."""
    e_atom = _mlp2(_ln(h, weights, "dec_atom"), weights, "dec_atom")
    e_short = ad.reshape(
        ad.scatter_add(e_atom, batch.atom_struct, batch.n_structures), (-1,)
    )
    if ablate_mesh:
        return e_short, ad.mul(e_short, 0.0)
    e_mesh = _mlp2(_ln(m, weights, "dec_mesh"), weights, "dec_mesh")
    e_long = ad.reshape(
        ad.scatter_add(e_mesh, batch.mesh_struct, batch.n_structures), (-1,)
    )
    return e_short, e_long


def forward_energy(weights: dict, config: ModelConfig, batch: PreparedBatch,
                   pos: Tensor):
    """Standardized-unit energies (B,) as a function of raw positions."""
    if any(f is not None for f in batch.frames):
        parts = []
        for s, (start, stop) in enumerate(batch.atom_slices):
            seg = ad.narrow(pos, 0, start, stop - start)
            frame = batch.frames[s]
            if frame is None:
                parts.append(seg)
            else:
                u, shift = frame
                centered = ad.sub(seg, ad.mean_(seg, axis=0, keepdims=True))
                parts.append(ad.add(ad.matmul(centered, Tensor(u.T)), shift))
        work = ad.concatenate(parts, axis=0) if len(parts) > 1 else parts[0]
    else:
        work = pos

    disp = ad.add(
        ad.sub(ad.gather(work, batch.src), ad.gather(work, batch.dst)),
        batch.edge_offset,
    )
    d_short = ad.l2_norm(disp)
    disp_a = ad.sub(
        Tensor(batch.mesh_points[batch.a_mesh] + batch.a_offset),
        ad.gather(work, batch.a_atom),
    )
    d_assign = ad.l2_norm(disp_a)
    f_short = rbf_features(d_short, config.r_short, config.num_rbf)
    f_assign = rbf_features(d_assign, config.r_assign, config.num_rbf)

    h, m = embed(weights, batch, f_assign)
    for layer in range(config.num_layers):
        h_tilde = short_range_block(h, batch, f_short, weights, layer)
        if config.ablate_mesh:
            h = ad.add(h, h_tilde)
            continue
        m_tilde = long_range_block(m, batch, weights, layer)
        from_atoms = atom_to_mesh(h_tilde, batch, f_assign, weights, layer)
        from_mesh = mesh_to_atom(m_tilde, batch, f_assign, weights, layer)
        h, m = block_update(h, h_tilde, from_mesh, m, m_tilde, from_atoms, weights, layer)
    e_short, e_long = decode(h, m, batch, weights, config.ablate_mesh)
    return ad.add(e_short, e_long)


def loss_terms(e_pred: Tensor, f_pred: Tensor, e_label: np.ndarray,
               f_label: np.ndarray, atoms_per_struct: np.ndarray,
               atom_struct: np.ndarray, lambda_e: float, lambda_f: float) -> Tensor:
    """Mean over structures of lambda_e |E - Ehat|^2 + lambda_f/(3N) sum ||F - Fhat||^2."""
    b = e_label.shape[0]
    e_term = ad.square(ad.sub(e_pred, e_label))
    diff = ad.sub(f_pred, f_label)
    per_atom = ad.sum_(ad.square(diff), axis=-1)
    f_struct = ad.reshape(
        ad.scatter_add(ad.reshape(per_atom, (-1, 1)), atom_struct, b), (-1,)
    )
    f_term = ad.mul(f_struct, 1.0 / (3.0 * atoms_per_struct))
    total = ad.add(ad.mul(e_term, lambda_e), ad.mul(f_term, lambda_f))
    return ad.mul(ad.sum_(total), 1.0 / b)


# ---------------------------------------------------------------------------
# user-facing model


class NeuralP3M:
    """Bundles config, weights, mesh-count allocation, and label scaling."""

    def __init__(self, config: ModelConfig, counts: tuple[int, int, int],
                 weights: dict | None = None, e_mean: float = 0.0,
                 e_std: float = 1.0):
        self.config = config
        self.counts = tuple(counts)
        self.weights = weights if weights is not None else init_weights(config, counts)
        self.e_mean = float(e_mean)
        self.e_std = float(e_std)

    @property
    def parameters(self) -> list[Tensor]:
        return [self.weights[k] for k in sorted(self.weights)]

    def n_parameters(self) -> int:
        return n_parameters(self.weights)

    def batch_energies(self, batch: PreparedBatch, with_forces: bool = True,
                       create_graph: bool = False):
        """(E_pred standardized Tensor (B,), F_pred Tensor (N,3) or None, pos)."""
        pos = Tensor(batch.positions, requires_grad=True)
        e_vec = forward_energy(self.weights, self.config, batch, pos)
        if not with_forces:
            return e_vec, None, pos
        grads = ad.backward(ad.sum_(e_vec), wrt=[pos], create_graph=True)
        f_pred = ad.mul(grads[id(pos)], -1.0)
        if not create_graph:
            f_pred = f_pred.detach()
        return e_vec, f_pred, pos

    def predict(self, system: AtomSystem):
        """Energy (label units) and forces (label units / Angstrom)."""
        batch = prepare_batch([system], self.config)
        if batch.counts != self.counts:
            raise ModelError(
                f"structure resolves to mesh counts {batch.counts}, "
                f"weights allocated for {self.counts}"
            )
        e_vec, f_pred, _ = self.batch_energies(batch)
        energy = float(e_vec.data[0]) * self.e_std + self.e_mean
        forces = f_pred.data * self.e_std
        return energy, forces

    # -- checkpoint I/O ------------------------------------------------------

    def save(self, path: str):
        arrays = {f"w::{k}": v.data for k, v in self.weights.items()}
        np.savez(
            path,
            version=np.array(CHECKPOINT_VERSION),
            config=np.array(json.dumps(self.config.to_dict())),
            counts=np.array(self.counts),
            e_mean=np.array(self.e_mean),
            e_std=np.array(self.e_std),
            **arrays,
        )

    @classmethod
    def load(cls, path: str) -> "NeuralP3M":
        with np.load(path, allow_pickle=False) as f:
            if int(f["version"]) != CHECKPOINT_VERSION:
                raise ModelError(f"unsupported checkpoint version {int(f['version'])}")
            config = ModelConfig.from_dict(json.loads(str(f["config"])))
            counts = tuple(int(c) for c in f["counts"])
            weights = {
                k[3:]: Tensor(f[k], requires_grad=True)
                for k in f.files
                if k.startswith("w::")
            }
            expected = set(init_weights(config, counts))
            if set(weights) != expected:
                raise ModelError("checkpoint weight names do not match config")
            return cls(
                config, counts, weights, float(f["e_mean"]), float(f["e_std"])
            )
