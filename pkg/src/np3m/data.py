"""Synthetic datasets with classical-electrostatics labels, dataset files
(one JSON record per line), and extended-XYZ structure I/O."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .ewald import direct_coulomb, ewald_components, tune_params
from .geometry import AtomSystem

MIN_SEPARATION = 1.5  # Angstrom
_MAX_PLACEMENT_TRIES = 200
ORACLE_TOLERANCE = 1e-8

# species assigned by charge sign in synthetic data
POSITIVE_SPECIES = 11
NEGATIVE_SPECIES = 17

_SYMBOLS = [
    "X", "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg",
    "Al", "Si", "P", "S", "Cl", "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn",
    "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As", "Se", "Br", "Kr",
]
_NUMBERS = {s: z for z, s in enumerate(_SYMBOLS)}


class DataError(ValueError):
    pass


class ParseError(DataError):
    pass


def max_workers() -> int:
    """Worker cap from NP3M_THREADS (defaults to 1)."""
    raw = os.environ.get("NP3M_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise DataError(f"NP3M_THREADS must be an integer, got {raw!r}")


@dataclass
class DatasetRecord:
    """One labeled structure: geometry plus oracle energy/forces."""

    system: AtomSystem
    energy: float
    forces: np.ndarray
    provenance: dict

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=np.float64).reshape(-1, 3)
        if self.forces.shape[0] != self.system.n_atoms:
            raise DataError("forces shape does not match atom count")
        if not (np.isfinite(self.energy) and np.isfinite(self.forces).all()):
            raise DataError("non-finite labels")

    def to_json(self) -> str:
        sys = self.system
        payload = {
            "positions": sys.positions.tolist(),
            "numbers": sys.species.tolist(),
            "charges": None if sys.charges is None else sys.charges.tolist(),
            "cell": None if sys.cell is None else sys.cell.tolist(),
            "pbc": [bool(p) for p in sys.pbc],
            "energy": self.energy,
            "forces": self.forces.tolist(),
            "provenance": self.provenance,
        }
        return json.dumps(payload)

    @classmethod
    def from_json(cls, line: str) -> "DatasetRecord":
        d = json.loads(line)
        system = AtomSystem(
            positions=np.array(d["positions"], dtype=np.float64),
            species=np.array(d["numbers"], dtype=np.int64),
            charges=None if d["charges"] is None else np.array(d["charges"]),
            cell=None if d["cell"] is None else np.array(d["cell"]),
            pbc=tuple(d["pbc"]),
        )
        return cls(system, float(d["energy"]), np.array(d["forces"]), d["provenance"])


def save_dataset(records: list[DatasetRecord], path: str):
    with open(path, "w") as f:
        for rec in records:
            f.write(rec.to_json() + "\n")


def load_dataset(path: str) -> list[DatasetRecord]:
    records = []
    with open(path) as f:
        for i, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(DatasetRecord.from_json(line))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ParseError(f"{path}:{i}: bad dataset record: {exc}")
    return records


# ---------------------------------------------------------------------------
# synthetic generation


def _place_atoms(rng, n_atoms: int, box: float) -> np.ndarray:
    """Uniform positions with a minimum-separation rejection rule."""
    for _ in range(_MAX_PLACEMENT_TRIES):
        pos = rng.uniform(0.0, box, size=(n_atoms, 3))
        delta = pos[:, None] - pos[None, :]
        delta -= box * np.round(delta / box)  # clash check across images too
        dist = np.linalg.norm(delta, axis=-1)
        np.fill_diagonal(dist, np.inf)
        if dist.min() > MIN_SEPARATION:
            return pos
    raise DataError(
        f"packing too dense: {n_atoms} atoms at {MIN_SEPARATION} A separation "
        f"in a {box} A box"
    )


def make_structure(seed: int, index: int, n_atoms: int, box: float,
                   periodic: bool) -> AtomSystem:
    """Deterministic structure for (seed, index)."""
    rng = np.random.default_rng([seed, index])
    pos = _place_atoms(rng, n_atoms, box)
    charges = np.array([1.0, -1.0] * (n_atoms // 2))
    perm = rng.permutation(n_atoms)
    charges = charges[perm]
    species = np.where(charges > 0, POSITIVE_SPECIES, NEGATIVE_SPECIES)
    cell = np.eye(3) * box if periodic else None
    return AtomSystem(
        positions=pos, species=species, charges=charges, cell=cell,
        pbc=(periodic,) * 3,
    )


def label_structure(system: AtomSystem) -> DatasetRecord:
    """Classical-oracle energy/forces with converged parameters."""
    if system.is_periodic:
        params = tune_params(system, ORACLE_TOLERANCE)
        out = ewald_components(system, params)
        provenance = {
            "oracle": "ewald",
            "beta": params.beta,
            "r_cut": params.r_cut,
            "m_max": params.m_max,
        }
        return DatasetRecord(system, out.total, out.forces, provenance)
    energy, forces = direct_coulomb(system)
    return DatasetRecord(system, energy, forces, {"oracle": "direct"})


def generate_synthetic(n_structures: int, n_atoms: int, box_length: float,
                       mode: str = "periodic", seed: int = 0) -> list[DatasetRecord]:
    """Labeled random ionic structures; deterministic under (seed, index)."""
    if mode not in ("periodic", "open"):
        raise DataError(f"mode must be 'periodic' or 'open', got {mode!r}")
    if n_atoms < 2 or n_atoms % 2:
        raise DataError("n_atoms must be even and >= 2 for a neutral +-1 assignment")
    periodic = mode == "periodic"

    def build(index: int) -> DatasetRecord:
        return label_structure(make_structure(seed, index, n_atoms, box_length, periodic))

    workers = max_workers()
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(build, range(n_structures)))
    return [build(i) for i in range(n_structures)]


def split(records: list, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic disjoint (train, val, test) split by shuffled indices."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DataError("fractions must be three numbers summing to 1")
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = [records[i] for i in order[:n_train]]
    val = [records[i] for i in order[n_train:n_train + n_val]]
    test = [records[i] for i in order[n_train + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# extended XYZ


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_structure(system: AtomSystem, path: str):
    """Extended-XYZ writer: count line, key=value header, per-atom rows."""
    props = "species:S:1:pos:R:3"
    if system.charges is not None:
        props += ":charge:R:1"
    header = []
    if system.cell is not None:
        header.append(
            'Lattice="' + " ".join(_fmt(x) for x in system.cell.reshape(-1)) + '"'
        )
    header.append(f"Properties={props}")
    header.append('pbc="' + " ".join("T" if p else "F" for p in system.pbc) + '"')
    lines = [str(system.n_atoms), " ".join(header)]
    for i in range(system.n_atoms):
        z = int(system.species[i])
        sym = _SYMBOLS[z] if 0 < z < len(_SYMBOLS) else str(z)
        row = [sym] + [_fmt(x) for x in system.positions[i]]
        if system.charges is not None:
            row.append(_fmt(system.charges[i]))
        lines.append(" ".join(row))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _parse_header(line: str, lineno: int) -> dict:
    """Split a key=value header line, honoring double-quoted values."""
    out, i, n = {}, 0, len(line)
    while i < n:
        while i < n and line[i].isspace():
            i += 1
        if i >= n:
            break
        eq = line.find("=", i)
        if eq < 0:
            raise ParseError(f"line {lineno}: expected key=value, got {line[i:]!r}")
        key = line[i:eq]
        i = eq + 1
        if i < n and line[i] == '"':
            end = line.find('"', i + 1)
            if end < 0:
                raise ParseError(f"line {lineno}: unterminated quote in header")
            out[key] = line[i + 1:end]
            i = end + 1
        else:
            j = i
            while j < n and not line[j].isspace():
                j += 1
            out[key] = line[i:j]
            i = j
    return out


def parse_structure(path: str) -> AtomSystem:
    """Extended-XYZ reader matching write_structure; errors name the line."""
    with open(path) as f:
        lines = f.read().splitlines()
    if not lines:
        raise ParseError("line 1: empty file")
    try:
        count = int(lines[0].strip())
    except ValueError:
        raise ParseError(f"line 1: atom count expected, got {lines[0]!r}")
    if len(lines) < 2:
        raise ParseError("line 2: missing properties header")
    header = _parse_header(lines[1], 2)
    cell = None
    if "Lattice" in header:
        vals = header["Lattice"].split()
        if len(vals) != 9:
            raise ParseError("line 2: Lattice needs 9 numbers")
        cell = np.array([float(v) for v in vals]).reshape(3, 3)
    pbc = (False, False, False)
    if "pbc" in header:
        flags = header["pbc"].split()
        if len(flags) != 3 or any(f not in ("T", "F") for f in flags):
            raise ParseError("line 2: pbc must be three T/F flags")
        pbc = tuple(f == "T" for f in flags)
    elif cell is not None:
        pbc = (True, True, True)
    props = header.get("Properties", "species:S:1:pos:R:3")
    fields = props.split(":")
    if len(fields) % 3:
        raise ParseError("line 2: malformed Properties descriptor")
    columns = []  # (name, n_cols)
    for k in range(0, len(fields), 3):
        columns.append((fields[k], int(fields[k + 2])))
    n_cols = sum(c for _, c in columns)

    body = [ln for ln in lines[2:] if ln.strip()]
    if len(body) != count:
        raise ParseError(
            f"line 1: declared {count} atoms but found {len(body)} data rows"
        )
    species = np.zeros(count, dtype=np.int64)
    positions = np.zeros((count, 3))
    charges = np.full(count, np.nan)
    has_charge = any(name == "charge" for name, _ in columns)
    for i, ln in enumerate(body):
        lineno = 3 + i
        toks = ln.split()
        if len(toks) != n_cols:
            raise ParseError(
                f"line {lineno}: expected {n_cols} columns, found {len(toks)}"
            )
        col = 0
        for name, width in columns:
            vals = toks[col:col + width]
            col += width
            try:
                if name == "species":
                    v = vals[0]
                    if v in _NUMBERS:
                        species[i] = _NUMBERS[v]
                    else:
                        species[i] = int(v)
                elif name == "pos":
                    positions[i] = [float(v) for v in vals]
                elif name == "charge":
                    charges[i] = float(vals[0])
            except ValueError:
                raise ParseError(f"line {lineno}: bad value in column {name!r}")
    return AtomSystem(
        positions=positions,
        species=species,
        charges=charges if has_charge else None,
        cell=cell,
        pbc=pbc,
    )
