"""Command-line interface: mesh/ewald/p3m inspection, gradient checking,
dataset generation, training, and evaluation."""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .cellmesh import choose_mesh_counts, construct_cell, generate_mesh
from .data import generate_synthetic, load_dataset, parse_structure, save_dataset, split
from .ewald import EwaldParams, ewald_components, tune_params
from .geometry import AtomSystem
from .model import ModelConfig, NeuralP3M, prepare_batch, forward_energy
from .p3m import ChargeAssignment, p3m_total
from .train import evaluate, load_config, train


def _load_system(path: str) -> AtomSystem:
    return parse_structure(path)


def _counts_arg(raw: str):
    return tuple(int(v) for v in raw.replace(",", " ").split())


def cmd_mesh(args) -> int:
    system = _load_system(args.input)
    if system.is_periodic:
        cell = system.cell
    else:
        cell, system, _ = construct_cell(system, padding_d=args.padding)
    counts = (
        _counts_arg(args.counts) if args.counts else choose_mesh_counts(cell, args.rassign)
    )
    mesh = generate_mesh(cell, counts)
    print("cell:")
    for row in mesh.cell:
        print("  " + " ".join(f"{x:.10g}" for x in row))
    print(f"counts: {mesh.counts[0]} {mesh.counts[1]} {mesh.counts[2]}")
    print("points:")
    for p in mesh.points:
        print("  " + " ".join(f"{x:.10g}" for x in p))
    return 0


def _breakdown_params(args, system) -> EwaldParams:
    if args.auto is not None:
        return tune_params(system, args.auto)
    if args.beta is None or args.rcut is None:
        raise ValueError("either --auto TOL or both --beta and --rcut are required")
    return EwaldParams(beta=args.beta, r_cut=args.rcut, m_max=args.mmax)


def _print_breakdown(out, forces: bool):
    print(f"e_short: {out.e_short:.12f}")
    print(f"e_long: {out.e_long:.12f}")
    print(f"e_self: {out.e_self:.12f}")
    print(f"total: {out.total:.12f}")
    if forces:
        print("forces:")
        for f in out.forces:
            print("  " + " ".join(f"{x:.12f}" for x in f))


def cmd_ewald(args) -> int:
    system = _load_system(args.input)
    params = _breakdown_params(args, system)
    _print_breakdown(ewald_components(system, params), args.forces)
    return 0


def cmd_p3m(args) -> int:
    system = _load_system(args.input)
    params = EwaldParams(beta=args.beta, r_cut=args.rcut, m_max=1)
    out = p3m_total(
        system, params, _counts_arg(args.mesh), ChargeAssignment(order=args.order)
    )
    _print_breakdown(out, args.forces)
    return 0


def cmd_gradcheck(args) -> int:
    from .data import make_structure

    system = make_structure(args.seed, 0, 6, 8.0, True)
    config = ModelConfig(
        hidden_dim=8, num_layers=1, num_rbf=8, r_short=4.0, r_assign=4.0,
        mesh_counts=(2, 2, 2), seed=args.seed,
    )
    model = NeuralP3M(config, (2, 2, 2))
    rng = np.random.default_rng(args.seed + 1)
    for name, t in model.weights.items():
        if ".w2" in name or ".b2" in name:
            t.data = rng.normal(0.0, 0.3, size=t.shape)
    batch = prepare_batch([system], config)

    def energy() -> float:
        with ad.no_grad():
            return float(
                forward_energy(model.weights, config, batch, Tensor(batch.positions)).data[0]
            )

    pos = Tensor(batch.positions, requires_grad=True)
    grads = ad.backward(ad.sum_(forward_energy(model.weights, config, batch, pos)))
    step = 1e-4
    worst = 0.0

    def group_error(array: np.ndarray, analytic: np.ndarray, poke) -> float:
        fd = np.zeros(array.size)
        flat = array.reshape(-1)
        for i in range(array.size):
            orig = flat[i]
            flat[i] = orig + step
            e1 = energy()
            flat[i] = orig - step
            e2 = energy()
            flat[i] = orig
            fd[i] = (e1 - e2) / (2 * step)
        return float(
            np.linalg.norm(fd - analytic.reshape(-1))
            / max(np.linalg.norm(fd), 1e-10)
        )

    err = group_error(batch.positions, grads[id(pos)].data, None)
    worst = max(worst, err)
    print(f"positions: {err:.3e}")
    for name in sorted(model.weights):
        t = model.weights[name]
        g = grads.get(id(t))
        analytic = np.zeros(t.shape) if g is None else g.data
        err = group_error(t.data, analytic, None)
        worst = max(worst, err)
        print(f"{name}: {err:.3e}")
    print(f"max: {worst:.3e}")
    return 0 if worst < 1e-5 else 1


def cmd_data_gen(args) -> int:
    records = generate_synthetic(args.n, args.atoms, args.box, args.mode, args.seed)
    save_dataset(records, args.out)
    print(f"wrote {len(records)} records to {args.out}")
    return 0


def cmd_train(args) -> int:
    overrides = {}
    if args.ablate_mesh:
        overrides["ablate_mesh"] = True
    config = load_config(args.config, overrides)
    records = load_dataset(args.data)
    tr, va, _ = split(records, config.split_fractions, config.seed)
    result = train(tr, va, config, log=lambda row: print(json.dumps(row)))
    result.model.save(args.out)
    if args.metrics:
        with open(args.metrics, "w") as f:
            for row in result.metrics:
                f.write(json.dumps(row) + "\n")
    print(f"best val energy MAE {result.best_val_mae:.6g}; checkpoint at {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = NeuralP3M.load(args.checkpoint)
    records = load_dataset(args.data)
    out = evaluate(model, records)
    print(f"energy_mae: {out['energy_mae']:.10g}")
    print(f"force_mae: {out['force_mae']:.10g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="np3m")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mesh", help="print cell matrix and mesh points")
    p.add_argument("--input", required=True)
    p.add_argument("--padding", type=float, default=0.5)
    p.add_argument("--rassign", type=float, default=4.0)
    p.add_argument("--counts", default=None)
    p.set_defaults(func=cmd_mesh)

    p = sub.add_parser("ewald", help="Ewald energy breakdown")
    p.add_argument("--input", required=True)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--rcut", type=float, default=None)
    p.add_argument("--mmax", type=int, default=8)
    p.add_argument("--auto", type=float, default=None, metavar="TOL")
    p.add_argument("--forces", action="store_true")
    p.set_defaults(func=cmd_ewald)

    p = sub.add_parser("p3m", help="mesh-accelerated energy breakdown")
    p.add_argument("--input", required=True)
    p.add_argument("--mesh", required=True)
    p.add_argument("--order", type=int, choices=(1, 2, 3), default=3)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--rcut", type=float, required=True)
    p.add_argument("--forces", action="store_true")
    p.set_defaults(func=cmd_p3m)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p_data = sub.add_parser("data", help="dataset commands")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p = data_sub.add_parser("gen", help="generate a labeled synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--atoms", type=int, required=True)
    p.add_argument("--box", type=float, required=True)
    p.add_argument("--mode", choices=("periodic", "open"), default="periodic")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_data_gen)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="checkpoint.npz")
    p.add_argument("--metrics", default=None)
    p.add_argument("--ablate-mesh", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # single-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
