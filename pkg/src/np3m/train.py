"""Training and evaluation of the neural potential on labeled datasets.

Labels are standardized with constants from the training split (energies
shifted/scaled, forces scaled); the best-validation weights are kept. The
trajectory is fully determined by (seed, config): per-epoch shuffles are
derived from (seed, epoch), so training can resume from a saved state and
reproduce the unbroken run bit for bit.
"""
from __future__ import annotations

import configparser
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from .data import DatasetRecord, DataError
from .model import (
    ModelConfig,
    NeuralP3M,
    loss_terms,
    prepare_batch,
)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    """Optimization schedule and split settings (desk-scale defaults)."""

    epochs: int = 50
    batch_size: int = 8
    lr: float = 1e-3
    warmup_steps: int = 100
    plateau_patience: int = 10
    decay_factor: float = 0.8
    early_stop_patience: int = 60
    weight_decay: float = 0.0
    split_fractions: tuple = (0.8, 0.1, 0.1)
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if min(self.epochs, self.batch_size) < 1:
            raise TrainError("epochs and batch_size must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


def load_config(path: str, overrides: dict | None = None) -> TrainConfig:
    """TrainConfig from an INI-style file with [train], [model] sections.

    `overrides` (flat dict, e.g. from CLI flags) wins over file values.
    """
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise TrainError(f"cannot read config file {path}")
    train_kwargs: dict = {}
    model_kwargs: dict = {}
    if parser.has_section("train"):
        for key, value in parser.items("train"):
            train_kwargs[key] = _coerce(key, value, TrainConfig)
    if parser.has_section("model"):
        for key, value in parser.items("model"):
            model_kwargs[key] = _coerce(key, value, ModelConfig)
    if overrides:
        for key, value in overrides.items():
            if key in ModelConfig.__dataclass_fields__:
                model_kwargs[key] = value
            else:
                train_kwargs[key] = value
    train_kwargs["model"] = ModelConfig(**model_kwargs)
    return TrainConfig(**train_kwargs)


def _coerce(key: str, value: str, cls):
    fields = cls.__dataclass_fields__
    if key not in fields:
        raise TrainError(f"unknown config key {key!r} for {cls.__name__}")
    if key == "mesh_counts":
        return "auto" if value.strip() == "auto" else tuple(
            int(v) for v in value.replace(",", " ").split()
        )
    if key == "split_fractions":
        return tuple(float(v) for v in value.replace(",", " ").split())
    typ = fields[key].type
    if typ == "int":
        return int(value)
    if typ == "float":
        return float(value)
    if typ == "bool":
        return value.strip().lower() in ("1", "true", "yes", "on")
    return value


# ---------------------------------------------------------------------------


def standardization(records: list[DatasetRecord]) -> tuple[float, float]:
    energies = np.array([r.energy for r in records])
    mean = float(energies.mean())
    std = float(energies.std())
    return mean, max(std, 1e-12)


def _batches(n: int, batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _batch_loss(model: NeuralP3M, records: list[DatasetRecord],
                e_mean: float, e_std: float):
    """Loss tensor plus de-standardized absolute errors for metrics."""
    batch = prepare_batch([r.system for r in records], model.config)
    if batch.counts != model.counts:
        raise TrainError(
            f"batch resolves to mesh counts {batch.counts}, "
            f"weights allocated for {model.counts}"
        )
    e_label = (np.array([r.energy for r in records]) - e_mean) / e_std
    f_label = np.concatenate([r.forces for r in records], axis=0) / e_std
    e_pred, f_pred, _ = model.batch_energies(batch, create_graph=True)
    loss = loss_terms(
        e_pred, f_pred, e_label, f_label,
        batch.atoms_per_struct, batch.atom_struct,
        model.config.lambda_e, model.config.lambda_f,
    )
    e_err = np.abs(e_pred.data - e_label) * e_std
    f_err = np.abs(f_pred.data - f_label) * e_std
    return loss, e_err, f_err


def evaluate(model: NeuralP3M, records: list[DatasetRecord],
             batch_size: int = 32) -> dict:
    """Mean absolute errors in label units."""
    if not records:
        raise TrainError("cannot evaluate on an empty dataset")
    e_errs, f_errs = [], []
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        with_forces = True
        batch = prepare_batch([r.system for r in chunk], model.config)
        e_pred, f_pred, _ = model.batch_energies(batch, with_forces=with_forces)
        e_lab = np.array([r.energy for r in chunk])
        f_lab = np.concatenate([r.forces for r in chunk], axis=0)
        e_errs.append(np.abs(e_pred.data * model.e_std + model.e_mean - e_lab))
        f_errs.append(np.abs(f_pred.data * model.e_std - f_lab))
    return {
        "energy_mae": float(np.concatenate(e_errs).mean()),
        "force_mae": float(np.concatenate([f.reshape(-1) for f in f_errs]).mean()),
    }


@dataclass
class TrainResult:
    model: NeuralP3M  # best-validation weights
    metrics: list  # per-epoch dicts
    stopped_epoch: int
    best_val_mae: float


def train(train_records: list[DatasetRecord], val_records: list[DatasetRecord],
          config: TrainConfig, state_path: str | None = None,
          log=None) -> TrainResult:
    """Minimize the weighted energy/force loss; keep best-validation weights.

    With state_path set, optimizer/epoch state is saved there each epoch and
    reloaded on a later call, resuming the identical trajectory.
    """
    if not train_records or not val_records:
        raise TrainError("empty training or validation set")
    e_mean, e_std = standardization(train_records)
    batch0 = prepare_batch([train_records[0].system], config.model)
    model = NeuralP3M(config.model, batch0.counts, e_mean=e_mean, e_std=e_std)
    params = model.parameters
    opt = ad.AdamW(
        params,
        lr=config.lr,
        weight_decay=config.weight_decay,
        warmup_steps=config.warmup_steps,
        plateau_patience=config.plateau_patience,
        decay_factor=config.decay_factor,
    )
    start_epoch = 0
    metrics: list[dict] = []
    best = {"val": np.inf, "weights": None, "epoch": -1}
    bad_epochs = 0

    if state_path is not None:
        try:
            with np.load(state_path, allow_pickle=False) as f:
                start_epoch = int(f["epoch"]) + 1
                opt.load_state_dict(
                    {
                        "step_count": f["step_count"],
                        "lr_scale": f["lr_scale"],
                        "m": [f[f"m{i}"] for i in range(len(params))],
                        "v": [f[f"v{i}"] for i in range(len(params))],
                        "best_metric": f["best_metric"],
                        "bad_epochs": f["bad_epochs"],
                        "decay_events": f["decay_events"],
                    }
                )
                for i, p in enumerate(params):
                    p.data = np.array(f[f"p{i}"])
                best["val"] = float(f["best_val"])
                best["epoch"] = int(f["best_epoch"])
                best["weights"] = [np.array(f[f"b{i}"]) for i in range(len(params))]
                bad_epochs = int(f["bad_epochs_stop"])
                metrics = json.loads(str(f["metrics"]))
        except FileNotFoundError:
            pass

    stopped = config.epochs - 1
    for epoch in range(start_epoch, config.epochs):
        train_e, train_f = [], []
        for idx in _batches(len(train_records), config.batch_size, config.seed, epoch):
            chunk = [train_records[i] for i in idx]
            loss, e_err, f_err = _batch_loss(model, chunk, e_mean, e_std)
            if not np.isfinite(loss.data):
                raise TrainError(
                    f"training diverged: non-finite loss at epoch {epoch}"
                )
            ad.zero_grads(params)
            ad.backward(loss)
            opt.step()
            train_e.append(e_err)
            train_f.append(f_err.reshape(-1))
        val = evaluate(
            NeuralP3M(config.model, model.counts, model.weights, e_mean, e_std),
            val_records,
        )
        row = {
            "epoch": epoch,
            "lr": opt.lr,
            "train_energy_mae": float(np.concatenate(train_e).mean()),
            "train_force_mae": float(np.concatenate(train_f).mean()),
            "val_energy_mae": val["energy_mae"],
            "val_force_mae": val["force_mae"],
            "lr_decayed": False,
        }
        row["lr_decayed"] = opt.epoch_end(val["energy_mae"])
        if val["energy_mae"] < best["val"] - 1e-15:
            best = {
                "val": val["energy_mae"],
                "weights": [p.data.copy() for p in params],
                "epoch": epoch,
            }
            bad_epochs = 0
        else:
            bad_epochs += 1
        metrics.append(row)
        if log is not None:
            log(row)
        if state_path is not None:
            _save_state(state_path, epoch, opt, params, best, bad_epochs, metrics)
        if bad_epochs >= config.early_stop_patience:
            stopped = epoch
            break
        stopped = epoch

    if best["weights"] is not None:
        for p, w in zip(params, best["weights"]):
            p.data = w.copy()
    return TrainResult(model, metrics, stopped, best["val"])


def _save_state(path, epoch, opt, params, best, bad_epochs, metrics):
    state = opt.state_dict()
    arrays = {
        "epoch": np.array(epoch),
        "step_count": np.array(state["step_count"]),
        "lr_scale": np.array(state["lr_scale"]),
        "best_metric": np.array(state["best_metric"]),
        "bad_epochs": np.array(state["bad_epochs"]),
        "decay_events": np.array(state["decay_events"]),
        "best_val": np.array(best["val"]),
        "best_epoch": np.array(best["epoch"]),
        "bad_epochs_stop": np.array(bad_epochs),
        "metrics": np.array(json.dumps(metrics)),
    }
    for i, (p, m, v) in enumerate(zip(params, state["m"], state["v"])):
        arrays[f"p{i}"] = p.data
        arrays[f"m{i}"] = m
        arrays[f"v{i}"] = v
    for i, w in enumerate(best["weights"] if best["weights"] is not None else
                          [p.data for p in params]):
        arrays[f"b{i}"] = w
    np.savez(path, **arrays)
