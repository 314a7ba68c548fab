"""End-to-end tests for the command-line interface."""
import numpy as np
import pytest

from np3m import generate_synthetic, save_dataset, write_structure
from np3m.cli import main

from conftest import random_ionic_system


@pytest.fixture
def structure_file(tmp_path):
    path = str(tmp_path / "s.xyz")
    write_structure(random_ionic_system(0), path)
    return path


def test_mesh_command_prints_points(structure_file, capsys):
    assert main(["mesh", "--input", structure_file, "--counts", "2 2 2"]) == 0
    out = capsys.readouterr().out
    assert "counts: 2 2 2" in out
    assert out.count("\n  ") == 3 + 8  # 3 cell rows + 8 mesh points


def test_ewald_command_auto_and_manual(structure_file, capsys):
    assert main(["ewald", "--input", structure_file, "--auto", "1e-8"]) == 0
    auto_total = [
        ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("total:")
    ][0]
    assert main(
        ["ewald", "--input", structure_file, "--beta", "0.9", "--rcut", "4.9",
         "--mmax", "12", "--forces"]
    ) == 0
    out = capsys.readouterr().out
    manual_total = [ln for ln in out.splitlines() if ln.startswith("total:")][0]
    assert "forces:" in out
    a = float(auto_total.split()[1])
    b = float(manual_total.split()[1])
    assert abs(a - b) < 1e-4


def test_ewald_command_requires_parameters(structure_file, capsys):
    assert main(["ewald", "--input", structure_file]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: ")
    assert err.count("\n") == 1


def test_p3m_command_close_to_ewald(structure_file, capsys):
    assert main(["ewald", "--input", structure_file, "--auto", "1e-8"]) == 0
    ref = float(
        [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("total:")][0].split()[1]
    )
    assert main(
        ["p3m", "--input", structure_file, "--mesh", "32 32 32", "--beta", "0.9",
         "--rcut", "4.9"]
    ) == 0
    got = float(
        [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("total:")][0].split()[1]
    )
    assert abs(got - ref) / abs(ref) < 1e-3


def test_missing_input_file_is_one_line_error(capsys):
    assert main(["ewald", "--input", "/nonexistent.xyz", "--auto", "1e-8"]) == 1
    err = capsys.readouterr().err
    assert err.startswith("error: FileNotFoundError")


def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "positions:" in out
    assert "max:" in out


def test_data_gen_train_eval_pipeline(tmp_path, capsys):
    data = str(tmp_path / "data.jsonl")
    assert main(
        ["data", "gen", "--n", "12", "--atoms", "6", "--box", "9.0",
         "--seed", "3", "--out", data]
    ) == 0
    assert "wrote 12 records" in capsys.readouterr().out

    config = tmp_path / "train.ini"
    config.write_text(
        "[train]\n"
        "epochs = 2\n"
        "batch_size = 4\n"
        "lr = 0.001\n"
        "split_fractions = 0.7, 0.15, 0.15\n"
        "[model]\n"
        "hidden_dim = 8\n"
        "num_rbf = 8\n"
        "mesh_counts = 2 2 2\n"
    )
    ckpt = str(tmp_path / "model.npz")
    metrics = str(tmp_path / "metrics.jsonl")
    assert main(
        ["train", "--config", str(config), "--data", data, "--out", ckpt,
         "--metrics", metrics]
    ) == 0
    out = capsys.readouterr().out
    assert "best val energy MAE" in out
    with open(metrics) as f:
        assert len(f.read().splitlines()) == 2

    assert main(["eval", "--checkpoint", ckpt, "--data", data]) == 0
    out = capsys.readouterr().out
    assert "energy_mae:" in out and "force_mae:" in out
