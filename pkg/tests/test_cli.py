"""End-to-end command-line flows: data generation, training, evaluation,
hallucination, gradient checking, cost accounting, exit codes."""

import hashlib
import json

import numpy as np
import pytest

from monet.cells import CellConfig, Hallucinator, flops_per_step
from monet.cli import main
from monet.data import read_dataset

TASK = dict(n_classes=3, seq_len=8, d_x=6, d_s=4, n_train=24, n_val=9,
            noise_sigma=0.05, seed=1)


def run(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def last_json(out):
    return json.loads(out.strip().splitlines()[-1])


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    """One trained experiment shared by the evaluation-side tests."""
    root = tmp_path_factory.mktemp("exp")
    config = {"task": TASK,
              "cell": {"family": "monet", "d_x": 6, "d_s": 4, "layers": 2},
              "train": {"lr": 3e-3, "max_epochs": 3, "batch_size": 8, "seed": 0},
              "loss": {"alpha": 10.0},
              "out_dir": str(root / "run"),
              "seed": 0}
    cfg_path = write_json(root / "config.json", config)
    code = main(["train", "--config", cfg_path])
    assert code == 0
    return root


# -- gen-data ----------------------------------------------------------------

def test_gen_data_writes_files_with_matching_manifests(tmp_path, capsys):
    spec_path = write_json(tmp_path / "spec.json", TASK)
    code, out, _ = run(capsys, "gen-data", "--spec", spec_path,
                       "--out", str(tmp_path / "d"))
    assert code == 0
    summary = last_json(out)
    assert summary["n_train"] == 24 and summary["n_val"] == 9
    for name in ("train", "val"):
        data = (tmp_path / "d" / f"{name}.mofe").read_bytes()
        manifest = json.loads((tmp_path / "d" / f"{name}.manifest.json").read_text())
        assert manifest["sha256"] == hashlib.sha256(data).hexdigest()
        assert manifest["spec"]["seed"] == TASK["seed"]


def test_gen_data_rerun_gives_identical_checksums(tmp_path, capsys):
    spec_path = write_json(tmp_path / "spec.json", TASK)
    sums = []
    for sub in ("a", "b"):
        code, _, _ = run(capsys, "gen-data", "--spec", spec_path,
                         "--out", str(tmp_path / sub))
        assert code == 0
        manifest = json.loads((tmp_path / sub / "train.manifest.json").read_text())
        sums.append(manifest["sha256"])
    assert sums[0] == sums[1]


def test_gen_data_invalid_spec_names_the_field(tmp_path, capsys):
    spec_path = write_json(tmp_path / "spec.json", dict(TASK, n_classes=0))
    code, _, err = run(capsys, "gen-data", "--spec", spec_path,
                       "--out", str(tmp_path / "d"))
    assert code == 2
    assert "n_classes" in err


def test_gen_data_unknown_key_rejected(tmp_path, capsys):
    spec_path = write_json(tmp_path / "spec.json", dict(TASK, n_clases=4))
    code, _, err = run(capsys, "gen-data", "--spec", spec_path,
                       "--out", str(tmp_path / "d"))
    assert code == 2
    assert "n_clases" in err


def test_malformed_json_is_invalid_input(tmp_path, capsys):
    bad = tmp_path / "spec.json"
    bad.write_text("{not json")
    code, _, err = run(capsys, "gen-data", "--spec", str(bad),
                       "--out", str(tmp_path / "d"))
    assert code == 2
    assert "JSON" in err


# -- train -------------------------------------------------------------------

def test_train_writes_artifacts(trained_dir):
    run_dir = trained_dir / "run"
    for name in ("checkpoint.monw", "report.json", "teacher.json",
                 "appearance.json", "train.mofe", "val.mofe"):
        assert (run_dir / name).exists(), name
    report = json.loads((run_dir / "report.json").read_text())
    assert len(report["epochs"]) == 3
    assert set(report["epochs"][0]) == {"epoch", "lr", "train_loss", "val_mse",
                                        "val_top1"}


def test_eval_reproduces_reported_validation_numbers(trained_dir, capsys):
    run_dir = trained_dir / "run"
    report = json.loads((run_dir / "report.json").read_text())
    code, out, _ = run(capsys, "eval",
                       "--checkpoint", str(run_dir / "checkpoint.monw"),
                       "--data", str(run_dir / "val.mofe"),
                       "--teacher", str(run_dir / "teacher.json"))
    assert code == 0
    result = last_json(out)
    assert result["val_mse"] == report["best_val_mse"]
    best = report["epochs"][report["best_epoch"]]
    assert result["val_top1"] == best["val_top1"]


def test_eval_fused_path_and_csv(trained_dir, capsys, tmp_path):
    run_dir = trained_dir / "run"
    csv_path = tmp_path / "preds.csv"
    code, out, _ = run(capsys, "eval",
                       "--checkpoint", str(run_dir / "checkpoint.monw"),
                       "--data", str(run_dir / "val.mofe"),
                       "--teacher", str(run_dir / "teacher.json"),
                       "--appearance", str(run_dir / "appearance.json"),
                       "--csv", str(csv_path))
    assert code == 0
    result = last_json(out)
    for key in ("top1_flow", "top1_appearance", "top1_fused"):
        assert 0.0 <= result[key] <= 1.0
    lines = csv_path.read_text().strip().splitlines()
    assert lines[0] == "example_id,label,top1,prob_0,prob_1,prob_2"
    assert len(lines) == 1 + 9


def test_hallucinate_then_eval_matches_direct_fused_path(trained_dir, capsys, tmp_path):
    run_dir = trained_dir / "run"
    halluc_path = tmp_path / "halluc.mofe"
    code, _, _ = run(capsys, "hallucinate",
                     "--checkpoint", str(run_dir / "checkpoint.monw"),
                     "--data", str(run_dir / "val.mofe"),
                     "--out", str(halluc_path))
    assert code == 0

    flags = ["--teacher", str(run_dir / "teacher.json"),
             "--appearance", str(run_dir / "appearance.json")]
    code, out, _ = run(capsys, "eval", "--checkpoint", str(run_dir / "checkpoint.monw"),
                       "--data", str(run_dir / "val.mofe"), *flags)
    assert code == 0
    direct = last_json(out)
    code, out, _ = run(capsys, "eval", "--checkpoint", str(run_dir / "checkpoint.monw"),
                       "--data", str(halluc_path), *flags)
    assert code == 0
    via_file = last_json(out)
    # the written file carries the same f32 features eval classifies in memory
    assert abs(via_file["top1_flow"] - direct["top1_flow"]) < 1e-9
    assert abs(via_file["top1_fused"] - direct["top1_fused"]) < 1e-9
    # the model reproduces its own stored output up to file precision
    assert via_file["val_mse"] < 1e-12


def test_train_epochs_zero_checkpoint_equals_initialization(trained_dir, capsys, tmp_path):
    config = {"task": TASK,
              "cell": {"family": "monet", "d_x": 6, "d_s": 4, "layers": 2},
              "train": {"lr": 3e-3, "max_epochs": 3, "batch_size": 8, "seed": 0},
              "loss": {"alpha": 0.0},
              "out_dir": str(tmp_path / "run0"),
              "seed": 5}
    cfg_path = write_json(tmp_path / "config.json", config)
    code, out, _ = run(capsys, "train", "--config", cfg_path, "--epochs", "0")
    assert code == 0
    assert last_json(out)["epochs_run"] == 0
    loaded = Hallucinator.load(str(tmp_path / "run0" / "checkpoint.monw"))
    fresh = Hallucinator.build(CellConfig(family="monet", d_x=6, d_s=4, layers=2),
                               np.random.default_rng(5))
    for a, b in zip(loaded.tensors(), fresh.tensors()):
        assert np.array_equal(a.data, b.data)


def test_train_rejects_cell_task_dim_mismatch(tmp_path, capsys):
    config = {"task": TASK,
              "cell": {"family": "monet", "d_x": 6, "d_s": 5},
              "out_dir": str(tmp_path / "run")}
    cfg_path = write_json(tmp_path / "config.json", config)
    code, _, err = run(capsys, "train", "--config", cfg_path)
    assert code == 2
    assert "does not match task d_s" in err


# -- eval / hallucinate error paths -----------------------------------------

def test_eval_missing_checkpoint_is_invalid_input(trained_dir, capsys, tmp_path):
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "none.monw"),
                       "--data", str(trained_dir / "run" / "val.mofe"))
    assert code == 2
    assert "not found" in err


def test_eval_dimension_mismatch_is_runtime_failure(trained_dir, capsys, tmp_path):
    wide = dict(TASK, d_s=5)
    spec_path = write_json(tmp_path / "spec.json", wide)
    code, _, _ = run(capsys, "gen-data", "--spec", spec_path,
                     "--out", str(tmp_path / "d"))
    assert code == 0
    code, _, err = run(capsys, "eval",
                       "--checkpoint", str(trained_dir / "run" / "checkpoint.monw"),
                       "--data", str(tmp_path / "d" / "val.mofe"))
    assert code == 1
    assert "checkpoint expects" in err


def test_hallucinate_output_preserves_ids_and_appearance(trained_dir, capsys, tmp_path):
    run_dir = trained_dir / "run"
    out_path = tmp_path / "h.mofe"
    code, out, _ = run(capsys, "hallucinate",
                       "--checkpoint", str(run_dir / "checkpoint.monw"),
                       "--data", str(run_dir / "val.mofe"),
                       "--out", str(out_path))
    assert code == 0
    assert last_json(out)["n_records"] == 9
    source = read_dataset(str(run_dir / "val.mofe"))
    produced = read_dataset(str(out_path))
    for s, p in zip(source, produced):
        assert p.id == s.id and p.label == s.label
        assert np.array_equal(p.appearance, s.appearance)
        assert not np.array_equal(p.flow_target, s.flow_target)


# -- gradcheck ---------------------------------------------------------------

def test_gradcheck_passes_for_gru(capsys):
    code, out, _ = run(capsys, "gradcheck", "--family", "gru", "--trials", "3")
    assert code == 0
    assert "PASS" in out


def test_gradcheck_sweeps_expansion_depths(capsys):
    code, out, _ = run(capsys, "gradcheck", "--family", "monet",
                       "--trials", "2", "--layers", "1", "3")
    assert code == 0
    assert out.count("PASS") == 2


def test_gradcheck_unknown_family_is_invalid_input(capsys):
    code, _, err = run(capsys, "gradcheck", "--family", "transformer")
    assert code == 2
    assert "unknown family" in err


def test_gradcheck_detects_corrupted_backward_rule(capsys, monkeypatch):
    from monet import tensor as tensor_mod

    original = tensor_mod.BACKWARD_RULES["sigmoid"]

    def wrong_rule(node, grad):
        correct = original(node, grad)
        return [g * 1.01 if g is not None else None for g in correct]

    monkeypatch.setitem(tensor_mod.BACKWARD_RULES, "sigmoid", wrong_rule)
    code, out, _ = run(capsys, "gradcheck", "--family", "gru", "--trials", "2")
    assert code == 1
    assert "FAIL" in out


# -- flops -------------------------------------------------------------------

def test_flops_gru_step_formula(tmp_path, capsys):
    d = 6
    cfg_path = write_json(tmp_path / "cell.json",
                          {"family": "gru", "d_x": d, "d_s": d})
    code, out, _ = run(capsys, "flops", "--config", cfg_path, "--seq-len", "10")
    assert code == 0
    rows = json.loads(out)
    assert rows["configured"]["per_step"]["total_madds"] == 6 * d * d + 3 * d
    assert rows["configured"]["per_step"]["activations"] > 0
    assert rows["matched_baseline"]["family"] == "monet"


def test_flops_monet_exceeds_gru_at_equal_dims():
    gru = flops_per_step(CellConfig(family="gru", d_x=6, d_s=6))
    unit = flops_per_step(CellConfig(family="monet", d_x=6, d_s=6))
    assert unit.total_madds > gru.total_madds


def test_flops_state_term_is_quadratic_in_width():
    narrow = flops_per_step(CellConfig(family="gru", d_x=6, d_s=6))
    wide = flops_per_step(CellConfig(family="gru", d_x=6, d_s=12))
    assert wide.madds_state == 4 * narrow.madds_state


# -- environment -------------------------------------------------------------

def test_thread_cap_env_is_validated(tmp_path, capsys, monkeypatch):
    d = 4
    cfg_path = write_json(tmp_path / "cell.json",
                          {"family": "gru", "d_x": d, "d_s": d})
    monkeypatch.setenv("MONET_THREADS", "abc")
    code, _, err = run(capsys, "flops", "--config", cfg_path)
    assert code == 2 and "MONET_THREADS" in err
    monkeypatch.setenv("MONET_THREADS", "0")
    code, _, err = run(capsys, "flops", "--config", cfg_path)
    assert code == 2
    monkeypatch.setenv("MONET_THREADS", "4")
    code, _, _ = run(capsys, "flops", "--config", cfg_path)
    assert code == 0
