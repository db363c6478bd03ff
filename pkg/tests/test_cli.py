"""End-to-end CLI tests: subcommand wiring, exit codes, config handling,
artifact layout, determinism, and truth-file access isolation."""

import builtins
import json
import os
import shutil

import pytest

from brainrecon import cli


def _tiny_config(root):
    return {
        "seed": 0,
        "paths": {
            "dataset_dir": os.path.join(root, "dataset"),
            "decoder_file": os.path.join(root, "decoder.json"),
            "encoder_file": os.path.join(root, "encoder.json"),
            "output_dir": os.path.join(root, "out"),
        },
        "generator": {"resolution": 16, "seed": 0},
        "world": {"n_train": 30, "n_test": 3, "voxels_per_roi": 24,
                  "noise_std": 0.5},
        "decoder": {"voxels_per_node": 16, "hidden_per_direction": 4,
                    "epochs": 2},
        "encoder": {"epochs": 2},
        # low threshold: a 2-epoch encoder has few voxels past 0.27
        "search": {"batch": 6, "iterations": 2, "topk": 4,
                   "threshold": -0.99},
        # large enough that every decoded coarse label has library entries
        "library": {"size": 300, "seed": 3},
    }


def _write_config(root, cfg=None):
    cfg = cfg or _tiny_config(root)
    path = os.path.join(root, "config.json")
    with open(path, "w") as f:
        json.dump(cfg, f)
    return path


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One trained tiny pipeline shared by the read-only CLI tests."""
    root = str(tmp_path_factory.mktemp("cli"))
    config = _write_config(root)
    for command in ("datagen", "train-decoder", "train-encoder",
                    "reconstruct"):
        assert cli.main([command, "--config", config]) == cli.EXIT_OK
    return root, config


# --------------------------------------------------------------------------
# Happy path
# --------------------------------------------------------------------------

def test_pipeline_artifacts(pipeline):
    root, _ = pipeline
    assert os.path.exists(os.path.join(root, "dataset", "meta.json"))
    assert os.path.exists(os.path.join(root, "dataset", "truth.json"))
    assert os.path.exists(os.path.join(root, "decoder.json"))
    assert os.path.exists(os.path.join(root, "encoder.json"))
    for sid in ("s0030", "s0031", "s0032"):
        rep = os.path.join(root, "out", sid, "report.json")
        assert os.path.exists(rep)
        with open(rep) as f:
            d = json.load(f)
        assert d["mode"] == "predicted"
        assert len(d["candidates"]) == 4
        assert "run_config" in d
        assert d["decoded_label"] is not None


def test_evaluate_outputs(pipeline):
    root, config = pipeline
    assert cli.main(["evaluate", "--config", config]) == cli.EXIT_OK
    out = os.path.join(root, "out")
    for name in ("metrics.json", "metrics.csv", "montage.png", "metrics.png"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "metrics.json")) as f:
        rep = json.load(f)
    assert len(rep["per_stimulus"]) == 3
    assert "config_echo" in rep
    assert "layer_corrs" in rep["aggregate"]


def test_compare_library_outputs(pipeline, capsys):
    root, config = pipeline
    assert cli.main(["compare-library", "--config", config]) == cli.EXIT_OK
    out = os.path.join(root, "out")
    for name in ("comparison.json", "comparison.csv", "comparison.png"):
        assert os.path.exists(os.path.join(out, name))
    with open(os.path.join(out, "comparison.json")) as f:
        comp = json.load(f)
    assert comp["n_targets"] == 3
    assert "generator better on" in capsys.readouterr().out


def test_gradcheck_passes(capsys):
    assert cli.main(["gradcheck"]) == cli.EXIT_OK
    out = capsys.readouterr().out
    assert "PASS" in out
    assert "FAIL" not in out


def test_reconstruct_targets_filter_and_modes(pipeline, tmp_path):
    root, _ = pipeline
    cfg = _tiny_config(root)
    cfg["paths"]["output_dir"] = str(tmp_path / "out-fixed")
    config = _write_config(str(tmp_path), cfg)
    rc = cli.main(["reconstruct", "--config", config, "--mode", "fixed:2",
                   "--targets", "s0031", "--topk", "2"])
    assert rc == cli.EXIT_OK
    listed = os.listdir(cfg["paths"]["output_dir"])
    assert listed == ["s0031"]
    with open(os.path.join(cfg["paths"]["output_dir"], "s0031",
                           "report.json")) as f:
        d = json.load(f)
    assert d["mode"] == "fixed"
    assert d["config"]["fixed_label"] == 2
    assert len(d["candidates"]) == 2


# --------------------------------------------------------------------------
# Truth-file access isolation
# --------------------------------------------------------------------------

def test_train_and_reconstruct_never_open_truth(pipeline, tmp_path,
                                                monkeypatch):
    root, _ = pipeline
    cfg = _tiny_config(root)
    cfg["paths"]["output_dir"] = str(tmp_path / "out-isolated")
    config = _write_config(str(tmp_path), cfg)

    opened = []
    real_open = builtins.open

    def spy(file, *args, **kwargs):
        opened.append(str(file))
        return real_open(file, *args, **kwargs)

    monkeypatch.setattr(builtins, "open", spy)
    for command in ("train-decoder", "train-encoder", "reconstruct"):
        assert cli.main([command, "--config", config]) == cli.EXIT_OK
    touched = [p for p in opened if "truth" in os.path.basename(p)]
    assert touched == []
    assert any(p.endswith("meta.json") for p in opened)   # spy was live


# --------------------------------------------------------------------------
# Exit codes and config validation
# --------------------------------------------------------------------------

def test_missing_encoder_file_exit_3(tmp_path, pipeline, capsys):
    root, _ = pipeline
    cfg = _tiny_config(root)
    cfg["paths"]["encoder_file"] = str(tmp_path / "nope.json")
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["reconstruct", "--config", config]) == cli.EXIT_INPUT
    assert "nope.json" in capsys.readouterr().err


def test_missing_dataset_exit_3(tmp_path):
    cfg = _tiny_config(str(tmp_path))
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["train-decoder", "--config", config]) == cli.EXIT_INPUT


def test_unknown_config_key_exit_2(tmp_path, capsys):
    cfg = _tiny_config(str(tmp_path))
    cfg["wrold"] = {}
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["datagen", "--config", config]) == cli.EXIT_CONFIG
    assert "wrold" in capsys.readouterr().err


def test_unknown_nested_key_named_with_path(tmp_path, capsys):
    cfg = _tiny_config(str(tmp_path))
    cfg["search"]["batchsize"] = 4
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["datagen", "--config", config]) == cli.EXIT_CONFIG
    assert "search.batchsize" in capsys.readouterr().err


def test_invalid_json_config_exit_2(tmp_path):
    path = str(tmp_path / "bad.json")
    with open(path, "w") as f:
        f.write("{not json")
    assert cli.main(["datagen", "--config", path]) == cli.EXIT_CONFIG


def test_nonexistent_config_file_exit_3(tmp_path):
    assert cli.main(["datagen", "--config",
                     str(tmp_path / "absent.json")]) == cli.EXIT_INPUT


def test_bad_mode_flag_exit_2():
    assert cli.main(["reconstruct", "--mode", "telepathy"]) == cli.EXIT_CONFIG


def test_unknown_command_exit_2():
    assert cli.main(["transmogrify"]) == cli.EXIT_CONFIG


def test_gradcheck_failure_exit_4(monkeypatch):
    from brainrecon import gradsuite

    def rigged(seed=0):
        return [("rigged check", 1.0, 1e-6)]

    monkeypatch.setattr(gradsuite, "run_gradient_suite", rigged)
    assert cli.main(["gradcheck"]) == cli.EXIT_GRADCHECK


# --------------------------------------------------------------------------
# Config resolution
# --------------------------------------------------------------------------

def test_print_config_echoes_resolved_values(tmp_path, capsys):
    cfg = _tiny_config(str(tmp_path))
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["datagen", "--config", config, "--seed", "99",
                     "--print-config"]) == cli.EXIT_OK
    echoed = json.loads(capsys.readouterr().out)
    assert echoed["seed"] == 99
    assert echoed["generator"]["resolution"] == 16
    assert echoed["search"]["topk"] == 4


def test_seed_flag_overrides_config():
    cfg = cli.resolve_config(seed=1234)
    assert cfg["seed"] == 1234


def test_default_config_values():
    cfg = cli.resolve_config()
    assert cfg["search"]["batch"] == 64
    assert cfg["search"]["iterations"] == 25
    assert cfg["search"]["topk"] == 10
    assert cfg["search"]["threshold"] == 0.27
    assert cfg["world"]["n_train"] == 400
    assert cfg["world"]["n_test"] == 20
    assert cfg["decoder"]["voxels_per_node"] == 100
    assert cfg["decoder"]["hidden_per_direction"] == 16
    assert cfg["decoder"]["dropout_rate"] == 0.5
    assert cfg["generator"]["resolution"] == 64


# --------------------------------------------------------------------------
# Determinism of artifacts
# --------------------------------------------------------------------------

def _tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            with open(path, "rb") as f:
                out[os.path.relpath(path, root)] = f.read()
    return out


def test_datagen_repeat_byte_identical(tmp_path):
    cfg = _tiny_config(str(tmp_path))
    config = _write_config(str(tmp_path), cfg)
    assert cli.main(["datagen", "--config", config]) == cli.EXIT_OK
    first = _tree_bytes(cfg["paths"]["dataset_dir"])
    shutil.rmtree(cfg["paths"]["dataset_dir"])
    assert cli.main(["datagen", "--config", config]) == cli.EXIT_OK
    assert _tree_bytes(cfg["paths"]["dataset_dir"]) == first
