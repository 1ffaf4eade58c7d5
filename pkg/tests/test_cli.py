import json
import os
import subprocess
import sys

import pytest

from conftest import tiny_model_config
from dgsan import data as data_mod
from dgsan.cli import load_config, run_command
from dgsan.model import ModelConfig


def _tiny_config_file(path, **train):
    cfg = tiny_model_config().to_json()
    path.write_text(json.dumps({"model": cfg, "train": {"batch_size": 4, **train}}))
    return str(path)


def test_synth_writes_manifest_and_volumes(tmp_path, capsys):
    out = tmp_path / "d"
    assert run_command(["synth", "--out", str(out), "--cases", "10", "--seed", "7"]) == 0
    assert (out / "manifest.json").exists()
    assert len(list(out.glob("*.f32"))) == 20
    assert not list(out.glob("*.tmp"))


def test_train_requires_manifest(tmp_path, capsys):
    code = run_command(["train", "--config", "c.json", "--out", str(tmp_path / "o")])
    assert code == 1
    assert "--manifest" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["frobnicate"],
        ["synth", "--out", "x", "--cases", "1"],
        ["params", "--config", "/no/such/file.json"],
        ["gradcheck", "--op", "nope"],
        ["eval", "--checkpoint", "/no/ckpt", "--manifest", "/no/m.json", "--out", "o"],
    ],
)
def test_validation_errors_exit_1(argv, capsys):
    assert run_command(argv) == 1
    assert "error" in capsys.readouterr().err


def test_unknown_config_key(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"epochz": 3}}))
    assert run_command(["params", "--config", str(bad)]) == 1


def test_empty_config_is_default(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    model_cfg, _ = load_config(p)
    assert model_cfg == ModelConfig()


def test_params_default(tmp_path, capsys):
    p = tmp_path / "default.json"
    p.write_text("{}")
    assert run_command(["params", "--config", str(p)]) == 0
    line = capsys.readouterr().out.strip().splitlines()[-1]
    total = int(line.split()[1])
    assert 3.5e6 <= total <= 5.0e6
    assert line.endswith("(4.17M)")


def test_gradcheck_verb(capsys):
    assert run_command(["gradcheck", "--op", "classify_head", "--seed", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("classify_head") and "max_rel_err=" in out


def test_train_eval_round_trip(tmp_path, syn10, capsys):
    cfg = _tiny_config_file(tmp_path / "c.json", epochs=1)
    manifest = str(syn10.root / "manifest.json")
    run = tmp_path / "run"
    assert run_command(["train", "--manifest", manifest, "--config", cfg, "--out", str(run), "--seed", "2"]) == 0
    assert (run / "loss.csv").exists()
    for sub in ("e1", "e2"):
        assert run_command(["eval", "--checkpoint", str(run), "--manifest", manifest, "--out", str(tmp_path / sub)]) == 0
    # re-running eval is byte-identical
    assert (tmp_path / "e1/metrics.json").read_bytes() == (tmp_path / "e2/metrics.json").read_bytes()
    leftovers = [p for p in tmp_path.rglob("*") if p.name.endswith((".tmp", ".partial"))]
    assert not leftovers


def test_train_overrides(tmp_path, syn10):
    cfg = _tiny_config_file(tmp_path / "c.json", epochs=1)
    manifest = str(syn10.root / "manifest.json")
    run = tmp_path / "run"
    argv = ["train", "--manifest", manifest, "--config", cfg, "--out", str(run), "--scheme", "2", "--sequence", "CAB,SAB"]
    assert run_command(argv) == 0
    model = json.loads((run / "config.json").read_text())["model"]
    assert model["scheme"] == 2 and model["fusion"]["sequence"] == ["CAB", "SAB"]
    assert run_command(argv[:-2] + ["--sequence", "SAB,XAB"]) == 1
    assert run_command(argv[:6] + ["--out", str(tmp_path / "r2"), "--glfe", str(tmp_path / "nope")]) == 1


def test_pretrain_then_warm_train(tmp_path, syn10):
    cfg = _tiny_config_file(tmp_path / "c.json", epochs=1)
    manifest = str(syn10.root / "manifest.json")
    assert run_command(["pretrain", "--manifest", manifest, "--config", cfg, "--out", str(tmp_path / "pre")]) == 0
    argv = ["train", "--manifest", manifest, "--config", cfg, "--out", str(tmp_path / "run"), "--glfe", str(tmp_path / "pre")]
    assert run_command(argv) == 0
    assert json.loads((tmp_path / "run/config.json").read_text())["warm_start"]


def test_ablate_verb(tmp_path, syn10, capsys):
    cfg = _tiny_config_file(tmp_path / "c.json", epochs=1)
    manifest = str(syn10.root / "manifest.json")
    argv = ["ablate", "--manifest", manifest, "--config", cfg, "--variants", "full,no_GFF", "--out", str(tmp_path / "a")]
    assert run_command(argv) == 0
    assert list(json.loads((tmp_path / "a/ablation.json").read_text())) == ["full", "no_GFF"]
    assert run_command(argv[:-4] + ["--variants", "full,bogus", "--out", str(tmp_path / "b")]) == 1
    assert not (tmp_path / "b").exists()


def test_runtime_failure_exits_2(tmp_path, syn10, monkeypatch):
    cfg = _tiny_config_file(tmp_path / "c.json", epochs=1)

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr("dgsan.cli.train_dgsan", boom)
    argv = ["train", "--manifest", str(syn10.root / "manifest.json"), "--config", cfg, "--out", str(tmp_path / "r")]
    assert run_command(argv) == 2


def test_interrupted_write_leaves_no_partial_file(tmp_path, monkeypatch):
    target = tmp_path / "out.json"

    def interrupted(src, dst):
        raise KeyboardInterrupt

    monkeypatch.setattr(data_mod.os, "replace", interrupted)
    with pytest.raises(KeyboardInterrupt):
        data_mod.write_atomic(target, b"{}")
    assert list(tmp_path.iterdir()) == []


def test_module_entry_point(tmp_path):
    p = tmp_path / "c.json"
    p.write_text("{}")
    res = subprocess.run(
        [sys.executable, "-m", "dgsan", "params", "--config", str(p)],
        capture_output=True, text=True, env={**os.environ, "PYTHONWARNINGS": "ignore"},
    )
    assert res.returncode == 0 and res.stdout.startswith("total ")
