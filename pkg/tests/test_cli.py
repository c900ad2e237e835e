import csv
import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

from corella.checkpoint import (
    CorruptCheckpoint, VersionMismatch, collect, load_checkpoint, read_manifest, save_checkpoint,
)
from corella.cli import main
from corella.config import ConfigError, RunConfig, apply_override, load_config, to_dict
from op_cases import tiny_models

ROOT = Path(__file__).resolve().parents[1]
SMALL = [
    "--set", "synthetic.n=1500", "--set", "synthetic.n_users=40", "--set", "synthetic.n_items=25",
    "--set", "model.crm.d_emb=4", "--set", "model.crm.deep=[16]",
    "--set", "model.llm.d_model=16", "--set", "model.llm.d_ff=32", "--set", "model.llm.n_heads=2",
    "--set", "training.stage1.epochs=1", "--set", "training.stage2.epochs=1",
    "--set", "training.stage3.epochs=1", "--set", "training.stage2.subset_count=100",
    "--set", "training.stage3.subset_count=100",
]


# --- checkpoints ---------------------------------------------------------------

def test_checkpoint_round_trip_bitwise(tmp_path):
    crm, llm, heads = tiny_models()
    arrays = collect(crm, llm, heads)
    m = save_checkpoint(tmp_path / "m.ckpt", arrays, seed=7, meta={"k": 1})
    back, manifest = load_checkpoint(tmp_path / "m.ckpt")
    assert set(back) == set(arrays)
    for k in arrays:
        assert back[k].tobytes() == arrays[k].tobytes() and back[k].shape == arrays[k].shape
    assert manifest["content_sha256"] == m["content_sha256"] and manifest["seed"] == 7
    entry = manifest["arrays"]["crm.head.W"]
    assert entry["dtype"] == "float64" and entry["length"] == 8 * np.prod(entry["shape"])


def test_checkpoint_prefix_load(tmp_path):
    crm, llm, heads = tiny_models()
    save_checkpoint(tmp_path / "m.ckpt", collect(crm, llm, heads))
    only, _ = load_checkpoint(tmp_path / "m.ckpt", prefix="crm.")
    assert only and all(k.startswith("crm.") for k in only)
    fresh, _, _ = tiny_models(seed=99)
    fresh.load_state(only)
    assert fresh.digest() == crm.digest()


def test_checkpoint_truncated_is_rejected(tmp_path):
    crm, _, _ = tiny_models()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, collect(crm))
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    flipped = bytearray(raw)
    flipped[-3] ^= 0xFF
    path.write_bytes(bytes(flipped))
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)
    path.write_bytes(b"garbage")
    with pytest.raises(CorruptCheckpoint):
        load_checkpoint(path)


def test_checkpoint_version_mismatch(tmp_path):
    crm, _, _ = tiny_models()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, collect(crm))
    manifest, start = read_manifest(path)
    manifest["format_version"] = 99
    head = json.dumps(manifest, sort_keys=True).encode()
    raw = path.read_bytes()
    path.write_bytes(raw[:8] + len(head).to_bytes(8, "little") + head + raw[start:])
    with pytest.raises(VersionMismatch):
        load_checkpoint(path)


def test_load_state_failure_exposes_nothing(tmp_path):
    crm, _, _ = tiny_models()
    before = crm.digest()
    with pytest.raises(KeyError):
        crm.load_state({"crm.head.W": np.zeros(crm.head_w.shape)})
    assert crm.digest() == before


# --- configuration -------------------------------------------------------------

def test_shipped_configs_load():
    cfg = load_config(ROOT / "configs" / "synthetic.yaml")
    assert cfg.dataset == "synthetic" and cfg.training.stage2.weights == (1.0, 1.0, 0.1)
    assert load_config(ROOT / "configs" / "movielens.yaml").dataset == "movielens"


def test_overrides_and_unknown_keys():
    cfg = load_config(None, ["router.rho=0.5", "model.crm.deep=[8, 4]", "seed=3"])
    assert cfg.router.rho == 0.5 and cfg.model.crm.deep == [8, 4] and cfg.seed == 3
    with pytest.raises(ConfigError, match="model.crm.width"):
        load_config(None, ["model.crm.width=3"])
    with pytest.raises(ConfigError):
        load_config(None, ["router.rho=high"])
    with pytest.raises(ConfigError):
        load_config(None, ["dataset=netflix"])
    with pytest.raises(ConfigError):
        load_config(None, ["training.stage2.weights=[1, 1, 0]"])
    with pytest.raises(ConfigError):
        apply_override({}, "novalue")


def test_resolved_config_round_trips():
    cfg = load_config(None, ["router.mode=absolute", "router.tau=0.4"])
    again = load_config(None, [])
    assert to_dict(again) == to_dict(RunConfig())
    tree = yaml.safe_load(yaml.safe_dump(to_dict(cfg)))
    from corella.config import from_dict
    assert to_dict(from_dict(tree)) == to_dict(cfg)


# --- commands ------------------------------------------------------------------

def _run(args, capsys):
    code = main(args)
    out, err = capsys.readouterr()
    return code, (json.loads(out) if out.strip() else None), err


def test_train_twice_identical_checkpoints(tmp_path, capsys):
    base = ["train", "--config", str(ROOT / "configs/synthetic.yaml"), "--quiet", *SMALL,
            "--set", "seed=42"]
    c1, r1, _ = _run(base + ["--out", str(tmp_path / "a")], capsys)
    c2, r2, _ = _run(base + ["--out", str(tmp_path / "b")], capsys)
    assert c1 == c2 == 0
    assert r1["content_sha256"] == r2["content_sha256"]
    assert (tmp_path / "a/runlog.jsonl").read_bytes() == (tmp_path / "b/runlog.jsonl").read_bytes()
    resolved = yaml.safe_load((tmp_path / "a/config.resolved.yaml").read_text())
    assert resolved["seed"] == 42 and resolved["out"] == str(tmp_path / "a")

    # re-running from the written config reproduces the checkpoint
    c3, r3, _ = _run(["train", "--config", str(tmp_path / "a/config.resolved.yaml"), "--quiet",
                      "--out", str(tmp_path / "c")], capsys)
    assert c3 == 0 and r3["content_sha256"] == r1["content_sha256"]

    # evaluate with rho = 0: corella row equals crm-only row
    c4, r4, _ = _run(["evaluate", "--config", str(tmp_path / "a/config.resolved.yaml"),
                      "--quiet", "--set", "router.rho=0"], capsys)
    assert c4 == 0
    rows = {r["scorer"]: r for r in r4["rows"]}
    assert {k: v for k, v in rows["corella"].items() if k != "scorer"} == \
        {k: v for k, v in rows["crm-only"].items() if k != "scorer"}
    assert rows["llm-only-on-routed"]["n"] == 0 and r4["llm_calls"] == 0

    c5, r5, _ = _run(["route-analyze", "--config", str(tmp_path / "a/config.resolved.yaml"),
                      "--quiet"], capsys)
    assert c5 == 0
    with open(tmp_path / "a/groups.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["group"]) for r in rows] == [1, 1, 2, 2, 3, 3]


def test_prepare_data_then_train_from_prepared(tmp_path, capsys):
    cfg = ["--config", str(ROOT / "configs/synthetic.yaml"), "--quiet", *SMALL]
    code, res, _ = _run(["prepare-data", *cfg, "--out", str(tmp_path / "p")], capsys)
    assert code == 0 and res["sizes"] == [1200, 150, 150]
    code, a, _ = _run(["train", *cfg, "--out", str(tmp_path / "x")], capsys)
    code2, b, _ = _run(["train", *cfg, "--out", str(tmp_path / "y"),
                        "--set", f"data.prepared={tmp_path / 'p/prepared'}"], capsys)
    assert code == code2 == 0 and a["content_sha256"] == b["content_sha256"]


def test_ablate_writes_five_rows(tmp_path, capsys):
    code, res, _ = _run(["ablate", "--config", str(ROOT / "configs/synthetic.yaml"), "--quiet",
                         *SMALL, "--out", str(tmp_path)], capsys)
    assert code == 0
    with open(tmp_path / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["full", "no_s1", "no_s2", "no_s3", "no_mix"]
    assert set(rows[0]) == {"dataset", "variant", "auc", "logloss", "acc"}
    assert (tmp_path / "config.resolved.yaml").exists()


def test_exit_codes(tmp_path, capsys):
    code, _, err = _run(["train", "--set", "nope=1", "--out", str(tmp_path)], capsys)
    assert code == 2 and json.loads(err.strip().splitlines()[-1])["error"] == "config"
    code, _, err = _run(["train", "--set", "dataset=movielens",
                         "--set", f"data.path={tmp_path / 'missing'}", "--out", str(tmp_path)], capsys)
    assert code == 3 and json.loads(err.strip().splitlines()[-1])["exit_code"] == 3
    code, _, _ = _run(["evaluate", "--quiet", *SMALL, "--out", str(tmp_path / "empty")], capsys)
    assert code == 3


def test_divergence_exit_code(tmp_path, capsys, monkeypatch):
    import corella.cli as cli
    from corella.training import DivergenceError

    def boom(*a, **k):
        raise DivergenceError("stage2", 17)
    monkeypatch.setattr(cli, "train_pipeline", boom)
    code, _, err = _run(["train", "--quiet", *SMALL, "--out", str(tmp_path)], capsys)
    assert code == 4
    obj = json.loads(err.strip().splitlines()[-1])
    assert obj["error"] == "divergence" and "17" in obj["message"]


def test_thread_env_validated(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("CORELLA_THREADS", "zero")
    code, _, _ = _run(["prepare-data", "--quiet", *SMALL, "--out", str(tmp_path)], capsys)
    assert code == 2


def test_console_script_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "corella.cli", "train", "--set", "bad=1",
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2 and '"error": "config"' in proc.stderr


def test_inputs_not_mutated(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.yaml"
    cfg_path.write_text((ROOT / "configs/synthetic.yaml").read_text())
    before = cfg_path.read_bytes()
    _run(["prepare-data", "--config", str(cfg_path), "--quiet", *SMALL,
          "--out", str(tmp_path / "o")], capsys)
    assert cfg_path.read_bytes() == before
