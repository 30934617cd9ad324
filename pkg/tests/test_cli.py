import csv
import json
import math
import subprocess
import sys
import time

import numpy as np
import pytest

from dr2n.cli import EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO, RunConfig, main
from dr2n.model import load_checkpoint
from dr2n.synthworld import read_jsonl

SMALL = {"world.feature_dim": 8, "world.num_classes": 4, "world.horizon": 2, "world.n_true": [2, 3],
         "world.n_fake": [1, 2], "train.batch_size": 4, "schedule.warmup_steps": 5, "schedule.cosine_steps": 15}


def write_config(path, **extra):
    path.write_text(json.dumps({**SMALL, **extra}))
    return str(path)


@pytest.fixture
def small(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    data = str(tmp_path / "d.jsonl")
    assert main(["generate", "--config", cfg, "--out", data, "--count", "40"]) == 0
    return tmp_path, cfg, data


def read_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- generate

def test_generate_zero_count(tmp_path):
    out = tmp_path / "e.jsonl"
    assert main(["generate", "--out", str(out), "--count", "0"]) == 0
    assert out.read_bytes() == b""


def test_generate_is_byte_identical(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    for p in (a, b):
        assert main(["generate", "--out", str(p), "--count", "25", "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    eps = read_jsonl(a)
    assert eps[0].meta["config_hash"] == RunConfig(seed=3).config_hash()
    assert eps[0].meta["seed"] == 3


def test_generate_thousand_is_fast(tmp_path):
    start = time.perf_counter()
    assert main(["generate", "--out", str(tmp_path / "k.jsonl"), "--count", "1000"]) == 0
    assert time.perf_counter() - start < 10


# ---------------------------------------------------------------- train

def test_smoke_train_on_defaults(tmp_path):
    data = str(tmp_path / "d.jsonl")
    assert main(["generate", "--out", data, "--count", "200"]) == 0
    ck = tmp_path / "m.json"
    assert main(["train", "--dataset", data, "--out", str(ck), "--steps", "51"]) == 0
    rows = read_log(f"{ck}.loss.csv")
    assert len(rows) == 51
    assert float(rows[50]["loss"]) < float(rows[0]["loss"])
    _, extra = load_checkpoint(ck)
    assert rows[0]["config_hash"] == extra["config_hash"]


def test_resume_reproduces_next_loss(small):
    tmp, cfg, data = small
    full, half = tmp / "full.json", tmp / "half.json"
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(full), "--steps", "20"]) == 0
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(half), "--steps", "10"]) == 0
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(half), "--steps", "20",
                 "--resume", str(half)]) == 0
    a, b = read_log(f"{full}.loss.csv"), read_log(f"{half}.loss.csv")
    assert [r["loss"] for r in a] == [r["loss"] for r in b]
    m1, _ = load_checkpoint(full)
    m2, _ = load_checkpoint(half)
    for name, p in m1.params.items():
        assert p.values.tobytes() == m2.params[name].values.tobytes()


def test_gru_checkpoint_without_relational_params(small):
    tmp, cfg, data = small
    ck = tmp / "g.json"
    assert main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "3",
                 "--variant", "gru"]) == 0
    doc = json.loads(ck.read_text())
    assert doc["variant"] == "gru"
    assert not any(k.startswith("rel.") for k in doc["params"])


def test_divergence_exit_code(small, capsys):
    tmp, _, data = small
    cfg = write_config(tmp / "bad.json", **{"schedule.lr_start": 1e200, "schedule.lr_peak": 1e300})
    code = main(["train", "--config", cfg, "--dataset", data, "--out", str(tmp / "x.json"), "--steps", "5"])
    assert code == EXIT_DIVERGENCE
    err = capsys.readouterr().err
    assert "step" in err


# ---------------------------------------------------------------- errors

def test_config_errors(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"world.colour": "blue"}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"optim.lr": 1}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text(json.dumps({"world": {"nested": 1}}))
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text("{oops")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    assert "error" in capsys.readouterr().err


def test_io_errors(tmp_path, capsys):
    missing = tmp_path / "nope.jsonl"
    assert main(["train", "--dataset", str(missing), "--out", str(tmp_path / "m.json")]) == EXIT_IO
    assert "nope.jsonl" in capsys.readouterr().err
    broken = tmp_path / "broken.jsonl"
    broken.write_text('{"seed": 1}\n')
    assert main(["train", "--dataset", str(broken), "--out", str(tmp_path / "m.json")]) == EXIT_IO
    assert "line 1" in capsys.readouterr().err
    assert main(["generate", "--out", str(tmp_path / "no" / "dir.jsonl"), "--count", "1"]) == EXIT_IO


# ---------------------------------------------------------------- eval

def test_eval_columns_match_request(small):
    tmp, cfg, data = small
    ck = tmp / "m.json"
    main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "5"])
    assert main(["eval", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp / "r"), "--t", "2", "0"]) == 0
    header = (tmp / "r.csv").read_text().splitlines()[0].split(",")
    assert [h for h in header if h.startswith("map_")] == ["map_t2", "map_t0"]
    report = json.loads((tmp / "r.json").read_text())
    assert sorted(report["map_per_t"]) == ["0", "2"]
    assert report["metadata"]["config_hash"] == json.loads(ck.read_text())["config_hash"]


def test_eval_saved_predictions_match(small):
    tmp, cfg, data = small
    ck = tmp / "m.json"
    main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "5"])
    main(["eval", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp / "a"), "--save-preds",
          str(tmp / "p.jsonl")])
    main(["eval", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp / "b"), "--preds",
          str(tmp / "p.jsonl")])
    a = json.loads((tmp / "a.json").read_text())["map_per_t"]
    b = json.loads((tmp / "b.json").read_text())["map_per_t"]
    assert a.keys() == b.keys()
    assert all(abs(a[t] - b[t]) < 1e-12 for t in a)


def test_eval_warns_on_hash_mismatch(small, caplog):
    tmp, cfg, data = small
    ck = tmp / "m.json"
    main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "2"])
    other = write_config(tmp / "o.json", **{"world.noise": 0.9})
    other_data = str(tmp / "o.jsonl")
    main(["generate", "--config", other, "--out", other_data, "--count", "10"])
    with caplog.at_level("WARNING"):
        assert main(["eval", "--checkpoint", str(ck), "--dataset", other_data, "--out", str(tmp / "r")]) == 0
    assert "hash mismatch" in caplog.text
    caplog.clear()
    with caplog.at_level("WARNING"):
        main(["eval", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp / "r")])
    assert "mismatch" not in caplog.text


def test_fresh_model_is_at_chance_on_clips(tmp_path):
    cfg = tmp_path / "clip.json"
    cfg.write_text(json.dumps({"world.mode": "single-actor-clip", "world.n_true": [1, 1], "world.n_fake": [1, 3],
                               "world.horizon": 1, "world.rules": [], "world.interactions": False,
                               "world.noise": 1.0, "world.feature_dim": 16, "train.batch_size": 4}))
    data = str(tmp_path / "clips.jsonl")
    main(["generate", "--config", str(cfg), "--out", data, "--count", "400", "--split", "eval"])
    ck = tmp_path / "m.json"
    main(["train", "--config", str(cfg), "--dataset", data, "--out", str(ck), "--steps", "0"])
    assert main(["eval", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp_path / "r"),
                 "--k-percent", "10", "100"]) == 0
    acc = json.loads((tmp_path / "r.json").read_text())["accuracy_at_k"]
    for v in acc.values():
        assert abs(v - 1 / 8) < 3 * math.sqrt(1 / 8 * 7 / 8 / 400)


# ---------------------------------------------------------------- attn

def test_attn_export(small):
    tmp, cfg, data = small
    ck = tmp / "m.json"
    main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "5"])
    assert main(["attn", "--checkpoint", str(ck), "--dataset", data, "--episode", "2", "--node", "1",
                 "--top-k", "1", "--out", str(tmp / "a")]) == 0
    doc = json.loads((tmp / "a.json").read_text())
    assert [e["step"] for e in doc["edges"]] == [1, 2]
    assert doc["config_hash"] == json.loads(ck.read_text())["config_hash"]
    model, _ = load_checkpoint(ck)
    pred = model.predict([read_jsonl(data)[2]])[0]
    for e in doc["edges"]:
        alpha = pred.attention[e["step"] - 1]
        assert abs(alpha[1, e["j"]] - e["weight"]) < 1e-12
        assert alpha[1, e["j"]] == alpha[1].max()
    pydot = pytest.importorskip("pydot")
    graphs = pydot.graph_from_dot_data((tmp / "a.dot").read_text())
    assert len(graphs) == 1 and len(graphs[0].get_edges()) == 2


def test_attn_rejects_variant_without_attention(small, capsys):
    tmp, cfg, data = small
    ck = tmp / "g.json"
    main(["train", "--config", cfg, "--dataset", data, "--out", str(ck), "--steps", "1", "--variant", "gru"])
    assert main(["attn", "--checkpoint", str(ck), "--dataset", data, "--out", str(tmp / "a")]) == EXIT_CONFIG
    assert "attention" in capsys.readouterr().err


# ---------------------------------------------------------------- ablate

def test_ablate_writes_tables(small):
    tmp, cfg, _ = small
    cfg = write_config(tmp / "ab.json", **{"train.n_train": 12, "train.n_eval": 8, "train.steps": 3})
    out = tmp / "ab"
    assert main(["ablate", "--config", cfg, "--seeds", "0", "1", "2", "--variant", "gru", "dr2n",
                 "--out", str(out)]) == 0
    lines = (out / "grid.csv").read_text().splitlines()
    assert lines[0].startswith("# config_hash=")
    assert lines[1] == "variant,t=0,t=1,t=2,n_seeds"
    assert [l.split(",")[0] for l in lines[2:]] == ["gru", "dr2n"]
    assert (out / "delta_dr2n_vs_gru.csv").exists() and (out / "delta_horizon_gru.csv").exists()
    reports = json.loads((out / "reports.json").read_text())
    assert set(reports["reports"]) == {"gru", "dr2n"}


def test_module_entry_point_and_threads(tmp_path):
    env = {"DR2N_THREADS": "1", "PATH": "/usr/bin:/bin"}
    res = subprocess.run([sys.executable, "-m", "dr2n", "generate", "--out", str(tmp_path / "x.jsonl"),
                          "--count", "2"], capture_output=True, text=True, env=env)
    assert res.returncode == 0, res.stderr
    assert len((tmp_path / "x.jsonl").read_text().splitlines()) == 2
    res = subprocess.run([sys.executable, "-m", "dr2n", "--help"], capture_output=True, text=True)
    assert "DR2N_THREADS" in res.stdout
