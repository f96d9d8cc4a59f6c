"""Command-line behavior: config resolution, exit codes, artifacts,
determinism, and the shipped presets."""

import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from mixrec.cli import main
from mixrec.config import build_configs
from mixrec.flops import forward_flops_per_token
from mixrec.model import count_parameters
from mixrec.presets import PRESETS, load_preset, preset_names, preset_pairs
from mixrec.train import make_synthetic_corpus


# -- presets -----------------------------------------------------------------


def test_every_preset_builds():
    for name in preset_names():
        model, router, train, sim = load_preset(name)
        assert sim == {}, name


def test_reference_sizes():
    expected = {
        "vanilla-135m": (30, 576, 9, 3, 1536),
        "vanilla-360m": (32, 960, 15, 5, 2560),
        "vanilla-730m": (26, 1536, 24, 8, 4096),
        "vanilla-1p7b": (24, 2048, 32, 32, 8192),
    }
    for name, (L, d, h, kv, inter) in expected.items():
        m, r, _, _ = load_preset(name)
        assert (m.n_layers, m.d_model, m.n_heads, m.n_kv_heads, m.d_inter) == \
            (L, d, h, kv, inter)
        assert m.vocab_size == 49152 and m.ctx_len == 2048
        assert m.sharing == "none" and r.family == "none"


def test_vanilla_360m_parameter_count():
    m, r, _, _ = load_preset("vanilla-360m")
    counts = count_parameters(m, None)
    assert counts["unique_non_embedding"] == 314_635_200


def test_layer_padding_for_divisibility():
    # interior depth must divide by the recursion count; some sizes grow by 2
    for name, layers in [
        ("mor-135m-nr2", 30), ("mor-135m-nr3", 32), ("mor-135m-nr4", 30),
        ("mor-360m-nr2", 32), ("mor-360m-nr3", 32), ("mor-360m-nr4", 34),
        ("mor-730m-nr2", 26), ("mor-730m-nr3", 26), ("mor-730m-nr4", 26),
        ("mor-1p7b-nr2", 24), ("mor-1p7b-nr3", 26), ("mor-1p7b-nr4", 26),
    ]:
        m, r, _, _ = load_preset(name)
        assert m.n_layers == layers, name
        assert (m.n_layers - 2) % m.n_recursions == 0
        assert m.sharing == "middle_cycle" and r.family == "expert_choice"


def test_recursive_variants_have_no_router():
    m, r, _, _ = load_preset("recursive-360m-nr3")
    assert m.sharing == "middle_cycle" and m.n_recursions == 3
    assert r.family == "none"


def test_toy_presets_are_trainable_shapes():
    for name in ("toy-expert-nr2", "toy-expert-nr3", "toy-token-nr2", "toy-token-nr3"):
        m, r, t, _ = load_preset(name)
        assert m.vocab_size == 258 and m.dtype == "float32"
        assert t.warmup_steps + t.cooldown_steps <= t.steps
        assert r.family in ("expert_choice", "token_choice")


def test_unknown_preset_raises():
    from mixrec.config import ConfigError

    with pytest.raises(ConfigError, match="unknown preset"):
        preset_pairs("vanilla-9000b")


# -- exit codes and config resolution ----------------------------------------


def test_flops_matches_module(capsys):
    assert main(["flops", "--config", "vanilla-360m"]) == 0
    payload = json.loads(capsys.readouterr().out)
    m, r, _, _ = load_preset("vanilla-360m")
    report = forward_flops_per_token(m, r)
    assert payload["total"] == report.total == 849_532_800
    assert payload["linear"] == report.linear


def test_flops_budget_conversion(capsys):
    assert main(["flops", "--config", "vanilla-360m", "--budget", "16.5e18"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["tokens_for_budget"] == pytest.approx(16.5e18 / 849_532_800)


def test_unknown_key_exits_2(capsys):
    assert main(["flops", "--config", "vanilla-360m", "--set", "model.bogus=1"]) == 2
    assert "model.bogus" in capsys.readouterr().err


def test_unknown_sim_key_exits_2(capsys):
    assert main(["simulate", "--set", "sim.bogus=1"]) == 2
    assert "sim.bogus" in capsys.readouterr().err


def test_malformed_override_exits_2(capsys):
    assert main(["flops", "--set", "model.d_model"]) == 2
    assert "key=value" in capsys.readouterr().err


def test_unknown_config_name_exits_2(capsys):
    assert main(["flops", "--config", "no-such-preset"]) == 2
    assert "no-such-preset" in capsys.readouterr().err


def test_invalid_value_exits_2(capsys):
    assert main(["flops", "--set", "model.n_heads=3", "--set",
                 "model.n_kv_heads=2"]) == 2
    assert "n_heads" in capsys.readouterr().err


def test_missing_checkpoint_exits_1(capsys):
    assert main(["eval", "--checkpoint", "/no/such/file.mxrc"]) == 1
    assert "train harness failure" in capsys.readouterr().err


def test_config_file_resolution(tmp_path, capsys):
    cfg = tmp_path / "model.cfg"
    cfg.write_text("model.d_model = 32\nmodel.n_heads = 2\nmodel.n_kv_heads = 1\n")
    assert main(["flops", "--config", str(cfg)]) == 0
    payload = json.loads(capsys.readouterr().out)
    m, r, _, _ = build_configs({"model.d_model": "32", "model.n_heads": "2",
                                "model.n_kv_heads": "1"})
    assert payload["total"] == forward_flops_per_token(m, r).total


# -- cost model --------------------------------------------------------------


def test_cost_model_relative_slots(capsys):
    assert main(["cost-model", "--config", "mor-360m-nr2", "--vram-bytes",
                 "80e9", "--baseline", "vanilla-360m"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["relative_batch_slots"] == 42
    assert payload["ratios"]["recursion_wise"]["memory"]["exact"] == "3/4"
    assert payload["ratios"]["recursive_sharing"]["io"]["value"] == 1.0


def test_cost_model_paper_batch_series(capsys):
    for name, base, slots in [("mor-360m-nr2", "vanilla-360m", 42),
                              ("mor-360m-nr3", "vanilla-360m", 48),
                              ("mor-360m-nr4", "vanilla-360m-34l", 51)]:
        assert main(["cost-model", "--config", name, "--vram-bytes", "80e9",
                     "--baseline", base]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["relative_batch_slots"] == slots, name


# -- simulate ----------------------------------------------------------------


def test_simulate_reports_both_schemes(capsys):
    assert main(["simulate", "--config", "mor-360m-nr3", "--seed", "4",
                 "--set", "sim.n_requests=80", "--set", "sim.slots=8",
                 "--set", "sim.mean_len=32", "--set", "sim.std_len=8"]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["depthwise"]["tokens"] == payload["total_tokens"]
    assert payload["sequencewise"]["tokens"] == payload["total_tokens"]
    assert payload["throughput_ratio"] >= 1.0
    assert payload["depthwise"]["completed"] == 80


def test_simulate_trace_artifact(tmp_path, capsys):
    out = tmp_path / "sim"
    assert main(["simulate", "--config", "mor-360m-nr2", "--out", str(out),
                 "--set", "sim.n_requests=20", "--set", "sim.mean_len=16",
                 "--set", "sim.std_len=4", "--set", "sim.slots=4",
                 "--set", "sim.trace=true"]) == 0
    capsys.readouterr()
    with open(out / "trace.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows and int(rows[-1]["emitted"]) > 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert str(out / "trace.csv") in manifest["artifacts"]
    assert str(out / "simulate.json") in manifest["artifacts"]


# -- train / eval / annotate / kv-report -------------------------------------


_TINY = [
    "--set", "model.d_model=32", "--set", "model.n_heads=2",
    "--set", "model.n_kv_heads=1", "--set", "model.n_layers=4",
    "--set", "model.d_inter=88", "--set", "train.steps=4",
    "--set", "train.seq_len=32", "--set", "train.batch_size=2",
    "--set", "train.warmup_steps=1", "--set", "train.cooldown_steps=1",
    "--set", "train.eval_windows=2", "--set", "train.log_every=2",
    "--set", "train.eval_every=4",
]


def _train_args(corpus, out):
    return ["train", "--set", f"train.corpus={corpus}", "--out", str(out),
            "--seed", "9"] + _TINY


def test_train_writes_artifacts_and_is_deterministic(tmp_path, capsys):
    corpus = make_synthetic_corpus(tmp_path / "corpus.txt", n_bytes=20_000, seed=1)
    rows = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(_train_args(corpus, out)) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["steps"] == 4
        assert np.isfinite(payload["nll_final"])
        manifest = json.loads((out / "manifest.json").read_text())
        for art in manifest["artifacts"]:
            assert (out / art.split("/")[-1]).exists()
        assert "model.d_model = 32" in manifest["config"]
        assert manifest["seed"] == 9
        with open(out / "metrics.csv") as fh:
            rows.append(list(csv.DictReader(fh)))
    assert rows[0] == rows[1]  # identical config + seed reproduces every row


def test_eval_roundtrip_from_checkpoint(tmp_path, capsys):
    corpus = make_synthetic_corpus(tmp_path / "corpus.txt", n_bytes=20_000, seed=1)
    out = tmp_path / "run"
    assert main(_train_args(corpus, out)) == 0
    train_payload = json.loads(capsys.readouterr().out)
    args = ["eval", "--checkpoint", str(out / "checkpoint.mxrc"),
            "--set", f"train.corpus={corpus}", "--seed", "9"] + _TINY
    assert main(args) == 0
    eval_payload = json.loads(capsys.readouterr().out)
    assert eval_payload["nll"] == pytest.approx(train_payload["nll_final"])
    assert len(eval_payload["per_depth_nll"]) == 2


def test_annotate_tokens(capsys):
    assert main(["annotate", "--text", "hi", "--seed", "0"] + _TINY[:10]) == 0
    payload = json.loads(capsys.readouterr().out)
    assert payload["text"] == "hi"
    assert [t["token"] for t in payload["tokens"]] == ["<bos>", "h", "i"]
    for t in payload["tokens"]:
        assert 0 <= t["depth"] <= 2


def test_kv_report_shapes(capsys):
    assert main(["kv-report", "--text", "abcdef", "--seed", "0"] + _TINY[:10]) == 0
    payload = json.loads(capsys.readouterr().out)
    L = len(payload["schedule"])
    assert len(payload["k_cosine"]) == L
    assert all(len(row) == L for row in payload["k_cosine"])
    assert payload["k_cosine"][0][0] == pytest.approx(1.0)


def test_out_root_env(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("MIXREC_OUT_ROOT", str(tmp_path / "root"))
    assert main(["flops", "--config", "vanilla-135m"]) == 0
    capsys.readouterr()
    dirs = list((tmp_path / "root").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("flops-")
    assert (dirs[0] / "flops.json").exists()
    assert (dirs[0] / "manifest.json").exists()


def test_console_script_installed():
    proc = subprocess.run([sys.executable, "-m", "mixrec.cli", "flops",
                           "--config", "vanilla-135m"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["total"] > 0
