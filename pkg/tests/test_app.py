import csv
import json

import pytest

from b2r.adapters import load_dataset, load_manifest, manifest_path
from b2r.app import build_parser, main
from b2r.services import EVAL_FORMAT

TINY_MODEL = ["--hidden-dim", "8", "--n-heads", "2", "--n-layers", "1", "--context-len", "3"]
TINY_TRAIN = ["--batch-size", "4", "--steps-per-epoch", "2", "--epochs", "1"]


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    if code == 0:
        return code, json.loads(captured.out)
    err = captured.err
    return code, json.loads(err[err.rindex("{\n  \"error\""):])


# ------------------------------
# Filter / realign
# ------------------------------
def test_filter_counts(capsys, tmp_path, three_cost_file):
    out = tmp_path / "safe.jsonl"
    code, payload = _run(capsys, "filter", "--in", three_cost_file, "--out", out, "--kappa", 5)
    assert code == 0
    manifest = load_manifest(out)
    assert (manifest.total, manifest.kept, manifest.dropped) == (3, 2, 1)
    assert payload["manifest"]["kept"] == 2


def test_filter_after_realign_keeps_everything(capsys, tmp_path, three_cost_file):
    realigned = tmp_path / "r.jsonl"
    refiltered = tmp_path / "rf.jsonl"
    assert _run(capsys, "realign", "--in", three_cost_file, "--out", realigned,
                "--kappa", 5, "--strategy", "avg")[0] == 0
    assert _run(capsys, "filter", "--in", realigned, "--out", refiltered, "--kappa", 5)[0] == 0
    a, _ = load_dataset(realigned)
    b, manifest = load_dataset(refiltered)
    assert a == b
    assert manifest.dropped == 0


def test_multi_target_realign_manifest(capsys, tmp_path, three_cost_file):
    out = tmp_path / "multi.jsonl"
    code, payload = _run(capsys, "realign", "--in", three_cost_file, "--out", out,
                         "--kappa", 3, 5, "--strategy", "shift")
    assert code == 0
    manifest = load_manifest(out)
    assert manifest.total == 6
    assert manifest.kept == 3
    assert manifest.kappas == [3.0, 5.0]
    assert manifest.audit["passed"]
    assert payload["counts"] == {"3.0": 1, "5.0": 2}


def test_audit_subcommand(capsys, tmp_path, three_cost_file):
    out = tmp_path / "r.jsonl"
    _run(capsys, "realign", "--in", three_cost_file, "--out", out, "--kappa", 7, "--strategy", "rand")
    code, payload = _run(capsys, "audit", "--in", out)
    assert code == 0
    assert payload["audit"]["passed"]
    assert payload["audit"]["checked"] == 3


def test_audit_of_raw_data_fails(capsys, three_cost_file):
    code, payload = _run(capsys, "audit", "--in", three_cost_file)
    assert code == 0
    assert not payload["audit"]["passed"]
    assert payload["audit"]["violation"]["clause"] == "initial_ctg"


# ------------------------------
# Usage and error exits
# ------------------------------
@pytest.mark.parametrize(
    "command, flags",
    [
        ("filter", ["--in", "--out", "--kappa"]),
        ("realign", ["--strategy", "--cost-mode", "--kappa"]),
        ("train", ["--hidden-dim", "--learning-rate", "--allow-unaligned", "--fraction"]),
        ("eval", ["--checkpoint", "--episodes", "--eval-seeds", "--method"]),
        ("verify-theorem1", ["--sigma", "--delta", "--horizon", "--grid"]),
        ("verify-theorem2", ["--epsilon", "--chain", "--random"]),
    ],
)
def test_help_lists_flags(capsys, command, flags):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for flag in flags:
        assert flag in text


def test_missing_input_file(capsys, tmp_path):
    code, payload = _run(capsys, "filter", "--in", tmp_path / "none.jsonl",
                         "--out", tmp_path / "o.jsonl", "--kappa", 1)
    assert code == 2
    assert payload["type"] == "FileNotFoundError"


def test_missing_required_flag(capsys, three_cost_file):
    code, payload = _run(capsys, "filter", "--in", three_cost_file, "--kappa", 1)
    assert code == 2
    assert "--out" in payload["error"]


def test_unknown_flag_is_a_usage_error(three_cost_file):
    with pytest.raises(SystemExit) as info:
        main(["filter", "--in", str(three_cost_file), "--frobnicate"])
    assert info.value.code == 2


def test_empty_band_is_a_domain_error(capsys, tmp_path, three_cost_file):
    code, payload = _run(capsys, "train-boundary", "--in", three_cost_file,
                         "--out", tmp_path / "b.ckpt", "--kappa", 4, "--epsilon", 0.5,
                         *TINY_MODEL, *TINY_TRAIN)
    assert code == 1
    assert payload["type"] == "EmptyBandError"
    assert "epsilon=0.5" in payload["error"]


def test_scale_on_zero_cost_is_a_domain_error(capsys, tmp_path):
    data = tmp_path / "v.jsonl"
    _run(capsys, "gen-data", "--env", "velocity", "--n-trajectories", 2, "--max-horizon", 10,
         "--out", data)
    code, payload = _run(capsys, "realign", "--in", data, "--out", tmp_path / "s.jsonl",
                         "--kappa", 1, "--strategy", "scale")
    assert code == 1
    assert payload["type"] == "StrategyInapplicableError"


@pytest.mark.parametrize(
    "env, flags, rejected",
    [
        ("chain", ["--max-horizon", 5], "max_horizon"),
        ("velocity", ["--n-states", 4], "n_states"),
        ("velocity", ["--hazard", 1, 2], "hazard"),
    ],
)
def test_env_flag_for_another_env_is_a_usage_error(capsys, tmp_path, env, flags, rejected):
    out = tmp_path / "d.jsonl"
    code, payload = _run(capsys, "gen-data", "--env", env, "--n-trajectories", 2, *flags,
                         "--out", out)
    assert code == 2
    assert payload["type"] == "EnvParameterError"
    assert rejected in payload["error"]
    assert "Accepted parameters" in payload["error"]
    assert not out.exists()


def test_chain_oracle_rejects_velocity_parameters(capsys, tmp_path):
    config = tmp_path / "c.yaml"
    config.write_text("env_params:\n  max_horizon: 5\n")
    code, payload = _run(capsys, "verify-theorem2", "--kappa", 1, "--chain", "--config", config)
    assert code == 2
    assert payload["type"] == "EnvParameterError"


# ------------------------------
# Configuration precedence
# ------------------------------
def test_config_file_is_overridden_by_flags(capsys, tmp_path, three_cost_file):
    cfg = tmp_path / "run.yaml"
    cfg.write_text("kappa: 7\n")
    out = tmp_path / "o.jsonl"
    assert _run(capsys, "filter", "--config", cfg, "--in", three_cost_file, "--out", out)[0] == 0
    assert load_manifest(out).kept == 3
    assert _run(capsys, "filter", "--config", cfg, "--in", three_cost_file, "--out", out,
                "--kappa", 3)[0] == 0
    assert load_manifest(out).kept == 1


def test_unknown_config_key_is_rejected(capsys, tmp_path, three_cost_file):
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"kapa": 7}))
    code, _ = _run(capsys, "filter", "--config", cfg, "--in", three_cost_file,
                   "--out", tmp_path / "o.jsonl")
    assert code == 2


def test_dotted_flags_land_in_sections():
    args = build_parser().parse_args(["train", "--in", "x", "--out", "y", "--hidden-dim", "16"])
    assert getattr(args, "model.hidden_dim") == 16
    assert not hasattr(args, "train.epochs")


# ------------------------------
# Report
# ------------------------------
def _eval_file(path, method, summaries):
    path.write_text(json.dumps({
        "format_version": EVAL_FORMAT, "task": "velocity", "method": method, "summaries": summaries,
    }))
    return path


def test_report_columns(capsys, tmp_path):
    a = _eval_file(tmp_path / "a.json", "b2r",
                   [{"reward": 0.5, "cost": 0.4}, {"reward": 0.7, "cost": 0.8}])
    b = _eval_file(tmp_path / "b.json", "boundary", [{"reward": 0.9, "cost": 1.5}])
    out = tmp_path / "report.csv"
    code, _ = _run(capsys, "report", "--in", a, b, "--out", out)
    assert code == 0
    with out.open() as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == ["task", "method", "reward", "cost", "safe"]
    assert [r["method"] for r in rows] == ["b2r", "boundary"]
    assert float(rows[0]["reward"]) == pytest.approx(0.6)
    assert [r["safe"] for r in rows] == ["1", "0"]


def test_report_rejects_foreign_json(capsys, tmp_path):
    bad = tmp_path / "x.json"
    bad.write_text(json.dumps({"format_version": "other"}))
    assert _run(capsys, "report", "--in", bad, "--out", tmp_path / "r.csv")[0] == 2


# ------------------------------
# Theory commands
# ------------------------------
def test_verify_theorem1_small(capsys, tmp_path):
    out = tmp_path / "t1.json"
    code, payload = _run(capsys, "verify-theorem1", "--sigma", 0.01, "--delta", 1.0,
                         "--horizon", 20, "--n-trials", 2000, "--out", out)
    assert code == 0
    assert payload["passed"]
    assert json.loads(out.read_text()) == payload


def test_verify_theorem1_needs_parameters(capsys):
    assert _run(capsys, "verify-theorem1", "--sigma", 0.01)[0] == 2


def test_verify_theorem1_rejects_small_margin(capsys):
    code, payload = _run(capsys, "verify-theorem1", "--sigma", 0.1, "--delta", 1.0,
                         "--horizon", 20, "--n-trials", 10)
    assert code == 1
    assert payload["type"] == "AssumptionViolationError"


def test_verify_theorem2_chain_and_random(capsys):
    code, payload = _run(capsys, "verify-theorem2", "--kappa", 1, "--epsilon", 0.5,
                         "--chain", "--n-states", 5, "--hazard", 3, "--chain-horizon", 4,
                         "--random", 200)
    assert code == 0
    assert payload["holds"]
    assert payload["chain"]["holds"]
    assert payload["random"]["n_datasets"] == 200


def test_verify_theorem2_on_dataset(capsys, three_cost_file):
    code, payload = _run(capsys, "verify-theorem2", "--kappa", 5, "--epsilon", 0.5,
                         "--in", three_cost_file)
    assert code == 0
    assert payload["dataset"]["region_max"] == 10.0


def test_verify_theorem2_needs_a_source(capsys):
    assert _run(capsys, "verify-theorem2", "--kappa", 1)[0] == 1


# ------------------------------
# End to end
# ------------------------------
def _pipeline(capsys, root):
    data, aligned = root / "data.jsonl", root / "aligned.jsonl"
    ckpt, evals = root / "policy.ckpt", root / "eval.json"
    steps = [
        ("gen-data", "--env", "velocity", "--n-trajectories", 6, "--max-horizon", 20,
         "--seed", 3, "--out", data),
        ("realign", "--in", data, "--out", aligned, "--kappa", 1, "--strategy", "shift"),
        ("train", "--in", aligned, "--out", ckpt, "--seed", 3, *TINY_MODEL, *TINY_TRAIN),
        ("eval", "--checkpoint", ckpt, "--kappa", 1, 2, "--data", data, "--out", evals,
         "--episodes", 1, "--eval-seeds", 0, "--max-horizon", 20),
        ("rollout", "--checkpoint", ckpt, "--kappa", 1, "--trace", root / "trace.csv"),
    ]
    for step in steps:
        code, payload = _run(capsys, *step)
        assert code == 0, payload
    return [data, manifest_path(data), aligned, ckpt, evals, root / "trace.csv"]


def test_pipeline_is_byte_reproducible(capsys, tmp_path):
    first = [p.read_bytes() for p in _pipeline(capsys, tmp_path)]
    second = [p.read_bytes() for p in _pipeline(capsys, tmp_path)]
    assert first == second
    summaries = json.loads((tmp_path / "eval.json").read_text())["summaries"]
    assert [s["kappa"] for s in summaries] == [1.0, 2.0]
    # a zero-cost env is safe at every budget
    assert all(s["safe"] for s in summaries)


@pytest.mark.slow
@pytest.mark.parametrize("episodes", [5, 20])
def test_realigned_policy_against_boundary_baseline(capsys, tmp_path, episodes):
    data, aligned = tmp_path / "data.jsonl", tmp_path / "aligned.jsonl"
    b2r_ckpt, band_ckpt = tmp_path / "b2r.ckpt", tmp_path / "band.ckpt"
    b2r_eval, band_eval = tmp_path / "b2r.json", tmp_path / "band.json"
    eval_flags = ["--kappa", 20, "--data", data, "--episodes", episodes, "--eval-seeds", 0, 1, 2]
    train_flags = ["--batch-size", "32", "--steps-per-epoch", "200", "--epochs", "3"]
    steps = [
        ("gen-data", "--env", "velocity", "--n-trajectories", 200, "--out", data),
        ("realign", "--in", data, "--out", aligned, "--kappa", 20, "--strategy", "shift"),
        ("train", "--in", aligned, "--out", b2r_ckpt, "--hidden-dim", "32", "--n-heads", "4",
         *train_flags),
        ("train-boundary", "--in", data, "--out", band_ckpt, "--kappa", 20, "--epsilon", 2,
         "--hidden-dim", "32", "--n-heads", "4", *train_flags),
        ("eval", "--checkpoint", b2r_ckpt, *eval_flags, "--out", b2r_eval, "--method", "b2r"),
        ("eval", "--checkpoint", band_ckpt, *eval_flags, "--out", band_eval,
         "--method", "boundary"),
        ("report", "--in", b2r_eval, band_eval, "--out", tmp_path / "report.csv"),
        ("verify-theorem2", "--kappa", 20, "--epsilon", 2, "--in", data),
    ]
    payloads = []
    for step in steps:
        code, payload = _run(capsys, *step)
        assert code == 0, payload
        payloads.append(payload)
    assert [r["method"] for r in payloads[6]["rows"]] == ["b2r", "boundary"]
    assert payloads[7]["holds"]

    b2r = json.loads(b2r_eval.read_text())["summaries"][0]
    band = json.loads(band_eval.read_text())["summaries"][0]
    assert b2r["n_episodes"] == band["n_episodes"] == 3 * episodes
    assert b2r["cost"] < 1
    assert b2r["safe"]
    assert b2r["violation_rate"] < band["violation_rate"]
