import hashlib
import json
import os
import subprocess
import sys

import pytest

import gazekit.cli as cli


def run_cli(*argv, capsys=None):
    code = cli.main(list(argv))
    if capsys is None:
        return code, "", ""
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def sha256(path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Shared tiny dataset plus a one-epoch model for the command tests."""
    d = tmp_path_factory.mktemp("cli")
    sim = {"n_persons": 3, "samples_per_person": 16, "seed": 411}
    (d / "sim.json").write_text(json.dumps(sim))
    assert cli.main(
        ["simulate", "--config", str(d / "sim.json"), "--out", str(d / "data.jsonl")]
    ) == 0
    train = {"dataset": str(d / "data.jsonl"), "train": {"seed": 412, "epochs": 1}}
    (d / "train.json").write_text(json.dumps(train))
    assert cli.main(
        ["train", "--config", str(d / "train.json"), "--out", str(d / "run")]
    ) == 0
    return d


# --- parser and exit codes ----------------------------------------------------


def test_unknown_subcommand_exits_usage(capsys):
    code, _, err = run_cli("frobnicate", capsys=capsys)
    assert code == cli.EXIT_USAGE
    assert "invalid choice" in err


def test_no_subcommand_exits_usage(capsys):
    code, _, _ = run_cli(capsys=capsys)
    assert code == cli.EXIT_USAGE


def test_help_exits_zero(capsys):
    code, out, _ = run_cli("--help", capsys=capsys)
    assert code == 0
    assert "simulate" in out and "experiment" in out


def test_experiment_help_documents_csv_schema(capsys):
    code, out, _ = run_cli("experiment", "--help", capsys=capsys)
    assert code == 0
    assert "mean_error_deg" in out
    assert "ksweep" in out


def test_missing_config_file_exits_io(tmp_path, capsys):
    code, _, err = run_cli(
        "train", "--config", str(tmp_path / "nope.json"),
        "--out", str(tmp_path / "o"), capsys=capsys,
    )
    assert code == cli.EXIT_IO
    assert "nope.json" in err


def test_invalid_json_config_exits_usage(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    code, _, err = run_cli(
        "simulate", "--config", str(bad), "--out", str(tmp_path / "x"), capsys=capsys
    )
    assert code == cli.EXIT_USAGE
    assert "not valid JSON" in err


# --- simulate ------------------------------------------------------------------


def test_simulate_dry_run_prints_effective_config(tmp_path, capsys):
    cfgp = tmp_path / "sim.json"
    cfgp.write_text(json.dumps({"n_persons": 2, "samples_per_person": 3, "seed": 9}))
    code, out, _ = run_cli(
        "simulate", "--config", str(cfgp), "--seed", "77", "--dry-run", capsys=capsys
    )
    assert code == 0
    effective = json.loads(out)
    assert effective["seed"] == 77
    assert effective["n_persons"] == 2
    assert not (tmp_path / "x").exists()


def test_simulate_requires_out(tmp_path, capsys):
    cfgp = tmp_path / "sim.json"
    cfgp.write_text(json.dumps({"n_persons": 2, "samples_per_person": 3, "seed": 9}))
    code, _, err = run_cli("simulate", "--config", str(cfgp), capsys=capsys)
    assert code == cli.EXIT_USAGE
    assert "--out" in err


def test_simulate_missing_fields_are_named(tmp_path, capsys):
    cfgp = tmp_path / "sim.json"
    cfgp.write_text(json.dumps({"n_persons": 2}))
    code, _, err = run_cli(
        "simulate", "--config", str(cfgp), "--out", str(tmp_path / "d.jsonl"),
        capsys=capsys,
    )
    assert code == cli.EXIT_USAGE
    assert "samples_per_person" in err


def test_simulate_same_seed_same_bytes(tmp_path, capsys):
    cfgp = tmp_path / "sim.json"
    cfgp.write_text(json.dumps({"n_persons": 2, "samples_per_person": 5, "seed": 31}))
    for name in ("a.jsonl", "b.jsonl"):
        code, _, _ = run_cli(
            "simulate", "--config", str(cfgp), "--out", str(tmp_path / name),
            capsys=capsys,
        )
        assert code == 0
    assert sha256(tmp_path / "a.jsonl") == sha256(tmp_path / "b.jsonl")


# --- train ----------------------------------------------------------------------


def test_train_outputs_and_overwrite_guard(workdir, capsys):
    run = workdir / "run"
    for name in ("model.json", "report.json", "loss.csv"):
        assert (run / name).exists()
    code, _, err = run_cli(
        "train", "--config", str(workdir / "train.json"), "--out", str(run),
        capsys=capsys,
    )
    assert code == cli.EXIT_USAGE
    assert "--force" in err
    code, _, _ = run_cli(
        "train", "--config", str(workdir / "train.json"), "--out", str(run),
        "--force", capsys=capsys,
    )
    assert code == 0


def test_train_is_byte_deterministic(workdir, tmp_path, capsys):
    code, _, _ = run_cli(
        "train", "--config", str(workdir / "train.json"),
        "--out", str(tmp_path / "again"), capsys=capsys,
    )
    assert code == 0
    assert sha256(tmp_path / "again" / "model.json") == sha256(
        workdir / "run" / "model.json"
    )
    assert sha256(tmp_path / "again" / "loss.csv") == sha256(
        workdir / "run" / "loss.csv"
    )


def test_train_dry_run_prints_config_without_writing(workdir, tmp_path, capsys):
    code, out, _ = run_cli(
        "train", "--config", str(workdir / "train.json"),
        "--out", str(tmp_path / "never"), "--dry-run", capsys=capsys,
    )
    assert code == 0
    effective = json.loads(out)
    assert effective["train"]["epochs"] == 1
    assert effective["dataset"].endswith("data.jsonl")
    assert not (tmp_path / "never").exists()


def test_train_requires_exactly_one_data_source(workdir, tmp_path, capsys):
    both = {
        "dataset": str(workdir / "data.jsonl"),
        "sim": {"n_persons": 1, "samples_per_person": 1, "seed": 1},
        "train": {"seed": 5},
    }
    p = tmp_path / "both.json"
    p.write_text(json.dumps(both))
    code, _, err = run_cli(
        "train", "--config", str(p), "--out", str(tmp_path / "o"), capsys=capsys
    )
    assert code == cli.EXIT_USAGE
    assert "exactly one" in err


def test_train_unknown_top_level_key_is_named(workdir, tmp_path, capsys):
    p = tmp_path / "weird.json"
    p.write_text(
        json.dumps({"dataset": "d", "train": {"seed": 5}, "wat": 1})
    )
    code, _, err = run_cli(
        "train", "--config", str(p), "--out", str(tmp_path / "o"), capsys=capsys
    )
    assert code == cli.EXIT_USAGE
    assert "wat" in err


def test_train_missing_seed_is_reported(workdir, tmp_path, capsys):
    p = tmp_path / "noseed.json"
    p.write_text(json.dumps({"dataset": str(workdir / "data.jsonl"), "train": {}}))
    code, _, err = run_cli(
        "train", "--config", str(p), "--out", str(tmp_path / "o"), capsys=capsys
    )
    assert code == cli.EXIT_USAGE
    assert "seed" in err


def test_train_divergence_exits_numeric(workdir, tmp_path, capsys):
    p = tmp_path / "div.json"
    p.write_text(
        json.dumps(
            {
                "dataset": str(workdir / "data.jsonl"),
                "train": {"seed": 5, "epochs": 2, "lr0": 1e9},
            }
        )
    )
    code, _, err = run_cli(
        "train", "--config", str(p), "--out", str(tmp_path / "o"), capsys=capsys
    )
    assert code == cli.EXIT_NUMERIC
    assert "diverged" in err


# --- calibrate and evaluate ------------------------------------------------------


def test_calibrate_then_evaluate_roundtrip(workdir, tmp_path, capsys):
    cal_cfg = tmp_path / "cal.json"
    cal_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
                "k": 4,
                "seed": 2,
            }
        )
    )
    cal_out = tmp_path / "cal_out.json"
    code, _, _ = run_cli(
        "calibrate", "--config", str(cal_cfg), "--out", str(cal_out), capsys=capsys
    )
    assert code == 0
    cal = json.loads(cal_out.read_text())
    assert cal["format"] == cli.CALIB_FORMAT
    assert len(cal["persons"]) == 3
    assert all(len(e["p"]) == 6 for e in cal["persons"])

    ev_cfg = tmp_path / "ev.json"
    ev_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
                "calibration": str(cal_out),
            }
        )
    )
    code, out, _ = run_cli("evaluate", "--config", str(ev_cfg), capsys=capsys)
    assert code == 0
    report = json.loads(out)
    assert "mean_error_deg" in report
    assert len(report["per_person_mean_deg"]) == 3
    assert report["nan_count"] == 0


def test_calibrate_without_out_prints_json(workdir, tmp_path, capsys):
    cal_cfg = tmp_path / "cal.json"
    cal_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
                "k": 2,
            }
        )
    )
    code, out, _ = run_cli("calibrate", "--config", str(cal_cfg), capsys=capsys)
    assert code == 0
    assert json.loads(out)["k"] == 2


def test_calibrate_k_exceeding_samples_names_person(workdir, tmp_path, capsys):
    cal_cfg = tmp_path / "cal.json"
    cal_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
                "k": 99,
            }
        )
    )
    code, _, err = run_cli("calibrate", "--config", str(cal_cfg), capsys=capsys)
    assert code == cli.EXIT_USAGE
    assert "person" in err and "99" in err


def test_calibrate_missing_fields_named(workdir, tmp_path, capsys):
    cal_cfg = tmp_path / "cal.json"
    cal_cfg.write_text(json.dumps({"model": "m"}))
    code, _, err = run_cli("calibrate", "--config", str(cal_cfg), capsys=capsys)
    assert code == cli.EXIT_USAGE
    assert "dataset" in err and "k" in err


def test_evaluate_uncalibrated_runs(workdir, tmp_path, capsys):
    ev_cfg = tmp_path / "ev.json"
    ev_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
            }
        )
    )
    code, out, _ = run_cli("evaluate", "--config", str(ev_cfg), capsys=capsys)
    assert code == 0
    assert "mean_error_deg" in json.loads(out)


def test_evaluate_rejects_incomplete_calibration(workdir, tmp_path, capsys):
    cal_out = tmp_path / "cal.json"
    cal_out.write_text(
        json.dumps(
            {"format": cli.CALIB_FORMAT, "persons": [{"person": 0, "p": [0] * 6}]}
        )
    )
    ev_cfg = tmp_path / "ev.json"
    ev_cfg.write_text(
        json.dumps(
            {
                "model": str(workdir / "run" / "model.json"),
                "dataset": str(workdir / "data.jsonl"),
                "calibration": str(cal_out),
            }
        )
    )
    code, _, err = run_cli("evaluate", "--config", str(ev_cfg), capsys=capsys)
    assert code == cli.EXIT_USAGE
    assert "person 1" in err


def test_corrupt_model_file_exits_io(workdir, tmp_path, capsys):
    bad_model = tmp_path / "model.json"
    bad_model.write_text(json.dumps({"format": "nope"}))
    ev_cfg = tmp_path / "ev.json"
    ev_cfg.write_text(
        json.dumps({"model": str(bad_model), "dataset": str(workdir / "data.jsonl")})
    )
    code, _, _ = run_cli("evaluate", "--config", str(ev_cfg), capsys=capsys)
    assert code == cli.EXIT_IO


# --- experiment and gradcheck -----------------------------------------------------


def test_experiment_dry_run_and_run(tmp_path, capsys):
    cfgp = tmp_path / "exp.json"
    cfgp.write_text(
        json.dumps(
            {
                "kind": "ksweep",
                "seed": 55,
                "train_persons": 3,
                "train_spp": 20,
                "eval_persons": 2,
                "calib_pool": 8,
                "test_per_person": 5,
                "sweep": [0, 2],
                "train": {"epochs": 1},
            }
        )
    )
    code, out, _ = run_cli(
        "experiment", "--config", str(cfgp), "--dry-run", capsys=capsys
    )
    assert code == 0
    assert json.loads(out)["kind"] == "ksweep"

    outdir = tmp_path / "exp"
    code, out, _ = run_cli(
        "experiment", "--config", str(cfgp), "--out", str(outdir), capsys=capsys
    )
    assert code == 0
    assert (outdir / "ksweep.csv").exists()
    assert (outdir / "ksweep_summary.json").exists()


def test_experiment_unknown_kind_exits_usage(tmp_path, capsys):
    cfgp = tmp_path / "exp.json"
    cfgp.write_text(json.dumps({"kind": "zesty", "seed": 0}))
    code, _, err = run_cli(
        "experiment", "--config", str(cfgp), "--out", str(tmp_path / "o"),
        capsys=capsys,
    )
    assert code == cli.EXIT_USAGE
    assert "zesty" in err


def test_gradcheck_passes_and_writes_summary(tmp_path, capsys):
    out = tmp_path / "audit.json"
    code, msg, _ = run_cli(
        "gradcheck", "--seed", "3", "--instances", "2", "--out", str(out),
        capsys=capsys,
    )
    assert code == 0
    assert "passed" in msg
    assert json.loads(out.read_text())["summary"]["passed"]


def test_module_entrypoint_and_log_env():
    env = dict(os.environ, GAZEKIT_LOG="INFO")
    proc = subprocess.run(
        [sys.executable, "-m", "gazekit", "gradcheck", "--instances", "1"],
        capture_output=True, text=True, env=env,
    )
    assert proc.returncode == 0
    assert "gradcheck 0" in proc.stderr
    assert "passed" in proc.stdout
