"""CLI behavior: exit codes, file outputs, idempotence."""

import json
import subprocess
import sys
from pathlib import Path

import pytest

from strokepred import cli
from strokepred.cli import (EXIT_CONFIG, EXIT_LOCKBOX, EXIT_OK, main,
                            parse_seeds)

RUN_CFG = {"run": {"image_size": 32, "channels": [4, 8],
                   "train": {"lrs": [1e-3], "max_epochs": 3}}}


def test_parse_seeds_forms():
    assert parse_seeds("1-4") == (1, 2, 3, 4)
    assert parse_seeds("7") == (7,)
    assert parse_seeds("1,5,9") == (1, 5, 9)
    assert parse_seeds("1-3,8") == (1, 2, 3, 8)


def test_parse_seeds_empty_rejected():
    with pytest.raises(cli.ConfigError):
        parse_seeds(",")


@pytest.fixture(scope="module")
def cohort_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cohort")
    code = main(["synth", "--out", str(out), "--subjects", "80",
                 "--dims", "32", "--seed", "5"])
    assert code == EXIT_OK
    return out


@pytest.fixture(scope="module")
def run_dir(cohort_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "cfg.json"
    cfg.write_text(json.dumps(RUN_CFG))
    code = main(["run", "--cohort", str(cohort_dir), "--out", str(out / "r"),
                 "--seeds", "1,2", "--config", str(cfg), "--force"])
    assert code == EXIT_OK
    return out / "r"


def test_synth_writes_manifest(cohort_dir):
    assert (cohort_dir / "manifest.json").exists()
    assert (cohort_dir / "atlas.vol").exists()


def test_synth_prints_summary(cohort_dir, capsys, tmp_path):
    main(["synth", "--out", str(tmp_path / "c2"), "--subjects", "80",
          "--dims", "32", "--seed", "5"])
    out = capsys.readouterr().out
    assert "aphasic fraction" in out
    assert "severity distribution" in out


def test_synth_refuses_nonempty_without_force(cohort_dir):
    assert main(["synth", "--out", str(cohort_dir), "--subjects", "80",
                 "--dims", "32", "--seed", "5"]) == EXIT_CONFIG


def test_synth_force_is_idempotent(cohort_dir, tmp_path):
    before = (cohort_dir / "manifest.json").read_bytes()
    code = main(["synth", "--out", str(cohort_dir), "--subjects", "80",
                 "--dims", "32", "--seed", "5", "--force"])
    assert code == EXIT_OK
    assert (cohort_dir / "manifest.json").read_bytes() == before


def test_run_outputs(run_dir):
    for name in ("per_seed.csv", "summary.csv", "subgroup.csv",
                 "thresholds.csv", "index.json", "audit.jsonl"):
        assert (run_dir / name).exists(), name
    assert (run_dir / "checkpoints" / "seed-001.ckp").exists()


def test_run_threshold_table_has_nine_columns(run_dir):
    header = (run_dir / "thresholds.csv").read_text().splitlines()[0]
    assert len(header.split(",")) == 10  # seed + 9 thresholds


def test_run_audit_single_unlock(run_dir):
    from strokepred.evalharness import audit_scan
    scan = audit_scan(run_dir / "audit.jsonl")
    assert scan["n_unlocks"] == 1
    assert scan["pre_unlock_lockbox_accesses"] == 0
    assert scan["n_violations"] == 0


def test_run_rerun_is_bit_identical(cohort_dir, run_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(RUN_CFG))
    out2 = tmp_path / "r2"
    code = main(["run", "--cohort", str(cohort_dir), "--out", str(out2),
                 "--seeds", "1,2", "--config", str(cfg)])
    assert code == EXIT_OK
    for name in ("per_seed.csv", "summary.csv", "subgroup.csv",
                 "thresholds.csv"):
        assert (out2 / name).read_bytes() == (run_dir / name).read_bytes()


def test_run_refuses_nonempty_without_force(cohort_dir, run_dir, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(RUN_CFG))
    assert main(["run", "--cohort", str(cohort_dir), "--out", str(run_dir),
                 "--seeds", "1", "--config", str(cfg)]) == EXIT_CONFIG


def test_run_rejects_fusion_hybrid_combo(cohort_dir, tmp_path):
    assert main(["run", "--cohort", str(cohort_dir),
                 "--out", str(tmp_path / "x"), "--variant", "hybrid-gm-roi",
                 "--model", "daft", "--seeds", "1"]) == EXIT_CONFIG


def test_run_rejects_bad_variant_via_argparse(cohort_dir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["run", "--cohort", str(cohort_dir), "--out", str(tmp_path / "x"),
              "--variant", "nope", "--seeds", "1"])
    assert exc.value.code == EXIT_CONFIG


def test_run_missing_cohort_dir(tmp_path):
    assert main(["run", "--cohort", str(tmp_path / "nowhere"),
                 "--out", str(tmp_path / "x"), "--seeds", "1"]) == EXIT_CONFIG


def test_explain_command(cohort_dir, run_dir, tmp_path, capsys):
    out = tmp_path / "expl"
    code = main(["explain", "--cohort", str(cohort_dir), "--run", str(run_dir),
                 "--out", str(out), "--n-explain", "2", "--n-perturb", "40"])
    assert code == EXIT_OK
    assert (out / "roi_ranking.csv").exists()
    files = sorted((out / "explanations").iterdir())
    assert any(f.suffix == ".json" for f in files)
    assert any(f.suffix == ".txt" for f in files)
    doc = json.loads(next(f for f in files if f.suffix == ".json").read_text())
    assert "importance" in doc and "base_probability" in doc


def test_explain_variant_mismatch(cohort_dir, run_dir, tmp_path):
    assert main(["explain", "--cohort", str(cohort_dir), "--run", str(run_dir),
                 "--out", str(tmp_path / "e"), "--variant", "stitched",
                 ]) == EXIT_CONFIG


def test_explain_missing_checkpoint_seed(cohort_dir, run_dir, tmp_path):
    assert main(["explain", "--cohort", str(cohort_dir), "--run", str(run_dir),
                 "--out", str(tmp_path / "e"), "--seed", "99"]) == EXIT_CONFIG


def test_explain_rejects_non_run_dir(cohort_dir, tmp_path):
    assert main(["explain", "--cohort", str(cohort_dir),
                 "--run", str(tmp_path), "--out", str(tmp_path / "e"),
                 ]) == EXIT_CONFIG


def test_select_rois_command(cohort_dir, run_dir, tmp_path):
    out = tmp_path / "sel"
    code = main(["select-rois", "--cohort", str(cohort_dir),
                 "--run", str(run_dir), "--out", str(out),
                 "--counts", "3-4", "--n-explain", "2", "--n-perturb", "40",
                 "--sweep-epochs", "2"])
    assert code == EXIT_OK
    doc = json.loads((out / "selection.json").read_text())
    assert doc["best_k"] in (3, 4)
    assert len(doc["rois"]) == doc["best_k"]
    assert (out / "roi_curve.csv").exists()
    assert (out / "roi_curve.svg").exists()


def test_report_command(run_dir, capsys):
    assert main(["report", "--run", str(run_dir)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "balanced_accuracy" in out
    assert "unlock" in out


def test_violating_script_exits_with_lockbox_code():
    proc = subprocess.run(
        [sys.executable, str(Path(__file__).parent / "violate_lockbox.py")],
        capture_output=True, text=True)
    assert proc.returncode == EXIT_LOCKBOX
    assert "blocked" in proc.stderr


def test_entry_point_help():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0
