"""End-to-end CLI checks: exit codes, artifact layout, determinism, and the
workdir lock."""

import json
import os

import numpy as np
import pytest

from segadapt.cli import LOCK_NAME, main
from segadapt.report import read_eval


def run_cli(tmp_path, *argv):
    return main(["--workdir", str(tmp_path), *argv])


def write_config(path, **over):
    base = {
        "model": {"widths": "4,6,8", "dilations": "1,1,2", "pool_strides": "2,2"},
        "train": {"seed": "0", "batch_size": "4"},
        "data": {"source_train": "data/source_train/manifest.json",
                 "source_val": "data/source_val/manifest.json",
                 "target_train": "data/target_train/manifest.json",
                 "target_test": "data/target_test/manifest.json",
                 "stats": "stats.json"},
        "source": {"epochs": "2", "lr_model": "0.1"},
        "ga": {"epochs": "1", "lr_model": "0.01", "lr_domain": "0.05",
               "lambda_da": "0.2", "domain_fit_steps": "20",
               "domain_fit_images": "4"},
        "ga_ca": {"epochs": "1", "lr_model": "0.01", "lr_domain": "0.05",
                  "lambda_da": "0.2", "lambda_mi": "0.1",
                  "domain_fit_steps": "20", "domain_fit_images": "4"},
    }
    for section, kv in over.items():
        base.setdefault(section, {}).update(kv)
    with open(path, "w") as f:
        for section, kv in base.items():
            f.write(f"[{section}]\n")
            for k, v in kv.items():
                f.write(f"{k} = {v}\n")
            f.write("\n")


@pytest.fixture()
def pipeline_dir(tmp_path):
    assert run_cli(tmp_path, "gen-data", "--preset", "small", "--seed", "5",
                   "--out", "data", "--n", "8") == 0
    write_config(tmp_path / "run.ini")
    return tmp_path


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gen-data", "--preset", "enormous", "--seed", "1", "--out", "d"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        main(["no-such-command"])
    assert e.value.code == 2


def test_runtime_errors_exit_1(tmp_path, capsys):
    rc = run_cli(tmp_path, "stats", "--manifest", "missing/manifest.json",
                 "--out", "stats.json")
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_gen_data_layout_and_determinism(tmp_path):
    assert run_cli(tmp_path / "a", "gen-data", "--preset", "small",
                   "--seed", "3", "--out", "data", "--n", "8") == 0
    assert run_cli(tmp_path / "b", "gen-data", "--preset", "small",
                   "--seed", "3", "--out", "data", "--n", "8") == 0
    for split in ("source_train", "source_val", "target_train", "target_test"):
        ma = json.loads((tmp_path / "a/data" / split / "manifest.json").read_text())
        mb = json.loads((tmp_path / "b/data" / split / "manifest.json").read_text())
        assert ma == mb
        first = ma["pairs"][0][0]
        assert ((tmp_path / "a/data" / split / first).read_bytes()
                == (tmp_path / "b/data" / split / first).read_bytes())
    # labeled splits of the two domains share layout seeds only within a split
    assert (json.loads((tmp_path / "a/data/source_train/manifest.json").read_text())
            ["config_hash"]
            != json.loads((tmp_path / "a/data/target_train/manifest.json").read_text())
            ["config_hash"])


def test_full_pipeline_produces_reports(pipeline_dir, capsys):
    wd = pipeline_dir
    assert run_cli(wd, "stats", "--manifest", "data/source_train/manifest.json",
                   "--out", "stats.json") == 0
    assert run_cli(wd, "train", "--phase", "source", "--config", "run.ini") == 0
    assert run_cli(wd, "train", "--phase", "ga", "--config", "run.ini",
                   "--resume", "checkpoints/source.ckpt") == 0
    assert run_cli(wd, "train", "--phase", "ga-ca", "--config", "run.ini",
                   "--resume", "checkpoints/ga.ckpt") == 0
    for phase in ("source", "ga", "ga_ca"):
        assert (wd / "checkpoints" / f"{phase}.ckpt").exists()
        assert (wd / "logs" / f"{phase}.tsv").exists()
        assert (wd / "logs" / f"{phase}_curves.png").exists()

    header = (wd / "logs" / "source.tsv").read_text().splitlines()[0]
    assert header.split("\t")[:2] == ["phase", "epoch"]

    assert run_cli(wd, "eval", "--checkpoint", "checkpoints/source.ckpt",
                   "--manifest", "data/target_test/manifest.json",
                   "--out", "eval_source.json") == 0
    assert run_cli(wd, "eval", "--checkpoint", "checkpoints/ga_ca.ckpt",
                   "--manifest", "data/target_test/manifest.json",
                   "--out", "eval_ga_ca.json") == 0
    doc = read_eval(wd / "eval_source.json")
    assert 0.0 <= doc["miou"] <= 1.0
    assert len(doc["per_class_iou"]) == 6

    capsys.readouterr()
    assert run_cli(wd, "report", "--evals", "eval_source.json", "eval_ga_ca.json",
                   "--out", "report.tsv") == 0
    table = capsys.readouterr().out
    assert (wd / "report.tsv").exists() and (wd / "report.png").exists()
    lines = [l for l in table.strip().splitlines() if l]
    assert len(lines) == 3   # header + two methods
    assert lines[0].startswith("method")


def test_eval_rejects_label_space_mismatch(pipeline_dir, capsys):
    wd = pipeline_dir
    assert run_cli(wd, "train", "--phase", "source", "--config", "run.ini") == 0
    manifest_path = wd / "data/target_test/manifest.json"
    doc = json.loads(manifest_path.read_text())
    doc["num_classes"] = 4
    manifest_path.write_text(json.dumps(doc))
    rc = run_cli(wd, "eval", "--checkpoint", "checkpoints/source.ckpt",
                 "--manifest", "data/target_test/manifest.json",
                 "--out", "eval.json")
    assert rc == 1
    assert "label-space mismatch" in capsys.readouterr().err


def test_report_with_no_readable_evals_fails(tmp_path, capsys):
    rc = run_cli(tmp_path, "report", "--evals", "missing.json", "--out", "r.tsv")
    assert rc == 1


def test_workdir_lock_blocks_concurrent_runs(tmp_path, capsys):
    os.makedirs(tmp_path, exist_ok=True)
    (tmp_path / LOCK_NAME).write_text("123")
    rc = run_cli(tmp_path, "gen-data", "--preset", "small", "--seed", "1",
                 "--out", "data", "--n", "8")
    assert rc == 1
    assert "locked" in capsys.readouterr().err
    (tmp_path / LOCK_NAME).unlink()
    assert run_cli(tmp_path, "gen-data", "--preset", "small", "--seed", "1",
                   "--out", "data", "--n", "8") == 0
    assert not (tmp_path / LOCK_NAME).exists()


def test_env_var_overrides_workdir(tmp_path, monkeypatch):
    target = tmp_path / "env_wd"
    monkeypatch.setenv("SEGADAPT_WORKDIR", str(target))
    rc = main(["--workdir", str(tmp_path / "flag_wd"),
               "gen-data", "--preset", "small", "--seed", "2",
               "--out", "data", "--n", "8"])
    assert rc == 0
    assert (target / "data/source_train/manifest.json").exists()
    assert not (tmp_path / "flag_wd").exists()
