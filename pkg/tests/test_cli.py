import json

import pytest

from maskguide.cli import LAMBDA_GRID, main


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv("MASKGUIDE_OUTPUT_ROOT", str(tmp_path))
    return tmp_path


@pytest.fixture
def dataset(root):
    assert main(["generate", "--n", "20", "--balance", "0.3", "--seed", "7", "--grid", "24", "24", "12",
                 "--out", "ph"]) == 0
    return root / "ph"


TINY = ["--max-epochs", "2", "--warmup", "1", "--patience", "1", "--batch-size", "4"]


def test_generate_deterministic_and_counts(root):
    for out in ("a", "b"):
        assert main(["generate", "--n", "100", "--balance", "0.27", "--seed", "7", "--grid", "16", "16", "8",
                     "--out", out]) == 0
    a, b = (root / "a" / "manifest.json").read_bytes(), (root / "b" / "manifest.json").read_bytes()
    assert a == b
    assert sum(c["label"] for c in json.loads(a)["cases"]) == 27
    assert json.loads((root / "a" / "resolved" / "config.json").read_text())["class_balance"] == 0.27


def test_balance_out_of_range(root, capsys):
    assert main(["generate", "--balance", "1.5", "--out", "x"]) == 2
    assert "class_balance" in capsys.readouterr().err
    assert not (root / "x").exists()


def test_unknown_config_key_rejected(root, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 10, "colour": "red"}))
    assert main(["generate", "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err


def test_flags_override_file(root, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"n": 10, "class_balance": 0.5, "grid": [16, 16, 8], "output_dir": "f"}))
    assert main(["generate", "--config", str(cfg), "--n", "12"]) == 0
    assert len(json.loads((root / "f" / "manifest.json").read_text())["cases"]) == 12


def test_train_structure_and_determinism(dataset, root):
    args = ["train", "--spec", "doctor_in_the_loop", "--dataset", "ph", "--folds", "5", *TINY]
    assert main(args + ["--out", "r1"]) == 0
    assert main(args + ["--out", "r2"]) == 0
    assert (root / "r1" / "metrics.csv").read_bytes() == (root / "r2" / "metrics.csv").read_bytes()
    folds = sorted(p.name for p in (root / "r1").glob("fold*"))
    assert folds == [f"fold{k}" for k in range(5)]
    for f in folds:
        assert sorted(p.name for p in (root / "r1" / f).glob("stage*")) == ["stage0", "stage1", "stage2"]
    resolved = json.loads((root / "r1" / "config.json").read_text())
    assert resolved["train"]["max_epochs"] == 2 and resolved["seed"] == 0


def test_segmentation_logs_have_no_lambda(dataset, root):
    assert main(["train", "--spec", "segmentation", "--dataset", "ph", "--out", "seg", *TINY]) == 0
    for log in (root / "seg").glob("fold*/stage*/epochs.jsonl"):
        for line in log.read_text().splitlines():
            rec = json.loads(line)
            assert "lambda" not in rec and "L_xai" not in rec and rec["L"] == rec["L_cls"]


def test_train_missing_dataset_is_io_error(root):
    assert main(["train", "--dataset", "nowhere", *TINY]) == 3


def test_train_bad_spec_config(root, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"spec": "radiomics_features", "dataset": "x"}))
    assert main(["train", "--config", str(cfg)]) == 2  # competitor without classifier


def test_nan_abort_exit_code(dataset, root, capsys):
    assert main(["train", "--dataset", "ph", "--lr", "1e30", "--out", "nan", *TINY]) == 4
    err = capsys.readouterr().err
    assert "stage=" in err and "fold=" in err


def test_report_and_missing_record(dataset, root):
    for out in ("a", "b"):
        assert main(["train", "--spec", "xai_guide", "--dataset", "ph", "--out", out, *TINY]) == 0
    assert main(["report", "a", "b", "--out", "rep"]) == 0
    for name in ("performance", "attention", "significance", "competitors"):
        assert (root / "rep" / f"{name}.csv").exists()
    sig = (root / "rep" / "significance.csv").read_text()
    assert "a vs b" in sig and "undefined" in sig
    assert list((root / "rep" / "panels").glob("*.png"))
    assert main(["report", "missing", "--out", "rep2"]) == 5
    (root / "a" / "fold0" / "record.json").write_text("garbage")
    assert main(["report", "a", "--out", "rep3"]) == 5


def test_sweep_grid_default():
    assert LAMBDA_GRID[0] == 0.1 and LAMBDA_GRID[-1] == 2.0 and len(LAMBDA_GRID) == 20


def test_sweep_small(dataset, root):
    assert main(["sweep", "--dataset", "ph", "--lambdas", "0.5", "1.0", "--folds", "3", "--out", "sw", *TINY]) == 0
    lines = (root / "sw" / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("lam,") and [l.split(",")[0] for l in lines[1:]] == ["0.500000", "1.000000"]
