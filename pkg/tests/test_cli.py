import json

import pytest

from conftest import TINY
from tkpcl.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    base = [*TINY, f"output_dir={root}", "run_id=r1"]
    args = [a for item in base for a in ("--set", item)]
    assert main(["datagen", *args]) == 0
    assert main(["train", *args]) == 0
    return root, args


def files_bytes(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


def test_datagen_layout_and_manifest(workspace):
    root, _ = workspace
    ds = root / "dataset"
    manifest = json.loads((ds / "manifest.json").read_text())
    assert manifest["n_train"] == len(list((ds / "train/images").glob("*.ppm"))) == 8
    assert manifest["n_val"] == len(list((ds / "val/masks").glob("*.pgm"))) == 4
    assert "train.k=3" in (ds / "config.txt").read_text()


def test_datagen_rerun_byte_identical(workspace, tmp_path):
    _, args = workspace
    assert main(["datagen", *args, "--data", str(tmp_path / "a")]) == 0
    assert main(["datagen", *args, "--data", str(tmp_path / "b")]) == 0
    assert files_bytes(tmp_path / "a") == files_bytes(tmp_path / "b")


def test_train_outputs(workspace):
    root, _ = workspace
    run = root / "r1"
    records = [json.loads(l) for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["lr"] for r in records if r["epoch"] <= 2] == [1e-3] * 4
    assert {r["lr"] for r in records if r["epoch"] == 3} == {1e-4}
    assert (run / "checkpoint.tkp").exists() and (run / "config.txt").exists()


def test_resume_continues_epochs(workspace, tmp_path):
    root, args = workspace
    run = tmp_path / "run"
    assert main(["train", *args, "--out", str(run), "--set", "train.max_epochs=2"]) == 0
    assert main(["train", *args, "--out", str(run), "--resume", str(run / "checkpoint.tkp")]) == 0
    epochs = [json.loads(l)["epoch"] for l in (run / "metrics.jsonl").read_text().splitlines()]
    assert epochs == [1, 1, 2, 2, 3, 3]


def test_eval_and_infer(workspace, tmp_path):
    root, args = workspace
    report = tmp_path / "eval.json"
    assert main(["eval", *args, "--split", "val", "--report", str(report)]) == 0
    doc = json.loads(report.read_text())
    assert 0.0 <= doc["miou"] <= 1.0 and doc["config"]["train.k"] == 3
    masks = tmp_path / "masks"
    assert main(["infer", *args, "--split", "train", "--masks-out", str(masks)]) == 0
    assert len(list(masks.glob("*.pgm"))) == 8 and (masks / "config.txt").exists()


def test_eval_on_ground_truth_masks_is_perfect(workspace, tmp_path):
    root, args = workspace
    report = tmp_path / "gt.json"
    gt_dir = root / "dataset/val/masks"
    assert main(["eval", *args, "--split", "val", "--masks", str(gt_dir), "--report", str(report)]) == 0
    assert json.loads(report.read_text())["miou"] == 1.0


def test_config_errors_exit_2(workspace):
    _, args = workspace
    assert main(["train", *args, "--set", "train.epsilon=0.4"]) == 2
    assert main(["train", *args, "--set", "train.nope=1"]) == 2
    assert main(["datagen", "--config", "/nonexistent.cfg"]) == 2


def test_missing_artifacts_exit_4(workspace, tmp_path):
    _, args = workspace
    assert main(["train", *args, "--data", str(tmp_path / "nothing")]) == 4
    assert main(["eval", *args, "--checkpoint", str(tmp_path / "none.tkp")]) == 4
    assert main(["train", *args, "--resume", str(tmp_path / "none.tkp")]) == 4
    assert main(["eval", *args, "--masks", str(tmp_path / "nomasks")]) == 4


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nan_abort_exit_3(workspace, tmp_path):
    _, args = workspace
    # stored pixels are always finite, so divergence is forced through the learning rate
    assert main(["train", *args, "--out", str(tmp_path / "run"),
                 "--set", "train.lr_phase1=1e300", "--set", "train.max_epochs=2"]) == 3
    last = json.loads((tmp_path / "run/metrics.jsonl").read_text().splitlines()[-1])
    assert last["event"] == "nonfinite"


def test_gradcheck_command(workspace, tmp_path):
    _, args = workspace
    assert main(["gradcheck", *args, "--seeds", "0", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "gradcheck.json").read_text())
    assert doc["passed"] and len(doc["checks"]) == 8


def test_ablate_and_sweep_commands(workspace, tmp_path):
    _, args = workspace
    small = [*args, "--set", "train.max_epochs=1", "--out", str(tmp_path)]
    assert main(["ablate", *small]) == 0
    rows = json.loads((tmp_path / "ablation.json").read_text())["rows"]
    assert [(r["pooling_mode"], r["pce"]) for r in rows] == [("avg", False), ("max", False), ("topk", False), ("topk", True)]
    assert main(["sweep", *small, "--param", "k", "--values", "1,2"]) == 0
    points = json.loads((tmp_path / "sweep-k.json").read_text())["points"]
    assert [p["k"] for p in points] == [1, 2]
    assert main(["sweep", *small, "--param", "epsilon", "--values", "0.5"]) == 2


def test_seed_env(workspace, tmp_path, monkeypatch):
    _, args = workspace
    monkeypatch.setenv("TKP_SEED", "5")
    assert main(["train", *args, "--out", str(tmp_path), "--set", "train.max_epochs=1"]) == 0
    assert "train.seed=5" in (tmp_path / "config.txt").read_text().splitlines()
