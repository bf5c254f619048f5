import csv
import json

import cv2
import numpy as np
import pytest

from layerseg.cli import main


def run(*argv):
    return main([str(a) for a in argv])


def test_synth_count_zero_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("synth", "--count", "0", "--out", tmp_path)
    assert e.value.code == 2


def test_train_meta_requires_seg_checkpoint(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("train-meta", "--manifest", tmp_path / "m.json")
    assert e.value.code == 2


def test_tau_out_of_range_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as e:
        run("eval", "--seg-checkpoint", "x", "--manifest", "y", "--tau", "2")
    assert e.value.code == 2


def test_synth_table_defaults_and_idempotent(tmp_path):
    assert run("synth", "--profile", "agr567like", "--count", 510, "--seed", 7, "--canvas", 64,
               "--out", tmp_path / "a") == 0
    doc = json.loads((tmp_path / "a" / "manifest.json").read_text())
    sizes = [sum(s["split"] == k for s in doc["samples"]) for k in ("train", "val", "test")]
    assert sizes == [326, 82, 102]
    first = (tmp_path / "a" / "manifest.json").read_bytes()
    img = (tmp_path / "a" / "images" / "00042.png").read_bytes()
    assert run("synth", "--profile", "agr567like", "--count", 510, "--seed", 7, "--canvas", 64,
               "--out", tmp_path / "a") == 0
    assert (tmp_path / "a" / "manifest.json").read_bytes() == first
    assert (tmp_path / "a" / "images" / "00042.png").read_bytes() == img


def test_artifacts_env(tmp_path, monkeypatch):
    monkeypatch.setenv("LAYERSEG_ARTIFACTS", str(tmp_path))
    assert run("synth", "--count", 3, "--canvas", 64) == 0
    assert (tmp_path / "data" / "manifest.json").exists()


def test_missing_manifest_is_runtime_error(tmp_path):
    assert run("train-seg", "--manifest", tmp_path / "none.json", "--epochs", 1, "--out", tmp_path) == 1


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    assert run("synth", "--count", 12, "--seed", 1, "--canvas", 64, "--splits", 0.5, 0.25, 0.25,
               "--out", data) == 0
    m = data / "manifest.json"
    assert run("train-seg", "--manifest", m, "--stage", 2, "--epochs", 1, "--out", root / "s2") == 0
    assert run("train-seg", "--manifest", m, "--stage", 3, "--init", root / "s2" / "stage2_best.ckpt",
               "--epochs", 1, "--out", root / "s3") == 0
    assert run("train-meta", "--manifest", m, "--seg-checkpoint", root / "s3" / "stage3_best.ckpt",
               "--epochs", 1, "--batch-size", 4, "--out", root / "meta") == 0
    return root


def test_finetune_starts_from_stage2(trained):
    import torch
    from layerseg.segnet import load_segnet

    s2, _ = load_segnet(trained / "s2" / "stage2_best.ckpt")
    s3, _ = load_segnet(trained / "s3" / "stage3_best.ckpt")
    fresh_dist = sum((a - b).abs().sum() for a, b in zip(s2.parameters(), s3.parameters()))
    assert torch.isfinite(fresh_dist) and fresh_dist > 0
    log = [json.loads(l) for l in (trained / "s3" / "stage3.jsonl").read_text().splitlines()]
    assert log[0]["info"]["stage"] == "3"


def test_eval_reports(trained, tmp_path):
    args = ["eval", "--manifest", trained / "data" / "manifest.json",
            "--seg-checkpoint", trained / "s3" / "stage3_best.ckpt",
            "--meta-checkpoint", trained / "meta" / "meta_best.ckpt"]
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0
    a = json.loads((tmp_path / "a" / "seg_report.json").read_text())
    assert a == json.loads((tmp_path / "b" / "seg_report.json").read_text())
    header = next(csv.reader((tmp_path / "a" / "seg_table.csv").open()))
    assert header[2:] == ["BG", "Kernel", "Buffer", "IPyC", "SiC", "OPyC", "All"]
    uq = json.loads((tmp_path / "a" / "uq_report.json").read_text())
    for key in ("AP", "AP-E", "MSE", "Spec", "Sens", "F1-SS", "tau"):
        assert key in uq
    assert run(*args, "--tau", "0.3", "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c" / "uq_report.json").read_text())["tau"] == 0.3


def test_predict_outputs(trained, tmp_path):
    data = trained / "data"
    bad = tmp_path / "broken.png"
    bad.write_bytes(b"nope")
    code = run("predict", "--seg-checkpoint", trained / "s3" / "stage3_best.ckpt",
               "--meta-checkpoint", trained / "meta" / "meta_best.ckpt",
               "--images", data / "images" / "00000.png", bad,
               "--masks", data / "masks" / "00000.png", data / "masks" / "00000.png",
               "--out", tmp_path / "p")
    assert code == 1  # one bad input, batch continues
    files = sorted(p.name for p in (tmp_path / "p").iterdir())
    assert files == ["00000_error.png", "00000_mask.png", "00000_overlay.png", "00000_uncertainty.png"]
    mask = cv2.imread(str(tmp_path / "p" / "00000_mask.png"), cv2.IMREAD_UNCHANGED)
    assert set(np.unique(mask)) <= set(range(6))


def test_predict_manifest_split(trained, tmp_path):
    code = run("predict", "--seg-checkpoint", trained / "s3" / "stage3_best.ckpt",
               "--manifest", trained / "data" / "manifest.json", "--split", "val", "--out", tmp_path)
    assert code == 0
    assert len(list(tmp_path.glob("*_mask.png"))) == 3
    assert len(list(tmp_path.glob("*_uncertainty.png"))) == 0
