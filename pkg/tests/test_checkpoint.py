import pytest
import torch

from layerseg.checkpoint import CheckpointError, check_state_dict, load_checkpoint, save_checkpoint, state_checksum


def test_roundtrip(tmp_path):
    t = {"a": torch.arange(4.0), "b": torch.ones(2, 2)}
    save_checkpoint(tmp_path / "x.ckpt", "backbone", {"k": 1}, t, {"m": "v"})
    header, tensors = load_checkpoint(tmp_path / "x.ckpt", "backbone")
    assert header["config"] == {"k": 1} and header["metadata"] == {"m": "v"}
    assert torch.equal(tensors["a"], t["a"])


def test_wrong_kind_and_missing(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", "meta", {}, {"a": torch.zeros(1)})
    with pytest.raises(CheckpointError, match="expected 'segmentation'"):
        load_checkpoint(tmp_path / "x.ckpt", "segmentation")
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "none.ckpt")


def test_foreign_file(tmp_path):
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="unreadable"):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_check_state_dict_names_first_problem():
    exp = {"a": torch.zeros(2), "b": torch.zeros(3)}
    with pytest.raises(CheckpointError, match="missing.*b"):
        check_state_dict(exp, {"a": torch.zeros(2)})
    with pytest.raises(CheckpointError, match="unexpected.*c"):
        check_state_dict(exp, {**exp, "c": torch.zeros(1)})
    with pytest.raises(CheckpointError, match="b"):
        check_state_dict(exp, {"a": torch.zeros(2), "b": torch.zeros(4)})
    check_state_dict(exp, {**exp, "fc.weight": torch.zeros(1)}, ignore_prefixes=("fc.",))


def test_checksum_detects_change():
    m = torch.nn.Linear(2, 2)
    before = state_checksum(m)
    assert state_checksum(m) == before
    with torch.no_grad():
        m.weight[0, 0] += 1e-7
    assert state_checksum(m) != before
