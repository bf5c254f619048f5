import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from layerseg.checkpoint import CheckpointError
from layerseg.core_types import ShapeError
from layerseg.metanet import MetaModelConfig, build_metanet, load_metanet, meta_forward, save_metanet, uncertainty_map
from oracles import fd_check_module


@pytest.fixture(scope="module")
def tiny():
    return build_metanet(MetaModelConfig.tiny(64), 0).eval()


def _probs(b, size, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.softmax(torch.randn(b, 6, size, size, generator=g), 1)


def test_default_channels():
    c = MetaModelConfig()
    assert c.encoder_channels[1:] == (128, 256, 512, 1024)
    assert c.decoder_channels == (256, 128, 64, 32)


def test_default_bottleneck_shape():
    model = build_metanet(MetaModelConfig(), 0).eval()
    with torch.no_grad():
        feats = model.encode(_probs(1, 64))
    assert feats[-1].shape == (1, 1024, 4, 4)  # four halvings


def test_tiny_forward_shape(tiny):
    out = meta_forward(tiny, _probs(2, 64))
    assert out.shape == (2, 64, 64)


def test_same_seed_same_parameters():
    a = build_metanet(MetaModelConfig.tiny(), 3).state_dict()
    b = build_metanet(MetaModelConfig.tiny(), 3).state_dict()
    assert all(torch.equal(a[k], b[k]) for k in a)


def test_rejects_wrong_channels(tiny):
    with pytest.raises(ShapeError):
        tiny(torch.rand(1, 5, 64, 64))


def test_output_strictly_inside_unit_interval():
    model = build_metanet(MetaModelConfig.tiny(32), 0).eval()
    with torch.no_grad():
        model.head.bias.fill_(1e4)
        hi = model(_probs(1, 32))
        model.head.bias.fill_(-1e4)
        lo = model(_probs(1, 32))
    assert hi.max() < 1 and lo.min() > -1


@given(st.floats(-1, 1, allow_nan=False))
def test_uncertainty_map_involution(v):
    x = np.array([v])
    assert uncertainty_map(uncertainty_map(x))[0] == v


def test_uncertainty_examples():
    np.testing.assert_allclose(uncertainty_map(np.array([0.9, -0.8, 0.0])), [-0.9, 0.8, 0.0])


def test_gradient_check_tiny():
    model = build_metanet(MetaModelConfig.tiny(64), 2).double().eval()
    p = _probs(1, 64, 1).double()
    assert fd_check_module(model, lambda: model(p).mean()) < 1e-3


def test_checkpoint_kind_is_checked(tmp_path, tiny):
    path = save_metanet(tmp_path / "m.ckpt", tiny)
    model, _ = load_metanet(path)
    with torch.no_grad():
        assert torch.equal(model(_probs(1, 64)), tiny(_probs(1, 64)))
    from layerseg.segnet import load_segnet
    with pytest.raises(CheckpointError, match="meta"):
        load_segnet(path)
