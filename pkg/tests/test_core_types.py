import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerseg.core_types import (NUM_CLASSES, TAXONOMY, ImageSample, ShapeError, ValidationError, argmax_labels,
                                 one_hot, validate_mask, validate_probs)


def test_taxonomy_order_and_palette():
    assert TAXONOMY.short_names == ("BG", "Kernel", "Buffer", "IPyC", "SiC", "OPyC")
    assert NUM_CLASSES == 6
    assert TAXONOMY.index("SiC") == 4
    pal = TAXONOMY.palette()
    assert pal.shape == (6, 3)
    assert len({tuple(c) for c in pal}) == 6
    assert tuple(pal[0]) == (0, 0, 0)


def test_one_hot_examples():
    np.testing.assert_array_equal(one_hot(np.array([[2]]), 3), [[[0, 0, 1]]])
    np.testing.assert_array_equal(one_hot(np.array([[0, 1]]), 2), [[[1, 0], [0, 1]]])


def test_one_hot_rejects_out_of_range_label():
    with pytest.raises(ValidationError, match="6"):
        one_hot(np.array([[0, 6]]), 6)


def test_argmax_examples():
    assert argmax_labels(np.array([[[0.1, 0.7, 0.2]]]))[0, 0] == 1
    assert argmax_labels(np.array([[[0.5, 0.5, 0.0]]]))[0, 0] == 0


def test_validate_mask_reports_location():
    with pytest.raises(ValidationError, match=r"\(1, 0\)"):
        validate_mask(np.array([[0, 1], [9, 2]]))
    with pytest.raises(ValidationError):
        validate_mask(np.zeros((2, 2), dtype=np.float32))


def test_validate_probs_sum():
    validate_probs(np.full((2, 2, 4), 0.25))
    with pytest.raises(ValidationError):
        validate_probs(np.full((2, 2, 4), 0.3))


def test_image_sample_validates_shapes():
    ImageSample(np.zeros((4, 4, 3), np.float32), np.zeros((4, 4), np.int64))
    with pytest.raises(ShapeError):
        ImageSample(np.zeros((4, 4, 3), np.float32), np.zeros((4, 5), np.int64))
    with pytest.raises(ValidationError):
        ImageSample(np.full((4, 4, 3), 1.5, np.float32), np.zeros((4, 4), np.int64))


masks = arrays(np.int64, st.tuples(st.integers(1, 8), st.integers(1, 8)), elements=st.integers(0, 5))


@given(masks)
def test_one_hot_argmax_roundtrip(mask):
    np.testing.assert_array_equal(argmax_labels(one_hot(mask, 6)), mask)


@given(arrays(np.float64, (3, 3, 6), elements=st.floats(0.01, 1.0)), st.floats(0.1, 10.0))
def test_argmax_invariant_under_monotone_rescale(p, k):
    p = p / p.sum(-1, keepdims=True)
    q = np.exp(k * np.log(p))
    q = q / q.sum(-1, keepdims=True)
    if np.all(np.sort(p, -1)[..., -1] - np.sort(p, -1)[..., -2] > 1e-9):
        np.testing.assert_array_equal(argmax_labels(p), argmax_labels(q))
