import filecmp

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerseg.core_types import BUFFER, IPYC, KERNEL, OPYC, SIC
from layerseg.synthgen import (PROFILES, ConfigurationError, DatasetManifest, DomainProfile, generate_dataset,
                               generate_sample, label_mask, material_map, render_particle, sample_particle_spec,
                               sample_seed, split_sizes)


def test_missing_opyc_rate():
    rng = np.random.default_rng(0)
    prof = PROFILES["agr2like"]
    hits = sum(sample_particle_spec(rng, prof, 512).has("missing-OPyC") for _ in range(10_000))
    assert abs(hits / 10_000 - 0.81) <= 0.01


def test_spec_determinism():
    a = sample_particle_spec(np.random.default_rng(5), PROFILES["agr567like"], 128)
    b = sample_particle_spec(np.random.default_rng(5), PROFILES["agr567like"], 128)
    assert a == b


def test_zero_rate_profile_has_no_defects():
    prof = DomainProfile(name="clean", missing_opyc_prob=0.0, gap_prob=0.0)
    rng = np.random.default_rng(1)
    assert all(sample_particle_spec(rng, prof, 128).defects == () for _ in range(50))


def test_canvas_too_small():
    with pytest.raises(ConfigurationError):
        sample_particle_spec(np.random.default_rng(0), PROFILES["easy"], 32)


def test_bad_profile_probability():
    with pytest.raises(ConfigurationError):
        DomainProfile(name="bad", missing_opyc_prob=1.5)


def test_defect_free_mask_is_nested_annuli():
    spec, sample = generate_sample(PROFILES["easy"], 11, 256)
    yy, xx = np.mgrid[0:256, 0:256] + 0.5
    r = np.hypot(xx - spec.center[0], yy - spec.center[1])
    rk, rb, ri, rs, ro = spec.radii
    m = sample.mask
    assert np.all(m[r < rk] == KERNEL)
    assert np.all(m[(r >= rk) & (r < rb)] == BUFFER)
    assert np.all(m[(r >= rb) & (r < ri)] == IPYC)
    assert np.all(m[(r >= ri) & (r < rs)] == SIC)
    assert np.all(m[(r >= rs) & (r < ro)] == OPYC)
    assert np.all(m[r >= ro] == 0)


def _find(profile, canvas, want):
    for seed in range(2000):
        spec = sample_particle_spec(np.random.default_rng(seed), profile, canvas)
        if want(spec):
            return seed, spec
    raise AssertionError("no matching spec")


def test_gap_bridge_connects_buffer_and_ipyc():
    _, spec = _find(PROFILES["agr567like"], 256, lambda s: s.has("gap-bridge") and s.gap_width >= 3
                    and not s.has("crack"))
    mask = label_mask(material_map(spec, 256))
    yy, xx = np.mgrid[0:256, 0:256] + 0.5
    r = np.hypot(xx - spec.center[0], yy - spec.center[1])
    rb = spec.radii[1]
    gap = (r >= rb - spec.gap_width) & (r < rb)
    assert np.any(mask[gap] == 0), "gap annulus should be background"
    assert np.any(mask[gap] == BUFFER), "bridge should be buffer inside the gap"
    bridge = [d for d in spec.defects if d.kind == "gap-bridge"][0]
    assert bridge.params["width"] >= 1


def test_missing_opyc_mask():
    seed, spec = _find(PROFILES["agr2like"], 128, lambda s: s.has("missing-OPyC"))
    sample = render_particle(spec, 128, np.random.default_rng(seed))
    assert not np.any(sample.mask == OPYC)


def test_split_sizes_examples():
    assert split_sizes(510, (0.64, 0.16, 0.20)) == (326, 82, 102)
    assert split_sizes(10, (0.8, 0.1, 0.1)) == (8, 1, 1)
    with pytest.raises(ConfigurationError):
        split_sizes(10, (0.5, 0.1, 0.1))


@given(st.integers(0, 2000), st.floats(0, 1), st.floats(0, 1))
def test_split_sizes_cover_count(count, a, b):
    a, b = a / 2, b / 2
    sizes = split_sizes(count, (1 - a - b, a, b))
    assert sum(sizes) == count and min(sizes) >= 0


def test_sample_seed_is_pure():
    assert sample_seed(3, 7) == sample_seed(3, 7) != sample_seed(3, 8)


def test_generate_dataset_deterministic(tmp_path):
    a = generate_dataset("agr567like", 8, (0.5, 0.25, 0.25), 4, tmp_path / "a", 64)
    b = generate_dataset("agr567like", 8, (0.5, 0.25, 0.25), 4, tmp_path / "b", 64)
    assert (tmp_path / "a/manifest.json").read_bytes().replace(b"/a", b"") == \
        (tmp_path / "b/manifest.json").read_bytes().replace(b"/b", b"")
    for e in a.samples:
        assert filecmp.cmp(a.resolve(e["image"]), b.resolve(e["image"]), shallow=False)
        assert filecmp.cmp(a.resolve(e["mask"]), b.resolve(e["mask"]), shallow=False)
    loaded = DatasetManifest.load(tmp_path / "a/manifest.json")
    assert loaded.samples == a.samples
    assert [len(loaded.split(s)) for s in ("train", "val", "test")] == [4, 2, 2]


def test_manifest_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        DatasetManifest.load(tmp_path / "nope.json")


def test_class_coverage_agr567like():
    present = np.zeros(6)
    for i in range(100):
        _, s = generate_sample(PROFILES["agr567like"], sample_seed(0, i), 64)
        present += np.isin(np.arange(6), s.mask)
    assert np.all(present >= 95)


@given(st.integers(0, 10_000), st.sampled_from(sorted(PROFILES)))
def test_rendered_sample_is_valid(seed, profile):
    spec, s = generate_sample(PROFILES[profile], seed, 64)
    assert spec.fits(64)
    assert s.image.shape == (64, 64, 3) and 0 <= s.image.min() and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= set(range(6))
