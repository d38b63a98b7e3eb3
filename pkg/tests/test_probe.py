import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from focseg.data import SyntheticSceneSpec, generate_scene
from focseg.model import ModelConfig, Segmenter
from focseg.probe import band_contrast, boundary_band, local_variation_map, normalise, resample


def brute_force_variation(f):
    """Triple loop over pixels and neighbours."""
    c, h, w = f.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            ds = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if (dy, dx) == (0, 0):
                        continue
                    ny, nx = y + dy, x + dx
                    if 0 <= ny < h and 0 <= nx < w:
                        ds.append(np.sqrt(sum((f[k, y, x] - f[k, ny, nx]) ** 2 for k in range(c))))
            out[y, x] = sum(ds) / len(ds)
    return out


def test_constant_field_is_zero():
    v = local_variation_map(np.full((3, 5, 7), 2.5), (10, 14))
    assert np.array_equal(v.values, np.zeros((10, 14)))


def test_row_example():
    v = local_variation_map(np.array([[[0.0, 1.0, 0.0]]]), (1, 3)).values
    assert v.tolist() == [[1.0, 1.0, 1.0]]


def test_degenerate_size():
    with pytest.raises(ValueError):
        local_variation_map(np.zeros((1, 1, 1)), (1, 1))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    c, h, w = rng.integers(1, 5), rng.integers(2, 17), rng.integers(2, 17)
    f = rng.normal(size=(c, h, w))
    assert np.allclose(local_variation_map(f, (h, w)).values, brute_force_variation(f), atol=1e-6)


def test_resampling_happens_before_distances(rng):
    f = rng.normal(size=(2, 4, 4))
    up = resample(f, (8, 8))
    assert np.allclose(local_variation_map(f, (8, 8)).values, brute_force_variation(up), atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0, 10))
def test_scaling_covariance(seed, c):
    f = np.random.default_rng(seed).normal(size=(3, 4, 5))
    a = local_variation_map(f, (8, 10)).values
    b = local_variation_map(c * f, (8, 10)).values
    assert np.allclose(b, c * a, atol=1e-9)


def test_raw_image_edges_beat_interiors():
    spec = SyntheticSceneSpec(patch_size=64, buildings_per_patch=(2, 3), roads_per_patch=(0, 0),
                              background_noise_std=0.0, texture_noise_std=0.0, seed=2)
    p = generate_scene(spec, 0)
    torch.manual_seed(0)
    model = Segmenter(ModelConfig(base_width=4, depth=3))
    with torch.no_grad():
        d0 = model.encode(torch.from_numpy(p.image)[None]).activations[0][0].numpy()
    v = local_variation_map(d0, (64, 64)).values
    assert np.allclose(v, brute_force_variation(d0))
    edges = boundary_band(p.mask, 1)
    assert v[edges].max() > v[~edges].max()
    on, off = band_contrast(local_variation_map(d0, (64, 64)), p.mask, 1)
    assert on > off


def test_normalise_range(rng):
    img = normalise(rng.random((5, 5)) * 7)
    assert img.dtype == np.uint8 and img.min() == 0 and img.max() == 255
    assert (normalise(np.ones((3, 3))) == 0).all()
