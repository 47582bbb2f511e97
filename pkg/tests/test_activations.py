import json
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from pneumoscan import activations as act
from pneumoscan import modelzoo as mz


@pytest.fixture(scope="module")
def alexnet():
    return mz.build_model(mz.BackboneConfig("alexnet", weights_source="none"))


@pytest.fixture(scope="module")
def resnet():
    return mz.build_model(mz.BackboneConfig("resnet18", weights_source="none"))


def image(size, seed=0):
    return torch.randn(3, size, size, generator=torch.Generator().manual_seed(seed))


def amap(channels, normalized=False):
    return act.ActivationMap("x", np.asarray(channels, dtype=np.float64), normalized)


def test_alexnet_first_conv_shape(alexnet):
    m = act.extract_activations(alexnet, image(227), "first_conv")
    assert m.layer_id == "features.0"
    assert m.channels.shape == (96, 55, 55)


def test_resnet_first_conv_channel_count_from_graph(resnet):
    conv = resnet.net.get_submodule("conv1")
    m = act.extract_activations(resnet, image(224))
    assert m.channels.shape[0] == conv.out_channels == 64


def test_zero_input_bias_free_layer(resnet):
    assert resnet.net.conv1.bias is None
    m = act.extract_activations(resnet, torch.zeros(3, 224, 224))
    assert not m.channels.any()


def test_deep_layers_resolve(resnet):
    m = act.extract_activations(resnet, image(224), "deep_conv")
    assert m.layer_id == "layer4.1.conv2" and m.channels.shape[0] == 512


def test_unknown_layer_lists_valid_names(resnet):
    with pytest.raises(mz.ModelError, match="first_conv.*layer4"):
        act.extract_activations(resnet, image(224), "layer9")


def test_extraction_does_not_perturb(alexnet):
    x = image(227, seed=3)[None]
    before = mz.predict_proba(alexnet, x)
    alexnet.net.train()
    act.extract_activations(alexnet, x[0], "deep_conv")
    assert alexnet.net.training
    after = mz.predict_proba(alexnet, x)
    assert np.abs(before - after).max() == 0.0
    assert not alexnet.net.features[0]._forward_hooks


def test_normalize_examples():
    n = act.normalize_map(amap([[[2.0, 4.0], [6.0, 3.0]], [[7.0, 7.0], [7.0, 7.0]], [[0.0, 1.0], [0.5, 1.0]]]))
    assert n.channels[0, 0, 1] == 0.5
    assert not n.channels[1].any() and n.degenerate == (1,)
    assert np.array_equal(n.channels[2], [[0.0, 1.0], [0.5, 1.0]])
    assert n.normalized


maps = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-1e3, 1e3))


@settings(max_examples=100, deadline=None)
@given(maps)
def test_normalize_properties(c):
    n = act.normalize_map(amap(c))
    assert n.channels.min() >= 0 and n.channels.max() <= 1
    for i in range(c.shape[0]):
        if i not in n.degenerate:
            assert n.channels[i].min() == 0.0 and n.channels[i].max() == 1.0
    if not n.degenerate:
        assert np.allclose(act.normalize_map(n).channels, n.channels, atol=1e-12)


def test_strongest_examples():
    assert act.strongest_channel(amap([np.zeros((2, 2)), np.full((2, 2), -0.1)])) == 1
    assert act.strongest_channel(amap([np.ones((2, 2))] * 3)) == 0


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-10, 10)), st.floats(0.01, 100))
def test_strongest_matches_scan_and_scale_invariance(c, factor):
    best, best_val = 0, -1.0
    for i in range(3):
        v = sum(abs(float(x)) for x in c[i].ravel())
        if v > best_val:
            best, best_val = i, v
    got = act.strongest_channel(amap(c))
    # the scan sums in a different order; accept a near-tie resolving either way
    sums = np.abs(c).sum(axis=(1, 2))
    assert got == best or np.isclose(sums[got], sums[best])
    assert act.strongest_channel(amap(c * factor)) == got or np.isclose(sums[got], sums.max())


def test_montage_layout_96(tmp_path):
    c = np.random.default_rng(0).random((96, 5, 7))
    out = act.render_montage(act.normalize_map(amap(c)), 8, 12, tmp_path / "m.png")
    arr = np.asarray(Image.open(out))
    assert arr.shape == (8 * 5, 12 * 7)
    n = act.normalize_map(amap(c)).channels
    # tile (r, c) holds channel r * 12 + c
    assert np.array_equal(arr[5:10, 14:21], np.rint(n[14] * 255).astype(np.uint8))


def test_montage_single_channel(tmp_path):
    c = np.array([[[0.0, 0.25], [0.5, 1.0]]])
    out = act.render_montage(amap(c, normalized=True), 1, 1, tmp_path / "one.png")
    assert np.asarray(Image.open(out)).tolist() == [[0, 64], [128, 255]]


def test_montage_truncates_with_warning(tmp_path):
    c = np.random.default_rng(1).random((10, 3, 3))
    with pytest.warns(UserWarning, match="first 4"):
        out = act.render_montage(amap(c), 2, 2, tmp_path / "t.png")
    assert np.asarray(Image.open(out)).shape == (6, 6)


def test_montage_unwritable(tmp_path):
    (tmp_path / "file").write_text("x")
    with pytest.raises(OSError):
        act.render_montage(amap(np.ones((1, 2, 2))), 1, 1, tmp_path / "file" / "m.png")


def test_default_grid():
    assert act.default_grid(96) == (9, 11)
    assert act.default_grid(1) == (1, 1)
    r, c = act.default_grid(64)
    assert r * c >= 64


def test_write_report(tmp_path, alexnet):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        target = act.write_activation_report(alexnet, image(227), "IM-0001", tmp_path, grid=(8, 12))
    assert target == tmp_path / "alexnet" / "IM-0001"
    meta = json.loads((target / "features.0.json").read_text())
    assert meta["channels"] == 96 and meta["grid"] == [8, 12]
    assert 0 <= meta["strongest_channel"] < 96
    assert (target / "features.0.montage.png").exists()
    assert (target / "features.0.strongest.png").exists()
