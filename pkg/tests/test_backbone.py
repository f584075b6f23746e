import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from promptmatch.backbone import (
    ToyBackbone,
    ToyUNetConfig,
    build_backbone,
    build_schedule,
    corrupt,
    extract_features,
    extract_pair,
)
from promptmatch.errors import ParameterError, ShapeError, UnsupportedFeatureError

# Pure-python cumulative product over the scaled-linear betas, steps 0..260.
ALPHA_BAR_260 = 0.6573230089158867


@pytest.fixture(scope="module")
def backbone():
    return ToyBackbone()


@pytest.fixture(scope="module")
def sched():
    return build_schedule()


def _img(seed, size=64):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(3, size, size, generator=g) * 2 - 1


def test_no_corruption_schedule():
    s = build_schedule(1, 0.0, 0.0, "linear")
    assert s.alphas.tolist() == [1.0] and s.alpha_bars.tolist() == [1.0]


@pytest.mark.parametrize("kind", ["linear", "scaled_linear"])
def test_alpha_bars_strictly_decreasing(kind):
    s = build_schedule(1000, 1e-4, 0.02, kind)
    assert (np.diff(s.alpha_bars) < 0).all()
    assert ((s.alphas > 0) & (s.alphas <= 1)).all()
    assert np.abs(s.alpha_bars - np.cumprod(s.alphas)).max() < 1e-9


def test_alpha_bar_regression_value(sched):
    assert sched.T == 1000
    assert sched.alpha_bars[260] == pytest.approx(ALPHA_BAR_260, abs=1e-12)


@pytest.mark.parametrize("args", [(0, 1e-4, 0.02), (10, 0.02, 0.01), (10, 1e-4, 1.0)])
def test_schedule_invalid(args):
    with pytest.raises(ParameterError):
        build_schedule(*args)


def test_schedule_is_immutable(sched):
    with pytest.raises(ValueError):
        sched.alpha_bars[0] = 0.5


def test_corrupt_identity_when_no_noise_level():
    s = build_schedule(1, 0.0, 0.0, "linear")
    img = _img(0)
    assert torch.equal(corrupt(img, 0, torch.randn_like(img), s), img)


def test_corrupt_zero_image(sched):
    noise = torch.randn(3, 8, 8, dtype=torch.float64)
    out = corrupt(torch.zeros_like(noise), 500, noise, sched)
    torch.testing.assert_close(out, math.sqrt(1 - sched.alpha_bars[500]) * noise, rtol=0, atol=0)


@pytest.mark.parametrize("t", [0, 261, 999])
def test_corrupt_preserves_variance(sched, t):
    g = torch.Generator().manual_seed(t)
    x = torch.randn(100_000, generator=g, dtype=torch.float64)
    e = torch.randn(100_000, generator=g, dtype=torch.float64)
    assert float(corrupt(x, t, e, sched).var()) == pytest.approx(1.0, rel=0.05)


@settings(max_examples=30, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 999), st.integers(0, 2**31 - 1))
def test_corrupt_linear(a, t, seed, ):
    sched = build_schedule()
    g = torch.Generator().manual_seed(seed)
    img = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    eps = torch.randn(3, 4, 4, generator=g, dtype=torch.float64)
    lhs = corrupt(a * img, t, a * eps, sched)
    rhs = a * corrupt(img, t, eps, sched)
    assert (lhs - rhs).abs().max() < 1e-9


def test_corrupt_errors(sched):
    img = torch.zeros(3, 4, 4)
    with pytest.raises(ParameterError):
        corrupt(img, 1000, img, sched)
    with pytest.raises(ShapeError):
        corrupt(img, 10, torch.zeros(3, 4, 5), sched)


def test_toy_feature_shape(backbone, sched):
    prompt = torch.zeros(75, 16)
    fm = extract_features(_img(1), 50, prompt, 0, backbone, sched)
    assert tuple(fm.data.shape) == (8, 32, 32)
    assert fm.image_size == (64, 64)


def test_extract_deterministic(backbone, sched):
    prompt = torch.randn(75, 16)
    a = extract_features(_img(2), 261, prompt, 5, backbone, sched)
    b = extract_features(_img(2), 261, prompt, 5, backbone, sched)
    assert torch.equal(a.data, b.data)


def test_extract_prompt_sensitivity(backbone, sched):
    prompt = torch.randn(75, 16, generator=torch.Generator().manual_seed(0)) * 0.02
    bumped = prompt.clone()
    bumped[3] += 0.1
    a = extract_features(_img(3), 50, prompt, 1, backbone, sched)
    b = extract_features(_img(3), 50, bumped, 1, backbone, sched)
    assert (a.data - b.data).abs().max() > 0


def test_extract_prompt_width_mismatch(backbone, sched):
    with pytest.raises(ShapeError):
        extract_features(_img(0), 50, torch.zeros(75, 15), 0, backbone, sched)
    with pytest.raises(ShapeError):
        extract_features(_img(0), 50, torch.zeros(78, 16), 0, backbone, sched)


def test_extract_pair_seeds(backbone, sched):
    prompt = torch.zeros(10, 16)
    img = _img(4)
    fa, fb = extract_pair(img, img, 50, prompt, (3, 3), backbone, sched)
    assert torch.equal(fa.data, fb.data)
    fa, fb = extract_pair(img, img, 50, prompt, (3, 4), backbone, sched)
    assert not torch.equal(fa.data, fb.data)


def test_extract_pair_swap(backbone, sched):
    prompt = torch.zeros(10, 16)
    a, b = _img(5), _img(6)
    fa, fb = extract_pair(a, b, 100, prompt, (1, 2), backbone, sched)
    gb, ga = extract_pair(b, a, 100, prompt, (2, 1), backbone, sched)
    assert torch.equal(fa.data, ga.data) and torch.equal(fb.data, gb.data)


def test_noise_averaging_mode(backbone, sched):
    prompt = torch.zeros(10, 16)
    one = extract_features(_img(7), 261, prompt, 0, backbone, sched, n_noise=1)
    four = extract_features(_img(7), 261, prompt, 0, backbone, sched, n_noise=4)
    assert four.data.shape == one.data.shape and not torch.equal(one.data, four.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 999), st.sampled_from([16, 32, 64]))
def test_extract_finite_fuzz(seed, t, size):
    bb = _FUZZ_BACKBONE
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(3, size, size, generator=g) * 2 - 1
    prompt = torch.randn(int(torch.randint(1, 78, (1,), generator=g)), 16, generator=g) * 3
    fm = extract_features(img, t, prompt, seed, bb, build_schedule())
    assert torch.isfinite(fm.data).all()


_FUZZ_BACKBONE = ToyBackbone()


def test_toy_weights_depend_only_on_seed():
    a, b = ToyBackbone(ToyUNetConfig(seed=3)), ToyBackbone(ToyUNetConfig(seed=3))
    for (ka, va), (kb, vb) in zip(a.unet.state_dict().items(), b.unet.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    assert all(not p.requires_grad for p in a.unet.parameters())


def test_toy_full_pass_predicts_noise_shape(backbone):
    out = backbone.unet(_img(8)[None], torch.tensor([10]), torch.zeros(1, 5, 16))
    assert out.shape == (1, 3, 64, 64)


def test_real_backbone_without_weights_is_clear_error():
    with pytest.raises(UnsupportedFeatureError):
        build_backbone("real", weights=None)
    with pytest.raises(UnsupportedFeatureError):
        build_backbone("real", weights="/nonexistent/weights")
