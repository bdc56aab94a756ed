import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import (
    central_difference_grad,
    gram_bruteforce,
    perceptual_bruteforce,
    relative_error,
    ssim_map_bruteforce,
)
from defence.losses import (
    STAGE1_WEIGHTS,
    STAGE2_WEIGHTS,
    LossWeights,
    SsimParams,
    adversarial_loss_discriminator,
    adversarial_loss_generator,
    gram_matrix,
    l1_loss,
    perceptual_loss,
    psnr,
    ssim_loss,
    ssim_map,
    style_loss,
    total_stage1_loss,
    total_stage2_loss,
)
from defence.nets import FeatureExtractorSpec, build_feature_extractor, extract_features

t = torch.tensor


def test_l1_examples():
    a = torch.rand(2, 3, 8, 8)
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(torch.zeros(4, 4), torch.ones(4, 4))) == 1.0
    assert float(l1_loss(t([0.0, 0.5]), t([0.5, 1.0]))) == 0.5
    with pytest.raises(ValueError):
        l1_loss(torch.zeros(2), torch.zeros(3))


def test_adversarial_discriminator_examples():
    half = torch.full((1, 1, 16, 16), 0.5)
    assert float(adversarial_loss_discriminator(half, half)) == pytest.approx(2 * math.log(2))
    near = adversarial_loss_discriminator(torch.full((4,), 1 - 1e-9), torch.full((4,), 1e-9))
    assert 0 <= float(near) < 1e-6
    worst = adversarial_loss_discriminator(torch.zeros(4), torch.zeros(4))
    assert math.isfinite(float(worst))
    assert float(worst) == pytest.approx(-math.log(1e-7) - math.log(1 - 1e-7), rel=1e-5)


def test_adversarial_generator_examples():
    assert float(adversarial_loss_generator(torch.full((3, 3), 0.5))) == pytest.approx(math.log(2))
    assert float(adversarial_loss_generator(torch.ones(3, 3))) == pytest.approx(0.0, abs=1e-6)
    assert float(adversarial_loss_generator(torch.zeros(3, 3, dtype=torch.float64))) == pytest.approx(
        -math.log(1e-7)
    )
    assert float(adversarial_loss_generator(torch.zeros(3, 3, dtype=torch.float64))) == pytest.approx(16.118, abs=1e-3)


def test_adversarial_generator_decreases_as_d_is_fooled():
    vals = [float(adversarial_loss_generator(torch.full((4,), p))) for p in (0.1, 0.3, 0.6, 0.9)]
    assert vals == sorted(vals, reverse=True)


def test_gram_disjoint_channels():
    act = torch.zeros(2, 4, 4)
    act[0, :2] = 1.0
    act[1, 2:] = 1.0
    g = gram_matrix(act)
    assert float(g[0, 1]) == 0.0 and float(g[1, 0]) == 0.0


def test_gram_constant():
    c = 0.7
    g = gram_matrix(torch.full((2, 2, 2), c, dtype=torch.float64))
    # c^2 * (H*W = 4) / (C*H*W = 8)
    np.testing.assert_allclose(g.numpy(), c * c / 2)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.integers(1, 5), h=st.integers(1, 6), w=st.integers(1, 6))
def test_gram_symmetric_psd(seed, c, h, w):
    act = torch.from_numpy(np.random.default_rng(seed).normal(size=(c, h, w)))
    g = gram_matrix(act).numpy()
    np.testing.assert_allclose(g, g.T, atol=1e-14)
    assert np.linalg.eigvalsh(g).min() >= -1e-8


def test_gram_matches_bruteforce():
    act = np.random.default_rng(0).random((3, 4, 5))
    np.testing.assert_allclose(gram_matrix(torch.from_numpy(act)).numpy(), gram_bruteforce(act), atol=1e-14)


def test_style_examples():
    rng = np.random.default_rng(1)
    gt = [torch.from_numpy(rng.random((1, 3, 4, 4))), torch.from_numpy(rng.random((1, 5, 2, 2)))]
    assert float(style_loss(gt, gt)) == 0.0
    scaled = [2 * a for a in gt]
    expected = np.mean([3 * np.mean(np.abs(gram_bruteforce(a[0].numpy()))) for a in gt])
    assert float(style_loss(scaled, gt)) == pytest.approx(expected, rel=1e-12)
    p = rng.random((2, 2, 2))
    g = rng.random((2, 2, 2))
    brute = np.mean(np.abs(gram_bruteforce(p) - gram_bruteforce(g)))
    assert float(style_loss([torch.from_numpy(p)], [torch.from_numpy(g)])) == pytest.approx(brute, rel=1e-12)
    with pytest.raises(ValueError):
        style_loss(gt, gt[:1])


def test_perceptual_examples():
    rng = np.random.default_rng(2)
    acts = [torch.from_numpy(rng.random((1, 2, 2, 2)))]
    assert float(perceptual_loss(acts, acts)) == 0.0
    assert float(perceptual_loss([torch.zeros(1, 2, 2, 2)], [torch.ones(1, 2, 2, 2)])) == 1.0
    pred = [rng.random((1, 3, 4, 4)), rng.random((1, 6, 2, 2))]
    gt = [rng.random((1, 3, 4, 4)), rng.random((1, 6, 2, 2))]
    got = perceptual_loss([torch.from_numpy(a) for a in pred], [torch.from_numpy(a) for a in gt])
    assert float(got) == pytest.approx(perceptual_bruteforce(pred, gt), rel=1e-12)
    with pytest.raises(ValueError):
        perceptual_loss([torch.zeros(1, 2, 2, 2)], [torch.zeros(1, 2, 2, 3)])


def test_ssim_identical_is_one():
    x = torch.rand(2, 3, 20, 20, dtype=torch.float64)
    np.testing.assert_allclose(ssim_map(x, x).numpy(), 1.0, atol=1e-12)
    assert float(ssim_loss(x, x)) == pytest.approx(0.0, abs=1e-12)


def test_ssim_black_vs_white():
    x = torch.zeros(1, 1, 16, 16, dtype=torch.float64)
    y = torch.ones(1, 1, 16, 16, dtype=torch.float64)
    c1 = 0.01**2
    np.testing.assert_allclose(ssim_map(x, y).numpy(), c1 / (1 + c1), rtol=1e-9)
    assert float(ssim_loss(x, y)) == pytest.approx(1 - c1 / (1 + c1), rel=1e-9)
    assert c1 / (1 + c1) == pytest.approx(9.999e-5, rel=1e-4)


def test_ssim_matches_bruteforce():
    rng = np.random.default_rng(3)
    x, y = rng.random((32, 32)), rng.random((32, 32))
    got = ssim_map(torch.from_numpy(x), torch.from_numpy(y))[0, 0].numpy()
    assert np.max(np.abs(got - ssim_map_bruteforce(x, y))) < 1e-6


def test_ssim_multichannel_is_channel_mean():
    rng = np.random.default_rng(4)
    x, y = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    got = ssim_map(torch.from_numpy(x)[None], torch.from_numpy(y)[None])[0, 0].numpy()
    expected = np.mean([ssim_map_bruteforce(x[c], y[c]) for c in range(3)], axis=0)
    np.testing.assert_allclose(got, expected, atol=1e-10)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssim_symmetric_and_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    y = torch.rand(1, 3, 12, 12, generator=g, dtype=torch.float64)
    m = ssim_map(x, y)
    np.testing.assert_allclose(m.numpy(), ssim_map(y, x).numpy(), atol=1e-14)
    assert float(m.abs().max()) <= 1 + 1e-12
    assert float(ssim_loss(x, y)) == pytest.approx(float(ssim_loss(y, x)), abs=1e-14)
    assert 0 <= float(ssim_loss(x, y)) <= 2


def test_ssim_params_defaults():
    p = SsimParams()
    assert (p.window_size, p.sigma, p.c1, p.c2) == (11, 1.5, pytest.approx(1e-4), pytest.approx(9e-4))


def test_stage1_total():
    assert total_stage1_loss(0.0, 0.0) == 0.0
    assert total_stage1_loss(1.0, 1.0) == 11.0
    assert total_stage1_loss(0.5, 0.2) == pytest.approx(2.5)


def test_stage2_total():
    b = total_stage2_loss(1.0, 1.0, 1.0, 1.0, 1.0)
    assert b.total == 14.1
    assert (b.adv, b.l1, b.perc, b.style, b.ssim) == (1.0,) * 5
    assert total_stage2_loss(0, 0, 0, 0, 0).total == 0
    assert total_stage2_loss(2, 0, 0, 0, 0).total == pytest.approx(0.2)


def test_weights():
    assert STAGE1_WEIGHTS.adv == 1 and STAGE1_WEIGHTS.l1 == 10
    assert (STAGE2_WEIGHTS.adv, STAGE2_WEIGHTS.l1, STAGE2_WEIGHTS.perc, STAGE2_WEIGHTS.style, STAGE2_WEIGHTS.ssim) == (
        0.1,
        10,
        2,
        1,
        1,
    )
    with pytest.raises(ValueError):
        LossWeights(adv=-1)


@settings(max_examples=30, deadline=None)
@given(vals=st.lists(st.floats(0, 100, allow_nan=False), min_size=5, max_size=5))
def test_bundle_total_is_weighted_sum(vals):
    b = total_stage2_loss(*vals)
    w = STAGE2_WEIGHTS
    expected = w.adv * vals[0] + w.l1 * vals[1] + w.perc * vals[2] + w.style * vals[3] + w.ssim * vals[4]
    assert b.total == pytest.approx(expected, rel=1e-9, abs=1e-12)


def test_psnr():
    gt = torch.full((1, 3, 16, 16), 0.5, dtype=torch.float64)
    assert psnr(gt, gt) == 99.0
    assert psnr(gt + 0.1, gt) == pytest.approx(20.0)


# ---------------------------------------------------------------------------
# Analytic gradients versus central finite differences at float64


def grad_rel_error(loss_of_tensor, x0):
    x = torch.from_numpy(x0.copy()).requires_grad_(True)
    loss_of_tensor(x).backward()
    numeric = central_difference_grad(lambda a: float(loss_of_tensor(torch.from_numpy(a))), x0)
    return relative_error(x.grad.numpy(), numeric)


def gradient_cases():
    """(name, scalar function of a float64 tensor, evaluation point)."""
    rng = np.random.default_rng(5)
    img = rng.uniform(0.05, 0.95, (1, 3, 8, 8))
    ref = torch.from_numpy(rng.uniform(0.05, 0.95, (1, 3, 8, 8)))
    ext = build_feature_extractor(FeatureExtractorSpec(widths=(4, 6, 8, 8))).double()
    ref_acts = extract_features(ext, ref)
    fake_scores = rng.uniform(0.05, 0.95, (1, 1, 8, 8))
    real = torch.from_numpy(rng.uniform(0.05, 0.95, (1, 1, 8, 8)))
    # Keep |a - b| away from the kink of |.|.
    shifted = ref + torch.from_numpy(np.sign(rng.normal(size=(1, 3, 8, 8))) * 0.03)
    return [
        ("l1", lambda x: l1_loss(x, shifted), ref.numpy() + rng.uniform(-0.01, 0.01, (1, 3, 8, 8))),
        ("perceptual", lambda x: perceptual_loss(extract_features(ext, x), ref_acts), img),
        ("style", lambda x: style_loss(extract_features(ext, x), ref_acts), img),
        ("ssim", lambda x: ssim_loss(x, ref), img),
        ("adv_generator", lambda s: adversarial_loss_generator(s), fake_scores),
        ("adv_discriminator_fake", lambda s: adversarial_loss_discriminator(real, s), fake_scores),
        ("adv_discriminator_real", lambda s: adversarial_loss_discriminator(s, real), fake_scores),
    ]


@pytest.mark.parametrize("case", gradient_cases(), ids=lambda c: c[0])
def test_gradient_matches_finite_differences(case):
    _, fn, x0 = case
    assert grad_rel_error(fn, x0) < 1e-3
