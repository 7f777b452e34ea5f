import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from vvmic.codec import decode_latent, encode_latent
from vvmic.entropy.cdf import SIGMA_MIN
from vvmic.entropy.context import ChannelSlicePlan, ContextModel, anchor_mask
from vvmic.entropy.models import (
    LIKELIHOOD_FLOOR, FactorizedPrior, estimate_rate, gaussian_likelihood, gaussian_likelihood_np,
    quantize_eval, quantize_train, ste_round,
)
from vvmic.errors import NumericError, ShapeError
from vvmic.transforms import ModelConfig

from oracles import all_params, decode_serial, latent_case


def test_gaussian_likelihood_oracle():
    p = gaussian_likelihood(torch.tensor([0.0]), torch.tensor([1.0]))
    assert float(p) == pytest.approx(0.382925, abs=1e-6)
    assert gaussian_likelihood_np(0, 1.0) == pytest.approx(0.382925, abs=1e-6)


def test_gaussian_likelihood_sums_to_one():
    s = torch.arange(-40, 41, dtype=torch.float64)
    for sigma in (0.3, 1.0, 2.0):
        total = gaussian_likelihood(s, torch.full_like(s, sigma), floor=False).sum()
        assert float(total) == pytest.approx(1.0, abs=1e-9)


def test_likelihood_concentrates_and_floors():
    p = gaussian_likelihood(torch.tensor([0.0, 50.0]), torch.tensor([SIGMA_MIN, 1.0]))
    assert float(p[0]) == pytest.approx(1.0)
    assert float(p[1]) == LIKELIHOOD_FLOOR


def test_quantize_train_bounds_and_seed():
    y = torch.randn(100_000, dtype=torch.float64)
    a = quantize_train(y, torch.Generator().manual_seed(1))
    b = quantize_train(y, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert float((a - y).abs().max()) <= 0.5
    assert abs(float((a - y).mean())) < 0.01


def test_quantize_eval_examples():
    y_hat, s = quantize_eval(torch.tensor([1.4, 0.3, -0.5]), torch.tensor([0.2, 0.3, 0.0]))
    assert s.tolist() == [1.0, 0.0, -1.0]
    assert y_hat.tolist() == pytest.approx([1.2, 0.3, -1.0])


def test_ste_gradient_is_identity():
    x = torch.tensor([0.3, 1.7, -2.5], requires_grad=True)
    ste_round(x).sum().backward()
    assert x.grad.tolist() == [1.0, 1.0, 1.0]
    assert ste_round(x).tolist() == [0.0, 2.0, -3.0]


def test_estimate_rate():
    assert estimate_rate(np.array([0.5, 0.25])) == pytest.approx(3.0)
    assert float(estimate_rate(torch.tensor([0.5]))) == pytest.approx(1.0)
    with pytest.raises(NumericError):
        estimate_rate(np.array([0.5, 0.0]))
    with pytest.raises(NumericError):
        estimate_rate(torch.tensor([float("nan")]))


def test_factorized_prior_is_a_distribution():
    torch.manual_seed(0)
    prior = FactorizedPrior(3)
    z = torch.arange(-300, 301, dtype=torch.float32).reshape(1, 1, 1, -1).expand(1, 3, 1, -1)
    total = prior.likelihood(z.contiguous(), floor=False).sum(dim=(0, 2, 3))
    assert torch.allclose(total, torch.ones(3), atol=1e-4)
    grid = torch.linspace(-20, 20, 200).expand(3, -1)
    c = prior.cdf(grid)
    assert bool((c[:, 1:] >= c[:, :-1]).all())
    tables = prior.tables()
    assert len(tables) == 3 and all(t.total == 1 << 16 for t in tables)


def test_anchor_mask_and_plan():
    m = anchor_mask(3, 4)
    assert m[0, 0] and not m[0, 1] and m[1, 1]
    assert int(m.sum()) == 6
    assert ChannelSlicePlan(8, 4).boundaries == [(0, 2), (2, 4), (4, 6), (6, 8)]
    with pytest.raises(ValueError):
        ChannelSlicePlan(10, 4)


def test_context_sigma_lower_bound():
    ctx, y, psi, lf = latent_case(0)
    _, _, _, sigma = ctx(y, psi, lf, mode="round")
    assert float(sigma.detach().min()) >= SIGMA_MIN


def test_context_shape_errors():
    ctx, y, psi, lf = latent_case(0)
    with pytest.raises(ShapeError):
        ctx(y[:, :4], psi, lf)
    with pytest.raises(ShapeError):
        ctx.group_params(0, 0, y, psi, None)
    with pytest.raises(ShapeError):
        ctx.group_params(0, 0, y, psi[:, :, :4], lf)


@pytest.mark.parametrize("flags", [{}, {"use_ckbd": False}, {"use_channelwise": False}, {"use_auxiliary": False}])
def test_two_pass_equals_serial(flags):
    cfg = ModelConfig.debug(**flags)
    ctx, y, psi, lf = latent_case(5, cfg=cfg)
    data, y_hat_enc, _ = encode_latent(ctx, y, psi, lf)
    y_hat = decode_latent(ctx, data, psi, lf)
    ref, _ = decode_serial(ctx, data, psi, lf)
    assert torch.equal(y_hat, y_hat_enc)
    assert torch.equal(y_hat, ref)


def test_round_mode_matches_coded_latent():
    ctx, y, psi, lf = latent_case(2)
    _, y_hat_enc, est = encode_latent(ctx, y, psi, lf)
    with torch.no_grad():
        y_hat, lik, _, _ = ctx(y, psi, lf, mode="round")
    assert torch.allclose(y_hat, y_hat_enc, atol=1e-5)
    assert float(-torch.log2(lik).sum()) == pytest.approx(est, rel=1e-4)


def test_causality_non_anchor_flip():
    ctx, y, psi, lf = latent_case(3)
    _, y_hat, _ = encode_latent(ctx, y, psi, lf)
    base = all_params(ctx, y_hat, psi, lf)
    h, w = y_hat.shape[2:]
    non_anchor = torch.nonzero(~anchor_mask(h, w))
    i, j = non_anchor[0].tolist()
    flipped = y_hat.clone()
    flipped[0, 0, i, j] += 1
    after = all_params(ctx, flipped, psi, lf)
    for k in range(ctx.plan.num_slices):
        assert torch.equal(after[k, 0][0], base[k, 0][0]) or k > 0
    assert torch.equal(after[0, 0][1], base[0, 0][1])
    assert torch.equal(after[0, 1][0], base[0, 1][0])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_noise_mode_is_differentiable(seed):
    ctx, y, psi, lf = latent_case(seed % 7)
    y = y.double().requires_grad_()
    ctx = ctx.double()
    _, lik, _, _ = ctx(y, psi.double(), lf.double(), mode="noise", generator=torch.Generator().manual_seed(seed))
    (-torch.log2(lik).sum()).backward()
    assert torch.isfinite(y.grad).all()
