import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from miniwm.config import parse_config
from miniwm.world_model import (TauMixture, WorldModel, context_keep_mask, count_parameters, denormalize_latents,
                                flow_matching_loss, interpolate, make_flow_batch, normalize_latents,
                                sample_context_length, sample_tau)

from conftest import randomize_zero_init, small_wm_config, wm_inputs


def test_normalization():
    assert normalize_latents(0.0, 0.0, 0.32) == 0
    assert normalize_latents(0.32, 0.0, 0.32) == 1.0
    x = torch.randn(1000, dtype=torch.float64)
    assert torch.allclose(denormalize_latents(normalize_latents(x, 0.1, 0.32), 0.1, 0.32), x, rtol=1e-9, atol=1e-12)


def test_paper_shape_tokens():
    assert parse_config("paper-shape").world_model_config().n_tokens() == 6 * 5 * 14 * 30 == 12_600


# ---------------------------------------------------------------- tau

def test_tau_degenerate_mode():
    tau = sample_tau(np.random.default_rng(0), 1000, TauMixture(((0.0, 1e-12, 1.0),)))
    assert np.allclose(tau, 0.5, atol=1e-10)


def test_tau_secondary_mode_median():
    tau = sample_tau(np.random.default_rng(1), 100_000, TauMixture(((-3.0, 1.0, 1.0),)))
    # 1 / (1 + e^3), frozen from a 30-digit evaluation; sample median s.e. is about 0.0002 here
    assert abs(np.median(tau) - 0.0474258731775667809) < 0.002


def test_tau_mixture_ks():
    mix = TauMixture()
    tau = sample_tau(np.random.default_rng(2), 100_000, mix)
    assert stats.kstest(tau, mix.cdf).statistic < 0.01


def test_tau_strictly_inside_unit_interval():
    tau = sample_tau(np.random.default_rng(3), 100_000, TauMixture(((40.0, 1.0, 0.5), (-800.0, 1.0, 0.5))))
    assert tau.min() > 0 and tau.max() < 1


def test_tau_mixture_validation():
    with pytest.raises(ValueError):
        TauMixture(((0.0, 1.0, 0.5),))
    with pytest.raises(ValueError):
        TauMixture(((0.0, 0.0, 1.0),))


# ------------------------------------------------------- context length

def test_context_length():
    rng = np.random.default_rng(0)
    assert all(sample_context_length(rng, 1) == 0 for _ in range(100))
    n, T = 10_000, 6
    draws = np.array([sample_context_length(rng, T) for _ in range(n)])
    assert draws.max() < T and draws.min() >= 0
    counts = np.bincount(draws, minlength=T)
    p = 1 / T
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


# ------------------------------------------------------------ flow batch

def test_flow_endpoints_exact():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 3, 2, 2, 4, 8, generator=g)
    eps = torch.randn(x.shape, generator=g)
    assert torch.equal(make_flow_batch(x, torch.ones(2), eps=eps).xt, x)
    assert torch.equal(make_flow_batch(x, torch.zeros(2), eps=eps).xt, eps)
    same = make_flow_batch(x, torch.tensor([0.3, 0.8]), eps=x.clone())
    assert torch.equal(same.v, torch.zeros_like(x))
    assert torch.allclose(same.xt, x, atol=1e-6, rtol=0)  # float32 rounding of tau*x + (1-tau)*x


def test_flow_interpolation_recomputed():
    rng = np.random.default_rng(0)
    x, eps = rng.normal(size=(2, 3, 1, 2, 2, 4)), rng.normal(size=(2, 3, 1, 2, 2, 4))
    fb = make_flow_batch(torch.tensor(x, dtype=torch.float32), torch.full((2,), 0.3), eps=torch.tensor(eps, dtype=torch.float32))
    assert np.abs(fb.xt.numpy() - (0.3 * x + 0.7 * eps)).max() < 1e-6
    assert np.abs(fb.v.numpy() - (x - eps)).max() < 1e-6


def test_context_tokens_stay_clean():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(2, 4, 1, 2, 2, 3, generator=g)
    keep = context_keep_mask(2, 4, 1, 2, 2, torch.tensor([1, 3]))
    fb = make_flow_batch(x, torch.tensor([0.2, 0.6]), keep=keep, generator=g)
    assert torch.equal(fb.xt[keep], x[keep])
    assert not torch.equal(fb.xt[~keep], x[~keep])
    assert keep[0, :1].all() and not keep[0, 1:].any() and keep[1, :3].all() and not keep[1, 3:].any()


# ------------------------------------------------------------------- loss

def test_flow_loss_values():
    v = torch.randn(2, 3, 1, 2, 2, 4)
    m = torch.ones(2, 3, 1, 2, 2, dtype=torch.bool)
    assert flow_matching_loss(v, v, m).item() == 0
    assert abs(flow_matching_loss(v + 1, v, m).item() - 1.0) < 1e-7
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(2, 3, 1, 2, 2, 4)), rng.normal(size=(2, 3, 1, 2, 2, 4))
    mask = rng.random((2, 3, 1, 2, 2)) < 0.5
    ref = ((a - b) ** 2)[mask].mean()
    got = flow_matching_loss(torch.tensor(a), torch.tensor(b), torch.tensor(mask)).item()
    assert abs(got - ref) < 1e-7


def test_loss_ignores_values_outside_mask():
    g = torch.Generator().manual_seed(0)
    v, vh = torch.randn(2, 2, 3, 1, 2, 2, 4, generator=g)
    m = torch.rand(2, 3, 1, 2, 2, generator=g) < 0.5
    perturbed = vh + (~m)[..., None] * torch.randn(vh.shape, generator=g) * 100
    assert flow_matching_loss(vh, v, m).item() == flow_matching_loss(perturbed, v, m).item()


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.integers(0, 2**31 - 1))
def test_interpolation_is_convex_combination(tau, seed):
    g = torch.Generator().manual_seed(seed)
    x, eps = torch.randn(2, 16, generator=g, dtype=torch.float64)
    xt = interpolate(x[None], eps[None], torch.tensor([tau], dtype=torch.float64))[0]
    assert torch.allclose(xt, tau * x + (1 - tau) * eps, atol=1e-12, rtol=0)


# ------------------------------------------------------------------- model

@pytest.fixture(scope="module")
def model_and_inputs():
    torch.manual_seed(0)
    cfg = small_wm_config()
    model = randomize_zero_init(WorldModel(cfg)).double().eval()
    x, c = wm_inputs(cfg, batch=2)
    return model, x.double(), c


def test_forward_shape_and_determinism(model_and_inputs):
    model, x, c = model_and_inputs
    bundle = model.encode_conditioning(c)
    tau = torch.tensor([0.3, 0.7], dtype=torch.float64)
    with torch.no_grad():
        a = model(x, tau, bundle)
        b = model(x, tau, model.encode_conditioning(c))
    assert a.shape == x.shape
    assert torch.equal(a, b)


def test_forward_rejects_bad_inputs(model_and_inputs):
    model, x, c = model_and_inputs
    bundle = model.encode_conditioning(c)
    with pytest.raises(ValueError):
        model(x[:, :, :, :1], torch.zeros(2), bundle)
    with pytest.raises(ValueError):
        model(x[:1], torch.zeros(1), bundle)
    bad = x.clone()
    bad[0, 0, 0, 0, 0, 0] = float("nan")
    with pytest.raises(ValueError):
        model(bad, torch.zeros(2), bundle)


def _permute_cameras(c, perm):
    out = c.map(lambda t: t)
    out.agents = c.agents[:, :, perm]
    out.agent_valid = c.agent_valid[:, :, perm]
    out.intrinsics, out.extrinsics, out.distortion = c.intrinsics[:, perm], c.extrinsics[:, perm], c.distortion[:, perm]
    return out


def test_camera_permutation_equivariance(model_and_inputs):
    model, x, c = model_and_inputs
    perm = [1, 0]
    tau = torch.tensor([0.4, 0.9], dtype=torch.float64)
    with torch.no_grad():
        out = model(x, tau, model.encode_conditioning(c))
        out_p = model(x[:, :, perm], tau, model.encode_conditioning(_permute_cameras(c, perm)))
    assert not torch.allclose(out[:, :, 0], out[:, :, 1])
    assert torch.allclose(out_p, out[:, :, perm], atol=1e-10, rtol=0)


def test_zero_modulation_weights_sever_action(model_and_inputs):
    model, x, c = model_and_inputs
    import copy

    m = copy.deepcopy(model)
    c2 = c.map(lambda t: t.clone())
    c2.speed = -c.speed
    c2.curvature = c.curvature * 0 + 0.7
    tau = torch.tensor([0.5, 0.5], dtype=torch.float64)
    with torch.no_grad():
        assert not torch.allclose(m(x, tau, m.encode_conditioning(c)), m(x, tau, m.encode_conditioning(c2)))
        for lin in m.modulation_layers():
            lin.weight.zero_()
        assert torch.equal(m(x, tau, m.encode_conditioning(c)), m(x, tau, m.encode_conditioning(c2)))


def test_context_flag_and_camera_placeholder_change_output(model_and_inputs):
    model, x, c = model_and_inputs
    bundle = model.encode_conditioning(c)
    tau = torch.tensor([0.5, 0.5], dtype=torch.float64)
    keep = torch.zeros(x.shape[:-1], dtype=torch.bool)
    keep[:, 0] = True
    cams = torch.tensor([[True, False], [True, True]])
    with torch.no_grad():
        base = model(x, tau, bundle)
        assert not torch.allclose(base, model(x, tau, bundle, keep_mask=keep))
        dropped = model(x, tau, bundle, camera_mask=cams)
        x2 = x.clone()
        x2[0, :, 1] = 123.0  # content of a dropped camera is never seen
        assert torch.equal(dropped, model(x2, tau, bundle, camera_mask=cams))


def test_world_model_gradients_match_finite_differences():
    torch.manual_seed(1)
    cfg = small_wm_config()
    model = randomize_zero_init(WorldModel(cfg), seed=1).double()
    x, c = wm_inputs(cfg, batch=2, seed=1)
    x = x.double()
    g = torch.Generator().manual_seed(2)
    keep = context_keep_mask(2, 3, 2, 2, 4, torch.tensor([0, 1]))
    fb = make_flow_batch(x, torch.tensor([0.3, 0.8], dtype=torch.float64), keep=keep, generator=g)

    def loss():
        v_hat = model(fb.xt, fb.tau, model.encode_conditioning(c), keep_mask=keep)
        return flow_matching_loss(v_hat, fb.v, ~keep)

    model.zero_grad()
    loss().backward()
    named = [(n, p) for n, p in model.named_parameters() if p.grad is not None]  # placeholder unused here
    rng = np.random.default_rng(0)
    h = 1e-4
    worst = 0.0
    for _ in range(32):
        _, p = named[rng.integers(len(named))]
        idx = tuple(int(rng.integers(s)) for s in p.shape)
        grad = p.grad[idx].item()
        with torch.no_grad():
            old = p[idx].item()
            p[idx] = old + h
            up = loss().item()
            p[idx] = old - h
            down = loss().item()
            p[idx] = old
        fd = (up - down) / (2 * h)
        worst = max(worst, abs(grad - fd) / max(abs(grad), abs(fd), 1e-8))
    assert worst < 1e-4


def test_toy_model_fits_token_budget():
    cfg = parse_config("toy")
    wm = cfg.world_model_config()
    assert wm.n_tokens() == 6 * 2 * 2 * 4 <= 2048
    assert count_parameters(WorldModel(wm.__class__(**{**wm.__dict__, "latent_std": 0.32}))) > 0
