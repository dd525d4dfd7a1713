import copy

import numpy as np
import pytest
import torch

from miniwm import synth
from miniwm.inference import (GuidanceConfig, GuidedVelocity, NoiseSchedule, NumericalError, autoregressive_rollout,
                              build_agent_cfg_mask, cfg_combine, edit_scene, euler_denoise, generate_from_scratch,
                              inpaint, linear_quadratic_schedule, rollout_with_model)
from miniwm.world_model import WorldModel

from conftest import centred_agent, randomize_zero_init, small_wm_config, wm_inputs

SHAPE = (2, 6, 2, 2, 4, 8)


def oracle(x_true):
    """Exact flow velocity toward x_true from any point on its straight path: (x_true - x) / (1 - tau)."""
    return lambda x, tau: (x_true - x) / (1.0 - tau)


def rand(shape=SHAPE, seed=0, dtype=torch.float64):
    return torch.randn(shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# ---------------------------------------------------------------- schedule

def test_schedule_values():
    s = linear_quadratic_schedule(50, 25, 1000)
    assert s.steps == 50 and s.taus[0] == 0.0 and s.taus[50] == 1.0
    assert s.taus[25] == 0.025
    # 0.025 + 0.975 * (1/25)^2, frozen from exact rational arithmetic
    assert abs(s.taus[26] - 0.02656) < 1e-15
    assert all(b > a for a, b in zip(s.taus, s.taus[1:]))
    assert linear_quadratic_schedule().taus == s.taus


def test_schedule_errors():
    with pytest.raises(ValueError):
        linear_quadratic_schedule(10, 10)
    with pytest.raises(ValueError):
        NoiseSchedule((0.0, 0.5, 0.5, 1.0))
    with pytest.raises(ValueError):
        NoiseSchedule((0.1, 1.0))


def test_edit_start_index():
    s = linear_quadratic_schedule()
    i = s.start_index(0.5)
    assert s.taus[i] >= 0.5 > s.taus[i - 1]
    # tau_{25+j} = 0.025 + 0.975 (j/25)^2 >= 0.5  <=>  j >= 25 sqrt(0.475/0.975) = 17.45
    assert i == 25 + 18


# ------------------------------------------------------------------ euler

@pytest.mark.parametrize("schedule", [linear_quadratic_schedule(), NoiseSchedule((0.0, 0.3, 1.0)),
                                      linear_quadratic_schedule(7, 2, 10)])
def test_oracle_recovers_target(schedule):
    x = rand()
    out = euler_denoise(rand(seed=1), 0, schedule, oracle(x))
    assert (out - x).abs().max() < 1e-6


def test_one_step_schedule():
    eps = rand(seed=1)
    v = rand(seed=2)
    out = euler_denoise(eps, 0, NoiseSchedule((0.0, 1.0)), lambda x, t: v)
    assert torch.equal(out, eps + v)


def test_zero_velocity_is_identity():
    eps = rand(seed=3)
    assert torch.equal(euler_denoise(eps, 0, linear_quadratic_schedule(), lambda x, t: torch.zeros_like(x)), eps)


def test_non_finite_aborts():
    with pytest.raises(NumericalError):
        euler_denoise(rand(), 0, linear_quadratic_schedule(), lambda x, t: x * float("inf"))


def test_edit_reconstructs_near_one():
    x = rand()
    out = edit_scene(x, 0.999, oracle(x), linear_quadratic_schedule(), torch.Generator().manual_seed(0))
    assert (out - x).abs().max() < 1e-5


def test_edit_deterministic():
    x = rand()
    v = lambda z, t: -z
    a = edit_scene(x, 0.5, v, linear_quadratic_schedule(), torch.Generator().manual_seed(4))
    b = edit_scene(x, 0.5, v, linear_quadratic_schedule(), torch.Generator().manual_seed(4))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        edit_scene(x, 1.0, v, linear_quadratic_schedule(), torch.Generator())


# --------------------------------------------------------------- inpainting

def random_mask(rng, shape=SHAPE[:-1]):
    m = np.zeros(shape, bool)
    for b in range(shape[0]):
        kind = rng.integers(3)
        if kind == 0:
            m[b] = rng.random(shape[1:]) < rng.random()
        elif kind == 1:
            n = rng.integers(shape[2])
            m[b, :, n, rng.integers(shape[3]):, :rng.integers(1, shape[4] + 1)] = True
        else:
            m[b, rng.integers(shape[1]):] = True
    return torch.as_tensor(m)


def test_inpaint_keeps_unmasked_bits():
    rng = np.random.default_rng(0)
    x = rand(dtype=torch.float32)
    v = lambda z, t: torch.sin(3 * z) + t
    sched = linear_quadratic_schedule(10, 5, 1000)
    for i in range(100):
        m = random_mask(rng)
        out = inpaint(x, m, v, sched, torch.Generator().manual_seed(i))
        assert torch.equal(out[~m], x[~m])


def test_inpaint_empty_and_full_masks():
    x = rand(dtype=torch.float32)
    v = lambda z, t: torch.tanh(z) - z
    sched = linear_quadratic_schedule()
    empty = torch.zeros(SHAPE[:-1], dtype=torch.bool)
    assert torch.equal(inpaint(x, empty, v, sched, torch.Generator().manual_seed(0)), x)
    full = ~empty
    a = inpaint(x, full, v, sched, torch.Generator().manual_seed(5))
    b = generate_from_scratch(v, SHAPE, sched, torch.Generator().manual_seed(5))
    assert torch.equal(a, b)
    with pytest.raises(ValueError):
        inpaint(x, empty[:, :2], v, sched, torch.Generator())


# --------------------------------------------------------------------- CFG

def test_cfg_combine_cases():
    vc, vu = rand(seed=1), rand(seed=2)
    assert torch.equal(cfg_combine(vc, vu, GuidanceConfig(1.0)), vc)
    assert torch.equal(cfg_combine(vc, vu, GuidanceConfig(0.0)), vu)
    mask = torch.zeros(SHAPE[:-1], dtype=torch.bool)
    mask[..., :2] = True  # half of the latent grid
    for scale in (2.0, 5.0, 20.0):
        v = cfg_combine(vc, vu, GuidanceConfig(scale, mask))
        assert torch.equal(v[~mask], vc[~mask])
        assert torch.equal(v[mask], (vu + scale * (vc - vu))[mask])


def test_guidance_scale_one_equals_disabled():
    torch.manual_seed(0)
    cfg = small_wm_config()
    model = randomize_zero_init(WorldModel(cfg)).eval()
    _, c = wm_inputs(cfg, batch=1)
    sched = linear_quadratic_schedule(6, 3, 100)
    shape = (1, 3, 2, 2, 4, 8)
    a = generate_from_scratch(GuidedVelocity(model, c, GuidanceConfig()), shape, sched, torch.Generator().manual_seed(1))
    b = generate_from_scratch(GuidedVelocity(model, c, GuidanceConfig(1.0, torch.ones(shape[:-1], dtype=torch.bool))),
                              shape, sched, torch.Generator().manual_seed(1))
    c3 = generate_from_scratch(GuidedVelocity(model, c, GuidanceConfig(3.0)), shape, sched, torch.Generator().manual_seed(1))
    assert torch.equal(a, b)
    assert not torch.equal(a, c3)
    again = generate_from_scratch(GuidedVelocity(model, c, GuidanceConfig(3.0)), shape, sched, torch.Generator().manual_seed(1))
    assert torch.equal(c3, again)


def test_agent_mask_cases():
    assert not build_agent_cfg_mask(np.zeros((2, 4)), np.zeros(2, bool), 2, 4).any()
    full = build_agent_cfg_mask(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([True]), 2, 4)
    assert full.all()
    invalid = build_agent_cfg_mask(np.array([[0.0, 0.0, 1.0, 1.0]]), np.array([False]), 2, 4)
    assert not invalid.any()


def _brute_cells(box, lh, lw, res=400):
    """Cells hit by a dense grid of points strictly inside the box."""
    x1, y1, x2, y2 = box
    u = (np.arange(res) + 0.5) / res
    xs, ys = x1 + u * (x2 - x1), y1 + u * (y2 - y1)
    out = np.zeros((lh, lw), bool)
    cols = np.unique(np.minimum((xs * lw).astype(int), lw - 1))
    rows = np.unique(np.minimum((ys * lh).astype(int), lh - 1))
    out[np.ix_(rows, cols)] = True
    return out


def test_agent_mask_matches_brute_force():
    cam = synth.standard_rig(2, 128, 64)[0]
    ag = centred_agent(depth=10.0)
    box = synth.project_box(ag.centers[0], 0.0, ag.dims, cam)
    m = build_agent_cfg_mask(np.array([box]), np.array([True]), 2, 4)
    assert np.array_equal(m.numpy(), _brute_cells(box, 2, 4))
    assert m[:, 1:3].all() and not m[:, 0].any() and not m[:, 3].any()
    rng = np.random.default_rng(0)
    for _ in range(200):
        a, b = np.sort(rng.uniform(0, 1, 2)), np.sort(rng.uniform(0, 1, 2))
        box = (a[0], b[0], a[1], b[1])
        # the scan resolves overlaps down to 1/(res * cells); skip boxes whose edges sit closer to a cell border
        if min(np.abs(a * 4 - np.round(a * 4)).min(), np.abs(b * 2 - np.round(b * 2)).min()) < 0.02:
            continue
        m = build_agent_cfg_mask(np.array([box]), np.array([True]), 2, 4)
        assert np.array_equal(m.numpy(), _brute_cells(box, 2, 4))


def test_spatial_cfg_with_agent_mask():
    cam = synth.standard_rig(2, 128, 64)[0]
    box = synth.project_box(centred_agent().centers[0], 0.0, [1, 1, 1], cam)
    cells = build_agent_cfg_mask(np.array([box]), np.array([True]), 2, 4)
    mask = torch.zeros(SHAPE[:-1], dtype=torch.bool)
    mask[:, :, 0] = cells
    vc, vu = rand(seed=5), rand(seed=6)
    for scale in (2.0, 20.0):
        v = cfg_combine(vc, vu, GuidanceConfig(scale, mask))
        assert torch.equal(v[~mask], vc[~mask])
        assert torch.equal(v[mask], (vu + scale * (vc - vu))[mask])


# ------------------------------------------------------------------ rollout

def test_rollout_arithmetic_and_oracle_consistency():
    long = rand((1, 9, 2, 2, 4, 8), seed=7)
    sched = linear_quadratic_schedule()

    def velocity_for(start, keep):
        return oracle(long[:, start:start + 6])

    ctx = long[:, :3]
    seq = autoregressive_rollout(ctx, 2, 6, velocity_for, sched, torch.Generator().manual_seed(0))
    assert seq.shape[1] == 9
    assert torch.equal(seq[:, :3], ctx)
    single = generate_from_scratch(oracle(long[:, :6]), (1, 6, 2, 2, 4, 8), sched, torch.Generator().manual_seed(1))
    assert (seq[:, :6] - single).abs().max() < 1e-5
    assert autoregressive_rollout(ctx, 0, 6, velocity_for, sched, torch.Generator()).shape[1] == 3


def test_rollout_with_model():
    torch.manual_seed(0)
    cfg = small_wm_config()
    model = randomize_zero_init(WorldModel(cfg)).eval()
    from conftest import spec_inputs

    c = spec_inputs(np.random.default_rng(0), cfg.conditioning, 2, T_v=8 * 7)  # 7 latent steps
    ctx = rand((1, 2, 2, 2, 4, 8), dtype=torch.float32)
    sched = linear_quadratic_schedule(4, 2, 100)
    g = lambda: torch.Generator().manual_seed(3)
    assert torch.equal(rollout_with_model(model, ctx, c, 0, sched, GuidanceConfig(), g()), ctx)
    out = rollout_with_model(model, ctx, c, 5, sched, GuidanceConfig(2.0), g())
    assert out.shape[1] == 7 and torch.equal(out[:, :2], ctx)
    assert torch.equal(out, rollout_with_model(model, ctx, c, 5, sched, GuidanceConfig(2.0), g()))
    with pytest.raises(ValueError):
        rollout_with_model(model, ctx, c, 6, sched, GuidanceConfig(), g())
