import numpy as np
import pytest
import torch

from miniwm import synth


def pytest_addoption(parser):
    parser.addoption("--toy-cache", default=None, help="cache directory holding (or receiving) the toy training run")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def static_spec():
    T = 24
    return synth.SceneSpec(
        seed=5, country="UK", weather="clear", time_of_day="day", lanes=2, one_way=False, crossing=False,
        speed_limit=1, traffic_light=["none"] * T, speed=np.zeros(T), curvature=np.zeros(T))


def centred_agent(T=24, depth=10.0, category=0):
    """Agent straight ahead of the front camera of the standard rig."""
    centers = np.tile([1.5 + depth, 0.0, 1.5], (T, 1))
    return synth.AgentTrack(centers, np.zeros(T), np.array([1.0, 1.0, 1.0]), category)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(0)
    yield


def spec_inputs(rng, cfg=None, n_cameras=2, T_v=48, temporal_factor=8, **kw):
    """ConditioningInputs for a freshly sampled scene (no pixels rendered)."""
    from miniwm.conditioning import ConditioningConfig, inputs_from_sample

    cfg = cfg or ConditioningConfig()
    spec = synth.sample_scene_spec(rng, T_v=T_v, b_max=cfg.b_max)
    cams = synth.standard_rig(n_cameras, 128, 64)
    sample = synth.VideoSample(None, cams, np.arange(T_v) / 25.0, spec, None, None, None)
    return inputs_from_sample(sample, cfg, temporal_factor, **kw)


def small_wm_config(**kw):
    from miniwm.conditioning import ConditioningConfig
    from miniwm.world_model import WorldModelConfig

    base = dict(n_blocks=2, hidden=32, heads=4, mlp_ratio=2, latent_dim=8, n_latent_frames=3, n_cameras=2,
                latent_h=2, latent_w=4, conditioning=ConditioningConfig(b_max=2, clip_dim=8, scenario_dim=8))
    base.update(kw)
    return WorldModelConfig(**base)


def randomize_zero_init(model, scale=0.1, seed=0):
    """Give the zero-initialised modulation and output layers random weights so every path is live."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for lin in [*model.modulation_layers(), model.out_proj]:
            lin.weight.copy_(torch.randn(lin.weight.shape, generator=g) * scale)
            lin.bias.copy_(torch.randn(lin.bias.shape, generator=g) * scale)
        model.clean_embed.copy_(torch.randn(model.clean_embed.shape, generator=g) * scale)
    return model


def wm_inputs(cfg, batch=2, seed=0):
    """Random normalized latents plus conditioning inputs matching a small world-model config."""
    from miniwm.conditioning import ConditioningInputs

    rng = np.random.default_rng(seed)
    c = ConditioningInputs.concat([spec_inputs(rng, cfg.conditioning, cfg.n_cameras, T_v=8 * cfg.n_latent_frames)
                                   for _ in range(batch)])
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(batch, cfg.n_latent_frames, cfg.n_cameras, cfg.latent_h, cfg.latent_w, cfg.latent_dim, generator=g)
    return x, c


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[1].rstrip(":"))):
        terminalreporter.write_line(line)
