import json

import pytest

from miniwm.config import ConfigError, config_hash, parse_config


def test_paper_shape_values():
    cfg = parse_config("paper-shape")
    wm = cfg.world_model_config()
    assert (wm.n_blocks, wm.hidden, wm.heads) == (22, 4096, 32)
    assert wm.n_tokens() == 12_600
    assert cfg.training.wm_lr == 5e-5 and cfg.training.wm_batch == 256
    assert cfg.training.task_mixture == [0.7, 0.2, 0.1]
    assert (cfg.inference.steps, cfg.inference.linear_steps, cfg.inference.linear_scale) == (50, 25, 1000)


def test_toy_fits_token_budget():
    assert parse_config("toy").world_model_config().n_tokens() <= 2048


def test_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown config key training.wm_stepz"):
        parse_config({"training": {"wm_stepz": 3}})
    with pytest.raises(ConfigError, match="world_model.depth"):
        parse_config({"world_model": {"depth": 3}})
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_config({"preset": "huge"})


def test_missing_or_malformed_file(tmp_path):
    with pytest.raises(ConfigError, match="neither a preset"):
        parse_config(str(tmp_path / "nope.json"))
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError, match="invalid JSON"):
        parse_config(str(bad))


def test_key_order_does_not_change_hash(tmp_path):
    a = {"training": {"wm_steps": 10, "wm_lr": 1e-3}, "inference": {"guidance_scale": 2.0}}
    b = {"inference": {"guidance_scale": 2.0}, "training": {"wm_lr": 1e-3, "wm_steps": 10}}
    pa, pb = tmp_path / "a.json", tmp_path / "b.json"
    pa.write_text(json.dumps(a))
    pb.write_text(json.dumps(b, indent=4))
    assert parse_config(str(pa)).hash() == parse_config(str(pb)).hash()
    assert parse_config(str(pa)).hash() != parse_config("toy").hash()
    assert config_hash({"x": 1, "y": 2}) == config_hash({"y": 2, "x": 1})


def test_stage_hashes_track_their_inputs():
    base = parse_config("toy")
    wm_only = parse_config({"training": {"wm_lr": 1e-3}})
    assert wm_only.stage_hash("tokenizer") == base.stage_hash("tokenizer")
    assert wm_only.stage_hash("latents") == base.stage_hash("latents")
    assert wm_only.stage_hash("world_model") != base.stage_hash("world_model")
    tok = parse_config({"training": {"tokenizer_lr": 5e-4}})
    assert tok.stage_hash("tokenizer") != base.stage_hash("tokenizer")
    assert tok.stage_hash("world_model") != base.stage_hash("world_model")
    with pytest.raises(ValueError):
        base.stage_hash("decoder")


@pytest.mark.parametrize("override, msg", [
    ({"dataset": {"wm_frames": 44}}, "multiple of"),
    ({"dataset": {"height": 60}}, "multiple of"),
    ({"world_model": {"hidden": 130}}, "divisible by heads"),
    ({"world_model": {"n_latent_frames": 5}}, "inconsistent"),
    ({"training": {"task_mixture": [0.5, 0.2, 0.1]}}, "task_mixture"),
    ({"inference": {"linear_steps": 50}}, "linear_steps"),
    ({"inference": {"context_latents": 6}}, "context_latents"),
    ({"inference": {"edit_tau": 1.0}}, "edit_tau"),
    ({"dataset": {"height": 512, "width": 1024}, "world_model": {"latent_h": 16, "latent_w": 32}}, "exceeds 2048"),
])
def test_validation_errors(override, msg):
    with pytest.raises(ConfigError, match=msg):
        parse_config(override)
