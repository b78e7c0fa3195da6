import pytest

from texparse.config import ConfigError, RunConfig, overfit_preset


def test_default_optimizer_settings():
    cfg = RunConfig()
    assert cfg.optim.lr == 1e-4 and cfg.optim.weight_decay == 0.05
    assert cfg.head.num_queries == 100 and cfg.loss.num_points == 12544
    assert cfg.timestep == 0 and cfg.backbone.latent_dim == 256 and cfg.seed == 777


@pytest.mark.parametrize(
    "patch",
    [{"optim": {"steps": 0}}, {"resize": 8}, {"timestep": 5000}, {"eval": {"protocols": ["XYZ"]}}, {"eval": {"gammas": [0.0]}}, {"bogus": 1}, {"optim": {"bogus": 1}}, {"preset": "nope"}],
)
def test_invalid_configs(patch):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(patch)


def test_roundtrip_and_toml(tmp_path):
    cfg = overfit_preset(**{"optim.steps": 7, "seed": 3})
    assert RunConfig.from_dict(cfg.to_dict()).to_json() == cfg.to_json()
    path = tmp_path / "run.toml"
    path.write_text('preset = "overfit"\nseed = 5\n[optim]\nsteps = 9\n[eval]\nprotocols = ["COP"]\n')
    loaded = RunConfig.load(path)
    assert loaded.optim.steps == 9 and loaded.seed == 5 and tuple(loaded.eval.protocols) == ("COP",)
    assert loaded.head.num_queries == 8 and loaded.optim.lr == 1e-3


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "missing.toml")
    bad = tmp_path / "bad.toml"
    bad.write_text("[optim\n")
    with pytest.raises(ConfigError):
        RunConfig.load(bad)
