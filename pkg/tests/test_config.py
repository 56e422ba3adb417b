import pytest

from zsadmoe.config import PRESETS, RunConfig, load_config, micro_config, full_scale_config
from zsadmoe.errors import ConfigurationError


def test_defaults_are_desk_scale():
    cfg = RunConfig()
    assert cfg.encoder.image_size == (64, 64) and cfg.encoder.patch_size == 8
    assert (cfg.train.epochs, cfg.train.batch_size, cfg.train.lr, cfg.train.warmup_epochs) == (15, 16, 1e-3, 3)
    assert (cfg.train.beta1, cfg.train.beta2) == (0.6, 0.999)
    assert (cfg.loss.alpha, cfg.loss.beta) == (0.01, 0.005)
    assert (cfg.scoring.tau, cfg.scoring.tau_prime, cfg.scoring.gaussian_sigma) == (0.07, 0.01, 4.0)
    assert (cfg.vgmop.n_experts, cfg.vgmop.top_k) == (8, 4)


def test_full_scale_preset():
    cfg = full_scale_config()
    v = cfg.vgmop
    assert (v.len_normal, v.len_abnormal, v.len_context, v.n_queries, v.heads, v.router_hidden) == (5, 6, 8, 8, 8, 256)
    assert cfg.encoder.image_size == (518, 518) and cfg.encoder.layers == (6, 12, 18, 24)


def test_micro_preset_shape():
    cfg = micro_config()
    assert (cfg.encoder.dim, cfg.encoder.dim_x, cfg.vgmop.n_experts, cfg.vgmop.top_k, len(cfg.encoder.layers)) == (8, 12, 4, 2, 2)
    assert cfg.train.epochs == 2


def test_overrides():
    cfg = RunConfig().with_overrides(["loss.alpha=0", "vgmop.static_prompt=true", "encoder.layers=[2, 4]"])
    assert cfg.loss.alpha == 0 and cfg.vgmop.static_prompt and cfg.encoder.layers == (2, 4)
    assert cfg.vgmop.n_experts == 1 and cfg.vgmop.top_k == 1


@pytest.mark.parametrize("bad", ["loss.gamma=2", "nosuch.key=1", "train=3"])
def test_unknown_override_names_key(bad):
    with pytest.raises(ConfigurationError) as info:
        RunConfig().with_overrides([bad])
    if "=" in bad and "." in bad.split("=")[0]:
        assert bad.split("=")[0] in str(info.value)


def test_toml_round_trip(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[train]\nepochs = 4\n\n[vgmop]\nn_experts = 6\ntop_k = 3\n')
    cfg = load_config(str(p))
    assert cfg.train.epochs == 4 and cfg.vgmop.n_experts == 6 and cfg.encoder.dim == RunConfig().encoder.dim
    assert RunConfig.from_dict(cfg.to_dict()) == cfg


def test_toml_unknown_key(tmp_path):
    p = tmp_path / "run.toml"
    p.write_text('[train]\nepochz = 4\n')
    with pytest.raises(ConfigurationError, match="epochz"):
        load_config(str(p))


def test_invalid_values(tmp_path):
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides(["train.warmup_epochs=20"])
    with pytest.raises(ConfigurationError):
        RunConfig().with_overrides(["data.test_classes=['A']"])
    with pytest.raises(ConfigurationError):
        load_config(str(tmp_path / "missing.toml"))


def test_presets_load():
    for name in PRESETS:
        assert isinstance(load_config(name), RunConfig)
