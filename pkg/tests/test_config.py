import pytest

from pstp.config import ABLATIONS, ModelConfig, SynthSpec, TrainConfig
from pstp.errors import ConfigError


def test_defaults_are_the_published_setting():
    cfg = ModelConfig()
    assert (cfg.K, cfg.T, cfg.top_k, cfg.top_m, cfg.D, cfg.D_a) == (20, 3, 7, 20, 512, 128)
    assert cfg.gamma == 21
    tc = TrainConfig()
    assert (tc.lr, tc.batch_size, tc.epochs, tc.lr_decay, tc.decay_every) == (1e-4, 64, 30, 0.1, 10)


@pytest.mark.parametrize("changes, fragment", [
    ({"top_k": 21}, "top_k=21 exceeds K=20"),
    ({"top_m": 51}, "top_m=51 exceeds M=50"),
    ({"heads": 3}, "not divisible"),
    ({"D": 0}, "D must be positive"),
    ({"K": 2.5}, "K must be an integer"),
])
def test_invalid_model_configs(changes, fragment):
    with pytest.raises(ConfigError, match=fragment):
        ModelConfig(**changes)


def test_all_problems_reported_together():
    with pytest.raises(ConfigError) as err:
        ModelConfig(K=3, top_k=5, M=4, top_m=9)
    assert "top_k" in str(err.value) and "top_m" in str(err.value)


def test_unknown_fields_are_named():
    with pytest.raises(ConfigError, match=r"\[model\] unknown field\(s\): bogus"):
        ModelConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigError, match=r"\[train\]"):
        TrainConfig.from_dict({"learning_rate": 1})


def test_round_trips():
    cfg = ModelConfig(K=5, top_k=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    spec = SynthSpec(n_videos=2, planted=((1, 2, 0), (0, 0, 1)))
    assert SynthSpec.from_dict(spec.to_dict()) == spec
    tc = TrainConfig(lr=0.5)
    assert TrainConfig.from_dict(tc.to_dict()) == tc


def test_lr_schedule_exact():
    tc = TrainConfig()
    for epoch in range(30):
        assert tc.lr_at(epoch) == 1e-4 * 0.1 ** (epoch // 10)


@pytest.mark.parametrize("bad", [{"lr": -1}, {"batch_size": 0}, {"precision": "float16"}])
def test_invalid_train_configs(bad):
    with pytest.raises(ConfigError):
        TrainConfig(**bad)


def test_ablation_semantics():
    cfg = ModelConfig()
    assert cfg.ablate("tssm").top_k == cfg.K
    srsm = cfg.ablate("srsm")
    assert srsm.top_m == cfg.M and not srsm.use_srsm
    assert not cfg.ablate("avam").use_avam
    assert not cfg.ablate("lgpm").use_lgpm
    assert set(ABLATIONS) == {"tssm", "srsm", "avam", "lgpm"}
    with pytest.raises(ConfigError):
        cfg.ablate("fusion")


def test_disabled_srsm_must_keep_all_patches():
    with pytest.raises(ConfigError):
        ModelConfig(use_srsm=False)


def test_synth_spec_checks():
    with pytest.raises(ConfigError):
        SynthSpec(signal_strength=-1)
    spec = SynthSpec(n_videos=1, planted=((9, 0, 0),))
    with pytest.raises(ConfigError, match="segment 9"):
        spec.validate_for(ModelConfig(K=3, top_k=1))
