import pytest

from ogclab.config import ConfigError, ExperimentConfig, config_from_mapping, dump_config, load_config
from ogclab.noisegen import Asymmetric, InstanceDependent, Symmetric
from ogclab.threshold import EMA, Fixed, Linear, Optimized


def test_defaults():
    cfg = ExperimentConfig()
    assert (cfg.queue_size, cfg.time_frame, cfg.warmup, cfg.epsilon0) == (4096, 32, 512, 20.0)
    assert cfg.threshold_strategy() == Optimized(20.0)
    assert cfg.noise_spec() == Symmetric(0.4)


def test_strategies():
    assert ExperimentConfig(strategy="fixed").threshold_strategy() == Fixed(2.0)
    assert ExperimentConfig(strategy="linear", epochs=10, n_train=64, batch_size=32).threshold_strategy() == Linear(10.0, 20)
    assert ExperimentConfig(strategy="ema").threshold_strategy() == EMA(0.9999)
    assert ExperimentConfig(strategy="none").threshold_strategy() is None


def test_noise_specs():
    assert ExperimentConfig(noise="asymmetric").noise_spec() == Asymmetric(((0, 1),), 0.4)
    assert ExperimentConfig(noise="asymmetric", n_classes=3).noise_spec().class_map == ((0, 1), (1, 2), (2, 0))
    assert ExperimentConfig(noise="instance", noise_seed=3).noise_spec() == InstanceDependent(0.4, 1, 3)
    assert ExperimentConfig(noise="none").noise_spec() == Symmetric(0.0)


@pytest.mark.parametrize(
    "kw", [dict(time_frame=0), dict(batch_size=0), dict(queue_size=8, batch_size=32), dict(epochs=0),
           dict(strategy="adam"), dict(noise="pairflip"), dict(loss="hinge"), dict(loss="gce", q=0.0)]
)
def test_invalid(kw):
    with pytest.raises(ConfigError):
        ExperimentConfig(**kw)


def test_steps():
    cfg = ExperimentConfig(n_train=100, batch_size=32, epochs=3)
    assert cfg.steps_per_epoch() == 4
    assert cfg.total_steps() == 12


def test_unknown_key():
    with pytest.raises(ConfigError, match="unknown config keys: colour"):
        config_from_mapping({"colour": "red"})


def test_type_checks():
    assert config_from_mapping({"lr": 1}).lr == 1.0
    with pytest.raises(ConfigError):
        config_from_mapping({"epochs": 1.5})
    with pytest.raises(ConfigError):
        config_from_mapping({"epochs": True})
    with pytest.raises(ConfigError):
        config_from_mapping({"dataset": 3})


def test_toml_roundtrip(tmp_path):
    cfg = ExperimentConfig(loss="gce", q=0.5, hidden=[8, 4], lr_milestones=[10, 20], strategy="ema", seed=9)
    path = tmp_path / "c.toml"
    path.write_text(dump_config(cfg))
    assert load_config(path) == cfg


def test_nested_tables_rejected(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("[model]\nhidden = [4]\n")
    with pytest.raises(ConfigError, match="flat"):
        load_config(path)


def test_bad_toml(tmp_path):
    path = tmp_path / "c.toml"
    path.write_text("epochs = = 3\n")
    with pytest.raises(ConfigError):
        load_config(path)
