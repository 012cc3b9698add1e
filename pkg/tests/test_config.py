"""
Unit tests for configuration loading.
"""
import pytest
import yaml

from config.config import AblationFlags, ExperimentConfig, LossWeights, StageConfig
from inverter.errors import ConfigError


@pytest.fixture
def config_file(tmp_path):
    """Create a small experiment YAML."""
    path = tmp_path / "experiment.yaml"
    path.write_text(yaml.safe_dump({
        "resolution": 64,
        "template_dim": 32,
        "seed": 7,
        "stage1": {"epochs": 3, "learning_rate": 0.001},
        "stage3": {"loss_weights": {"w_att": 0.0}},
        "ablation": {"ft_s2": False},
        "target_extractor": {"name": "toy", "seed": 2},
        "unseen_extractors": [{"name": "toy_query", "seed": 5}],
    }))
    return path


def test_reference_defaults():
    """Test that defaults carry the reference hyperparameters."""
    config = ExperimentConfig()
    assert config.resolution == 128
    assert config.template_dim == 512
    assert (config.stage1.epochs, config.stage1.learning_rate) == (100, 2e-4)
    assert (config.stage2.epochs, config.stage2.learning_rate) == (100, 2e-4)
    assert (config.stage3.epochs, config.stage3.learning_rate) == (20, 1e-4)
    assert config.stage1.batch_size == 32
    assert config.ablation.as_tuple() == (True, True, True, True, True)


def test_from_yaml(config_file):
    """Test loading a YAML file with nested sections."""
    config = ExperimentConfig.from_yaml(str(config_file))
    assert config.resolution == 64
    assert config.seed == 7
    assert config.stage1.epochs == 3
    assert config.stage1.learning_rate == pytest.approx(0.001)
    assert config.stage2.epochs == 100
    assert config.stage3.loss_weights.w_att == 0.0
    assert config.stage3.loss_weights.w_tmp == 1.0
    assert config.ablation.ft_s2 is False
    assert config.target_extractor.seed == 2
    assert config.unseen_extractors[0].role == "unseen"


def test_unknown_key_names_the_path():
    """Test that unknown keys are rejected with their dotted path."""
    with pytest.raises(ConfigError) as excinfo:
        ExperimentConfig.from_dict({"stage2": {"loss_weights": {"w_foo": 1.0}}})
    assert excinfo.value.key == "stage2.loss_weights.w_foo"


@pytest.mark.parametrize("values", [
    {"resolution": 100},
    {"resolution": 16},
    {"template_dim": 4},
    {"stage1_template_mode": "sometimes"},
    {"far_levels": [0.0]},
    {"impostor_ratio": 0},
    {"width_divisor": 3},
    {"synth": {"n_subjects": 0}},
    {"synth": {"images_per_subject": 1.5}},
    {"synth": {"test_fraction": 1.0}},
    {"extractor_training": {"epochs": 0}},
    {"extractor_training": {"learning_rate": -1e-3}},
])
def test_invalid_values(values):
    """Test that schema violations raise ConfigError."""
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(values)


def test_loss_weights_validation():
    """Test nonnegative weights with at least one positive."""
    with pytest.raises(ConfigError):
        LossWeights(w_tmp=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(0.0, 0.0, 0.0, 0.0)


def test_stage_config_validation():
    """Test stage range and epoch checks."""
    with pytest.raises(ConfigError):
        StageConfig(stage=4)
    with pytest.raises(ConfigError):
        StageConfig(stage=1, epochs=0)
    with pytest.raises(ConfigError):
        StageConfig.from_dict({"stage": 2}, 1)


def test_ablation_flags_must_be_booleans():
    """Test that ablation switches reject non-boolean values."""
    with pytest.raises(ConfigError):
        AblationFlags.from_dict({"s3": "yes"})


def test_env_overrides(monkeypatch):
    """Test INVERTER_* environment overrides."""
    monkeypatch.setenv("INVERTER_SEED", "11")
    monkeypatch.setenv("INVERTER_RESOLUTION", "64")
    monkeypatch.setenv("INVERTER_DETERMINISTIC", "true")
    config = ExperimentConfig.from_env(ExperimentConfig())
    assert config.seed == 11
    assert config.resolution == 64
    assert config.deterministic is True


@pytest.mark.parametrize("name", ["INVERTER_SEED", "INVERTER_RESOLUTION"])
def test_malformed_env_integer(monkeypatch, name):
    """Test that a non-integer environment override raises ConfigError naming the variable."""
    monkeypatch.setenv(name, "twelve")
    with pytest.raises(ConfigError) as excinfo:
        ExperimentConfig.from_env(ExperimentConfig())
    assert excinfo.value.key == name


def test_invalid_yaml(tmp_path):
    """Test that malformed YAML raises ConfigError."""
    path = tmp_path / "bad.yaml"
    path.write_text("stage1: [unclosed")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_yaml(str(path))


def test_write_yaml_round_trip(tmp_path):
    """Test that a written config loads back to the same values."""
    config = ExperimentConfig(resolution=64, seed=3)
    config.write_yaml(tmp_path / "resolved.yaml")
    loaded = ExperimentConfig.from_yaml(str(tmp_path / "resolved.yaml"))
    assert loaded.to_dict() == config.to_dict()
