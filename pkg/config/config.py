"""
Configuration management for layered template inversion experiments.
All parameters are overridable via a YAML config file or environment variables.
"""
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv

from inverter.errors import ConfigError

STAGES = (1, 2, 3)
STAGE1_TEMPLATE_MODES = ("layer_template", "full_template", "off")
EXTRACTOR_ROLES = ("target", "unseen")

# Reference-scale schedule: (epochs, learning rate) per stage.
REFERENCE_SCHEDULE = {1: (100, 2e-4), 2: (100, 2e-4), 3: (20, 1e-4)}


def _check_keys(cls, config_dict: Any, prefix: str) -> Dict[str, Any]:
    """Reject non-mappings and keys the dataclass does not declare."""
    if config_dict is None:
        return {}
    if not isinstance(config_dict, dict):
        raise ConfigError("expected a mapping", prefix or "<root>")
    known = {f.name for f in fields(cls)}
    for key in config_dict:
        if key not in known:
            raise ConfigError("unknown key", f"{prefix}.{key}" if prefix else str(key))
    return config_dict


def _is_power_of_two(n: int) -> bool:
    return isinstance(n, int) and n > 0 and (n & (n - 1)) == 0


def _is_positive_int(n) -> bool:
    return isinstance(n, int) and not isinstance(n, bool) and n >= 1


def _env_int(name: str) -> int:
    raw = os.environ[name]
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"expected an integer, got {raw!r}", name)


@dataclass
class LossWeights:
    """Weights of the template, pixel, perceptual and attribute terms."""
    w_tmp: float = 1.0
    w_pix: float = 1.0
    w_per: float = 1.0
    w_att: float = 1.0

    def __post_init__(self):
        values = (self.w_tmp, self.w_pix, self.w_per, self.w_att)
        if any(not isinstance(v, (int, float)) or v < 0 for v in values):
            raise ConfigError("loss weights must be nonnegative numbers", "loss_weights")
        if not any(v > 0 for v in values):
            raise ConfigError("at least one loss weight must be positive", "loss_weights")

    @classmethod
    def from_dict(cls, config_dict: dict, prefix: str = "loss_weights") -> "LossWeights":
        config_dict = _check_keys(cls, config_dict, prefix)
        defaults = cls()
        return cls(
            w_tmp=config_dict.get("w_tmp", defaults.w_tmp),
            w_pix=config_dict.get("w_pix", defaults.w_pix),
            w_per=config_dict.get("w_per", defaults.w_per),
            w_att=config_dict.get("w_att", defaults.w_att),
        )


@dataclass
class StageConfig:
    """Hyperparameters of one training stage."""
    stage: int = 1
    epochs: int = 100
    learning_rate: float = 2e-4
    batch_size: int = 32
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigError(f"stage must be one of {STAGES}", "stage")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError("epochs must be an integer >= 1", f"stage{self.stage}.epochs")
        if not isinstance(self.learning_rate, (int, float)) or self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0", f"stage{self.stage}.learning_rate")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError("batch_size must be an integer >= 1", f"stage{self.stage}.batch_size")

    @classmethod
    def default(cls, stage: int) -> "StageConfig":
        """Reference-scale defaults for the given stage."""
        epochs, learning_rate = REFERENCE_SCHEDULE[stage]
        return cls(stage=stage, epochs=epochs, learning_rate=learning_rate)

    @classmethod
    def from_dict(cls, config_dict: dict, stage: int) -> "StageConfig":
        prefix = f"stage{stage}"
        config_dict = _check_keys(cls, config_dict, prefix)
        defaults = cls.default(stage)
        if config_dict.get("stage", stage) != stage:
            raise ConfigError(f"stage tag must be {stage}", f"{prefix}.stage")
        return cls(
            stage=stage,
            epochs=config_dict.get("epochs", defaults.epochs),
            learning_rate=float(config_dict.get("learning_rate", defaults.learning_rate)),
            batch_size=config_dict.get("batch_size", defaults.batch_size),
            loss_weights=LossWeights.from_dict(config_dict.get("loss_weights"), f"{prefix}.loss_weights"),
        )


@dataclass
class AblationFlags:
    """Pipeline switches mirroring the ablation table columns."""
    f_s1: bool = True   # foreground generators trained in stage 1
    m_s1: bool = True   # midground generator trained in stage 1
    s2: bool = True     # panorama generator trained in stage 2
    ft_s2: bool = True  # secondary template injection in stage 2
    s3: bool = True     # joint fine-tuning in stage 3

    @classmethod
    def from_dict(cls, config_dict: dict, prefix: str = "ablation") -> "AblationFlags":
        config_dict = _check_keys(cls, config_dict, prefix)
        for key, value in config_dict.items():
            if not isinstance(value, bool):
                raise ConfigError("must be true or false", f"{prefix}.{key}")
        return cls(**config_dict)

    def as_tuple(self) -> tuple:
        return (self.f_s1, self.m_s1, self.s2, self.ft_s2, self.s3)


@dataclass
class ExtractorSpec:
    """Declares one template extractor by plug-in name."""
    name: str = "toy"
    checkpoint: Optional[str] = None
    seed: int = 0
    role: str = "target"

    def __post_init__(self):
        if self.role not in EXTRACTOR_ROLES:
            raise ConfigError(f"role must be one of {EXTRACTOR_ROLES}", "extractor.role")

    @classmethod
    def from_dict(cls, config_dict: dict, prefix: str, role: str) -> "ExtractorSpec":
        config_dict = _check_keys(cls, config_dict, prefix)
        defaults = cls()
        return cls(
            name=config_dict.get("name", defaults.name),
            checkpoint=config_dict.get("checkpoint", defaults.checkpoint),
            seed=config_dict.get("seed", defaults.seed),
            role=config_dict.get("role", role),
        )


@dataclass
class SynthConfig:
    """Synthetic fixture dataset settings."""
    n_subjects: int = 64
    images_per_subject: int = 8
    test_fraction: float = 0.25
    max_shift_px: float = 2.0
    max_color_jitter: float = 0.06

    def __post_init__(self):
        for key in ("n_subjects", "images_per_subject"):
            if not _is_positive_int(getattr(self, key)):
                raise ConfigError("must be an integer >= 1", f"synth.{key}")
        if not isinstance(self.test_fraction, (int, float)) or not 0 < self.test_fraction < 1:
            raise ConfigError("must lie in (0, 1)", "synth.test_fraction")
        for key in ("max_shift_px", "max_color_jitter"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or value < 0:
                raise ConfigError("must be a nonnegative number", f"synth.{key}")

    @classmethod
    def from_dict(cls, config_dict: dict, prefix: str = "synth") -> "SynthConfig":
        config_dict = _check_keys(cls, config_dict, prefix)
        return cls(**config_dict)


@dataclass
class ExtractorTrainingConfig:
    """Settings for training the toy extractor."""
    epochs: int = 15
    learning_rate: float = 1e-3
    batch_size: int = 64
    margin: float = 0.35
    scale: float = 30.0
    width: int = 32

    def __post_init__(self):
        for key in ("epochs", "batch_size", "width"):
            if not _is_positive_int(getattr(self, key)):
                raise ConfigError("must be an integer >= 1", f"extractor_training.{key}")
        for key in ("learning_rate", "scale"):
            value = getattr(self, key)
            if not isinstance(value, (int, float)) or value <= 0:
                raise ConfigError("must be > 0", f"extractor_training.{key}")
        if not isinstance(self.margin, (int, float)) or self.margin < 0:
            raise ConfigError("must be a nonnegative number", "extractor_training.margin")

    @classmethod
    def from_dict(cls, config_dict: dict, prefix: str = "extractor_training") -> "ExtractorTrainingConfig":
        config_dict = _check_keys(cls, config_dict, prefix)
        return cls(**config_dict)


@dataclass
class ExperimentConfig:
    """Full experiment configuration with reference defaults."""

    # Data
    manifest_path: str = "data/toy/manifest.jsonl"
    output_dir: str = "runs/toy"
    resolution: int = 128
    template_dim: int = 512

    # Reproducibility
    seed: int = 0
    deterministic: bool = False
    device: str = "auto"
    num_workers: int = 0

    # Model
    width_divisor: int = 1
    normalize_templates: bool = True
    stage1_template_mode: str = "layer_template"

    # Plug-ins
    target_extractor: ExtractorSpec = field(default_factory=ExtractorSpec)
    unseen_extractors: List[ExtractorSpec] = field(default_factory=list)
    feature_network: str = "random_taps"
    attribute_classifier: str = "random_attributes"
    attribute_weights: Optional[str] = None
    landmark_detector: Optional[str] = None

    # Training
    stage1: StageConfig = field(default_factory=lambda: StageConfig.default(1))
    stage2: StageConfig = field(default_factory=lambda: StageConfig.default(2))
    stage3: StageConfig = field(default_factory=lambda: StageConfig.default(3))
    ablation: AblationFlags = field(default_factory=AblationFlags)
    checkpoint_every: int = 0

    # Evaluation
    impostor_ratio: int = 10
    far_levels: List[float] = field(default_factory=lambda: [0.01, 0.001])

    synth: SynthConfig = field(default_factory=SynthConfig)
    extractor_training: ExtractorTrainingConfig = field(default_factory=ExtractorTrainingConfig)

    def __post_init__(self):
        if not _is_power_of_two(self.resolution) or self.resolution < 32:
            raise ConfigError("must be a power of two >= 32", "resolution")
        if not isinstance(self.template_dim, int) or self.template_dim < 8:
            raise ConfigError("must be an integer >= 8", "template_dim")
        if not _is_power_of_two(self.width_divisor):
            raise ConfigError("must be a power of two", "width_divisor")
        if self.stage1_template_mode not in STAGE1_TEMPLATE_MODES:
            raise ConfigError(f"must be one of {STAGE1_TEMPLATE_MODES}", "stage1_template_mode")
        if self.impostor_ratio < 1:
            raise ConfigError("must be >= 1", "impostor_ratio")
        if any(not 0 < far < 1 for far in self.far_levels):
            raise ConfigError("FAR levels must lie in (0, 1)", "far_levels")

    def stage_config(self, stage: int) -> StageConfig:
        return {1: self.stage1, 2: self.stage2, 3: self.stage3}[stage]

    @classmethod
    def from_dict(cls, config_dict: dict) -> "ExperimentConfig":
        """Load configuration from a dictionary, rejecting unknown keys."""
        config_dict = _check_keys(cls, config_dict, "")
        defaults = cls()
        unseen = config_dict.get("unseen_extractors") or []
        if not isinstance(unseen, list):
            raise ConfigError("expected a list", "unseen_extractors")
        return cls(
            manifest_path=config_dict.get("manifest_path", defaults.manifest_path),
            output_dir=config_dict.get("output_dir", defaults.output_dir),
            resolution=config_dict.get("resolution", defaults.resolution),
            template_dim=config_dict.get("template_dim", defaults.template_dim),
            seed=config_dict.get("seed", defaults.seed),
            deterministic=config_dict.get("deterministic", defaults.deterministic),
            device=config_dict.get("device", defaults.device),
            num_workers=config_dict.get("num_workers", defaults.num_workers),
            width_divisor=config_dict.get("width_divisor", defaults.width_divisor),
            normalize_templates=config_dict.get("normalize_templates", defaults.normalize_templates),
            stage1_template_mode=config_dict.get("stage1_template_mode", defaults.stage1_template_mode),
            target_extractor=ExtractorSpec.from_dict(
                config_dict.get("target_extractor"), "target_extractor", "target"
            ),
            unseen_extractors=[
                ExtractorSpec.from_dict(item, f"unseen_extractors[{i}]", "unseen")
                for i, item in enumerate(unseen)
            ],
            feature_network=config_dict.get("feature_network", defaults.feature_network),
            attribute_classifier=config_dict.get("attribute_classifier", defaults.attribute_classifier),
            attribute_weights=config_dict.get("attribute_weights", defaults.attribute_weights),
            landmark_detector=config_dict.get("landmark_detector", defaults.landmark_detector),
            stage1=StageConfig.from_dict(config_dict.get("stage1"), 1),
            stage2=StageConfig.from_dict(config_dict.get("stage2"), 2),
            stage3=StageConfig.from_dict(config_dict.get("stage3"), 3),
            ablation=AblationFlags.from_dict(config_dict.get("ablation")),
            checkpoint_every=config_dict.get("checkpoint_every", defaults.checkpoint_every),
            impostor_ratio=config_dict.get("impostor_ratio", defaults.impostor_ratio),
            far_levels=[float(v) for v in config_dict.get("far_levels", defaults.far_levels)],
            synth=SynthConfig.from_dict(config_dict.get("synth")),
            extractor_training=ExtractorTrainingConfig.from_dict(config_dict.get("extractor_training")),
        )

    @classmethod
    def from_yaml(cls, path: str) -> "ExperimentConfig":
        """Load configuration from a YAML file."""
        try:
            with open(path, "r", encoding="utf-8") as f:
                config_dict = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"invalid YAML: {e}", str(path))
        return cls.from_dict(config_dict)

    @classmethod
    def from_env(cls, base: Optional["ExperimentConfig"] = None) -> "ExperimentConfig":
        """Apply INVERTER_* environment overrides (a .env file is honoured)."""
        load_dotenv()
        config = base if base is not None else cls()
        overrides: Dict[str, Any] = {}
        if "INVERTER_SEED" in os.environ:
            overrides["seed"] = _env_int("INVERTER_SEED")
        if "INVERTER_OUTPUT_DIR" in os.environ:
            overrides["output_dir"] = os.environ["INVERTER_OUTPUT_DIR"]
        if "INVERTER_MANIFEST" in os.environ:
            overrides["manifest_path"] = os.environ["INVERTER_MANIFEST"]
        if "INVERTER_DEVICE" in os.environ:
            overrides["device"] = os.environ["INVERTER_DEVICE"]
        if "INVERTER_RESOLUTION" in os.environ:
            overrides["resolution"] = _env_int("INVERTER_RESOLUTION")
        if "INVERTER_DETERMINISTIC" in os.environ:
            overrides["deterministic"] = os.environ["INVERTER_DETERMINISTIC"].lower() == "true"
        return replace(config, **overrides) if overrides else config

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def write_yaml(self, path: Path):
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(self.to_dict(), f, sort_keys=False)
