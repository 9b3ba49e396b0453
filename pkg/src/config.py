import dataclasses
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple

import dotenv

from src.errors import ConfigError
from src.utils import validators


class Config:
    """Environment configuration for the gliding-vertex toolkit"""

    def __init__(self):
        dotenv.load_dotenv()

    @classmethod
    def load(cls):
        """Load configuration and return instance"""
        return cls()

    @property
    def log_level(self) -> str:
        """Get the default log level from environment"""
        return os.getenv("GLIDING_LOG_LEVEL", "WARNING").upper()

    @property
    def default_seed(self) -> int:
        """Get the seed used when a run does not pass one"""
        raw = os.getenv("GLIDING_SEED", "7")
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"GLIDING_SEED must be an integer, got {raw!r}") from exc

    @property
    def output_float_format(self) -> str:
        """Float format of every emitted number"""
        return "%.6f"


# Global config instance
config = Config.load()


@dataclass(frozen=True)
class RunConfig:
    """Every tunable of a command-line run.

    Values come from command-line flags, then a KEY=VALUE config file,
    then the defaults below.
    """

    seed: int = 7
    # selection, suppression and evaluation
    t_r: float = 0.8
    nms_iou: float = 0.5
    eval_iou: float = 0.5
    ap_mode: str = "voc07"
    score_threshold: float = 0.05
    display_score: float = 0.6
    # loss weights
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 16.0
    smooth_l1_beta: float = 1.0
    # optimizer
    learning_rate: float = 7.5e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    steps: int = 4000
    decay_steps: Tuple[int, ...] = (3000, 3600)
    batch_size: int = 128
    hidden_dim: int = 64
    feature_noise: float = 0.05
    positive_iou: float = 0.5
    negative_ratio: int = 3
    proposals_per_object: int = 4
    background_proposals: int = 8
    # robustness and confusion sweeps
    aspects: Tuple[float, ...] = (4.0, 8.0, 16.0)
    angle_errors: Tuple[float, ...] = (0.0, 1.0, 2.0, 4.0, 8.0)
    trials: int = 1000
    sweep_max_angle: float = 90.0
    confusion_aspect: float = 4.0
    confusion_range: float = 10.0
    confusion_step: float = 0.1
    alpha_noise: float = 0.15
    # synthetic scenes
    image_size: int = 256
    min_objects: int = 3
    max_objects: int = 6
    min_size: float = 32.0
    max_size: float = 80.0
    min_aspect: float = 1.5
    max_aspect: float = 5.0
    horizontal_fraction: float = 0.3
    overlap_cap: float = 0.2
    classes: Tuple[str, ...] = ("plane", "ship")
    train_images: int = 40
    test_images: int = 20
    rotations: int = 0

    def validate(self) -> "RunConfig":
        """Raise ConfigError listing every invalid field"""
        checks = [
            validators.validate_count("seed", self.seed, minimum=0),
            validators.validate_unit_interval("t_r", self.t_r),
            validators.validate_unit_interval("nms_iou", self.nms_iou),
            validators.validate_unit_interval("eval_iou", self.eval_iou),
            validators.validate_ap_mode(self.ap_mode),
            validators.validate_unit_interval("score_threshold", self.score_threshold),
            validators.validate_unit_interval("display_score", self.display_score),
            validators.validate_non_negative("lambda1", self.lambda1),
            validators.validate_non_negative("lambda2", self.lambda2),
            validators.validate_non_negative("lambda3", self.lambda3),
            validators.validate_positive("smooth_l1_beta", self.smooth_l1_beta),
            validators.validate_positive("learning_rate", self.learning_rate),
            validators.validate_half_open_unit("momentum", self.momentum),
            validators.validate_non_negative("weight_decay", self.weight_decay),
            validators.validate_count("steps", self.steps, minimum=0),
            validators.validate_count("batch_size", self.batch_size),
            validators.validate_count("hidden_dim", self.hidden_dim),
            validators.validate_non_negative("feature_noise", self.feature_noise),
            validators.validate_unit_interval("positive_iou", self.positive_iou),
            validators.validate_count("negative_ratio", self.negative_ratio, minimum=0),
            validators.validate_count("proposals_per_object", self.proposals_per_object),
            validators.validate_count("background_proposals", self.background_proposals, minimum=0),
            validators.validate_grid("aspects", self.aspects, positive=True),
            validators.validate_grid("angle_errors", self.angle_errors),
            validators.validate_count("trials", self.trials),
            validators.validate_positive("sweep_max_angle", self.sweep_max_angle),
            validators.validate_positive("confusion_aspect", self.confusion_aspect),
            validators.validate_positive("confusion_range", self.confusion_range),
            validators.validate_positive("confusion_step", self.confusion_step),
            validators.validate_non_negative("alpha_noise", self.alpha_noise),
            validators.validate_count("image_size", self.image_size, minimum=8),
            validators.validate_count("min_objects", self.min_objects, minimum=0),
            validators.validate_count("max_objects", self.max_objects, minimum=self.min_objects),
            validators.validate_positive("min_size", self.min_size),
            validators.validate_range("size", self.min_size, self.max_size),
            validators.validate_range("aspect", self.min_aspect, self.max_aspect),
            validators.validate_positive("min_aspect", self.min_aspect),
            validators.validate_unit_interval("horizontal_fraction", self.horizontal_fraction),
            validators.validate_half_open_unit("overlap_cap", self.overlap_cap),
            validators.validate_count("train_images", self.train_images),
            validators.validate_count("test_images", self.test_images),
            validators.validate_count("rotations", self.rotations, minimum=0),
        ]
        if not self.classes or any(not c or any(ch.isspace() for ch in c) for c in self.classes):
            checks.append(f"classes must be non-empty tokens without spaces, got {self.classes!r}")
        if any(s < 0 for s in self.decay_steps):
            checks.append(f"decay_steps must be >= 0, got {self.decay_steps!r}")
        errors = [message for message in checks if message]
        if errors:
            raise ConfigError("; ".join(errors))
        return self

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: _jsonable(getattr(self, f.name)) for f in dataclasses.fields(self)}

    @classmethod
    def from_file(cls, path: Path) -> Dict[str, Any]:
        """Parse a KEY=VALUE file into typed field overrides"""
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = dotenv.dotenv_values(path)
        logging.info(f"Read {len(raw)} config values from {path}")
        return cls.coerce(raw)

    @classmethod
    def coerce(cls, raw: Mapping[str, Optional[str]]) -> Dict[str, Any]:
        """Convert string values to the type of each field's default"""
        defaults = cls()
        known = {f.name for f in dataclasses.fields(cls)}
        out: Dict[str, Any] = {}
        for key, value in raw.items():
            name = key.strip().lower()
            if name not in known:
                raise ConfigError(f"unknown config key: {key}")
            if value is None:
                raise ConfigError(f"config key {key} has no value")
            out[name] = _parse_value(name, value, getattr(defaults, name))
        return out

    @classmethod
    def resolve(cls, config_file: Optional[Path] = None, **flags: Any) -> "RunConfig":
        """Defaults, overridden by the config file, overridden by flags that were given"""
        values: Dict[str, Any] = {"seed": config.default_seed}
        if config_file is not None:
            values.update(cls.from_file(config_file))
        values.update({k: tuple(v) if isinstance(v, list) else v for k, v in flags.items() if v is not None})
        for key in values:
            if key not in {f.name for f in dataclasses.fields(cls)}:
                raise ConfigError(f"unknown config key: {key}")
        return cls(**values).validate()


def _parse_value(name: str, value: str, default: Any) -> Any:
    text = value.strip()
    try:
        if isinstance(default, tuple):
            items = [item.strip() for item in text.split(",") if item.strip()]
            if default and isinstance(default[0], str):
                return tuple(items)
            if default and isinstance(default[0], int):
                return tuple(int(item) for item in items)
            return tuple(float(item) for item in items)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes", "on")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return text


def _jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return list(value)
    return value


def parse_list(text: Optional[str], cast=float) -> Optional[List]:
    """Comma-separated flag value to a list; None passes through"""
    if text is None:
        return None
    try:
        return [cast(item.strip()) for item in text.split(",") if item.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad list value: {text!r}") from exc
