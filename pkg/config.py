"""Run configuration: section dataclasses, profiles, JSON files and --section.field overrides."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, fields

from building_sim import SimulatorConfig
from errors import ConfigurationError
from evaluation import EvaluationConfig
from model import ModelConfig
from pipeline import PipelineConfig
from training import TrainHyper

logger = logging.getLogger(__name__)

TrainingConfig = TrainHyper


@dataclass
class PathsConfig:
    out_dir: str = "runs"
    dataset: str = ""
    checkpoint: str = ""

    def validate(self):
        if not self.out_dir:
            raise ConfigurationError("must not be empty", field="paths.out_dir")


SECTIONS = {
    "simulator": SimulatorConfig,
    "pipeline": PipelineConfig,
    "model": ModelConfig,
    "training": TrainingConfig,
    "evaluation": EvaluationConfig,
    "paths": PathsConfig,
}

PROFILES = {
    "full": {},
    "tiny": {
        "simulator": {"days": 60},
        "model": {"n_past": 48, "n_future": 12, "rnn_units": 16, "mha_heads": 2, "d_model": 32,
                  "dropout_rate": 0.1},
        "training": {"batch_size": 32, "eval_batch_size": 128, "learning_rate": 3e-3, "max_epochs": 30,
                     "patience": 10},
    },
}


@dataclass
class RunConfig:
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    seed: int = 0

    def validate(self):
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2 ** 64:
            raise ConfigurationError("must be an unsigned 64-bit integer", field="seed")
        for name in SECTIONS:
            getattr(self, name).validate()

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _coerce(value, default, dotted: str):
    """Match an override to the type of the field's default"""
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif isinstance(default, str):
        return str(value)
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    elif isinstance(default, dict):
        if isinstance(value, dict):
            return value
    raise ConfigurationError(f"expected {type(default).__name__}, got {value!r}", field=dotted)


def apply_section(cfg: RunConfig, section: str, values: dict):
    if section == "seed":
        cfg.seed = _coerce(values, 0, "seed")
        return
    if section not in SECTIONS:
        raise ConfigurationError(f"unknown section {section!r}", field=section)
    if not isinstance(values, dict):
        raise ConfigurationError("section must be an object", field=section)
    target = getattr(cfg, section)
    known = {f.name for f in fields(target)}
    for key, value in values.items():
        dotted = f"{section}.{key}"
        if key not in known:
            raise ConfigurationError("unknown key", field=dotted)
        setattr(target, key, _coerce(value, getattr(target, key), dotted))


def load_config_file(path: str, cfg: RunConfig = None) -> RunConfig:
    cfg = cfg or RunConfig()
    try:
        with open(path, "r") as f:
            data = json.load(f)
    except OSError as e:
        raise ConfigurationError(f"cannot read {path}: {e}", field="config") from None
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"{path} is not valid JSON: {e}", field="config") from None
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path} must hold a JSON object", field="config")
    for section, values in data.items():
        apply_section(cfg, section, values)
    return cfg


def override_flags() -> list:
    """Every ``section.field`` name, in declaration order"""
    return [f"{name}.{f.name}" for name, cls in SECTIONS.items() for f in fields(cls)]


def parse_override(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def resolve_config(profile: str = "full", path: str = None, overrides: dict = None, seed: int = None) -> RunConfig:
    """Defaults, then profile, then file, then flag overrides, then --seed; validated before returning"""
    if profile not in PROFILES:
        raise ConfigurationError(f"unknown profile {profile!r}", field="profile")
    cfg = RunConfig()
    for section, values in PROFILES[profile].items():
        apply_section(cfg, section, values)
    if path:
        load_config_file(path, cfg)
    for dotted, raw in (overrides or {}).items():
        section, key = dotted.split(".", 1)
        apply_section(cfg, section, {key: parse_override(raw) if isinstance(raw, str) else raw})
    if seed is not None:
        cfg.seed = seed
    cfg.model.rng_seed = cfg.seed
    cfg.validate()
    logger.debug(f"Resolved {profile} config, hash {cfg.config_hash()[:12]}")
    return cfg
