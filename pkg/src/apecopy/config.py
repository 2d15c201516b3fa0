"""Run configuration: model/train/decode settings, profiles, flat files.

Config files are flat ``key = value`` text with dotted keys
(``model.d = 32``); ``--set`` overrides use the same keys and win over
file values.  Every command logs the fully resolved configuration in the
same format, so a logged config reproduces the run.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigError

PAPER_NOTE = "defaults follow the reference setup: width 512, 8 heads, 6+6 layers, 3 predictor layers"


@dataclass
class ModelConfig:
    d: int = 512
    heads: int = 8
    n_enc: int = 6
    n_dec: int = 6
    n_pred: int = 3
    ffn: int = 2048
    vocab_size: int = 0  # filled in from the vocabulary
    max_len: int = 512
    interactive: bool = True
    predictor: bool = True
    copynet: bool = True
    joint_training: bool = True
    mask_targets: str = "encoder,decoder,copynet"
    dropout: float = 0.1
    dtype: str = "float32"
    baseline_src_first: bool = True  # baseline decoder cross-attends src then mt

    @property
    def mask_set(self):
        return {part.strip() for part in self.mask_targets.split(",") if part.strip()}

    @property
    def mask_encoder(self):
        return self.predictor and "encoder" in self.mask_set

    @property
    def mask_decoder(self):
        return self.predictor and "decoder" in self.mask_set

    @property
    def mask_copynet(self):
        return self.predictor and "copynet" in self.mask_set

    def validate(self):
        if self.d % self.heads != 0:
            raise ConfigError(f"width {self.d} not divisible by {self.heads} heads")
        if self.predictor and self.n_pred < 1:
            raise ConfigError("the predictor needs at least one layer")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype!r}")
        unknown = self.mask_set - {"encoder", "decoder", "copynet"}
        if unknown:
            raise ConfigError(f"unknown mask targets {sorted(unknown)}")
        if not self.predictor and self.mask_set != {"encoder", "decoder", "copynet"}:
            raise ConfigError("scaling-mask targets were restricted but the predictor is off")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")
        return self


@dataclass
class TrainConfig:
    steps: int = 3000
    token_budget: int = 1000
    alpha: float = 0.9
    lam: float = 1.0
    warmup: int = 400
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    clip_norm: float = 1.0
    prob_floor: float = 1e-9
    log_interval: int = 50
    checkpoint_interval: int = 0  # 0 = final checkpoint only

    def validate(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha {self.alpha} outside [0, 1]")
        if self.lam < 0:
            raise ConfigError(f"lambda {self.lam} must be non-negative")
        if self.warmup < 1:
            raise ConfigError("warmup must be at least one step")
        return self


@dataclass
class DecodeConfig:
    beam: int = 4
    lp_alpha: float = 1.0
    max_len_scale: float = 1.5  # max_len = scale * (I + K) + extra
    max_len_extra: int = 5

    def validate(self):
        if self.beam < 1:
            raise ConfigError("beam must be at least 1")
        return self


@dataclass
class RunConfig:
    model: ModelConfig
    train: TrainConfig
    decode: DecodeConfig
    seed: int = 0

    def validate(self):
        self.model.validate()
        self.train.validate()
        self.decode.validate()
        return self


TEST_PROFILE = {
    "model.d": "32",
    "model.heads": "2",
    "model.n_enc": "2",
    "model.n_dec": "2",
    "model.n_pred": "1",
    "model.ffn": "64",
    "model.max_len": "64",
    "model.dropout": "0.0",
    "train.warmup": "400",
    "train.token_budget": "1000",
}

PAPER_PROFILE = {"train.warmup": "4000", "train.token_budget": "25000"}


def default_run_config(profile: str = "test") -> RunConfig:
    run = RunConfig(ModelConfig(), TrainConfig(), DecodeConfig())
    if profile == "test":
        apply_overrides(run, TEST_PROFILE)
    elif profile == "paper":
        apply_overrides(run, PAPER_PROFILE)
    else:
        raise ConfigError(f"unknown profile {profile!r}; use 'test' or 'paper'")
    return run


def _coerce(value: str, target_type):
    if target_type is bool:
        low = value.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    try:
        return target_type(value)
    except ValueError:
        raise ConfigError(f"cannot parse {value!r} as {target_type.__name__}") from None


def apply_overrides(run: RunConfig, overrides: dict) -> RunConfig:
    sections = {"model": run.model, "train": run.train, "decode": run.decode}
    for key, value in overrides.items():
        if key == "seed":
            run.seed = _coerce(value, int)
            continue
        if "." not in key:
            raise ConfigError(f"config key {key!r} needs a section prefix (model./train./decode.)")
        section_name, field_name = key.split(".", 1)
        section = sections.get(section_name)
        if section is None:
            raise ConfigError(f"unknown config section {section_name!r}")
        match = next((f for f in fields(section) if f.name == field_name), None)
        if match is None:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(section, field_name, _coerce(str(value), type(getattr(section, field_name))))
    return run


def parse_config_file(path) -> dict:
    overrides = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        overrides[key] = value
    return overrides


def format_run_config(run: RunConfig) -> str:
    lines = [f"seed = {run.seed}"]
    for name, section in (("model", run.model), ("train", run.train), ("decode", run.decode)):
        for f in dataclasses.fields(section):
            lines.append(f"{name}.{f.name} = {getattr(section, f.name)}")
    return "\n".join(lines) + "\n"


def resolve_run_config(profile="test", config_path=None, overrides=None, seed=None) -> RunConfig:
    """Defaults <- profile <- config file <- --set overrides <- --seed."""
    run = default_run_config(profile)
    if config_path:
        apply_overrides(run, parse_config_file(config_path))
    if overrides:
        apply_overrides(run, dict(overrides))
    if seed is not None:
        run.seed = int(seed)
    return run.validate()
