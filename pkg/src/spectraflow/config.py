"""Sectioned ``key = value`` configuration with strict key checking."""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    seed: int = 1
    image_size: int = 64
    n_train: int = 200
    n_val: int = 60
    difficulty: float = 0.8
    label_fraction: float = 1.0


@dataclass
class Stage1Config:
    enabled: bool = True
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-4
    lr_final: float = 1e-5
    weight_decay: float = 1e-4
    lam: float = 0.4
    tau: float = 0.5
    eps_num: float = 1e-8
    disp_variant: str = "l2"
    hinge_margin: float = 1.0
    mask_ratio: float = 0.5
    p_eq: float = 0.25
    ema_decay: float = 0.999
    clip_norm: float = 1.0


@dataclass
class Stage2Config:
    epochs: int = 40
    patience: int = 8
    batch_size: int = 8
    lr: float = 1e-3
    min_lr: float = 1e-6
    lr_factor: float = 0.5
    lr_patience: int = 3
    weight_decay: float = 1e-4
    beta: float = 1.0
    smooth: float = 1.0
    freeze_mode: str = "last-block"
    fusion: str = "daf"
    block: str = "fdconv"
    clip_norm: float = 1.0


@dataclass
class AblationConfig:
    seeds: tuple = (1, 2, 3)
    deterministic: bool = True
    lambdas: tuple = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    fractions: tuple = (0.1, 0.2, 0.5, 1.0)
    corruption_seed: int = 0


CHOICES = {
    ("stage1", "disp_variant"): ("l2", "cosine", "hinge", "covariance"),
    ("stage2", "freeze_mode"): ("frozen", "full", "last-block"),
    ("stage2", "fusion"): ("daf", "concat"),
    ("stage2", "block"): ("fdconv", "standard"),
}
# field names that differ from the file key
RENAMES = {"lam": "lambda"}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def sections(self):
        for f in fields(self):
            yield f.name, getattr(self, f.name)

    def replace(self, **sections) -> "Config":
        """Copy with per-section field overrides, e.g. ``replace(stage1={"lam": 0})``."""
        unknown = set(sections) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config sections {sorted(unknown)}")
        # every section is copied so callers may mutate the result freely
        return Config(**{name: dataclasses.replace(sec, **sections.get(name, {})) for name, sec in self.sections()})

    def validate(self) -> "Config":
        for (sec, key), allowed in CHOICES.items():
            value = getattr(getattr(self, sec), key)
            if value not in allowed:
                raise ConfigError(f"[{sec}] {_key(key)} = {value!r}; expected one of {', '.join(allowed)}")
        d, s1, s2 = self.data, self.stage1, self.stage2
        checks = [
            (d.image_size >= 32 and d.image_size % 16 == 0, "[data] image-size must be a multiple of 16 and >= 32"),
            (0 < d.label_fraction <= 1, "[data] label-fraction must be in (0, 1]"),
            (d.n_train > 0 and d.n_val > 0, "[data] n-train and n-val must be positive"),
            (0 <= s1.mask_ratio <= 1, "[stage1] mask-ratio must be in [0, 1]"),
            (0 <= s1.p_eq <= 1, "[stage1] p-eq must be in [0, 1]"),
            (0 <= s1.ema_decay <= 1, "[stage1] ema-decay must be in [0, 1]"),
            (s1.lam >= 0, "[stage1] lambda must be non-negative"),
            (s1.tau > 0 and s1.eps_num > 0, "[stage1] tau and eps-num must be positive"),
            (s2.beta >= 0, "[stage2] beta must be non-negative"),
            (s2.smooth > 0, "[stage2] smooth must be positive"),
            (s1.batch_size > 1 and s2.batch_size > 0, "batch sizes must be positive (stage1 needs >= 2)"),
            (s1.epochs >= 0 and s2.epochs >= 0, "epochs must be non-negative"),
            (len(self.ablation.seeds) > 0, "[ablation] seeds must not be empty"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self


def _key(field_name: str) -> str:
    return RENAMES.get(field_name, field_name).replace("_", "-")


def _parse(raw: str, default, where: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in raw.replace(" ", "").split(",") if v)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _field_map(section) -> dict[str, str]:
    return {_key(f.name): f.name for f in fields(section)}


def set_value(cfg: Config, section: str, key: str, raw: str) -> None:
    sections = dict(cfg.sections())
    if section not in sections:
        raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(sections)}")
    obj = sections[section]
    names = _field_map(obj)
    if key not in names:
        raise ConfigError(f"[{section}] unknown key {key!r}; known keys: {', '.join(names)}")
    name = names[key]
    setattr(obj, name, _parse(raw, getattr(obj, name), f"[{section}] {key}"))


def parse_text(text: str, base: Config | None = None) -> Config:
    cfg = (base or Config()).replace()  # fresh section objects
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    for section in parser.sections():
        for key, raw in parser.items(section):
            set_value(cfg, section, key, raw)
    return cfg.validate()


def load(path) -> Config:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_text(text)


def apply_overrides(cfg: Config, overrides: list[str]) -> Config:
    """Apply ``section.key=value`` strings."""
    cfg = cfg.replace()
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, raw = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        set_value(cfg, section, key, raw)
    return cfg.validate()


def dumps(cfg: Config) -> str:
    lines = []
    for name, section in cfg.sections():
        lines.append(f"[{name}]")
        for f in fields(section):
            lines.append(f"{_key(f.name)} = {_format(getattr(section, f.name))}")
        lines.append("")
    return "\n".join(lines)


def dump(cfg: Config, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(cfg))
    return path
