"""Experiment configuration: dataclasses, TOML loading, overrides and provenance.

Config files are TOML with one table per section::

    [run]
    seed = 0

    [stage2]
    scorer = "dot"
    alignment = "l2"

    [eval]
    epsilons = ["2/255", "4/255"]

Unknown sections or keys are rejected.  Overrides use ``section.key=value``
with the value parsed as TOML (bare words fall back to strings).
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import MODES
from .correspondence import SCORERS
from .losses import ALIGNMENTS
from .synthdata import PRESETS, DatasetSpec, ModalitySpec


class ConfigError(ValueError):
    pass


def parse_epsilon(value) -> Fraction:
    """'2/255' -> Fraction(2, 255); decimals are read exactly ('0.05' -> 1/20)."""
    if isinstance(value, Fraction):
        eps = value
    elif isinstance(value, bool):
        raise ConfigError(f"epsilon must be a rational string or number, got {value!r}")
    elif isinstance(value, int):
        eps = Fraction(value)
    elif isinstance(value, float):
        eps = Fraction(repr(value))
    elif isinstance(value, str):
        try:
            eps = Fraction(value.strip())
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"cannot parse epsilon {value!r}; use forms like '2/255' or '0.05'") from None
    else:
        raise ConfigError(f"epsilon must be a rational string or number, got {value!r}")
    if eps < 0:
        raise ConfigError(f"epsilon must be >= 0, got {value!r}")
    return eps


def format_epsilon(eps: Fraction) -> str:
    return str(Fraction(eps))


@dataclass(frozen=True)
class DataConfig:
    n_classes: int = 8
    samples_per_class: int = 200
    latent_dim: int = 16
    noise_std: float = 0.25
    prototype_scale: float = 1.0
    train_fraction: float = 0.8
    modalities: tuple = ("image", "audio")
    # scale of the preset mixing matrices; tables in ``modalities`` carry their own gain
    mixing_gain: float = 1.25
    seed: int | None = None  # None -> run seed

    def dataset_spec(self) -> DatasetSpec:
        mods = tuple(
            replace(ModalitySpec.preset(m), gain=self.mixing_gain) if isinstance(m, str) else ModalitySpec(**m)
            for m in self.modalities
        )
        return DatasetSpec(
            n_classes=self.n_classes, samples_per_class=self.samples_per_class, latent_dim=self.latent_dim,
            noise_std=self.noise_std, prototype_scale=self.prototype_scale,
            train_fraction=self.train_fraction, modalities=mods,
        )


@dataclass(frozen=True)
class ModelConfig:
    hidden: tuple = (64, 64)
    embed_dim: int = 16
    anchor_seed: int = 0
    anchor_max_cosine: float = 0.5
    lora_rank: int = 0  # 0 -> full fine-tuning


@dataclass(frozen=True)
class Stage0Config:
    enabled: bool = True
    epochs: int = 10
    lr: float = 0.05
    tau: float = 0.07


@dataclass(frozen=True)
class Stage1Config:
    enabled: bool = True
    epochs: int = 1
    lr: float = 0.01
    batch_size: int = 32
    epsilon: Fraction = Fraction(4, 255)
    attack: str = "apgd"
    n_iter: int = 10
    # z = x is a stationary point of the FARE objective, so the attack needs a random start
    random_start: bool = True


@dataclass(frozen=True)
class Stage2Section:
    enabled: bool = True
    epochs: int = 1
    lr: float = 0.01
    batch_size: int = 32
    epsilon: Fraction = Fraction(4, 255)
    attack: str = "apgd"
    n_iter: int = 10
    scorer: str = "dot"
    alignment: str = "l2"
    lam: float = 1.0
    tau_prime: float = 1.0
    clean_ce: bool = True
    adv_ce: bool = True
    cma: bool = True
    trainable_alpha: bool = False
    mlp_hidden: int = 32


@dataclass(frozen=True)
class EvalConfig:
    epsilons: tuple = (Fraction(2, 255), Fraction(4, 255))
    attack: str = "apgd"
    n_iter: int = 100
    random_start: bool = True
    restarts: int = 1
    k_per_class: int = 0  # 0 -> whole test split


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out_dir: str = ""


@dataclass(frozen=True)
class ExperimentConfig:
    run: RunConfig = RunConfig()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    stage0: Stage0Config = Stage0Config()
    stage1: Stage1Config = Stage1Config()
    stage2: Stage2Section = Stage2Section()
    eval: EvalConfig = EvalConfig()
    provenance: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def seed(self) -> int:
        return self.run.seed

    @property
    def data_seed(self) -> int:
        return self.run.seed if self.data.seed is None else self.data.seed

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            if f.name == "provenance":
                continue
            out[f.name] = {k: _jsonable(v) for k, v in asdict(getattr(self, f.name)).items()}
        return out

    def config_hash(self, exclude: tuple[str, ...] = ("run.out_dir",)) -> str:
        d = self.to_dict()
        for path in exclude:
            sec, key = path.split(".")
            d[sec].pop(key, None)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def override(self, **dotted) -> "ExperimentConfig":
        """Copy with ``section__key=value`` or {'section.key': value} style updates (source 'flag')."""
        return apply_overrides(self, {k.replace("__", "."): v for k, v in dotted.items()}, source="flag")


def _jsonable(v):
    if isinstance(v, Fraction):
        return format_epsilon(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    return v


_SECTION_TYPES = {
    "run": RunConfig, "data": DataConfig, "model": ModelConfig, "stage0": Stage0Config,
    "stage1": Stage1Config, "stage2": Stage2Section, "eval": EvalConfig,
}
_CHOICES = {
    ("stage1", "attack"): MODES,
    ("stage2", "attack"): MODES,
    ("eval", "attack"): MODES,
    ("stage2", "scorer"): SCORERS,
    ("stage2", "alignment"): ALIGNMENTS,
}
_ALIASES = {"stage2.lambda": "stage2.lam"}


def _coerce(section: str, key: str, value: Any, default: Any) -> Any:
    where = f"{section}.{key}"
    choices = _CHOICES.get((section, key))
    if choices is not None:
        if value not in choices:
            raise ConfigError(f"{where}: unknown variant {value!r}; accepted values: {', '.join(choices)}")
        return value
    if key == "epsilon":
        return parse_epsilon(value)
    if key == "epsilons":
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list of epsilons")
        return tuple(parse_epsilon(v) for v in value)
    if key == "modalities":
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{where}: expected a non-empty list of modalities")
        out = []
        for m in value:
            if isinstance(m, str):
                if m not in PRESETS:
                    raise ConfigError(f"{where}: unknown modality {m!r}; accepted values: {', '.join(PRESETS)}")
                out.append(m)
            elif isinstance(m, dict):
                try:
                    ModalitySpec(**m)
                except TypeError as exc:
                    raise ConfigError(f"{where}: bad modality table {m!r}: {exc}") from None
                out.append(dict(m))
            else:
                raise ConfigError(f"{where}: modality entries must be names or tables")
        return tuple(out)
    if key == "hidden":
        if isinstance(value, int) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, (list, tuple)) or not all(isinstance(v, int) and v > 0 for v in value):
            raise ConfigError(f"{where}: expected a list of positive integers")
        return tuple(value)
    if key == "seed" and section == "data" and value is None:
        return None
    if key == "out_dir":
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string path")
        return value
    target = type(default) if default is not None else int
    if target is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if target is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if target is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    return value


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.stage0.tau <= 0:
        raise ConfigError("stage0.tau: must be > 0")
    if cfg.stage2.tau_prime <= 0:
        raise ConfigError("stage2.tau_prime: must be > 0")
    if cfg.stage2.lam < 0:
        raise ConfigError("stage2.lam: must be >= 0")
    if not (cfg.stage2.clean_ce or cfg.stage2.adv_ce or cfg.stage2.cma):
        raise ConfigError("stage2: at least one of clean_ce, adv_ce, cma must be enabled")
    if cfg.model.lora_rank < 0:
        raise ConfigError("model.lora_rank: must be >= 0 (0 disables LoRA)")
    for sec in ("stage1", "stage2"):
        if getattr(cfg, sec).batch_size < 1:
            raise ConfigError(f"{sec}.batch_size: must be >= 1")
    if not cfg.eval.epsilons:
        raise ConfigError("eval.epsilons: must be non-empty")
    try:
        cfg.data.dataset_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"data: {exc}") from None


def apply_overrides(cfg: ExperimentConfig, values: dict[str, Any], source: str) -> ExperimentConfig:
    sections = {name: getattr(cfg, name) for name in _SECTION_TYPES}
    prov = dict(cfg.provenance)
    for dotted, value in values.items():
        dotted = _ALIASES.get(dotted, dotted)
        if "." not in dotted:
            raise ConfigError(f"{dotted}: expected section.key")
        sec, key = dotted.split(".", 1)
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"unknown section {sec!r}; accepted values: {', '.join(_SECTION_TYPES)}")
        known = {f.name: f for f in fields(_SECTION_TYPES[sec])}
        if key not in known:
            raise ConfigError(f"unknown key {sec}.{key}; accepted keys: {', '.join(known)}")
        default = getattr(_SECTION_TYPES[sec](), key)
        sections[sec] = replace(sections[sec], **{key: _coerce(sec, key, value, default)})
        prov[f"{sec}.{key}"] = source
    out = ExperimentConfig(**sections, provenance=prov)
    _validate(out)
    return out


def default_config() -> ExperimentConfig:
    prov = {}
    for sec, typ in _SECTION_TYPES.items():
        for f in fields(typ):
            prov[f"{sec}.{f.name}"] = "default"
    return ExperimentConfig(provenance=prov)


def _flatten(doc: dict) -> dict[str, Any]:
    flat = {}
    for sec, table in doc.items():
        if not isinstance(table, dict):
            raise ConfigError(f"top-level key {sec!r} must be a [section] table")
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"unknown section {sec!r}; accepted values: {', '.join(_SECTION_TYPES)}")
        for key, value in table.items():
            flat[f"{sec}.{key}"] = value
    return flat


def parse_override(text: str) -> tuple[str, Any]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    raw = raw.strip()
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value


def parse_config(path: str | Path | None = None, overrides: dict[str, Any] | list[str] | None = None) -> ExperimentConfig:
    """Defaults <- file <- flags, with per-key provenance."""
    cfg = default_config()
    if path is not None:
        try:
            doc = tomllib.loads(Path(path).read_text())
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
        cfg = apply_overrides(cfg, _flatten(doc), source="file")
    if overrides:
        if isinstance(overrides, (list, tuple)):
            overrides = dict(parse_override(o) for o in overrides)
        cfg = apply_overrides(cfg, overrides, source="flag")
    return cfg


def dumps_toml(cfg: ExperimentConfig) -> str:
    """Render a resolved config back to the TOML dialect ``parse_config`` reads."""
    lines = []
    for sec, table in cfg.to_dict().items():
        lines.append(f"[{sec}]")
        for k, v in table.items():
            if v is None:
                continue
            lines.append(f"{k} = {_toml_value(v)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v) -> str:
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k} = {_toml_value(x)}" for k, x in v.items() if x is not None) + "}"
    if isinstance(v, list):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return json.dumps(v)
