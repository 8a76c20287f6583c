"""Run configuration: a flat INI file with sections, environment-variable
overrides (CROSSDET_<SECTION>_<KEY>), and command-line overrides, resolved
into the typed per-module configs before any work starts.

Tuple-valued fields are comma lists in the file (``anchor_sizes = 8,16,32``).
The resolved configuration is serialized next to every run's outputs.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentParams
from .datakit import SyntheticParams
from .detector import DetectorConfig
from .translator import LossWeights, TranslatorConfig

ENV_PREFIX = "CROSSDET"


@dataclass
class AblateConfig:
    """Micro-scale knobs for the ablation harness."""

    n_train: int = 16
    n_test: int = 12
    detector_epochs: int = 2
    finetune_epochs: int = 2
    translator_iterations: int = 300


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/run"
    workers: int = 1
    n_train_day: int = 200
    n_test_night: int = 100
    eval_iou_threshold: float = 0.5
    eval_score_threshold: float = 0.5
    finetune_epochs: int = 10
    synthetic: SyntheticParams = field(default_factory=SyntheticParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)


class ConfigError(ValueError):
    """Invalid or conflicting configuration values."""


def _coerce(raw: str, default):
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        elem = type(default[0]) if default else float
        return tuple(elem(v) for v in raw.split(","))
    return raw


def _build(cls, section: dict[str, str], skip=()):
    """Instantiate a config dataclass from a string mapping, coercing each
    known key by the type of its default."""
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        if f.name in skip or f.name not in section:
            continue
        try:
            kwargs[f.name] = _coerce(section[f.name], getattr(defaults, f.name))
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {cls.__name__}.{f.name}: {exc}") from exc
    unknown = set(section) - {f.name for f in fields(cls)} - set(skip)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    try:
        return dataclasses.replace(defaults, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


_SECTIONS = {
    "run": None,
    "synthetic": SyntheticParams,
    "augment": AugmentParams,
    "detector": DetectorConfig,
    "translator": TranslatorConfig,
    "weights": LossWeights,
    "ablate": AblateConfig,
}

_RUN_KEYS = (
    "seed", "out", "workers", "n_train_day", "n_test_night",
    "eval_iou_threshold", "eval_score_threshold", "finetune_epochs",
)


def load_run_config(
    path: str | Path | None = None,
    overrides: dict[str, str] | None = None,
    env: dict[str, str] | None = None,
) -> RunConfig:
    """Resolve defaults < config file < environment < explicit overrides.

    ``overrides`` keys are "section.key" strings (the CLI feeds its flags
    through here). Unknown sections or keys raise ConfigError.
    """
    sections: dict[str, dict[str, str]] = {name: {} for name in _SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        read = parser.read(path)
        if not read:
            raise FileNotFoundError(f"config file not found: {path}")
        for name in parser.sections():
            if name not in sections:
                raise ConfigError(f"unknown config section [{name}]")
            sections[name].update(dict(parser.items(name)))
    env = dict(os.environ if env is None else env)
    for key, value in env.items():
        if not key.startswith(ENV_PREFIX + "_"):
            continue
        rest = key[len(ENV_PREFIX) + 1 :].lower()
        section, _, item = rest.partition("_")
        if section in sections and item:
            sections[section][item] = value
    for dotted, value in (overrides or {}).items():
        section, _, item = dotted.partition(".")
        if section not in sections or not item:
            raise ConfigError(f"bad override key {dotted!r}")
        sections[section][item] = str(value)

    run_section = sections["run"]
    unknown = set(run_section) - set(_RUN_KEYS)
    if unknown:
        raise ConfigError(f"unknown [run] keys: {sorted(unknown)}")
    cfg = RunConfig(
        synthetic=_build(SyntheticParams, sections["synthetic"]),
        augment=_build(AugmentParams, sections["augment"]),
        detector=_build(DetectorConfig, sections["detector"]),
        translator=_build(TranslatorConfig, sections["translator"], skip=("weights",)),
        ablate=_build(AblateConfig, sections["ablate"]),
    )
    cfg.translator.weights = _build(LossWeights, sections["weights"])
    defaults = RunConfig()
    for key in _RUN_KEYS:
        if key in run_section:
            setattr(cfg, key, _coerce(run_section[key], getattr(defaults, key)))
    cfg.augment.seed = cfg.seed
    return cfg


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def save_run_config(cfg: RunConfig, path: str | Path) -> None:
    """Serialize the fully resolved configuration as INI for reproduction."""
    parser = configparser.ConfigParser()
    parser["run"] = {k: _format_value(getattr(cfg, k)) for k in _RUN_KEYS}
    for name, sub in (
        ("synthetic", cfg.synthetic),
        ("augment", cfg.augment),
        ("detector", cfg.detector),
        ("translator", cfg.translator),
        ("ablate", cfg.ablate),
    ):
        parser[name] = {
            f.name: _format_value(getattr(sub, f.name))
            for f in fields(sub)
            if f.name != "weights"
        }
    parser["weights"] = {
        f.name: _format_value(getattr(cfg.translator.weights, f.name))
        for f in fields(LossWeights)
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        fh.write("# resolved crossdet run configuration\n")
        parser.write(fh)
