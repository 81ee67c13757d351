"""Run configuration: one INI-style file with [phantom], [data], [model], [train], [inference].

Every key is optional and defaults to the dataclass default. Values are
parsed by the type of that default: tuples are whitespace/comma separated,
booleans are true/false, ``auto`` or ``none`` means unset where allowed.
Unknown sections or keys are rejected, naming the key and its line.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .models import ModelConfig
from .phantom import PhantomParams, validate_params
from .preprocessing import DataConfig
from .training import TrainConfig

ENV_OUTPUT_ROOT = "CMRSYNTH_OUTPUT_ROOT"
ENV_CACHE_DIR = "CMRSYNTH_CACHE_DIR"
SNAPSHOT_NAME = "resolved_config.ini"
RUN_SECTION = "run"  # command arguments recorded in snapshots; ignored when parsing


class ConfigError(ValueError):
    def __init__(self, message, key=None, line=None):
        self.key = key
        self.line = line
        where = ""
        if key is not None:
            where += f" key '{key}'"
        if line is not None:
            where += f" (line {line})"
        super().__init__(f"config error:{where}: {message}" if where else f"config error: {message}")


@dataclass(frozen=True)
class InferenceConfig:
    style: str = "random"
    seed: int = 0
    batch_size: int = 16
    fit_mode: str = "crop"
    target_spacing: float = 1.3
    per_slice_z: bool = False


SECTIONS = {
    "phantom": PhantomParams,
    "data": DataConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "inference": InferenceConfig,
}
OPTIONAL_FIELDS = {("phantom", "slice_spacing"): float, ("model", "num_spade_blocks"): int}


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomParams = field(default_factory=PhantomParams)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def to_ini(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(getattr(self, name)):
                lines.append(f"{f.name} = {_format(getattr(getattr(self, name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def write_snapshot(self, directory, extra=None):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        text = self.to_ini()
        if extra:
            text += f"[{RUN_SECTION}]\n" + "".join(f"{k} = {v}\n" for k, v in extra.items())
        path = directory / SNAPSHOT_NAME
        path.write_text(text, encoding="utf-8")
        return path


def _format(value):
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return " ".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(section, key, raw, default, line=None):
    text = raw.strip()
    full = f"{section}.{key}"
    try:
        if (section, key) in OPTIONAL_FIELDS:
            return None if text.lower() in ("auto", "none", "") else OPTIONAL_FIELDS[(section, key)](text)
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in re.split(r"[,\s]+", text) if v)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r}", full, line) from None


def _key_lines(text):
    """Map (section, key) -> 1-based line number for error reporting."""
    lines = {}
    section = None
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        m = re.match(r"^\[([^\]]+)\]$", stripped)
        if m:
            section = m.group(1).strip()
            lines[(section, None)] = n
            continue
        m = re.match(r"^([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m and section is not None:
            lines.setdefault((section, m.group(1).strip().lower()), n)
    return lines


def parse_config(text, overrides=()):
    """Parse config text plus ``section.key=value`` overrides (overrides win)."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", f"{exc.section}.{exc.option}", exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", exc.section, exc.lineno) from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        if line is None and getattr(exc, "errors", None):
            line = exc.errors[0][0]
        raise ConfigError(str(exc).splitlines()[0], None, line) from None
    lines = _key_lines(text)

    values = {name: {} for name in SECTIONS}
    for section in parser.sections():
        if section == RUN_SECTION:
            continue
        if section not in SECTIONS:
            raise ConfigError("unknown section", section, lines.get((section, None)))
        for key, raw in parser.items(section):
            values[section][key] = (raw, lines.get((section, key)))

    for item in overrides:
        target, sep, raw = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        if section not in SECTIONS:
            raise ConfigError("unknown section", section)
        values[section][key.strip().lower()] = (raw, None)

    # use_vae set in only one of [model]/[train] applies to both
    for src, dst in (("model", "train"), ("train", "model")):
        if "use_vae" in values[src] and "use_vae" not in values[dst]:
            values[dst]["use_vae"] = values[src]["use_vae"]

    built = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, (raw, line) in values[section].items():
            if key not in names:
                raise ConfigError("unknown key", f"{section}.{key}", line)
            kwargs[key] = _parse_value(section, key, raw, getattr(defaults, key), line)
        try:
            built[section] = cls(**kwargs)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), section) from None
    validate_params(built["phantom"])
    if built["train"].use_vae != built["model"].use_vae:
        raise ConfigError("must equal model.use_vae", "train.use_vae", values["train"].get("use_vae", (None, None))[1])
    return RunConfig(**built)


def load_config(path=None, overrides=()):
    text = Path(path).read_text(encoding="utf-8") if path is not None else ""
    return parse_config(text, overrides)


def resolve_output(path):
    """Relative output paths resolve against $CMRSYNTH_OUTPUT_ROOT when set."""
    path = Path(path)
    root = os.environ.get(ENV_OUTPUT_ROOT)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def default_cache_dir():
    return Path(os.environ.get(ENV_CACHE_DIR, Path.home() / ".cache" / "cmrsynth"))
