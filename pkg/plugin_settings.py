# plugin_settings.py
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import dotenv

from helpers import ConfigError, ParameterError, StorageError

dotenv.load_dotenv()

LOG_LEVEL = os.getenv("CODEMERGE_LOG_LEVEL", "INFO")
SEED_ENV = "CODEMERGE_SEED"


def parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def optional_int(value):
    if value is None or str(value).strip().lower() in ("", "none"):
        return None
    return int(value)


@dataclass(frozen=True)
class Option:
    flag: str
    type: Callable
    default: object
    help: str
    choices: Optional[tuple] = None
    required: bool = False

    @property
    def dest(self):
        return self.flag.lstrip("-").replace("-", "_")

    def convert(self, raw, source):
        try:
            value = self.type(raw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid value {raw!r} for {self.flag} in {source}: {e}")
        if self.choices is not None and value not in self.choices:
            raise ConfigError(f"{self.flag} must be one of {', '.join(self.choices)}, got {value!r}")
        return value

    def help_text(self):
        if self.required:
            return f"{self.help} (required)"
        return f"{self.help} (default: {self.default})"


def load_config_file(path):
    """Read a line-oriented `key = value` file; keys may use dashes or underscores."""
    path = Path(path)
    if not path.is_file():
        raise StorageError("config file not found", path=path)
    values = dotenv.dotenv_values(path)
    return {key.strip().lower().replace("-", "_"): value for key, value in values.items()}


def env_seed():
    raw = os.getenv(SEED_ENV)
    if raw is None or raw.strip() == "":
        return None
    try:
        seed = int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}")
    if not 0 <= seed < 2 ** 64:
        raise ConfigError(f"{SEED_ENV} must fit in an unsigned 64-bit integer")
    return seed


def resolve_settings(args, options, config_path=None):
    """Defaults < config file < flags; CODEMERGE_SEED overrides the seed last."""
    file_values = load_config_file(config_path) if config_path else {}
    known = {opt.dest for opt in options}
    unknown = sorted(set(file_values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    settings = {}
    for opt in options:
        value = getattr(args, opt.dest, None)
        if value is None and file_values.get(opt.dest) is not None:
            value = opt.convert(file_values[opt.dest], config_path)
        if value is None:
            value = opt.default
        if value is None and opt.required:
            raise ParameterError(f"missing required option {opt.flag}")
        settings[opt.dest] = value
    if "seed" in settings:
        seed = env_seed()
        if seed is not None:
            settings["seed"] = seed
    return settings
