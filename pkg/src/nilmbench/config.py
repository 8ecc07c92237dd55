"""Shared ``key = value`` config-file grammar.

Files are INI style. Channels are sections named ``[channel NAME]`` and
keep their file order; other modules read their own sections
(``[sim]``, ``[schedule]``, ``[library]``, ``[train]``, ``[source]``,
``[store]``). ``#`` and ``;`` start comments.

Example::

    [sim]
    seed = 1
    horizon = 54000

    [channel M1]
    kind = induction_motor
    rated_power = 50
"""

from __future__ import annotations

import configparser
import hashlib
import json
from pathlib import Path


class ConfigError(ValueError):
    pass


def read_config(path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep channel-name keys case-sensitive
    path = Path(path)
    try:
        with path.open() as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    return parser


def channel_sections(parser) -> list[tuple[str, configparser.SectionProxy]]:
    out = []
    for name in parser.sections():
        if name.startswith("channel "):
            out.append((name[len("channel "):].strip(), parser[name]))
    return out


def get_float(section, key, default=None):
    if section is None or key not in section:
        if default is None:
            raise ConfigError(f"missing key '{key}'")
        return default
    try:
        return float(section[key])
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc


def get_int(section, key, default=None):
    if section is None or key not in section:
        if default is None:
            raise ConfigError(f"missing key '{key}'")
        return default
    try:
        return int(section[key])
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc


def get_bool(section, key, default):
    if section is None or key not in section:
        return default
    try:
        return section.getboolean(key)
    except ValueError as exc:
        raise ConfigError(f"key '{key}': {exc}") from exc


def digest(obj) -> str:
    """Stable short hash of a JSON-serialisable object."""
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]
