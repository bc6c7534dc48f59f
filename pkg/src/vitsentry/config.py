"""Flat configuration files: one "dotted.key = value" per line.

Values stay strings until a typed getter asks for them, which keeps the
file trivially diffable and lets every artifact echo the original text
verbatim. '#' starts a comment; blank lines are ignored.

Environment overrides: VITSENTRY_<KEY> with '__' standing in for '.',
e.g. VITSENTRY_MODEL__EMBED_DIM=32 overrides model.embed_dim. They are
applied after the file is parsed and appear in the echo as appended
lines so provenance stays complete.
"""

import os
import re

from .errors import ConfigurationError, StateError

ENV_PREFIX = "VITSENTRY_"
_KEY_RE = re.compile(r"^[a-z0-9_]+(\.[a-z0-9_]+)*$")

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


class Config:
    def __init__(self, values=None, text=""):
        self.values = dict(values or {})
        self.text = text

    @classmethod
    def parse(cls, text, apply_env=True):
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not _KEY_RE.match(key):
                raise ConfigurationError(f"line {lineno}: bad key {key!r}")
            values[key] = value
        config = cls(values, text)
        if apply_env:
            config._apply_env()
        return config

    @classmethod
    def load(cls, path, apply_env=True):
        if not os.path.exists(path):
            raise StateError(f"config file {path!r} does not exist")
        with open(path) as fh:
            return cls.parse(fh.read(), apply_env=apply_env)

    def _apply_env(self):
        for name, value in sorted(os.environ.items()):
            if not name.startswith(ENV_PREFIX):
                continue
            key = name[len(ENV_PREFIX):].lower().replace("__", ".")
            if not _KEY_RE.match(key):
                raise ConfigurationError(f"environment override {name} maps to bad key {key!r}")
            self.values[key] = value
            self.text += f"\n{key} = {value}  # from {name}"

    def set(self, key, value):
        self.values[key] = str(value)
        self.text += f"\n{key} = {value}  # override"

    def __contains__(self, key):
        return key in self.values

    def raw(self, key, default=None):
        return self.values.get(key, default)

    def get_str(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            if default is None:
                raise ConfigurationError(f"missing config key {key!r}")
            return default
        return value

    def get_int(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            if default is None:
                raise ConfigurationError(f"missing config key {key!r}")
            return default
        try:
            return int(value)
        except ValueError as exc:
            raise ConfigurationError(f"{key} = {value!r} is not an integer") from exc

    def get_float(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            if default is None:
                raise ConfigurationError(f"missing config key {key!r}")
            return default
        try:
            return float(value)
        except ValueError as exc:
            raise ConfigurationError(f"{key} = {value!r} is not a number") from exc

    def get_bool(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            if default is None:
                raise ConfigurationError(f"missing config key {key!r}")
            return default
        lowered = value.lower()
        if lowered in _TRUE:
            return True
        if lowered in _FALSE:
            return False
        raise ConfigurationError(f"{key} = {value!r} is not a boolean")

    def get_list(self, key, default=None):
        value = self.values.get(key)
        if value is None or value == "":
            if default is None:
                raise ConfigurationError(f"missing config key {key!r}")
            return list(default)
        return [item.strip() for item in value.split(",") if item.strip()]

    def section(self, prefix):
        """All keys under `prefix.` with the prefix stripped."""
        head = prefix + "."
        return {key[len(head):]: value
                for key, value in self.values.items() if key.startswith(head)}
