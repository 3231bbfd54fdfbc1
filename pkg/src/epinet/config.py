"""INI run configuration: ``[section]`` plus ``key = value`` lines, ``#`` comments.

Every key has a typed default; unknown sections or keys are rejected.
"""

import configparser
import io
import logging

from .errors import ConfigError

log = logging.getLogger(__name__)

SCHEMA = {
    "net": {
        "kind": "epitomic",
        "normalized": False,
        "lam": 0.01,
        "num_classes": 10,
        "input_size": 32,
        "widths": (16, 32, 128),
        "dropout": 0.5,
        "seed": 0,
    },
    "train": {
        "lr": 0.01,
        "momentum": 0.9,
        "batch_size": 64,
        "weight_decay": 5e-4,
        "lr_drop": 10.0,
        "patience": 3,
        "max_drops": 3,
        "epochs": 30,
        "seed": 0,
        "loss_mode": "single",
        "flip": True,
        "input_scale": 0.25,
        "checkpoint": "model.epnt",
    },
    "patchwork": {
        "scales": (1.0, 0.8333333333333334, 0.6666666666666666),
        "gutter": 16,
        "batch_size": 32,
    },
    "detect": {
        "scale_max": 2.0,
        "scale_min": 0.16666666666666666,
        "num_scales": 11,
        "aspect_max": 3.0,
        "num_aspects": 5,
        "window": 16,
        "gutter": 4,
        "nms": 0.3,
        "top_k": 300,
        "n_pos": 30,
        "n_neg": 200,
        "epochs": 8,
    },
    "data": {
        "task": "classify",
        "path": "data",
        "seed": 0,
        "n": 6000,
        "train": 5000,
        "test": 1000,
        "image_size": 32,
        "num_classes": 10,
    },
}


def _parse_value(default, text, where):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}",
                          module="cli", code="config") from None
    return text


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_format_value(x) for x in v)
    return str(v)


class RunConfig:
    """Typed view of a run configuration; ``cfg["train.lr"]`` or ``cfg.train["lr"]``."""

    def __init__(self, values=None):
        self.values = {s: dict(keys) for s, keys in SCHEMA.items()}
        for key, v in (values or {}).items():
            self[key] = v

    def __getitem__(self, key):
        section, name = self._split(key)
        return self.values[section][name]

    def __setitem__(self, key, value):
        section, name = self._split(key)
        default = SCHEMA[section][name]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(default, value, key)
        self.values[section][name] = value

    def __getattr__(self, name):
        if name in SCHEMA:
            return self.values[name]
        raise AttributeError(name)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @staticmethod
    def _split(key):
        section, _, name = key.partition(".")
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", module="cli", code="config")
        if name not in SCHEMA[section]:
            raise ConfigError(f"unknown key {key!r}", module="cli", code="config")
        return section, name

    @classmethod
    def parse(cls, text, source="<config>"):
        cp = configparser.ConfigParser(inline_comment_prefixes=("#",), comment_prefixes=("#",),
                                       interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text, source)
        except configparser.Error as e:
            msg = str(e).splitlines()[0]
            raise ConfigError(f"{source}: {msg}", module="cli", code="config") from None
        cfg = cls()
        given = set()
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]", module="cli",
                                  code="config")
            for name, raw in cp.items(section):
                key = f"{section}.{name}"
                cls._split(key)
                cfg.values[section][name] = _parse_value(SCHEMA[section][name], raw,
                                                         f"{source}: {key}")
                given.add(key)
        for section, keys in SCHEMA.items():
            for name in keys:
                if f"{section}.{name}" not in given:
                    log.debug("config: %s.%s defaulted to %s", section, name,
                              _format_value(keys[name]))
        return cfg

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                return cls.parse(f.read(), path)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}", module="cli",
                              code="config") from None

    def dumps(self):
        out = io.StringIO()
        for section, keys in self.values.items():
            out.write(f"[{section}]\n")
            for name, v in keys.items():
                out.write(f"{name} = {_format_value(v)}\n")
            out.write("\n")
        return out.getvalue()
