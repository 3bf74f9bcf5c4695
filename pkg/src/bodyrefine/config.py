"""Flat dotted-key configuration.

A config file holds one ``key = value`` per line (``#`` starts a comment).
Command-line overrides use the same ``key=value`` form.
"""

from __future__ import annotations

from pathlib import Path

DEFAULTS = {
    "stages.joint.enabled": True,
    "stages.anchor.enabled": True,
    "stages.vertex.enabled": True,
    "joint.weight": 10.0,
    "anchor.weight": 1.0,
    "anchor.iters": 3,
    "anchor.margin_px": 20.0,
    "anchor.count": 200,
    "anchor.seed": 0,
    "vertex.weight": 1.0,
    "shading.enabled": True,
    "shading.lambda_photo": 1.0,
    "shading.lambda_depth": 2.0,
    "shading.lambda_smooth": 4.0,
    "shading.gn_iters": 10,
    "shading.magnify_factor": 10.0,
    "shading.albedo": 0.6,
    "render.eps_vis": 0.01,
}


class ConfigError(ValueError):
    pass


def _coerce(key, raw, default):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    try:
        if isinstance(default, bool):
            if isinstance(text, bool):
                return text
            low = str(text).lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {raw!r}") from None
    return text


class Config:
    """Immutable mapping of dotted keys to typed values, seeded from :data:`DEFAULTS`."""

    def __init__(self, values=None):
        merged = dict(DEFAULTS)
        for key, raw in (values or {}).items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key '{key}'")
            merged[key] = _coerce(key, raw, DEFAULTS[key])
        self._values = merged

    def __getitem__(self, key):
        return self._values[key]

    def items(self):
        return self._values.items()

    def to_dict(self) -> dict:
        return dict(self._values)

    def override(self, values) -> "Config":
        merged = dict(self._values)
        merged.update(values)
        return Config(merged)

    @classmethod
    def from_file(cls, path) -> "Config":
        return cls(read_config_file(path))


def parse_assignment(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key '{key}'")
    return key, value.strip()


def read_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        try:
            key, value = parse_assignment(line)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from None
        values[key] = value
    return values
