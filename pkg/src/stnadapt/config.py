"""Plain-text ``key = value`` configuration with ``#`` comments.

Value types are fixed by the defaults table; unknown keys are errors so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    """Unknown key or unparsable value in a configuration file."""


DEFAULTS: dict[str, object] = {
    # corpus
    "speakers": 4,
    "base_frames": 8000,
    "extra_sessions": 4,
    "extra_frames": 1900,
    "image_height": 64,
    "image_width": 128,
    "spec_dim": 80,
    "frame_jitter": 0.01,
    "max_translation": 0.2,
    "scale_low": 0.85,
    "scale_high": 1.15,
    "max_rotation_deg": 10.0,
    "max_shear": 0.1,
    # model
    "variant": "2d",
    "with_stn": True,
    "scale": 0.5,
    "block_frames": 25,
    "block_stride": 5,
    "conv_filters": (30, 60, 90, 120),
    "fc_width": 300,
    "loc_filters": (10, 20, 30, 40),
    "loc_fc_width": 64,
    "dropout": 0.2,
    # training
    "batch_size": 100,
    "learning_rate": 2e-3,
    "adapt_lr_divisor": 10.0,
    "patience": 5,
    "min_delta": 0.0,
    "max_epochs": 50,
    "adapt_max_epochs": 50,
    "seeds": (1, 2, 3),
}


def _parse_value(key: str, raw: str, template: object):
    raw = raw.strip()
    try:
        if isinstance(template, bool):
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if isinstance(template, int):
            return int(raw)
        if isinstance(template, float):
            return float(raw)
        if isinstance(template, tuple):
            return tuple(int(v.strip()) for v in raw.split(","))
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse value for {key!r}: {raw!r}") from exc


def parse_config(text: str) -> dict:
    """Parse config text into a full settings dict (defaults + overrides)."""
    settings = dict(DEFAULTS)
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value': {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        settings[key] = _parse_value(key, raw, DEFAULTS[key])
    return settings


def load_config(path) -> dict:
    return parse_config(Path(path).read_text())
