"""Plain-text ``namespace.key = value`` configuration with typed defaults."""

from __future__ import annotations

from pathlib import Path

DEFAULTS: dict[str, object] = {
    "data.source": "cifar10",
    "data.path": "",
    "data.seed": 1,
    "data.classes": 3,
    "data.per_class": 600,
    "data.height": 32,
    "data.width": 32,
    "data.channels": 1,
    "train.arch": "tinycnn",
    "train.lr": 0.01,
    "train.momentum": 0.9,
    "train.batch_size": 64,
    "train.epochs": 30,
    "train.seed": 0,
    "train.init_seed": 0,
    "heatmap.samples_per_freq": 256,
    "heatmap.lam_lo": -1.0,
    "heatmap.lam_hi": 1.0,
    "heatmap.seed": 0,
    "heatmap.eval": "val",
    "cluster.rho": 0.65,
    "cluster.seed": 0,
    "cluster.selection": "nearest",
    "trigger.key_seed": 1234,
    "trigger.lo": -1.0,
    "trigger.hi": 1.0,
    "trigger.per_channel": True,
    "trigger.min_strength": 0.0,
    "trigger.strategy": "new_class",
    "trigger.label_seed": 0,
    "trigger.q_t": 500,
    "trigger.partition_seed": 0,
    "verify.delta": 0.15,
    "verify.attack": "",
    "attack.spec": "",
    "eval.attacks": ("finetune:epochs=10,fraction=0.5;prune:rate=0.1;prune:rate=0.3;"
                     "prune:rate=0.5;jpeg:qf=100;jpeg:qf=80;jpeg:qf=60;hflip;"
                     "lowpass:B=4;lowpass:B=8;lowpass:B=16;lowpass:B=24"),
}

# desk-scale profile: synthetic data, small trigger sets
PROFILES: dict[str, dict[str, object]] = {
    "default": {},
    "toy": {
        "data.source": "synthetic",
        "trigger.q_t": 50,
        "train.batch_size": 64,
        "cluster.rho": 0.2,
        "trigger.min_strength": 0.75,
        "eval.attacks": ("finetune:epochs=10,fraction=0.5;prune:rate=0.3;jpeg:qf=100;"
                         "jpeg:qf=80;hflip;lowpass:B=4;lowpass:B=5;lowpass:B=16"),
    },
}

SECRET_KEYS = ("trigger.key_seed",)


class ConfigError(ValueError):
    pass


def _coerce(key: str, text: str):
    if key not in DEFAULTS:
        raise ConfigError(f"unknown config key {key!r}")
    proto = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(proto, bool):
            low = text.lower()
            if low not in {"true", "false", "1", "0", "yes", "no"}:
                raise ValueError(text)
            return low in {"true", "1", "yes"}
        if isinstance(proto, int):
            return int(text)
        if isinstance(proto, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(proto).__name__}") from None
    return text


def parse_lines(lines, prefix: str = "") -> dict[str, object]:
    """``key = value`` lines; ``#`` starts a comment.  With ``prefix`` only lines
    starting with it are read (used to replay manifests).
    """
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip() if not prefix else raw.strip()
        if not line:
            continue
        if prefix:
            if not line.startswith(prefix):
                continue
            line = line[len(prefix):]
        key, eq, value = line.partition("=")
        if not eq:
            raise ConfigError(f"line {n}: expected key = value, got {raw.strip()!r}")
        key = key.strip()
        if value.strip() == "<redacted>":
            continue
        out[key] = _coerce(key, value)
    return out


def load(path=None, profile: str = "default", overrides=()) -> dict[str, object]:
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
    cfg = dict(DEFAULTS)
    cfg.update(PROFILES[profile])
    if path:
        text = Path(path).read_text().splitlines()
        is_manifest = any(line.startswith("config.") for line in text)
        cfg.update(parse_lines(text, prefix="config." if is_manifest else ""))
    for item in overrides:
        key, eq, value = item.partition("=")
        if not eq:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg[key.strip()] = _coerce(key.strip(), value)
    return cfg


def snapshot(cfg: dict, export_secrets: bool = False) -> list[str]:
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        if key in SECRET_KEYS and not export_secrets:
            value = "<redacted>"
        lines.append(f"config.{key}={value}")
    return lines
