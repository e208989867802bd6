"""Flat key=value configuration: defaults, file parsing, overrides.

One namespace covers model, optimizer, data, and run keys; values are typed
by their defaults. The same canonical text form is embedded in checkpoints.
"""

from __future__ import annotations

from dataclasses import asdict, fields

from .errors import ConfigError
from .model import ModelConfig

# Every known key with its default. Types are authoritative for coercion.
DEFAULTS: dict = {
    # model
    "vocab": 7,
    "dim": 64,
    "num_layers": 12,
    "num_gcmb": 5,
    "dilation_base": 3,
    "kernel_size": 9,
    "heads": 16,
    "attn_mode": "fope",
    "variant": "full",
    "train_len": 256,
    "state_dim": 16,
    "expand": 2,
    "conv_width": 4,
    "n_harmonics": 4,
    "theta": 10000.0,
    "gmlp_expand": 4,
    "seed": 0,
    # optimizer / schedule
    "peak_lr": 8e-3,
    "min_lr": 8e-4,
    "warmup_steps": 100,
    "total_steps": 2000,
    "weight_decay": 0.1,
    "beta1": 0.9,
    "beta2": 0.95,
    "eps": 1e-8,
    "grad_clip": 1.0,
    # data / masking
    "token_budget": 8192,
    "p_select": 0.15,
    "p_mask": 0.8,
    "p_random": 0.1,
    "p_keep": 0.1,
    "corpus": "periodic",
    "corpus_path": "",
    "period": 8,
    "pattern": "",
    "noise": 0.0,
    "motif": "TATAAA",
    "num_records": 64,
    "record_length": 1024,
    # run control
    "ckpt_every": 100,
    "eval_lengths": "",
    "eval_batch": 8,
    "bench_lengths": "1024,2048,4096,8192",
    "bench_reps": 3,
    "probe_folds": 5,
    "probe_seeds": 5,
    "ablate_steps": 40,
}

_MODEL_KEYS = {f.name for f in fields(ModelConfig)}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes"):
                return True
            if raw.lower() in ("0", "false", "no"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse value {raw!r}") from None


def parse_config_text(text: str, base: dict | None = None) -> dict:
    cfg = dict(DEFAULTS if base is None else base)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        cfg[key] = _coerce(key, value.strip())
    return cfg


def apply_overrides(cfg: dict, overrides: list | None) -> dict:
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r}: expected key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if key not in DEFAULTS:
            raise ConfigError(f"override references unknown key {key!r}")
        cfg[key] = _coerce(key, value.strip())
    return cfg


def load_config(path: str | None, overrides: list | None = None) -> dict:
    cfg = dict(DEFAULTS)
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            cfg = parse_config_text(fh.read())
    return apply_overrides(cfg, overrides)


def canonical_text(cfg: dict) -> str:
    """Sorted key=value lines; floats via repr so the round trip is exact."""
    lines = []
    for key in sorted(cfg):
        value = cfg[key]
        lines.append(f"{key}={value!r}" if isinstance(value, str) else f"{key}={value}")
    return "\n".join(lines) + "\n"


def from_canonical_text(text: str) -> dict:
    cfg = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"canonical config line {lineno}: not key=value")
        key, value = line.split("=", 1)
        if key in DEFAULTS:
            if isinstance(DEFAULTS[key], str):
                value = value.strip()
                if value.startswith(("'", '"')) and value.endswith(value[0]) and len(value) >= 2:
                    value = value[1:-1]
                cfg[key] = value
            else:
                cfg[key] = _coerce(key, value)
        else:
            cfg[key] = value  # free-form auxiliary entries (training state etc.)
    return cfg


def model_config(cfg: dict) -> ModelConfig:
    kwargs = {k: v for k, v in cfg.items() if k in _MODEL_KEYS}
    return ModelConfig(**kwargs).validate()


def model_config_dict(mc: ModelConfig) -> dict:
    return asdict(mc)
