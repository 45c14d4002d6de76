"""Flat key = value run configuration.

One assignment per line, ``#`` starts a comment, no sections. Every key is
validated against the schema of the requested task before any computation
starts; unknown keys and unparseable values name the offending key.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError


def _to_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _to_int_list(raw: str) -> tuple[int, ...]:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    return tuple(int(s) for s in items)


_CONVERTERS = {
    "int": int,
    "float": float,
    "bool": _to_bool,
    "str": lambda s: s.strip(),
    "int_list": _to_int_list,
}

# schema entries: key -> (type name, default)
_COMMON = {
    "seed": ("int", 0),
    "out": ("str", "out"),
}

_SEG = {
    **_COMMON,
    "extent": ("int", 32),
    "n_train": ("int", 24),
    "n_eval": ("int", 24),
    "steps": ("int", 900),
    "lr": ("float", 2e-4),
    "weight_decay": ("float", 1e-4),
    "clip": ("float", 1.0),
    "embed_dim": ("int", 32),
    "patch_size": ("int", 4),
    "n_layers": ("int", 1),
    "ffn_hidden": ("int", 0),  # 0 means the 4x embed_dim default
    "encoder_channels": ("int_list", (8,)),
    "decoder_channels": ("int_list", (16, 8, 8)),
    "n_seg_classes": ("int", 2),
    "deep_supervision": ("bool", True),
    "ds_decay": ("float", 0.4),
    "ds_decay_epoch_fraction": ("float", 0.5),
    "gate_missing": ("bool", True),
    "direct_patch": ("bool", False),
    "metadata_embed_dim": ("int", 16),
    "radius_min": ("float", 4.0),
    "radius_max": ("float", 9.0),
    "availability_training": ("str", "shared"),
    "checkpoint": ("str", ""),
}
for _mod, (_bg, _fg, _sigma) in {
    "flair": (0.20, 0.70, 0.20),
    "t1c": (0.30, 0.80, 0.20),
    "t1": (0.50, 0.05, 0.18),
    "t2": (0.25, 0.75, 0.20),
}.items():
    _SEG[f"{_mod}_background"] = ("float", _bg)
    _SEG[f"{_mod}_lesion"] = ("float", _fg)
    _SEG[f"{_mod}_noise"] = ("float", _sigma)

_CLS = {
    **_COMMON,
    "extent": ("int", 32),
    "n_train": ("int", 48),
    "n_eval": ("int", 40),
    "slices_per_volume": ("int", 3),
    "steps": ("int", 300),
    "batch": ("int", 8),
    "lr": ("float", 1e-3),
    "weight_decay": ("float", 1e-4),
    "clip": ("float", 1.0),
    "stage_channels": ("int_list", (16, 32, 64, 128)),
    "film_stages": ("int_list", (2, 3)),
    "trials": ("int", 20),
    "checkpoint": ("str", ""),
}

_COMPLEXITY = {
    **_COMMON,
    "embed_dim": ("int", 256),
    "input_extent": ("int", 64),
    "patch_size": ("int", 4),
    "encoder_downsamples": ("int", 1),
    "ffn_hidden": ("int", 0),
    "n_layers": ("int", 1),
    "metadata_embed_dim": ("int", 16),
}

_GRADCHECK = {**_COMMON}

SCHEMAS: dict[str, dict[str, tuple[str, object]]] = {
    "seg": _SEG,
    "cls": _CLS,
    "complexity": _COMPLEXITY,
    "gradcheck": _GRADCHECK,
}


def parse_flat(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = body.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value.strip()
    return pairs


def validate_config(pairs: dict[str, str], task: str) -> dict:
    if task not in SCHEMAS:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(SCHEMAS)}")
    schema = SCHEMAS[task]
    values: dict[str, object] = {key: default for key, (_, default) in schema.items()}
    for key, raw in pairs.items():
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for task {task!r}")
        type_name, _ = schema[key]
        try:
            values[key] = _CONVERTERS[type_name](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {type_name}") from exc
    return values


def load_config(path: str | Path | None, task: str, overrides: dict | None = None) -> dict:
    """Read, parse, and validate a config file; ``None`` means all defaults."""
    pairs: dict[str, str] = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config file {p}: {exc}") from exc
        pairs = parse_flat(text)
    values = validate_config(pairs, task)
    for key, val in (overrides or {}).items():
        if val is not None:
            values[key] = val
    return values
