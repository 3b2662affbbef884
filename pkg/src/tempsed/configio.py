"""Plain-text config files: one `key = value` per line, `#` comments.

Keys are the field names of ModelConfig and TrainConfig (the two sets are
disjoint), so a single file can override both. Unknown keys are an error,
listing what would have been accepted. Tuples are comma-separated, booleans
accept true/false/1/0/yes/no.
"""

from __future__ import annotations

from dataclasses import fields
from typing import Any, get_args, get_origin

from .model import ModelConfig
from .training import TrainConfig


def _convert(raw: str, annotation: Any, key: str):
    raw = raw.strip()
    origin = get_origin(annotation)
    if origin is tuple:
        item_type = get_args(annotation)[0]
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(item_type(p) for p in parts)
    if annotation is bool:
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int:
        return int(raw)
    if annotation is float:
        return float(raw)
    if annotation is str:
        return raw
    raise ValueError(f"{key}: unsupported field type {annotation!r}")


def _field_types(cls) -> dict[str, Any]:
    # from __future__ annotations stores strings; resolve the handful we use.
    named = {"int": int, "float": float, "str": str, "bool": bool,
             "tuple[int, ...]": tuple[int, ...]}
    out = {}
    for f in fields(cls):
        ann = f.type
        out[f.name] = named[ann] if isinstance(ann, str) else ann
    return out


MODEL_FIELDS = _field_types(ModelConfig)
TRAIN_FIELDS = _field_types(TrainConfig)


def parse_config_text(
    text: str,
    model: ModelConfig | None = None,
    train: TrainConfig | None = None,
) -> tuple[ModelConfig, TrainConfig]:
    """Apply the file's overrides on top of the given (or default) configs."""
    model = model if model is not None else ModelConfig()
    train = train if train is not None else TrainConfig()
    model_kw: dict[str, Any] = {}
    train_kw: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key in MODEL_FIELDS or key in TRAIN_FIELDS:
            is_model = key in MODEL_FIELDS
            annotation = MODEL_FIELDS[key] if is_model else TRAIN_FIELDS[key]
            try:
                value = _convert(raw, annotation, key)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: bad value for {key}: {exc}") from exc
            (model_kw if is_model else train_kw)[key] = value
        else:
            known = ", ".join(sorted(MODEL_FIELDS) + sorted(TRAIN_FIELDS))
            raise ValueError(f"line {lineno}: unknown key {key!r} (known: {known})")
    if model_kw:
        model = model.with_overrides(**model_kw)
    if train_kw:
        train = train.with_overrides(**train_kw)
    return model, train


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize_config(model: ModelConfig, train: TrainConfig) -> str:
    """Round-trippable dump of both configs, model fields first."""
    lines = ["# model"]
    for f in fields(ModelConfig):
        lines.append(f"{f.name} = {_format_value(getattr(model, f.name))}")
    lines.append("")
    lines.append("# training")
    for f in fields(TrainConfig):
        lines.append(f"{f.name} = {_format_value(getattr(train, f.name))}")
    return "\n".join(lines) + "\n"
