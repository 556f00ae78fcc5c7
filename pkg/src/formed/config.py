"""Run configuration: a TOML file checked against a fixed schema before any work starts.

Sections and keys (``REQUIRED`` keys have no default)::

    [backbone]   patch_size, model_dim, layers, heads, max_patches, horizon
    [pretrain]   epochs, steps_per_epoch, batch_size, lr, corpus_series,
                 corpus_length, seed
    [repurpose]  epochs, lr, batch_size, patience, seeds
    [adapt]      epochs, lr, batch_size, patience, seeds, ratios
    [data]       root, datasets, split, split_seed, normalize
    [synth]      snr, subjects_per_dataset, samples_per_subject, seed,
                 [[synth.datasets]] name, channels, length, classes,
                 task_kind, sampling_rate
    [output]     dir

Unknown sections or keys are rejected, as are values of the wrong type.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import tomli

__all__ = ["ConfigError", "RunConfig", "load_config", "parse_config", "SCHEMA"]


class ConfigError(ValueError):
    pass


REQUIRED = object()

_BACKBONE = {k: (int, REQUIRED) for k in ("patch_size", "model_dim", "layers", "heads", "max_patches", "horizon")}
_STAGE = {
    "epochs": (int, 50),
    "lr": (float, None),
    "batch_size": (int, 32),
    "patience": (int, 10),
    "seeds": (list[int], [0]),
}
_SYNTH_DATASET = {
    "name": (str, REQUIRED),
    "channels": (int, REQUIRED),
    "length": (int, REQUIRED),
    "classes": (int, REQUIRED),
    "task_kind": (str, "multiclass"),
    "sampling_rate": (float, None),
}

SCHEMA: dict[str, dict[str, tuple]] = {
    "backbone": _BACKBONE,
    "pretrain": {
        "epochs": (int, REQUIRED),
        "steps_per_epoch": (int, 50),
        "batch_size": (int, 32),
        "lr": (float, 3e-3),
        "corpus_series": (int, 256),
        "corpus_length": (int, 512),
        "seed": (int, 0),
    },
    "repurpose": dict(_STAGE),
    "adapt": {**_STAGE, "ratios": (list[float], [])},
    "data": {
        "root": (str, REQUIRED),
        "datasets": (list[str], []),
        "split": (list[float], [0.6, 0.2, 0.2]),
        "split_seed": (int, 0),
        "normalize": (bool, True),
    },
    "synth": {
        "snr": (float, 10.0),
        "subjects_per_dataset": (int, 30),
        "samples_per_subject": (int, 20),
        "seed": (int, 0),
        "datasets": (list[dict], REQUIRED),
    },
    "output": {"dir": (str, None)},
}


def _check_type(value, kind, where: str):
    if kind is bool:
        ok = isinstance(value, bool)
    elif kind is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif kind is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)
        value = float(value) if ok else value
    elif kind is str:
        ok = isinstance(value, str)
    elif kind is dict:
        ok = isinstance(value, dict)
    else:
        inner = kind.__args__[0]
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list")
        return [_check_type(v, inner, f"{where}[{i}]") for i, v in enumerate(value)]
    if not ok:
        raise ConfigError(f"{where}: expected {kind.__name__}, got {type(value).__name__} {value!r}")
    return value


def _section(raw: dict, schema: dict, where: str) -> dict:
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise ConfigError(f"{where}: unknown key {where}.{unknown[0]}" if where else f"unknown key {unknown[0]}")
    out = {}
    for key, (kind, default) in schema.items():
        if key in raw:
            out[key] = _check_type(raw[key], kind, f"{where}.{key}")
        elif default is REQUIRED:
            out[key] = REQUIRED
        else:
            out[key] = list(default) if isinstance(default, list) else default
    return out


@dataclass
class RunConfig:
    sections: dict[str, dict[str, Any]]
    source: str = "<config>"

    def has(self, section: str) -> bool:
        return section in self.sections

    def section(self, name: str) -> dict[str, Any]:
        """Validated section with every required key present."""
        if name not in self.sections:
            raise ConfigError(f"{self.source}: missing required section [{name}]")
        sec = self.sections[name]
        for key, value in sec.items():
            if value is REQUIRED:
                raise ConfigError(f"{self.source}: missing required key {name}.{key}")
        return sec

    def get(self, name: str) -> dict[str, Any]:
        """Section values, falling back to defaults when the section is absent."""
        if name in self.sections:
            return self.section(name)
        return _section({}, SCHEMA[name], name)


def _validate_values(sections: dict) -> None:
    for name in ("repurpose", "adapt", "pretrain"):
        sec = sections.get(name)
        if not sec:
            continue
        for key in ("epochs", "batch_size", "patience", "steps_per_epoch", "corpus_series", "corpus_length"):
            v = sec.get(key)
            if isinstance(v, int) and (v < 0 or (v == 0 and key != "epochs")):
                raise ConfigError(f"{name}.{key} must be positive, got {v}")
        if sec.get("lr") is not None and sec["lr"] is not REQUIRED and sec["lr"] <= 0:
            raise ConfigError(f"{name}.lr must be positive")
        if "seeds" in sec and not sec["seeds"]:
            raise ConfigError(f"{name}.seeds must not be empty")
    ratios = sections.get("adapt", {}).get("ratios", [])
    if any(not 0 < r <= 1 for r in ratios):
        raise ConfigError(f"adapt.ratios must lie in (0, 1], got {ratios}")
    data = sections.get("data")
    if data and len(data["split"]) != 3:
        raise ConfigError("data.split needs three fractions (train, val, test)")
    if "synth" in sections and sections["synth"]["datasets"] is not REQUIRED:
        sections["synth"]["datasets"] = [
            _section(d, _SYNTH_DATASET, f"synth.datasets[{i}]") for i, d in enumerate(sections["synth"]["datasets"])
        ]
        for i, d in enumerate(sections["synth"]["datasets"]):
            missing = [k for k, v in d.items() if v is REQUIRED]
            if missing:
                raise ConfigError(f"missing required key synth.datasets[{i}].{missing[0]}")


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    sections = {}
    for name, body in raw.items():
        if name not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{name}]")
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: [{name}] must be a table")
        sections[name] = _section(body, SCHEMA[name], name)
    _validate_values(sections)
    return RunConfig(sections, source)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, str(path))
