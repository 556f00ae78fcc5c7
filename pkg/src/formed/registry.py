"""Per-dataset task parameters and the on-disk checkpoint container.

Checkpoint layout (a directory)::

    manifest.ini       human-readable key/value text (configparser syntax)
    arrays/<key>.bin   one raw little-endian C-order array per parameter

``manifest.ini`` sections:

* ``[checkpoint]`` format_version, precision (f32/f64), stage
  (pretrained/repurposed/adapted), seed
* ``[backbone]`` the backbone config fields
* ``[sda]`` heads (present once the classifier head exists)
* ``[task.<name>]`` channels, classes, dim, task_kind, stage (stage at
  which the task was created), seed
* ``[arrays]`` ``<key> = <dtype> <d0>x<d1>x... <nbytes> <file>`` for every
  stored array, where dtype is ``<f8`` or ``<f4`` and a scalar has shape ``-``

Array keys are ``backbone/<param path>``, ``sda/<param path>``,
``task/<name>/E`` and ``task/<name>/Q``.  Files are named by the key with
``/`` replaced by ``__``.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, BackboneWeights
from .classifier import TASK_KINDS, SDAWeights
from .data import NAME_PATTERN, name_seed
from .nn import Parameter
from .tensor import get_dtype, precision_name

__all__ = [
    "STAGES",
    "TaskParams",
    "Registry",
    "ModelState",
    "CheckpointError",
    "StageError",
    "save_checkpoint",
    "load_checkpoint",
    "array_checksums",
]

FORMAT_VERSION = 1
STAGES = ("pretrained", "repurposed", "adapted")
INIT_STD = 0.02


class CheckpointError(ValueError):
    pass


class StageError(RuntimeError):
    """An operation was attempted at the wrong point of the pretrain/repurpose/adapt pipeline."""


@dataclass(eq=False)
class TaskParams:
    name: str
    E: Parameter  # (C, D) channel embeddings
    Q: Parameter  # (K, D) label queries
    task_kind: str = "multiclass"
    stage: str = "repurposed"
    seed: int = 0

    @property
    def channels(self) -> int:
        return self.E.shape[0]

    @property
    def classes(self) -> int:
        return self.Q.shape[0]

    @property
    def dim(self) -> int:
        return self.E.shape[1]

    def parameters(self) -> list[Parameter]:
        return [self.E, self.Q]

    def freeze(self) -> None:
        self.E.freeze()
        self.Q.freeze()

    def unfreeze(self) -> None:
        self.E.unfreeze()
        self.Q.unfreeze()


def init_task_arrays(name: str, channels: int, classes: int, dim: int, seed: int, dtype=None):
    """Gaussian (std 0.02) E and Q drawn from a stream keyed by ``(seed, name)``."""
    rng = np.random.default_rng(name_seed(seed, name))
    e = rng.normal(0.0, INIT_STD, size=(channels, dim))
    q = rng.normal(0.0, INIT_STD, size=(classes, dim))
    dtype = dtype or get_dtype()
    return e.astype(dtype), q.astype(dtype)


@dataclass
class Registry:
    entries: dict[str, TaskParams] = field(default_factory=dict)

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def names(self) -> list[str]:
        return list(self.entries)

    def register_task(
        self,
        name: str,
        channels: int,
        classes: int,
        dim: int,
        task_kind: str = "multiclass",
        seed: int = 0,
        stage: str = "repurposed",
    ) -> TaskParams:
        if not NAME_PATTERN.fullmatch(name):
            raise ValueError(f"invalid task name {name!r}; use letters, digits and _.+-")
        if name in self.entries:
            raise KeyError(f"task {name!r} is already registered")
        if channels < 1 or classes < 1 or dim < 1:
            raise ValueError("channels, classes and dim must be positive")
        if task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {task_kind!r}")
        if stage not in STAGES:
            raise ValueError(f"unknown stage {stage!r}")
        e, q = init_task_arrays(name, channels, classes, dim, seed)
        task = TaskParams(name, Parameter(e, name=f"{name}.E"), Parameter(q, name=f"{name}.Q"), task_kind, stage, seed)
        self.entries[name] = task
        return task

    def get_task(self, name: str) -> TaskParams:
        try:
            return self.entries[name]
        except KeyError:
            raise KeyError(f"unknown task {name!r}; registered: {sorted(self.entries)}") from None

    def remove(self, name: str) -> TaskParams:
        return self.entries.pop(self.get_task(name).name)

    def parameters(self) -> list[Parameter]:
        return [p for task in self.entries.values() for p in task.parameters()]


@dataclass(eq=False)
class ModelState:
    """Everything a checkpoint holds."""

    backbone: BackboneWeights
    stage: str = "pretrained"
    sda: SDAWeights | None = None
    registry: Registry = field(default_factory=Registry)
    seed: int = 0

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    def require_stage(self, *allowed: str) -> None:
        if self.stage not in allowed:
            raise StageError(f"checkpoint stage is {self.stage!r}; this step needs {' or '.join(allowed)}")

    def named_arrays(self) -> dict[str, np.ndarray]:
        arrays = {f"backbone/{k}": p.data for k, p in self.backbone.named_parameters()}
        if self.sda is not None:
            arrays.update({f"sda/{k}": p.data for k, p in self.sda.named_parameters()})
        for task in self.registry:
            arrays[f"task/{task.name}/E"] = task.E.data
            arrays[f"task/{task.name}/Q"] = task.Q.data
        return arrays


def array_checksums(arrays: dict[str, np.ndarray]) -> dict[str, str]:
    return {k: hashlib.sha256(np.ascontiguousarray(v).tobytes()).hexdigest() for k, v in arrays.items()}


def _file_name(key: str) -> str:
    return key.replace("/", "__") + ".bin"


def _dtype_code(arr: np.ndarray) -> str:
    return {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4"}[arr.dtype]


def save_checkpoint(path, state: ModelState) -> Path:
    path = Path(path)
    (path / "arrays").mkdir(parents=True, exist_ok=True)
    if state.stage not in STAGES:
        raise CheckpointError(f"unknown stage {state.stage!r}")
    arrays = state.named_arrays()
    dtypes = {a.dtype for a in arrays.values()}
    if len(dtypes) != 1:
        raise CheckpointError(f"mixed precisions in model state: {sorted(map(str, dtypes))}")

    m = configparser.ConfigParser(interpolation=None)
    m.optionxform = str  # keep case in array keys
    m["checkpoint"] = {
        "format_version": str(FORMAT_VERSION),
        "precision": precision_name(dtypes.pop()),
        "stage": state.stage,
        "seed": str(state.seed),
    }
    cfg = state.config
    m["backbone"] = {k: str(getattr(cfg, k)) for k in BackboneConfig.__dataclass_fields__}
    if state.sda is not None:
        m["sda"] = {"heads": str(state.sda.heads)}
    for task in state.registry:
        m[f"task.{task.name}"] = {
            "channels": str(task.channels),
            "classes": str(task.classes),
            "dim": str(task.dim),
            "task_kind": task.task_kind,
            "stage": task.stage,
            "seed": str(task.seed),
        }
    listing = {}
    expected = set()
    for key, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.dtype(_dtype_code(arr)))
        fname = _file_name(key)
        expected.add(fname)
        (path / "arrays" / fname).write_bytes(arr.tobytes())
        shape = "x".join(map(str, arr.shape)) or "-"
        listing[key] = f"{_dtype_code(arr)} {shape} {arr.nbytes} {fname}"
    m["arrays"] = listing
    for stale in (path / "arrays").glob("*.bin"):
        if stale.name not in expected:
            stale.unlink()
    with open(path / "manifest.ini", "w") as fh:
        m.write(fh)
    return path


def _read_array(path: Path, key: str, spec: str) -> np.ndarray:
    try:
        code, shape_text, nbytes, fname = spec.split()
        shape = () if shape_text == "-" else tuple(int(s) for s in shape_text.split("x"))
        nbytes = int(nbytes)
        dtype = np.dtype(code)
    except (ValueError, TypeError):
        raise CheckpointError(f"malformed manifest entry for {key}: {spec!r}") from None
    fpath = path / "arrays" / fname
    if not fpath.exists():
        raise CheckpointError(f"array file for {key} is missing ({fname})")
    raw = fpath.read_bytes()
    if len(raw) != nbytes or nbytes != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise CheckpointError(f"array {key}: file holds {len(raw)} bytes, manifest says {nbytes} for shape {shape}")
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _assign(params: dict[str, Parameter], arrays: dict[str, np.ndarray], prefix: str) -> None:
    for name, p in params.items():
        key = f"{prefix}/{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing array {key}")
        arr = arrays.pop(key)
        if arr.shape != p.shape:
            raise CheckpointError(f"array {key} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr.copy()


def load_checkpoint(path) -> ModelState:
    path = Path(path)
    m = configparser.ConfigParser(interpolation=None)
    m.optionxform = str
    if not m.read(path / "manifest.ini"):
        raise CheckpointError(f"{path}: no manifest.ini")
    try:
        head = m["checkpoint"]
        version = int(head["format_version"])
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint format version {version}")
        stage = head["stage"]
        if stage not in STAGES:
            raise CheckpointError(f"unknown stage {stage!r}")
        precision = head["precision"]
        seed = int(head["seed"])
        cfg = BackboneConfig(**{k: int(m["backbone"][k]) for k in BackboneConfig.__dataclass_fields__})
    except KeyError as exc:
        raise CheckpointError(f"manifest is missing {exc}") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"malformed manifest: {exc}") from None

    arrays = {key: _read_array(path, key, spec) for key, spec in m["arrays"].items()} if "arrays" in m else {}
    want = {"f64": np.float64, "f32": np.float32}.get(precision)
    if want is None or any(a.dtype != want for a in arrays.values()):
        raise CheckpointError(f"arrays disagree with declared precision {precision!r}")

    backbone = BackboneWeights.init(cfg, seed)
    _assign(dict(backbone.named_parameters()), arrays, "backbone")
    backbone.freeze()
    sda = None
    if "sda" in m:
        sda = SDAWeights.init(cfg.model_dim, int(m["sda"]["heads"]), seed)
        _assign(dict(sda.named_parameters()), arrays, "sda")
    registry = Registry()
    for section in m.sections():
        if not section.startswith("task."):
            continue
        name = section[len("task.") :]
        sec = m[section]
        e_key, q_key = f"task/{name}/E", f"task/{name}/Q"
        if e_key not in arrays or q_key not in arrays:
            raise CheckpointError(f"task {name} has no stored embeddings")
        e, q = arrays.pop(e_key), arrays.pop(q_key)
        if e.shape != (int(sec["channels"]), int(sec["dim"])) or q.shape != (int(sec["classes"]), int(sec["dim"])):
            raise CheckpointError(f"task {name}: stored shapes {e.shape}/{q.shape} disagree with manifest")
        registry.entries[name] = TaskParams(
            name,
            Parameter(e, name=f"{name}.E", dtype=e.dtype),
            Parameter(q, name=f"{name}.Q", dtype=q.dtype),
            sec.get("task_kind", "multiclass"),
            sec.get("stage", "repurposed"),
            int(sec.get("seed", "0")),
        )
    if arrays:
        raise CheckpointError(f"checkpoint holds arrays no model part claims: {sorted(arrays)}")
    return ModelState(backbone=backbone, stage=stage, sda=sda, registry=registry, seed=seed)
