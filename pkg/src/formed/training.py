"""Repurposing and adapting loops, evaluation and the few-shot harness.

The backbone is frozen in both stages, so its features are computed once per
dataset split and reused for every epoch; only the classification head sees
gradients.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from .backbone import BackboneWeights, extract_features
from .classifier import SDAWeights, classify_features, predict_proba
from .data import Dataset, name_seed, stratified_indices
from .metrics import MetricReport, compute_metrics
from .nn import Adam, Parameter, cross_entropy, snapshot
from .registry import ModelState, StageError, TaskParams, array_checksums
from .tensor import NonFiniteError, Tensor, no_grad

log = logging.getLogger(__name__)

__all__ = [
    "StageConfig",
    "FeatureSet",
    "featurize",
    "init_head",
    "repurpose",
    "adapt",
    "predict",
    "evaluate",
    "evaluate_dataset",
    "few_shot_curve",
    "FewShotRow",
]

DEFAULT_LR = {"repurpose": 1e-3, "adapt": 3e-3}


@dataclass
class StageConfig:
    stage: str = "repurpose"
    epochs: int = 50
    batch_size: int = 32
    lr: float | None = None
    patience: int = 10
    seed: int = 0
    mixing: str = "proportional"

    def __post_init__(self):
        if self.stage not in DEFAULT_LR:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.lr is None:
            self.lr = DEFAULT_LR[self.stage]
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1 or self.lr <= 0:
            raise ValueError("epochs >= 0, batch_size >= 1, patience >= 1 and lr > 0 are required")
        if self.mixing != "proportional":
            raise ValueError(f"unknown mixing policy {self.mixing!r}")


@dataclass
class FeatureSet:
    """Frozen-backbone features of one dataset split."""

    name: str
    features: np.ndarray  # (n, C, L, D)
    valid: np.ndarray  # (n, C, L)
    labels: np.ndarray  # (n,)

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureSet(self.name, self.features[idx], self.valid[idx], self.labels[idx])


def featurize(ds: Dataset, backbone: BackboneWeights, chunk: int = 64) -> FeatureSet:
    if not backbone.frozen:
        raise StageError("backbone must be frozen before extracting classification features")
    feats, valid = [], []
    with no_grad():
        for start in range(0, len(ds), chunk):
            stop = start + chunk
            h, v = extract_features(ds.values[start:stop], ds.mask[start:stop], backbone)
            feats.append(h.data)
            valid.append(v)
    if not feats:
        raise ValueError(f"{ds.name}: no samples to featurize")
    return FeatureSet(ds.name, np.concatenate(feats), np.concatenate(valid), ds.labels.copy())


def init_head(state: ModelState, specs, seed: int = 0) -> None:
    """Create the shared head and one task entry per dataset spec on a pretrained state."""
    state.require_stage("pretrained")
    cfg = state.config
    if state.sda is None:
        state.sda = SDAWeights.init(cfg.model_dim, cfg.heads, seed=name_seed(seed, "sda"))
    for spec in specs:
        state.registry.register_task(spec.name, spec.channels, spec.classes, cfg.model_dim, spec.task_kind, seed, "repurposed")


def _logits(fs: FeatureSet, idx, task: TaskParams, sda: SDAWeights) -> Tensor:
    return classify_features(Tensor(fs.features[idx], dtype=fs.features.dtype), fs.valid[idx], task.E, task.Q, sda)


def predict(fs: FeatureSet, task: TaskParams, sda: SDAWeights, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Logits and probabilities for every sample, evaluated in index order."""
    logits = []
    with no_grad():
        for start in range(0, len(fs), chunk):
            logits.append(_logits(fs, slice(start, start + chunk), task, sda).data)
    lg = np.concatenate(logits)
    return lg, predict_proba(lg, task.task_kind)


def _mean_loss(fs: FeatureSet, task: TaskParams, sda: SDAWeights) -> float:
    lg, _ = predict(fs, task, sda)
    with no_grad():
        return cross_entropy(Tensor(lg, dtype=lg.dtype), fs.labels, task.task_kind).item()


def _interleave(sizes: dict[str, int], batch_size: int, rng: np.random.Generator):
    """Per-epoch batch schedule: each dataset is reshuffled and its batches are
    spread through the epoch in proportion to its size."""
    slots = []
    for order, (name, n) in enumerate(sizes.items()):
        perm = rng.permutation(n)
        batches = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
        for j, b in enumerate(batches):
            slots.append(((j + 0.5) / len(batches), order, name, b))
    slots.sort(key=lambda s: (s[0], s[1]))
    return [(name, b) for _, _, name, b in slots]


def _train(
    train: dict[str, FeatureSet],
    val: dict[str, FeatureSet],
    tasks: dict[str, TaskParams],
    sda: SDAWeights,
    params: list[Parameter],
    cfg: StageConfig,
) -> dict:
    opt = Adam(params, lr=cfg.lr)
    rng = np.random.default_rng(name_seed(cfg.seed, f"schedule-{cfg.stage}"))
    best = math.inf
    best_state = snapshot(opt.trainable)
    best_epoch = -1
    stale = 0
    history = []
    for epoch in range(cfg.epochs):
        total, steps = 0.0, 0
        for name, idx in _interleave({k: len(v) for k, v in train.items()}, cfg.batch_size, rng):
            fs, task = train[name], tasks[name]
            opt.zero_grad()
            loss = cross_entropy(_logits(fs, idx, task, sda), fs.labels[idx], task.task_kind)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"loss diverged on {name}")
            loss.backward()
            opt.step()
            total += loss.item()
            steps += 1
        monitor = val or train
        val_loss = float(np.mean([_mean_loss(monitor[n], tasks[n], sda) for n in monitor]))
        history.append({"epoch": epoch, "train_loss": total / max(steps, 1), "val_loss": val_loss})
        log.info("%s epoch %d: train %.4f val %.4f", cfg.stage, epoch, total / max(steps, 1), val_loss)
        if val_loss < best:
            best, best_epoch, stale = val_loss, epoch, 0
            best_state = snapshot(opt.trainable)
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    for p, v in zip(opt.trainable, best_state):
        p.data = v
    return {"history": history, "best_epoch": best_epoch, "best_val_loss": best, "trainable": opt.num_trainable()}


def repurpose(
    train: dict[str, FeatureSet],
    val: dict[str, FeatureSet],
    state: ModelState,
    cfg: StageConfig,
) -> dict:
    """Jointly train the shared head and every dataset's E, Q; the backbone stays frozen."""
    state.require_stage("pretrained")
    if cfg.stage != "repurpose":
        raise ValueError("repurpose needs a repurpose-stage config")
    if not state.backbone.frozen:
        raise StageError("backbone must be frozen during repurposing")
    if state.sda is None:
        raise StageError("no classification head; call init_head first")
    missing = [n for n in train if n not in state.registry]
    if missing:
        raise KeyError(f"datasets not registered: {missing}")
    tasks = {n: state.registry.get_task(n) for n in train}
    for t in tasks.values():
        t.unfreeze()
    state.sda.unfreeze()
    params = state.sda.parameters() + [p for t in tasks.values() for p in t.parameters()]
    before = array_checksums({f"b/{k}": p.data for k, p in state.backbone.named_parameters()})
    result = _train(train, val, tasks, state.sda, params, cfg)
    if array_checksums({f"b/{k}": p.data for k, p in state.backbone.named_parameters()}) != before:
        raise AssertionError("backbone changed during repurposing")
    state.sda.freeze()
    for t in tasks.values():
        t.freeze()
    state.stage = "repurposed"
    return result


def adapt(
    name: str,
    train: FeatureSet,
    val: FeatureSet | None,
    classes: int,
    state: ModelState,
    cfg: StageConfig,
    task_kind: str = "multiclass",
) -> TaskParams:
    """Fit a new dataset's E', Q' with everything else frozen."""
    state.require_stage("repurposed", "adapted")
    if cfg.stage != "adapt":
        raise ValueError("adapt needs an adapt-stage config")
    if name in state.registry:
        raise KeyError(f"dataset {name!r} is already registered")
    channels = train.features.shape[1]
    dim = state.config.model_dim
    state.sda.freeze()
    state.backbone.freeze()
    for t in state.registry:
        t.freeze()
    task = state.registry.register_task(name, channels, classes, dim, task_kind, cfg.seed, "adapted")
    try:
        frozen_before = array_checksums({k: v for k, v in state.named_arrays().items() if not k.startswith(f"task/{name}/")})
        params = task.parameters()
        expected = (channels + classes) * dim
        got = sum(p.size for p in params if p.trainable)
        if got != expected:
            raise AssertionError(f"adapting would train {got} scalars, expected {expected}")
        _train({name: train}, {name: val} if val is not None else {}, {name: task}, state.sda, params, cfg)
        frozen_after = array_checksums({k: v for k, v in state.named_arrays().items() if not k.startswith(f"task/{name}/")})
        if frozen_after != frozen_before:
            raise AssertionError("frozen parameters changed during adapting")
    except BaseException:
        state.registry.remove(name)
        raise
    task.freeze()
    state.stage = "adapted"
    return task


def evaluate(probs, labels, classes: int, dataset: str = "", split: str = "test", seed: int = 0, ratio: float = 1.0) -> MetricReport:
    if len(labels) == 0:
        raise ValueError("cannot evaluate an empty sample set")
    return MetricReport(dataset=dataset, split=split, seed=seed, ratio=ratio, **compute_metrics(probs, labels, classes))


def evaluate_dataset(fs: FeatureSet, state: ModelState, split: str, seed: int = 0, ratio: float = 1.0) -> MetricReport:
    task = state.registry.get_task(fs.name)
    _, probs = predict(fs, task, state.sda)
    return evaluate(probs, fs.labels, task.classes, fs.name, split, seed, ratio)


@dataclass(frozen=True)
class FewShotRow:
    ratio: float
    seed: int
    report: MetricReport
    test_fingerprint: str


def few_shot_curve(
    name: str,
    train: Dataset,
    val: Dataset | None,
    test: Dataset,
    state: ModelState,
    ratios,
    seeds,
    cfg: StageConfig,
) -> list[FewShotRow]:
    """Adapt from scratch for every (ratio, seed) and score on the same test split.

    The model state is left exactly as it was.
    """
    ratios = [float(r) for r in ratios]
    if any(not 0 < r <= 1 for r in ratios):
        raise ValueError(f"ratios must lie in (0, 1]: {ratios}")
    state.require_stage("repurposed", "adapted")
    if name in state.registry:
        raise KeyError(f"dataset {name!r} is already registered")
    stage = state.stage
    train_fs = featurize(train, state.backbone)
    val_fs = featurize(val, state.backbone) if val is not None else None
    test_fs = featurize(test, state.backbone)
    fingerprint = test.fingerprint()
    rows = []
    for ratio in ratios:
        for seed in seeds:
            idx = stratified_indices(train.labels, ratio, seed)
            run_cfg = replace(cfg, seed=seed)
            task = adapt(name, train_fs.subset(idx), val_fs, train.spec.classes, state, run_cfg, train.spec.task_kind)
            _, probs = predict(test_fs, task, state.sda)
            report = evaluate(probs, test_fs.labels, task.classes, name, "test", seed, ratio)
            rows.append(FewShotRow(ratio, seed, report, fingerprint))
            state.registry.remove(name)
            state.stage = stage
    return rows
