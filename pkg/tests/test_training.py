import numpy as np
import pytest

from formed.data import DatasetSpec, make_synthetic_cohort, normalize, split_by_subject
from formed.metrics import METRICS
from formed.registry import ModelState, StageError, array_checksums, load_checkpoint, save_checkpoint
from formed.training import (
    StageConfig,
    _interleave,
    adapt,
    evaluate,
    evaluate_dataset,
    featurize,
    few_shot_curve,
    init_head,
    predict,
    repurpose,
)

from conftest import TOY_SPECS, toy_backbone, toy_features


def backbone_sums(state):
    return array_checksums({k: v for k, v in state.named_arrays().items() if k.startswith("backbone/")})


def frozen_sums(state, new_task):
    return array_checksums({k: v for k, v in state.named_arrays().items() if not k.startswith(f"task/{new_task}/")})


def unseen_split(name="Heart", c=5, t=40, k=2, seed=0):
    ds = make_synthetic_cohort([(name, c, t, k)], snr=20.0, subjects_per_dataset=6, samples_per_subject=8, seed=seed)[name]
    return split_by_subject(ds.subjects, (0.5, 0.25, 0.25), seed).apply(normalize(ds))


# ---------------------------------------------------------------- config


def test_stage_config_defaults_and_validation():
    assert StageConfig("repurpose").lr == 1e-3
    assert StageConfig("adapt").lr == 3e-3
    with pytest.raises(ValueError):
        StageConfig("finetune")
    with pytest.raises(ValueError):
        StageConfig(batch_size=0)
    with pytest.raises(ValueError):
        StageConfig(mixing="round-robin")


def test_interleave_is_proportional_and_complete():
    rng = np.random.default_rng(0)
    schedule = _interleave({"big": 90, "small": 30}, 10, rng)
    assert len(schedule) == 12
    for name, n in (("big", 90), ("small", 30)):
        seen = np.concatenate([b for nm, b in schedule if nm == name])
        assert sorted(seen.tolist()) == list(range(n))
    # the small dataset's three batches are spread out, not bunched at one end
    positions = [i for i, (nm, _) in enumerate(schedule) if nm == "small"]
    assert positions[0] < 4 and positions[-1] > 7
    again = _interleave({"big": 90, "small": 30}, 10, rng)
    assert any((a[1] != b[1]).any() for a, b in zip(schedule, again) if len(a[1]) == len(b[1]))


# ---------------------------------------------------------------- repurposing


def test_featurize_needs_frozen_backbone():
    w = toy_backbone()
    w.unfreeze()
    ds = make_synthetic_cohort([("A", 3, 40, 2)], subjects_per_dataset=3, samples_per_subject=2)["A"]
    with pytest.raises(StageError):
        featurize(ds, w)


def test_repurpose_freezes_backbone_and_trains_head():
    backbone = toy_backbone()
    feats = toy_features(backbone=backbone)
    state = ModelState(backbone=backbone)
    init_head(state, [DatasetSpec(*s) for s in TOY_SPECS])
    before = backbone_sums(state)
    head_before = array_checksums(state.named_arrays())
    result = repurpose(feats["train"], feats["val"], state, StageConfig("repurpose", epochs=3, batch_size=8))
    assert backbone_sums(state) == before
    after = array_checksums(state.named_arrays())
    changed = {k for k in after if after[k] != head_before[k]}
    assert changed and all(k.startswith(("sda/", "task/")) for k in changed)
    assert state.stage == "repurposed"
    assert len(result["history"]) == 3
    assert not any(p.trainable for p in state.sda.parameters())


def test_repurpose_requires_registration_and_stage():
    backbone = toy_backbone()
    feats = toy_features(backbone=backbone)
    state = ModelState(backbone=backbone)
    init_head(state, [DatasetSpec(*TOY_SPECS[0])])
    with pytest.raises(KeyError, match="not registered"):
        repurpose(feats["train"], feats["val"], state, StageConfig("repurpose", epochs=1))
    state.stage = "adapted"
    with pytest.raises(StageError):
        repurpose({"A": feats["train"]["A"]}, {}, state, StageConfig("repurpose", epochs=1))


def test_repurpose_is_deterministic():
    runs = []
    for _ in range(2):
        backbone = toy_backbone()
        feats = toy_features(backbone=backbone)
        state = ModelState(backbone=backbone)
        init_head(state, [DatasetSpec(*s) for s in TOY_SPECS], seed=2)
        res = repurpose(feats["train"], feats["val"], state, StageConfig("repurpose", epochs=2, batch_size=8, seed=2))
        runs.append((array_checksums(state.named_arrays()), [h["train_loss"] for h in res["history"]]))
    assert runs[0] == runs[1]


def test_early_stopping_restores_best_epoch():
    backbone = toy_backbone()
    feats = toy_features(backbone=backbone)
    state = ModelState(backbone=backbone)
    init_head(state, [DatasetSpec(*s) for s in TOY_SPECS])
    res = repurpose(feats["train"], feats["val"], state, StageConfig("repurpose", epochs=40, batch_size=8, lr=0.05, patience=2))
    history = res["history"]
    best = min(h["val_loss"] for h in history)
    assert res["best_val_loss"] == best
    assert len(history) <= 40 and (len(history) == 40 or len(history) - 1 - res["best_epoch"] == 2)
    # the restored weights reproduce the best validation loss
    from formed.training import _mean_loss

    val = np.mean([_mean_loss(feats["val"][n], state.registry.get_task(n), state.sda) for n in feats["val"]])
    assert val == pytest.approx(best, rel=1e-12)


def test_isolation_between_tasks():
    backbone = toy_backbone()
    feats = toy_features(backbone=backbone)
    state = ModelState(backbone=backbone)
    init_head(state, [DatasetSpec(*s) for s in TOY_SPECS])
    b_before = array_checksums({"E": state.registry.get_task("B").E.data, "Q": state.registry.get_task("B").Q.data})
    repurpose({"A": feats["train"]["A"]}, {"A": feats["val"]["A"]}, state, StageConfig("repurpose", epochs=2, batch_size=8))
    b_after = array_checksums({"E": state.registry.get_task("B").E.data, "Q": state.registry.get_task("B").Q.data})
    assert b_before == b_after


# ---------------------------------------------------------------- adapting


def test_adapt_trains_only_new_task(repurposed):
    state, _ = repurposed
    parts = unseen_split()
    before = frozen_sums(state, "Heart")
    task = adapt("Heart", featurize(parts["train"], state.backbone), featurize(parts["val"], state.backbone), 2, state, StageConfig("adapt", epochs=3, batch_size=8))
    assert frozen_sums(state, "Heart") == before
    assert state.registry.names() == ["A", "B", "Heart"]
    assert state.stage == "adapted"
    assert task.E.shape == (5, 8) and task.Q.shape == (2, 8)


def test_adapt_trainable_count_for_sixty_one_channels(repurposed, monkeypatch):
    state, _ = repurposed
    seen = {}
    import formed.training as training

    real = training._train

    def spy(train, val, tasks, sda, params, cfg):
        out = real(train, val, tasks, sda, params, cfg)
        seen["count"] = out["trainable"]
        return out

    monkeypatch.setattr(training, "_train", spy)
    parts = unseen_split(c=61)
    adapt("Heart", featurize(parts["train"], state.backbone), None, 2, state, StageConfig("adapt", epochs=1))
    assert seen["count"] == (61 + 2) * 8
    # same arithmetic at model width 32
    assert (61 + 2) * 32 == 2016


def test_adapt_requires_repurposed_stage():
    backbone = toy_backbone()
    state = ModelState(backbone=backbone)
    parts = unseen_split()
    with pytest.raises(StageError):
        adapt("Heart", featurize(parts["train"], backbone), None, 2, state, StageConfig("adapt", epochs=1))


def test_adapt_name_collision(repurposed):
    state, feats = repurposed
    before = array_checksums(state.named_arrays())
    with pytest.raises(KeyError, match="already registered"):
        adapt("A", feats["train"]["A"], None, 2, state, StageConfig("adapt", epochs=1))
    assert array_checksums(state.named_arrays()) == before


def test_adapt_failure_leaves_no_entry(repurposed):
    state, _ = repurposed
    parts = unseen_split()
    train = featurize(parts["train"], state.backbone)
    with pytest.raises(ValueError):
        adapt("Heart", train, None, 2, state, StageConfig("repurpose", epochs=1))
    train.labels[0] = 7
    with pytest.raises(ValueError):
        adapt("Heart", train, None, 2, state, StageConfig("adapt", epochs=1))
    assert "Heart" not in state.registry


def test_checkpoint_then_adapt_adds_exactly_one_entry(repurposed, tmp_path):
    state, _ = repurposed
    save_checkpoint(tmp_path / "rep", state)
    loaded = load_checkpoint(tmp_path / "rep")
    before = array_checksums(loaded.named_arrays())
    parts = unseen_split()
    adapt("Heart", featurize(parts["train"], loaded.backbone), None, 2, loaded, StageConfig("adapt", epochs=2))
    after = array_checksums(loaded.named_arrays())
    assert set(after) - set(before) == {"task/Heart/E", "task/Heart/Q"}
    assert all(after[k] == v for k, v in before.items())
    save_checkpoint(tmp_path / "ad", loaded)
    old = {p.name: p.read_bytes() for p in (tmp_path / "rep" / "arrays").iterdir()}
    new = {p.name: p.read_bytes() for p in (tmp_path / "ad" / "arrays").iterdir()}
    assert set(new) - set(old) == {"task__Heart__E.bin", "task__Heart__Q.bin"}
    assert all(new[k] == v for k, v in old.items())


# ---------------------------------------------------------------- evaluation and few-shot


def test_evaluate_reports(repurposed):
    state, feats = repurposed
    report = evaluate_dataset(feats["test"]["B"], state, "test", seed=0)
    assert report.dataset == "B" and report.split == "test"
    assert all(0 <= v <= 1 for v in report.values().values())
    _, probs = predict(feats["test"]["B"], state.registry.get_task("B"), state.sda)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        evaluate(np.zeros((0, 2)), np.zeros(0, dtype=int), 2)


def test_few_shot_curve_protocol(repurposed):
    state, _ = repurposed
    parts = unseen_split()
    before = array_checksums(state.named_arrays())
    rows = few_shot_curve("Heart", parts["train"], parts["val"], parts["test"], state, [0.25, 1.0], [0, 1], StageConfig("adapt", epochs=2))
    assert [(r.ratio, r.seed) for r in rows] == [(0.25, 0), (0.25, 1), (1.0, 0), (1.0, 1)]
    assert len({r.test_fingerprint for r in rows}) == 1
    assert rows[0].test_fingerprint == parts["test"].fingerprint()
    assert array_checksums(state.named_arrays()) == before
    assert state.stage == "repurposed" and "Heart" not in state.registry
    assert all(set(r.report.values()) == set(METRICS) for r in rows)


def test_few_shot_single_ratio_equals_plain_adapt(repurposed):
    state, _ = repurposed
    parts = unseen_split()
    cfg = StageConfig("adapt", epochs=2, seed=3)
    (row,) = few_shot_curve("Heart", parts["train"], parts["val"], parts["test"], state, [1.0], [3], cfg)
    task = adapt("Heart", featurize(parts["train"], state.backbone), featurize(parts["val"], state.backbone), 2, state, cfg)
    _, probs = predict(featurize(parts["test"], state.backbone), task, state.sda)
    direct = evaluate(probs, parts["test"].labels, 2, "Heart", "test", 3, 1.0)
    assert row.report == direct


def test_few_shot_rejects_bad_ratio(repurposed):
    state, _ = repurposed
    parts = unseen_split()
    with pytest.raises(ValueError):
        few_shot_curve("Heart", parts["train"], None, parts["test"], state, [0.0], [0], StageConfig("adapt", epochs=1))
