import csv
import time

import numpy as np
import pytest

from formed import tensor
from formed.cli import main
from formed.config import ConfigError, parse_config
from formed.metrics import METRICS, read_deltas_csv, read_reports_csv
from formed.registry import array_checksums, load_checkpoint

TINY = """
[backbone]
patch_size = 8
model_dim = 8
layers = 1
heads = 2
max_patches = 8
horizon = 8

[pretrain]
epochs = 1
steps_per_epoch = 3
batch_size = 4
corpus_series = 8
corpus_length = 96

[repurpose]
epochs = 3
batch_size = 8
seeds = [0, 1]

[adapt]
epochs = 2
batch_size = 8
seeds = [0, 1]

[data]
root = "data"
datasets = ["A", "B"]
split = [0.5, 0.25, 0.25]

[synth]
snr = 20.0
subjects_per_dataset = 6
samples_per_subject = 4
datasets = [
  { name = "A", channels = 3, length = 40, classes = 2 },
  { name = "B", channels = 2, length = 33, classes = 3 },
  { name = "Heart", channels = 5, length = 40, classes = 2 },
]

[output]
dir = "runs"
"""


def write_config(path, text=TINY):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return str(path)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    """synth -> pretrain -> repurpose -> adapt on the tiny config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "tiny.toml")
    assert main(["synth", "--config", cfg]) == 0
    assert main(["pretrain", "--config", cfg]) == 0
    assert main(["repurpose", "--config", cfg, "--ckpt", str(root / "runs/pretrain")]) == 0
    assert main(["adapt", "--config", cfg, "--ckpt", str(root / "runs/repurpose"), "--dataset", "Heart"]) == 0
    return root, cfg


# ---------------------------------------------------------------- config


def test_parse_config_defaults_and_types():
    cfg = parse_config(TINY)
    assert cfg.get("adapt")["lr"] is None and cfg.get("adapt")["ratios"] == []
    assert cfg.section("data")["normalize"] is True
    with pytest.raises(ConfigError, match="unknown key repurpose.lerning_rate"):
        parse_config("[repurpose]\nlerning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown section"):
        parse_config("[training]\nepochs = 1\n")
    with pytest.raises(ConfigError, match="expected int"):
        parse_config("[repurpose]\nepochs = 1.5\n")
    with pytest.raises(ConfigError, match="ratios"):
        parse_config("[adapt]\nratios = [0.0, 1.0]\n")
    with pytest.raises(ConfigError, match="synth.datasets\\[0\\].classes"):
        parse_config('[synth]\ndatasets = [{ name = "A", channels = 2, length = 8 }]\n')


def test_missing_required_key_exits_2_and_names_it(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", TINY.replace("heads = 2\n", ""))
    assert main(["pretrain", "--config", cfg]) == 2
    assert "backbone.heads" in capsys.readouterr().err
    assert not (tmp_path / "runs").exists()


def test_unknown_key_and_unreadable_config_exit_2(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml", TINY.replace("[output]", "[output]\nformat = 'png'"))
    assert main(["synth", "--config", cfg]) == 2
    assert "output.format" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.toml")]) == 2


def test_invalid_precision_and_threads_exit_2(tmp_path, monkeypatch, capsys):
    cfg = write_config(tmp_path / "c.toml")
    monkeypatch.setattr(tensor, "_dtype", None)
    monkeypatch.setenv("FORMED_PRECISION", "f16")
    assert main(["synth", "--config", cfg]) == 2
    assert "FORMED_PRECISION" in capsys.readouterr().err
    monkeypatch.setenv("FORMED_PRECISION", "f64")
    assert main(["synth", "--config", cfg, "--threads", "0"]) == 2


def test_bad_backbone_values_exit_2(tmp_path):
    cfg = write_config(tmp_path / "c.toml", TINY.replace("heads = 2", "heads = 3"))
    assert main(["pretrain", "--config", cfg]) == 2


# ---------------------------------------------------------------- synth and pretrain


def test_synth_is_reproducible(tmp_path):
    cfg = write_config(tmp_path / "c.toml")
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    a, b = tree_bytes(tmp_path / "a"), tree_bytes(tmp_path / "b")
    assert a == b and "Heart/samples.bin" in a
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "c"), "--seeds", "1"]) == 0
    assert tree_bytes(tmp_path / "c")["A/samples.bin"] != a["A/samples.bin"]


def test_pretrain_is_idempotent(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.toml")
    for name in ("one", "two"):
        assert main(["pretrain", "--config", cfg, "--out", str(tmp_path / name)]) == 0
    assert "held-out forecast MSE" in capsys.readouterr().out
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
    assert load_checkpoint(tmp_path / "one/checkpoint").stage == "pretrained"


def test_smoke_config_pretrain_under_a_minute(tmp_path, capsys):
    """The shipped smoke config (D=16, one layer) pretrains in well under 60 s."""
    from pathlib import Path

    smoke = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"
    text = smoke.read_text()
    assert "model_dim = 16" in text and "layers = 1" in text
    start = time.perf_counter()
    assert main(["pretrain", "--config", str(smoke), "--out", str(tmp_path)]) == 0
    assert time.perf_counter() - start < 60
    line = capsys.readouterr().out.splitlines()[0]
    after = float(line.split(":")[1].split()[0])
    assert np.isfinite(after)


def test_pretrain_corpus_too_short_exits_2(tmp_path):
    cfg = write_config(tmp_path / "c.toml", TINY.replace("corpus_length = 96", "corpus_length = 12"))
    assert main(["pretrain", "--config", cfg]) == 2


# ---------------------------------------------------------------- repurpose and adapt


def test_repurpose_outputs(run):
    root, _ = run
    out = root / "runs/repurpose"
    reports = read_reports_csv(out / "metrics.csv")
    keys = [(r.dataset, r.split, r.seed) for r in reports]
    assert sorted(keys) == sorted((d, s, seed) for d in "AB" for s in ("val", "test") for seed in (0, 1))
    state = load_checkpoint(out / "checkpoint")
    assert state.stage == "repurposed" and state.registry.names() == ["A", "B"] and state.seed == 0
    pre = load_checkpoint(root / "runs/pretrain/checkpoint")
    backbone = lambda s: array_checksums({k: v for k, v in s.named_arrays().items() if k.startswith("backbone/")})
    assert backbone(state) == backbone(pre)


def test_emitted_deltas_recompute_from_csv(run):
    root, _ = run
    for stage in ("repurpose", "adapt"):
        with open(root / f"runs/{stage}/metrics.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        val = {(r["dataset"], r["seed"], r["ratio"]): r for r in rows if r["split"] == "val"}
        test = {(r["dataset"], r["seed"], r["ratio"]): r for r in rows if r["split"] == "test"}
        deltas = read_deltas_csv(root / f"runs/{stage}/deltas.csv")
        assert len(deltas) == len(val) == len(test)
        for d in deltas:
            key = (d.dataset, str(d.seed), repr(d.ratio))
            for m in METRICS:
                assert d.deltas[m] == abs(float(val[key][m]) - float(test[key][m]))


def test_repurpose_on_adapted_checkpoint_is_refused(run, tmp_path, capsys):
    root, cfg = run
    code = main(["repurpose", "--config", cfg, "--ckpt", str(root / "runs/adapt"), "--out", str(tmp_path / "x")])
    assert code == 4
    assert "pretrained" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_adapt_on_pretrained_checkpoint_is_refused(run, tmp_path):
    root, cfg = run
    code = main(["adapt", "--config", cfg, "--ckpt", str(root / "runs/pretrain"), "--dataset", "Heart", "--out", str(tmp_path / "x")])
    assert code == 4


def test_adapt_adds_exactly_one_entry(run):
    root, _ = run
    before = tree_bytes(root / "runs/repurpose/checkpoint/arrays")
    after = tree_bytes(root / "runs/adapt/checkpoint/arrays")
    assert set(after) - set(before) == {"task__Heart__E.bin", "task__Heart__Q.bin"}
    assert all(after[k] == v for k, v in before.items())
    assert load_checkpoint(root / "runs/adapt/checkpoint").registry.names() == ["A", "B", "Heart"]


def test_adapt_name_collision_exits_3(run, tmp_path, capsys):
    root, cfg = run
    # Heart is already registered in the adapted checkpoint
    code = main(["adapt", "--config", cfg, "--ckpt", str(root / "runs/adapt"), "--dataset", "Heart", "--out", str(tmp_path / "x")])
    assert code == 3
    assert "already registered" in capsys.readouterr().err
    assert not (tmp_path / "x").exists()


def test_adapt_ratios_emit_ratio_by_seed_rows(run, tmp_path):
    root, cfg = run
    out = tmp_path / "fs"
    args = ["adapt", "--config", cfg, "--ckpt", str(root / "runs/repurpose"), "--dataset", "Heart"]
    assert main(args + ["--ratios", "0.1,0.5,1.0", "--seeds", "0,1", "--out", str(out)]) == 0
    rows = read_reports_csv(out / "fewshot.csv")
    assert [(r.ratio, r.seed) for r in rows] == [(r, s) for r in (0.1, 0.5, 1.0) for s in (0, 1)]
    assert all(r.split == "test" and r.dataset == "Heart" for r in rows)
    assert main(args + ["--ratios", "0.1,1.5", "--out", str(tmp_path / "bad")]) == 2


def test_adapt_is_idempotent(run, tmp_path):
    root, cfg = run
    for name in ("one", "two"):
        args = ["adapt", "--config", cfg, "--ckpt", str(root / "runs/repurpose"), "--dataset", "Heart"]
        assert main(args + ["--out", str(tmp_path / name)]) == 0
    assert tree_bytes(tmp_path / "one") == tree_bytes(tmp_path / "two")
    assert tree_bytes(tmp_path / "one") == tree_bytes(root / "runs/adapt")


def test_missing_dataset_exits_3(run, tmp_path):
    root, cfg = run
    code = main(["adapt", "--config", cfg, "--ckpt", str(root / "runs/repurpose"), "--dataset", "Nope", "--out", str(tmp_path / "x")])
    assert code == 3


# ---------------------------------------------------------------- eval and report


def test_eval_writes_one_row(run, tmp_path):
    root, cfg = run
    assert main(["eval", "--config", cfg, "--ckpt", str(root / "runs/adapt"), "--dataset", "A", "--split", "val", "--out", str(tmp_path)]) == 0
    (report,) = read_reports_csv(tmp_path / "eval_A_val.csv")
    # the adapt run only froze A, so its val scores are the repurposing ones for seed 0
    rep = [r for r in read_reports_csv(root / "runs/repurpose/metrics.csv") if (r.dataset, r.split, r.seed) == ("A", "val", 0)]
    assert rep == [report]


def test_eval_on_empty_split_errors_without_csv(run, tmp_path, capsys):
    root, cfg = run
    from formed.data import load_dataset, save_dataset

    ds = load_dataset(root / "data/A")
    empty_root = tmp_path / "data"
    save_dataset(ds.subset([]), empty_root / "A")
    text = open(cfg).read().replace('root = "data"', f'root = "{empty_root}"')
    cfg2 = write_config(tmp_path / "c.toml", text)
    code = main(["eval", "--config", cfg2, "--ckpt", str(root / "runs/repurpose"), "--dataset", "A", "--out", str(tmp_path / "out")])
    assert code == 3
    assert "error" in capsys.readouterr().err
    assert not list(tmp_path.rglob("*.csv"))


def test_eval_unknown_dataset_exits_3(run, tmp_path):
    root, cfg = run
    assert main(["eval", "--config", cfg, "--ckpt", str(root / "runs/repurpose"), "--dataset", "Heart", "--out", str(tmp_path)]) == 3


def test_report_means_match_hand_computation(run, tmp_path):
    root, _ = run
    assert main(["report", str(root / "runs"), "--out", str(tmp_path)]) == 0
    rows = []
    for name in ("repurpose", "adapt"):
        with open(root / f"runs/{name}/metrics.csv", newline="") as fh:
            rows += list(csv.DictReader(fh))
    with open(tmp_path / "summary.csv", newline="") as fh:
        summary = list(csv.DictReader(fh))
    assert len(summary) == len({(r["dataset"], r["split"], r["ratio"]) for r in rows}) * len(METRICS)
    for s in summary:
        vals = [float(r[s["metric"]]) for r in rows if (r["dataset"], r["split"], r["ratio"]) == (s["dataset"], s["split"], s["ratio"])]
        assert int(s["count"]) == len(vals)
        assert float(s["mean"]) == pytest.approx(sum(vals) / len(vals), abs=1e-12)
    svg = (tmp_path / "delta_range.svg").read_text()
    assert svg.startswith("<svg") and svg.count("<circle") == 3 * len(METRICS)


def test_report_is_deterministic(run, tmp_path):
    root, _ = run
    assert main(["report", str(root / "runs"), "--out", str(tmp_path / "a")]) == 0
    assert main(["report", str(root / "runs"), "--out", str(tmp_path / "b")]) == 0
    assert tree_bytes(tmp_path / "a") == tree_bytes(tmp_path / "b")


def test_report_without_csvs_exits_3(tmp_path):
    assert main(["report", str(tmp_path)]) == 3
    assert main(["report", str(tmp_path / "missing")]) == 3
