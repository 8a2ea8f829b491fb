import csv
import json

import numpy as np
import pytest

from weaklab import harness
from weaklab.bagcore import make_bags
from weaklab.harness import (
    ConfigError,
    ExperimentAborted,
    ExperimentConfig,
    compare_strategies,
    early_stop_check,
    load_config,
    parse_config_text,
    run_experiment,
    train_model,
)
from weaklab.ingest import InstanceSet
from weaklab.sampling import StrategyKind


def small_config(**flat):
    base = {
        "dataset.num_classes": 10,
        "dataset.per_class_count": 50,
        "dataset.shape": "8",
        "dataset.class_mean_separation": 3.0,
        "epochs": 2,
    }
    return ExperimentConfig.from_flat({**base, **flat})


def counted_dataset(num_pos=40, num_neg=200, seed=0):
    """Single-instance bags, so the positive training bag count is exactly ``num_pos``."""
    rng = np.random.default_rng(seed)
    n_eval_pos, n_eval_neg = 10, 40
    classes = np.array([0] * num_pos + [1] * num_neg + [0] * n_eval_pos + [1] * n_eval_neg)
    feats = rng.standard_normal((len(classes), 4)) + 2.0 * (classes == 0)[:, None]
    inst = InstanceSet(feats, classes, 2, "gaussian")
    eval_ids = np.arange(num_pos + num_neg, len(classes))
    return make_bags(inst, 0, 1, seed, eval_instances=eval_ids)


def test_small_run_structure():
    cfg = small_config()
    ds = harness.build_dataset(cfg.dataset)
    assert ds.num_bags == 100
    rep = run_experiment(cfg, ds)
    assert [r.epoch for r in rep.epochs] == [1, 2]
    assert rep.stop_epoch == 2 and not rep.stopped_early
    assert set(rep.final) >= {"ap", "auc", "zero_one_error", "train_loss"}


def test_runs_are_deterministic():
    a = run_experiment(small_config(strategy="badge", epochs=3))
    b = run_experiment(small_config(strategy="badge", epochs=3))
    assert a.fingerprint() == b.fingerprint()
    assert a.to_json(timing=False) == b.to_json(timing=False)


def test_different_seed_changes_report():
    a = run_experiment(small_config(seed=0))
    b = run_experiment(small_config(seed=1))
    assert a.fingerprint() != b.fingerprint()


@pytest.mark.parametrize("strategy", ["random", "entropy", "badge"])
def test_negative_budget_per_epoch(strategy):
    ds = counted_dataset()
    assert len(ds.positive_ids) == 40
    cfg = ExperimentConfig.from_flat({"epochs": 3, "pn_ratio": 0.5, "strategy": strategy, "early_stop.enabled": False})
    rep = run_experiment(cfg, ds)
    assert rep.k == 80
    assert [r.num_negatives for r in rep.epochs] == [80, 80, 80]


def test_epoch_training_set_composition(monkeypatch):
    ds = counted_dataset()
    seen = []
    real_step = harness.train_step

    def spy(params, state, x, y, *args, **kwargs):
        seen.append(y)
        return real_step(params, state, x, y, *args, **kwargs)

    monkeypatch.setattr(harness, "train_step", spy)
    chosen = []
    real_sample = harness.sample_negatives

    def spy_sample(pool, *args, **kwargs):
        out = real_sample(pool, *args, **kwargs)
        chosen.append(out)
        return out

    monkeypatch.setattr(harness, "sample_negatives", spy_sample)
    cfg = ExperimentConfig.from_flat({"epochs": 2, "strategy": "margin", "batch_size": 16})
    run_experiment(cfg, ds)
    labels = np.concatenate(seen)[:, 1]
    # each epoch trains on all 40 positives and exactly 80 negatives
    assert labels.sum() == 2 * 40 and len(labels) == 2 * 120
    for sel in chosen:
        assert set(sel) <= set(ds.negative_ids)
        assert not set(sel) & set(ds.positive_ids)


def test_resample_every(monkeypatch):
    calls = []
    real_sample = harness.sample_negatives
    monkeypatch.setattr(harness, "sample_negatives", lambda *a, **k: calls.append(1) or real_sample(*a, **k))
    rep = run_experiment(small_config(epochs=5, resample_every=2, **{"early_stop.enabled": False}))
    assert len(calls) == 3
    hashes = [r.selection_hash for r in rep.epochs]
    assert hashes[0] == hashes[1] and hashes[2] == hashes[3]


def test_full_set_uses_whole_pool():
    ds = counted_dataset()
    rep = run_experiment(ExperimentConfig.from_flat({"epochs": 1, "full_set": True}), ds)
    assert rep.epochs[0].num_negatives == 200


def test_budget_exceeding_pool_fails_fast():
    ds = counted_dataset(num_pos=40, num_neg=60)
    with pytest.raises(ConfigError, match="exceeds pool"):
        run_experiment(ExperimentConfig.from_flat({"pn_ratio": 0.5}), ds)


def test_divergence_aborts_with_partial_report(tmp_path):
    cfg = small_config(lr=1e300, epochs=3, output_dir=str(tmp_path))
    with pytest.raises(ExperimentAborted) as info:
        run_experiment(cfg)
    assert info.value.report.status == "diverged"
    saved = json.loads((tmp_path / "report.json").read_text())
    assert saved["status"] == "diverged"


def test_outputs_written(tmp_path):
    rep, _ = train_model(small_config(output_dir=str(tmp_path)))
    lines = (tmp_path / "epochs.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [1, 2]
    assert json.loads((tmp_path / "report.json").read_text())["stop_epoch"] == rep.stop_epoch
    assert (tmp_path / "model.ckpt").exists()


def test_spectrogram_run_uses_augmentation():
    cfg = ExperimentConfig.from_flat({
        "dataset.source": "synth_spec",
        "dataset.num_classes": 8,
        "dataset.per_class_count": 30,
        "dataset.shape": "24x16",
        "dataset.bag_size": 3,
        "mask.F": 4,
        "mask.T": 6,
        "model.arch": "mlp",
        "epochs": 1,
    })
    rep = run_experiment(cfg)
    assert rep.stop_epoch == 1
    with pytest.raises(ConfigError, match="time frames"):
        run_experiment(cfg.replace(**{"mask.T": 192}))


def test_early_stop_examples():
    assert not early_stop_check([0.1 * i for i in range(1, 30)], 5, 0.001)
    history = [0.5] * 10
    stops = [e for e in range(1, 11) if early_stop_check(history[:e], 5, 0.001)]
    assert stops[0] == 6
    assert not early_stop_check([0.5, 0.6], 0, 0.001)
    assert early_stop_check([0.5, 0.6, 0.6], 0, 0.001)
    assert not early_stop_check([0.5, 0.5005, 0.501, 0.5015], 5, 0.001)
    assert not early_stop_check([], 5, 0.001)


def test_early_stop_inside_run():
    rep = run_experiment(small_config(epochs=30, lr=0.0, **{"early_stop.patience": 2}))
    assert rep.stop_epoch == 3 and rep.stopped_early
    assert [r.epoch for r in rep.epochs] == [1, 2, 3]


def test_config_parsing(tmp_path):
    text = "# comment\nstrategy = entropy\nmixup.alpha=4\n\nepochs=7\n"
    assert parse_config_text(text) == {"strategy": "entropy", "mixup.alpha": "4", "epochs": "7"}
    path = tmp_path / "exp.cfg"
    path.write_text(text)
    cfg = load_config(path, {"epochs": "9"})
    assert cfg.strategy == "entropy" and cfg.mixup.alpha == 4.0 and cfg.epochs == 9
    again = load_config(None, {k: str(v) for k, v in cfg.to_flat().items()})
    assert again.to_flat() == cfg.to_flat()


@pytest.mark.parametrize(
    "flat",
    [{"pn_ratio": 0}, {"epochs": 0}, {"resample_every": 0}, {"strategy": "nope"}, {"no.such_key": 1},
     {"epochs": "many"}, {"model.aggregation": "median"}],
)
def test_config_errors(flat):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_flat(flat)


def test_config_line_without_equals():
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3")


def test_compare_single_cell():
    table = compare_strategies(small_config(), ["random"], [0])
    assert [r["strategy"] for r in table.rows] == sorted(["random", "full_set"], key=lambda s: -table.mean(s))
    assert len(table.rows) == 2


def test_compare_rows_sorted_by_mean_ap(tmp_path):
    table = compare_strategies(small_config(), ["random", "entropy"], [0, 1, 2], tmp_path)
    assert len(table.rows) == 7
    means = [s["mean_AP"] for s in table.summary]
    assert means == sorted(means, reverse=True)
    groups = [r["strategy"] for r in table.rows]
    assert groups == sorted(groups, key=lambda g: -table.mean(g))
    with open(tmp_path / "table.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert list(rows[0])[:6] == ["strategy", "seed", "AP", "AUC", "stop_epoch", "wall_seconds"]
    entropy = next(s for s in table.summary if s["strategy"] == "entropy")
    assert entropy["wins_vs_random"] + entropy["losses_vs_random"] <= 3
    assert (tmp_path / "summary.csv").exists()


def test_compare_marks_failed_cells():
    # pn_ratio 0.01 asks for 100x the positives, more than the pool holds
    table = compare_strategies(small_config(pn_ratio=0.01), ["random"], [0])
    random_row = next(r for r in table.rows if r["strategy"] == StrategyKind.RANDOM.value)
    assert random_row["status"].startswith("failed") and random_row["AP"] == ""
    full = next(r for r in table.rows if r["strategy"] == "full_set")
    assert full["status"] == "ok"


def test_cifar_source_pipeline(tmp_path):
    # tiny fake batches in the published record layout exercise the CNN path end to end
    from weaklab.ingest import CIFAR_RECORD

    rng = np.random.default_rng(0)
    for i in range(1, 6):
        recs = rng.integers(0, 256, size=(40, CIFAR_RECORD), dtype=np.uint8)
        recs[:, 0] = np.arange(40) % 10
        recs.tofile(tmp_path / f"data_batch_{i}.bin")
    cfg = ExperimentConfig.from_flat({
        "dataset.source": "cifar10",
        "dataset.path": str(tmp_path),
        "dataset.subset_size": 150,
        "dataset.bag_size": 3,
        "dataset.num_classes": 10,
        "model.arch": "cnn",
        "full_set": True,
        "epochs": 1,
    })
    rep = run_experiment(cfg)
    assert rep.stop_epoch == 1 and rep.pool_size == rep.epochs[0].num_negatives
