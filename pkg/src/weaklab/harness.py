"""Experiment orchestration: per-epoch negative resampling, training, evaluation and comparison."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from weaklab import augment, ingest
from weaklab.bagcore import BagDataset, make_bags
from weaklab.metrics import average_precision, records_from_arrays, roc_auc, zero_one_error
from weaklab.model import (
    AdamState,
    AggregationMode,
    ModelParams,
    TrainingDiverged,
    init_params,
    predict_bags,
    save_checkpoint,
    train_step,
)
from weaklab.sampling import SamplerSettings, Snapshot, StrategyKind, sample_negatives

log = logging.getLogger(__name__)

FULL_SET = "full_set"


class ConfigError(ValueError):
    pass


class ExperimentAborted(RuntimeError):
    def __init__(self, message: str, report: ExperimentReport):
        super().__init__(message)
        self.report = report


# --- configuration -------------------------------------------------------------

@dataclass
class DatasetSpec:
    source: str = "gaussian"
    target_class: int = 0
    bag_size: int = 5
    seed: int = 0
    num_classes: int = 10
    per_class_count: int = 1000
    shape: str = "16"
    class_mean_separation: float = 3.0
    noise_std: float = 1.0
    path: str = ""
    subset_size: int = 0
    eval_fraction: float = 0.2
    bags_file: str = ""


@dataclass
class ModelSpec:
    arch: str = "auto"
    aggregation: str = AggregationMode.MEAN_THEN_SOFTMAX.value
    init_seed: int = 0


@dataclass
class EarlyStopSpec:
    enabled: bool = True
    patience: int = 5
    min_delta: float = 0.001


@dataclass
class MixupSpec:
    alpha: float = 10.0
    rate: float = 0.5


@dataclass
class MaskSpec:
    F: int = 48
    T: int = 192
    fill_value: float = 0.0


@dataclass
class SvmSpec:
    reg_lambda: float = 1e-4
    epochs: int = 10


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    strategy: str = StrategyKind.RANDOM.value
    full_set: bool = False
    pn_ratio: float = 0.5
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-3
    weight_decay: float = 5e-7
    seed: int = 0
    resample_every: int = 1
    augment: str = "auto"
    mixup: MixupSpec = field(default_factory=MixupSpec)
    mask: MaskSpec = field(default_factory=MaskSpec)
    early_stop: EarlyStopSpec = field(default_factory=EarlyStopSpec)
    svm: SvmSpec = field(default_factory=SvmSpec)
    kl_projection_seed: int = 0
    output_dir: str = ""

    def validate(self) -> ExperimentConfig:
        if self.pn_ratio <= 0:
            raise ConfigError("pn_ratio must be > 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.resample_every < 1:
            raise ConfigError("resample_every must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.augment not in ("auto", "on", "off"):
            raise ConfigError("augment must be auto, on or off")
        try:
            StrategyKind(self.strategy)
            AggregationMode(self.model.aggregation)
            augment.MixupConfig(self.mixup.alpha, self.mixup.rate)
            augment.MaskConfig(self.mask.F, self.mask.T, self.mask.fill_value)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.early_stop.patience < 0:
            raise ConfigError("early_stop.patience must be >= 0")
        return self

    def to_flat(self) -> dict[str, Any]:
        return _flatten(self)

    @classmethod
    def from_flat(cls, values: dict[str, Any]) -> ExperimentConfig:
        cfg = cls()
        for key, raw in values.items():
            set_key(cfg, key, raw)
        return cfg.validate()

    def replace(self, **flat: Any) -> ExperimentConfig:
        cfg = ExperimentConfig.from_flat({**self.to_flat(), **flat})
        return cfg


def _flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            out.update(_flatten(value, key + "."))
        else:
            out[key] = value
    return out


def config_keys() -> dict[str, type]:
    """Every flat config key with the Python type of its default."""
    return {k: type(v) for k, v in ExperimentConfig().to_flat().items()}


def _coerce(kind: type, raw: Any) -> Any:
    if not isinstance(raw, str):
        return kind(raw)
    if kind is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return kind(raw.strip())


def set_key(cfg: ExperimentConfig, key: str, raw: Any) -> None:
    kinds = config_keys()
    if key not in kinds:
        raise ConfigError(f"unknown config key {key!r}")
    try:
        value = _coerce(kinds[key], raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    *parents, leaf = key.split(".")
    target: Any = cfg
    for p in parents:
        target = getattr(target, p)
    setattr(target, leaf, value)


def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    values: dict[str, Any] = {}
    if path:
        try:
            values.update(parse_config_text(Path(path).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update(overrides or {})
    return ExperimentConfig.from_flat(values)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{k} = {v}\n" for k, v in cfg.to_flat().items())


# --- data -------------------------------------------------------------------------

def _parse_shape(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in str(text).lower().replace(",", "x").split("x") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"bad dataset.shape {text!r}") from exc


def build_instances(spec: DatasetSpec) -> ingest.InstanceSet:
    if spec.source == "cifar10":
        if not spec.path:
            raise ConfigError("dataset.path is required for cifar10")
        inst = ingest.load_cifar10(spec.path, "train")
        if spec.subset_size:
            inst = ingest.seeded_subset(inst, spec.subset_size, spec.seed)
        return inst
    cfg = ingest.SyntheticConfig(
        num_classes=spec.num_classes,
        per_class_count=spec.per_class_count,
        shape=_parse_shape(spec.shape),
        class_mean_separation=spec.class_mean_separation,
        noise_std=spec.noise_std,
        seed=spec.seed,
    )
    if spec.source == "gaussian":
        return ingest.gen_gaussian_instances(cfg)
    if spec.source == "synth_spec":
        return ingest.gen_synthetic_spectrograms(cfg)
    raise ConfigError(f"unknown dataset.source {spec.source!r}")


def build_dataset(spec: DatasetSpec) -> BagDataset:
    """Bag dataset from a serialized container, or generated from the spec."""
    if spec.bags_file:
        ds = BagDataset.load(spec.bags_file)
        return ds.with_instances(ingest.load_from_spec(ds.source))
    return make_bags(build_instances(spec), spec.target_class, spec.bag_size, spec.seed,
                     eval_fraction=spec.eval_fraction)


# --- early stopping -----------------------------------------------------------

def early_stop_check(history: Sequence[float], patience: int, min_delta: float) -> bool:
    """True once the best AP has gone ``patience`` epochs without improving by more than ``min_delta``.

    ``patience=0`` stops at the first non-improving epoch.
    """
    if not history:
        return False
    best, stale = history[0], 0
    for value in history[1:]:
        if value > best + min_delta:
            best, stale = value, 0
        else:
            stale += 1
    return stale >= max(patience, 1)


# --- reports ------------------------------------------------------------------

TIMING_KEYS = ("wall_seconds",)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_ap: float
    eval_auc: float
    num_negatives: int
    selection_hash: str
    wall_seconds: float


@dataclass
class ExperimentReport:
    config: dict[str, Any]
    epochs: list[EpochRecord] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)
    stop_epoch: int = 0
    stopped_early: bool = False
    status: str = "ok"
    error: str = ""
    num_positive: int = 0
    pool_size: int = 0
    k: int = 0

    def to_dict(self, timing: bool = True) -> dict[str, Any]:
        d = dataclasses.asdict(self)
        if not timing:
            for rec in d["epochs"]:
                for key in TIMING_KEYS:
                    rec.pop(key, None)
            d["final"] = {k: v for k, v in d["final"].items() if k not in TIMING_KEYS}
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), sort_keys=True, indent=2)

    def fingerprint(self) -> str:
        """Hash of the report with wall-clock fields removed."""
        return hashlib.sha256(self.to_json(timing=False).encode()).hexdigest()

    @property
    def wall_seconds(self) -> float:
        return float(sum(r.wall_seconds for r in self.epochs))


def _selection_hash(ids: Sequence[int]) -> str:
    return hashlib.sha256(",".join(str(i) for i in sorted(ids)).encode()).hexdigest()[:16]


def evaluate_params(params: ModelParams, dataset: BagDataset, ids: Sequence[int], mode: AggregationMode | str) -> dict[str, float]:
    ids = np.asarray(sorted(ids), dtype=np.int64)
    out = predict_bags(params, dataset.bag_features(ids), mode)
    records = records_from_arrays(ids, out.bag_probs[:, 1], dataset.labels[ids])
    return {
        "ap": average_precision(records),
        "auc": roc_auc(records),
        "zero_one_error": zero_one_error(records),
    }


def _use_augmentation(cfg: ExperimentConfig, dataset: BagDataset) -> bool:
    if cfg.augment == "auto":
        return dataset.source.get("source") == "synth_spec"
    return cfg.augment == "on"


def negative_budget(num_positive: int, pn_ratio: float) -> int:
    return int(round(num_positive / pn_ratio))


def run_experiment(cfg: ExperimentConfig, dataset: BagDataset | None = None) -> ExperimentReport:
    return train_model(cfg, dataset)[0]


def train_model(cfg: ExperimentConfig, dataset: BagDataset | None = None) -> tuple[ExperimentReport, ModelParams]:
    """Train one model with per-epoch negative resampling and return its report.

    Each resampling event freezes a parameter snapshot, selects k negatives from
    the pool with the configured strategy, and trains on all positives plus the
    selection. With ``cfg.full_set`` the entire pool is used every epoch.
    """
    cfg.validate()
    dataset = dataset if dataset is not None else build_dataset(cfg.dataset)
    mode = AggregationMode(cfg.model.aggregation)
    strategy = StrategyKind(cfg.strategy)
    positives = np.array(sorted(dataset.positive_ids), dtype=np.int64)
    pool = np.array(sorted(dataset.negative_ids), dtype=np.int64)
    eval_ids = np.array(sorted(dataset.eval_ids), dtype=np.int64)
    if len(pool) == 0:
        raise ConfigError("negative pool is empty")
    if len(positives) == 0:
        raise ConfigError("no positive training bags")
    eval_labels = dataset.labels[eval_ids] if len(eval_ids) else np.array([])
    if len(set(eval_labels.tolist())) < 2:
        raise ConfigError("evaluation split needs both positive and negative bags")
    k = len(pool) if cfg.full_set else negative_budget(len(positives), cfg.pn_ratio)
    if not 1 <= k <= len(pool):
        raise ConfigError(
            f"negative budget k={k} (|S+|={len(positives)}, pn_ratio={cfg.pn_ratio}) exceeds pool of {len(pool)}"
        )
    use_aug = _use_augmentation(cfg, dataset)
    mixup_cfg = augment.MixupConfig(cfg.mixup.alpha, cfg.mixup.rate)
    mask_cfg = augment.MaskConfig(cfg.mask.F, cfg.mask.T, cfg.mask.fill_value)
    feature_shape = dataset.instances.feature_shape
    if use_aug:
        if len(feature_shape) != 2:
            raise ConfigError(f"augmentation needs (time, freq) features, got {feature_shape}")
        try:
            mask_cfg.check_shape(feature_shape)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    arch = None if cfg.model.arch == "auto" else cfg.model.arch
    params = init_params(feature_shape, arch, cfg.model.init_seed)
    opt = AdamState()
    settings = SamplerSettings(cfg.svm.reg_lambda, cfg.svm.epochs, cfg.kl_projection_seed)
    rng_sample = np.random.default_rng([cfg.seed, 1])
    rng_shuffle = np.random.default_rng([cfg.seed, 2])
    rng_aug = np.random.default_rng([cfg.seed, 3])

    report = ExperimentReport(config=cfg.to_flat(), num_positive=len(positives), pool_size=len(pool), k=k)
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "epochs.jsonl").write_text("")

    selected: list[int] = []
    history: list[float] = []
    targets = np.eye(2)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        if cfg.full_set:
            selected = pool.tolist()
        elif (epoch - 1) % cfg.resample_every == 0:
            snap = Snapshot.of(params, mode)
            selected = sample_negatives(pool, strategy, k, snap, dataset, rng_sample, settings)
        train_ids = np.concatenate([positives, np.asarray(selected, dtype=np.int64)])
        train_ids = train_ids[rng_shuffle.permutation(len(train_ids))]
        losses, sizes = [], []
        try:
            for start in range(0, len(train_ids), cfg.batch_size):
                ids = train_ids[start:start + cfg.batch_size]
                x = dataset.bag_features(ids)
                y = targets[dataset.labels[ids]]
                if use_aug:
                    x = np.stack([augment.mask_bag(b, mask_cfg, rng_aug) for b in x])
                    x, y, _ = augment.mixup_batch(x, y, mixup_cfg, rng_aug)
                losses.append(train_step(params, opt, x, y, cfg.lr, cfg.weight_decay, mode))
                sizes.append(len(ids))
        except TrainingDiverged as exc:
            report.status = "diverged"
            report.error = str(exc)
            report.stop_epoch = epoch - 1
            _write_report(out_dir, report)
            raise ExperimentAborted(f"epoch {epoch}: {exc}", report) from exc
        metrics = evaluate_params(params, dataset, eval_ids, mode)
        rec = EpochRecord(
            epoch=epoch,
            train_loss=float(np.average(losses, weights=sizes)),
            eval_ap=metrics["ap"],
            eval_auc=metrics["auc"],
            num_negatives=len(selected),
            selection_hash=_selection_hash(selected),
            wall_seconds=time.perf_counter() - t0,
        )
        report.epochs.append(rec)
        report.final = {**metrics, "train_loss": rec.train_loss}
        report.stop_epoch = epoch
        log.info("epoch %d loss %.4f ap %.4f auc %.4f", epoch, rec.train_loss, rec.eval_ap, rec.eval_auc)
        if out_dir:
            with open(out_dir / "epochs.jsonl", "a") as fh:
                fh.write(json.dumps(dataclasses.asdict(rec), sort_keys=True) + "\n")
        history.append(rec.eval_ap)
        if cfg.early_stop.enabled and early_stop_check(history, cfg.early_stop.patience, cfg.early_stop.min_delta):
            report.stopped_early = epoch < cfg.epochs
            break
    if out_dir:
        _write_report(out_dir, report)
        save_checkpoint(out_dir / "model.ckpt", params, mode, report.stop_epoch)
    return report, params


def _write_report(out_dir: Path | None, report: ExperimentReport) -> None:
    if out_dir:
        (out_dir / "report.json").write_text(report.to_json())


# --- strategy comparison ---------------------------------------------------------

TABLE_COLUMNS = ("strategy", "seed", "AP", "AUC", "stop_epoch", "wall_seconds")


@dataclass
class ComparisonTable:
    rows: list[dict[str, Any]]
    summary: list[dict[str, Any]]

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "table.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=[*TABLE_COLUMNS, "status"], extrasaction="ignore")
            w.writeheader()
            w.writerows(self.rows)
        cols = ["strategy", "runs", "failed", "mean_AP", "mean_AUC", "wins_vs_random", "losses_vs_random"]
        with open(out / "summary.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            w.writeheader()
            w.writerows(self.summary)

    def mean(self, strategy: str, metric: str = "AP") -> float:
        for s in self.summary:
            if s["strategy"] == strategy:
                return s[f"mean_{metric}"]
        raise KeyError(strategy)

    def format(self) -> str:
        lines = [f"{'strategy':<18}{'runs':>5}{'mean AP':>10}{'mean AUC':>10}{'wins/losses vs random':>24}"]
        for s in self.summary:
            wl = "" if s["wins_vs_random"] == "" else f"{s['wins_vs_random']}/{s['losses_vs_random']}"
            ap = "n/a" if s["mean_AP"] == "" else f"{s['mean_AP']:.4f}"
            auc = "n/a" if s["mean_AUC"] == "" else f"{s['mean_AUC']:.4f}"
            lines.append(f"{s['strategy']:<18}{s['runs']:>5}{ap:>10}{auc:>10}{wl:>24}")
        return "\n".join(lines)


def _cell(cfg: ExperimentConfig, name: str, seed: int, dataset: BagDataset, out_dir: Path | None) -> dict[str, Any]:
    row: dict[str, Any] = {"strategy": name, "seed": seed}
    if out_dir:
        cfg = cfg.replace(output_dir=str(out_dir / f"{name}_seed{seed}"))
    try:
        rep = run_experiment(cfg, dataset)
    except (ExperimentAborted, ValueError, ArithmeticError) as exc:
        log.warning("cell %s/%s failed: %s", name, seed, exc)
        return {**row, "AP": "", "AUC": "", "stop_epoch": "", "wall_seconds": "", "status": f"failed: {exc}"}
    return {
        **row,
        "AP": rep.final["ap"],
        "AUC": rep.final["auc"],
        "stop_epoch": rep.stop_epoch,
        "wall_seconds": round(rep.wall_seconds, 3),
        "status": "ok",
    }


def compare_strategies(
    base: ExperimentConfig,
    strategies: Sequence[str],
    seeds: Sequence[int],
    output_dir: str | Path | None = None,
    dataset: BagDataset | None = None,
) -> ComparisonTable:
    """Run every (strategy, seed) cell plus one full-pool baseline at the first seed.

    A seed sets both the training seed and the model init seed; the bag dataset
    is shared by every cell. Rows are grouped by strategy, ordered by mean AP
    (descending), with seeds ascending inside a group.
    """
    if not strategies or not seeds:
        raise ConfigError("need at least one strategy and one seed")
    strategies = [StrategyKind(s).value for s in strategies]
    dataset = dataset if dataset is not None else build_dataset(base.dataset)
    out = Path(output_dir) if output_dir else None
    rows = []
    for name in strategies:
        for seed in seeds:
            cfg = base.replace(strategy=name, full_set=False, seed=seed, **{"model.init_seed": seed})
            rows.append(_cell(cfg, name, seed, dataset, out))
    cfg = base.replace(full_set=True, seed=seeds[0], **{"model.init_seed": seeds[0]})
    rows.append(_cell(cfg, FULL_SET, seeds[0], dataset, out))

    random_ap = {r["seed"]: r["AP"] for r in rows if r["strategy"] == StrategyKind.RANDOM.value and r["status"] == "ok"}
    summary = []
    for name in [*strategies, FULL_SET]:
        cells = [r for r in rows if r["strategy"] == name]
        ok = [r for r in cells if r["status"] == "ok"]
        entry: dict[str, Any] = {
            "strategy": name,
            "runs": len(cells),
            "failed": len(cells) - len(ok),
            "mean_AP": float(np.mean([r["AP"] for r in ok])) if ok else "",
            "mean_AUC": float(np.mean([r["AUC"] for r in ok])) if ok else "",
            "wins_vs_random": "",
            "losses_vs_random": "",
        }
        if random_ap and name not in (StrategyKind.RANDOM.value, FULL_SET):
            paired = [(r["AP"], random_ap[r["seed"]]) for r in ok if r["seed"] in random_ap]
            entry["wins_vs_random"] = sum(a > b for a, b in paired)
            entry["losses_vs_random"] = sum(a < b for a, b in paired)
        summary.append(entry)
    summary.sort(key=lambda s: -s["mean_AP"] if s["mean_AP"] != "" else np.inf)
    order = {s["strategy"]: i for i, s in enumerate(summary)}
    rows.sort(key=lambda r: (order[r["strategy"]], r["seed"]))
    table = ComparisonTable(rows, summary)
    if out:
        table.write(out)
    return table
