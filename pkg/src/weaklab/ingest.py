"""Instance sources: CIFAR-10 binary batches and seeded synthetic generators."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np

from weaklab.bagcore import Instance

CIFAR_RECORD = 3073
CIFAR_SHAPE = (3, 32, 32)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)
CIFAR_MEAN = 0.5
CIFAR_STD = 0.5


class IngestError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceSet:
    """Instances stored column-wise; instance ``i`` has id ``i``.

    ``spec`` records how the set was produced so a serialized bag dataset can
    rebuild it.
    """

    features: np.ndarray
    classes: np.ndarray
    num_classes: int
    source: str
    spec: dict[str, Any] = field(default_factory=dict)
    split: np.ndarray | None = None  # 1 marks instances from a standard test split

    def __post_init__(self):
        if self.features.shape[0] != self.classes.shape[0]:
            raise IngestError("features and classes disagree on instance count")
        if not np.all(np.isfinite(self.features)):
            raise IngestError("features contain NaN or Inf")
        if self.classes.size and (self.classes.min() < 0 or self.classes.max() >= self.num_classes):
            raise IngestError(f"class ids must lie in [0, {self.num_classes})")

    @property
    def feature_shape(self) -> tuple[int, ...]:
        return tuple(self.features.shape[1:])

    @property
    def instances(self) -> list[Instance]:
        return list(self)

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Instance:
        return Instance(int(i), self.features[i], int(self.classes[i]))

    def __iter__(self) -> Iterator[Instance]:
        return (self[i] for i in range(len(self)))

    def subset(self, idx: np.ndarray) -> InstanceSet:
        idx = np.asarray(idx, dtype=np.int64)
        return InstanceSet(
            self.features[idx], self.classes[idx], self.num_classes, self.source,
            dict(self.spec), None if self.split is None else self.split[idx],
        )


@dataclass
class SyntheticConfig:
    num_classes: int = 2
    per_class_count: int = 100
    shape: tuple[int, ...] = (2,)
    class_mean_separation: float = 6.0
    noise_std: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.num_classes < 1:
            raise IngestError("num_classes must be >= 1")
        if self.per_class_count < 1:
            raise IngestError("per_class_count must be >= 1")
        if self.noise_std < 0:
            raise IngestError("noise_std must be >= 0")
        if self.class_mean_separation < 0:
            raise IngestError("class_mean_separation must be >= 0")


def _read_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % CIFAR_RECORD:
        raise IngestError(f"corrupt batch: {path.name} has {raw.size} bytes, not a multiple of {CIFAR_RECORD}")
    records = raw.reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise IngestError(f"class out of range: record {bad} of {path.name} has label {labels[bad]}")
    pixels = records[:, 1:].reshape(-1, *CIFAR_SHAPE)
    return pixels, labels


def load_cifar10(path: str | Path, split: str = "train", files: tuple[str, ...] | None = None) -> InstanceSet:
    """Read CIFAR-10 binary batches from ``path``.

    ``split`` is "train", "test" or "all" (train then test, with the test
    instances flagged in ``InstanceSet.split``). Pixels are scaled to [0, 1] and
    normalized with mean 0.5 / std 0.5 per channel.
    """
    root = Path(path)
    if files is None:
        files = {
            "train": CIFAR_TRAIN_FILES,
            "test": CIFAR_TEST_FILES,
            "all": CIFAR_TRAIN_FILES + CIFAR_TEST_FILES,
        }[split]
    missing = [f for f in files if not (root / f).is_file()]
    if missing:
        raise IngestError(f"missing CIFAR-10 files in {root}: {', '.join(missing)}")
    pixels, labels, flags = [], [], []
    for name in files:
        p, y = _read_cifar_file(root / name)
        pixels.append(p)
        labels.append(y)
        flags.append(np.full(len(y), int(name in CIFAR_TEST_FILES), dtype=np.int8))
    x = np.concatenate(pixels).astype(np.float64) / 255.0
    x = (x - CIFAR_MEAN) / CIFAR_STD
    return InstanceSet(
        features=x,
        classes=np.concatenate(labels),
        num_classes=10,
        source="cifar10",
        spec={"source": "cifar10", "path": str(root), "split": split, "files": list(files)},
        split=np.concatenate(flags),
    )


def seeded_subset(instances: InstanceSet, size: int, seed: int) -> InstanceSet:
    """Seeded subset of ``size`` instances, kept in original order."""
    if size > len(instances):
        raise IngestError(f"subset of {size} requested from {len(instances)} instances")
    idx = np.sort(np.random.default_rng(seed).choice(len(instances), size=size, replace=False))
    sub = instances.subset(idx)
    spec = dict(instances.spec, subset_size=size, subset_seed=seed)
    return InstanceSet(sub.features, sub.classes, sub.num_classes, sub.source, spec, sub.split)


def class_means(num_classes: int, dim: int, separation: float) -> np.ndarray:
    """Class centres with pairwise distance >= ``separation``.

    Scaled one-hot vertices when ``dim >= num_classes``, else points spaced
    ``separation`` apart along the first axis.
    """
    means = np.zeros((num_classes, dim))
    if dim >= num_classes:
        means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    else:
        means[:, 0] = separation * np.arange(num_classes)
    return means


def gen_gaussian_instances(cfg: SyntheticConfig) -> InstanceSet:
    if len(cfg.shape) != 1:
        raise IngestError(f"gaussian instances need a 1-D shape, got {cfg.shape}")
    dim = cfg.shape[0]
    rng = np.random.default_rng(cfg.seed)
    means = class_means(cfg.num_classes, dim, cfg.class_mean_separation)
    classes = np.repeat(np.arange(cfg.num_classes), cfg.per_class_count)
    x = means[classes] + cfg.noise_std * rng.standard_normal((classes.size, dim))
    return InstanceSet(x, classes, cfg.num_classes, "gaussian", spec=_spec("gaussian", cfg))


def spectrogram_band(cls: int, num_classes: int, bins: int) -> slice:
    width = max(1, bins // max(num_classes, 1))
    start = min(cls * width, bins - width)
    return slice(start, start + width)


def gen_synthetic_spectrograms(cfg: SyntheticConfig) -> InstanceSet:
    """Noise spectrograms (time x frequency) with a class-specific energized band.

    Each class owns a contiguous frequency band whose mean level is raised by
    ``class_mean_separation`` and modulated over time with a random phase.
    """
    if len(cfg.shape) != 2:
        raise IngestError(f"synthetic spectrograms need a 2-D (time, freq) shape, got {cfg.shape}")
    frames, bins = cfg.shape
    rng = np.random.default_rng(cfg.seed)
    classes = np.repeat(np.arange(cfg.num_classes), cfg.per_class_count)
    x = cfg.noise_std * rng.standard_normal((classes.size, frames, bins))
    t = np.arange(frames)
    phase = rng.uniform(0, 2 * np.pi, size=classes.size)
    period = rng.uniform(8, 32, size=classes.size)
    envelope = 1.0 + 0.5 * np.sin(2 * np.pi * t[None, :] / period[:, None] + phase[:, None])
    for c in range(cfg.num_classes):
        rows = classes == c
        band = spectrogram_band(c, cfg.num_classes, bins)
        x[rows, :, band] += cfg.class_mean_separation * envelope[rows][:, :, None]
    return InstanceSet(x, classes, cfg.num_classes, "synth_spec", spec=_spec("synth_spec", cfg))


def _spec(source: str, cfg: SyntheticConfig) -> dict[str, Any]:
    return {
        "source": source,
        "num_classes": cfg.num_classes,
        "per_class_count": cfg.per_class_count,
        "shape": list(cfg.shape),
        "class_mean_separation": cfg.class_mean_separation,
        "noise_std": cfg.noise_std,
        "seed": cfg.seed,
    }


def load_from_spec(spec: dict[str, Any]) -> InstanceSet:
    """Rebuild an instance set from the ``spec`` recorded at generation time."""
    source = spec.get("source")
    if source == "cifar10":
        inst = load_cifar10(spec["path"], spec.get("split", "train"), tuple(spec["files"]))
        if spec.get("subset_size"):
            inst = seeded_subset(inst, int(spec["subset_size"]), int(spec.get("subset_seed", 0)))
        return inst
    keys = ("num_classes", "per_class_count", "shape", "class_mean_separation", "noise_std", "seed")
    cfg = SyntheticConfig(**{k: spec[k] for k in keys})
    if source == "gaussian":
        return gen_gaussian_instances(cfg)
    if source == "synth_spec":
        return gen_synthetic_spectrograms(cfg)
    raise IngestError(f"unknown instance source {source!r}")
