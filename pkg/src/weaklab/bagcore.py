"""Bags, weak labels and bag-dataset assembly.

A bag is a fixed-size group of instance ids carrying one binary weak label:
positive iff at least one member belongs to the target class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Sequence

import numpy as np

if TYPE_CHECKING:
    from weaklab.ingest import InstanceSet

BAGS_FORMAT = "weaklab.bags"
BAGS_VERSION = 1


class BagError(ValueError):
    """Raised for invalid bag construction requests."""


@dataclass(frozen=True)
class Instance:
    id: int
    features: np.ndarray
    true_class: int


@dataclass(frozen=True)
class Bag:
    id: int
    instance_ids: tuple[int, ...]
    weak_label: int
    positive_count: int

    def __post_init__(self):
        if self.weak_label not in (0, 1):
            raise BagError(f"weak_label must be 0 or 1, got {self.weak_label}")
        if (self.weak_label == 1) != (self.positive_count >= 1):
            raise BagError(
                f"bag {self.id}: weak_label {self.weak_label} inconsistent with "
                f"positive_count {self.positive_count}"
            )


@dataclass(frozen=True)
class BagDataset:
    """Training bags split into the positive set and the negative pool, plus eval bags.

    ``instances`` is a reference to the backing instance set; it is not part of
    the serialized container and must be re-attached after loading.
    """

    bags: tuple[Bag, ...]
    positive_ids: tuple[int, ...]
    negative_ids: tuple[int, ...]
    eval_ids: tuple[int, ...]
    target_class: int
    bag_size: int
    seed: int
    source: dict[str, Any] = field(default_factory=dict)
    instances: InstanceSet | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pos, neg, ev = set(self.positive_ids), set(self.negative_ids), set(self.eval_ids)
        if pos & neg or (pos | neg) & ev:
            raise BagError("positive, negative and eval id sets must be disjoint")
        if len(pos | neg | ev) != len(self.bags):
            raise BagError("id sets must cover every bag exactly once")
        for i, bag in enumerate(self.bags):
            if bag.id != i:
                raise BagError(f"bag ids must be contiguous, found {bag.id} at {i}")
            if len(bag.instance_ids) != self.bag_size:
                raise BagError(f"bag {bag.id} has size {len(bag.instance_ids)} != {self.bag_size}")
        for i in self.positive_ids:
            if self.bags[i].weak_label != 1:
                raise BagError(f"bag {i} listed as positive but labelled 0")
        for i in self.negative_ids:
            if self.bags[i].weak_label != 0:
                raise BagError(f"bag {i} listed as negative but labelled 1")

    @property
    def num_bags(self) -> int:
        return len(self.bags)

    @property
    def labels(self) -> np.ndarray:
        return np.array([b.weak_label for b in self.bags], dtype=np.int64)

    @property
    def members(self) -> np.ndarray:
        """(num_bags, bag_size) array of instance ids."""
        return np.array([b.instance_ids for b in self.bags], dtype=np.int64).reshape(
            len(self.bags), self.bag_size
        )

    def with_instances(self, instances: InstanceSet) -> BagDataset:
        max_id = max((max(b.instance_ids) for b in self.bags), default=-1)
        if max_id >= len(instances):
            raise BagError(f"instance id {max_id} not resolvable in a set of {len(instances)}")
        return BagDataset(
            self.bags, self.positive_ids, self.negative_ids, self.eval_ids,
            self.target_class, self.bag_size, self.seed, self.source, instances,
        )

    def bag_features(self, bag_ids: Sequence[int] | np.ndarray) -> np.ndarray:
        """Gather features for ``bag_ids`` as (len, bag_size, *feature_shape)."""
        if self.instances is None:
            raise BagError("dataset has no attached instances")
        idx = self.members[np.asarray(bag_ids, dtype=np.int64)]
        return self.instances.features[idx]

    def to_dict(self) -> dict[str, Any]:
        return {
            "format": BAGS_FORMAT,
            "version": BAGS_VERSION,
            "header": {
                "bag_size": self.bag_size,
                "target_class": self.target_class,
                "seed": self.seed,
                "counts": {
                    "bags": self.num_bags,
                    "positive": len(self.positive_ids),
                    "negative": len(self.negative_ids),
                    "eval": len(self.eval_ids),
                },
                "source": self.source,
            },
            "positive_ids": list(self.positive_ids),
            "negative_ids": list(self.negative_ids),
            "eval_ids": list(self.eval_ids),
            "bags": [
                [b.id, list(b.instance_ids), b.weak_label, b.positive_count] for b in self.bags
            ],
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> BagDataset:
        if data.get("format") != BAGS_FORMAT:
            raise BagError(f"not a bag dataset container: format={data.get('format')!r}")
        if data.get("version") != BAGS_VERSION:
            raise BagError(f"unsupported bag container version {data.get('version')}")
        head = data["header"]
        bags = tuple(Bag(int(i), tuple(ids), int(y), int(c)) for i, ids, y, c in data["bags"])
        ds = cls(
            bags=bags,
            positive_ids=tuple(data["positive_ids"]),
            negative_ids=tuple(data["negative_ids"]),
            eval_ids=tuple(data["eval_ids"]),
            target_class=int(head["target_class"]),
            bag_size=int(head["bag_size"]),
            seed=int(head["seed"]),
            source=dict(head.get("source", {})),
        )
        if head["counts"]["bags"] != ds.num_bags:
            raise BagError("header bag count does not match records")
        return ds

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")))

    @classmethod
    def load(cls, path: str | Path) -> BagDataset:
        return cls.from_dict(json.loads(Path(path).read_text()))


def weak_label(instance_classes: Sequence[int], target_class: int) -> int:
    """1 if any instance belongs to ``target_class``, else 0."""
    if len(instance_classes) == 0:
        raise BagError("empty bag")
    return int(any(int(c) == target_class for c in instance_classes))


def _assemble(
    classes: np.ndarray,
    ids: np.ndarray,
    target_class: int,
    bag_size: int,
    rng: np.random.Generator,
) -> list[tuple[list[int], int]]:
    """Partition ``ids`` into bags; returns (instance ids, positive_count) pairs.

    Positive bags draw their positive count uniformly from 1..bag_size, capped by
    the target instances left; the remaining non-target instances fill negative
    bags and a final remainder smaller than ``bag_size`` is dropped.
    """
    is_target = classes[ids] == target_class
    targets = list(rng.permutation(ids[is_target]))
    others = list(rng.permutation(ids[~is_target]))
    out = []
    while targets:
        count = int(rng.integers(1, bag_size + 1))
        count = max(count, bag_size - len(others))
        count = min(count, len(targets))
        if count + len(others) < bag_size:
            break
        members = targets[:count] + others[: bag_size - count]
        del targets[:count]
        del others[: bag_size - count]
        out.append(([int(i) for i in rng.permutation(members)], count))
    while len(others) >= bag_size:
        out.append(([int(i) for i in others[:bag_size]], 0))
        del others[:bag_size]
    return out


def make_bags(
    instances: InstanceSet,
    target_class: int,
    bag_size: int,
    seed: int,
    *,
    eval_instances: np.ndarray | None = None,
    eval_fraction: float = 0.2,
) -> BagDataset:
    """Build a one-vs-rest bag dataset with uniform positive-bag label density.

    Args:
        instances: the instance source; every instance lands in at most one bag.
        target_class: class whose presence makes a bag positive.
        bag_size: instances per bag.
        seed: controls shuffling, densities and the train/eval split.
        eval_instances: optional instance ids reserved for evaluation bags
            (e.g. a standard test split). When absent, a seeded split stratified
            by weak label holds out ``eval_fraction`` of the bags.
        eval_fraction: fraction of bags held out when ``eval_instances`` is None.
    """
    if bag_size <= 0:
        raise BagError(f"bag_size must be >= 1, got {bag_size}")
    n = len(instances)
    if n < bag_size:
        raise BagError(f"need at least {bag_size} instances, have {n} (short by {bag_size - n})")
    classes = instances.classes
    if not np.any(classes == target_class):
        raise BagError(
            f"no instances of target class {target_class}: short by 1 for a positive bag"
        )
    rng = np.random.default_rng(seed)
    all_ids = np.arange(n)

    if eval_instances is not None:
        eval_mask = np.zeros(n, dtype=bool)
        eval_mask[np.asarray(eval_instances, dtype=np.int64)] = True
        train_groups = _assemble(classes, all_ids[~eval_mask], target_class, bag_size, rng)
        eval_groups = _assemble(classes, all_ids[eval_mask], target_class, bag_size, rng)
        groups = train_groups + eval_groups
        eval_set = set(range(len(train_groups), len(groups)))
    else:
        groups = _assemble(classes, all_ids, target_class, bag_size, rng)
        eval_set = set()
        for label in (1, 0):
            ids = np.array([i for i, (_, c) in enumerate(groups) if (c > 0) == bool(label)])
            n_eval = int(round(eval_fraction * len(ids)))
            if n_eval:
                eval_set.update(int(i) for i in rng.choice(ids, size=n_eval, replace=False))

    bags = []
    for i, (members, count) in enumerate(groups):
        label = weak_label(classes[members], target_class)
        bags.append(Bag(i, tuple(members), label, count))
    positive = tuple(b.id for b in bags if b.id not in eval_set and b.weak_label == 1)
    negative = tuple(b.id for b in bags if b.id not in eval_set and b.weak_label == 0)
    return BagDataset(
        bags=tuple(bags),
        positive_ids=positive,
        negative_ids=negative,
        eval_ids=tuple(sorted(eval_set)),
        target_class=target_class,
        bag_size=bag_size,
        seed=seed,
        source=dict(getattr(instances, "spec", {}) or {}),
        instances=instances,
    )


def split_pools(dataset: BagDataset) -> tuple[frozenset[int], frozenset[int]]:
    """Return (positive set S+, negative pool N) as id sets."""
    return frozenset(dataset.positive_ids), frozenset(dataset.negative_ids)
