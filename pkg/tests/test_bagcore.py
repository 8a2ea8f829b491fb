import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import chisquare

from weaklab.bagcore import Bag, BagDataset, BagError, make_bags, split_pools, weak_label
from weaklab.ingest import InstanceSet, SyntheticConfig, gen_gaussian_instances


def _instances(classes, dim=2):
    classes = np.asarray(classes)
    feats = np.arange(classes.size * dim, dtype=float).reshape(classes.size, dim)
    return InstanceSet(feats, classes, int(classes.max()) + 1, "gaussian")


@pytest.mark.parametrize(
    "classes, expected",
    [([3, 0, 7, 7, 5], 1), ([1, 2, 3, 4, 5], 0), ([0, 0, 0, 0, 0], 1)],
)
def test_weak_label(classes, expected):
    assert weak_label(classes, 0) == expected


def test_weak_label_empty_bag():
    with pytest.raises(BagError, match="empty bag"):
        weak_label([], 0)


def test_sixty_thousand_instances_make_twelve_thousand_bags():
    classes = np.repeat(np.arange(10), 6000)
    ds = make_bags(_instances(classes, dim=1), target_class=0, bag_size=5, seed=0)
    assert ds.num_bags == 12000


def test_single_full_bag():
    ds = make_bags(_instances([0, 1, 2, 3, 4]), target_class=0, bag_size=5, seed=0, eval_fraction=0.0)
    assert ds.num_bags == 1
    assert ds.bags[0].weak_label == 1
    assert ds.bags[0].positive_count == 1


def test_positive_count_histogram_is_uniform():
    classes = np.repeat(np.arange(10), 1000)
    ds = make_bags(_instances(classes, dim=1), target_class=0, bag_size=5, seed=11)
    positives = [b for b in ds.bags if b.weak_label == 1]
    # every target instance lands in a positive bag; only the last positive bag can be capped
    assert sum(b.positive_count for b in positives) == 1000
    counts = np.bincount([b.positive_count for b in positives[:-1]], minlength=6)[1:]
    expected = np.full(5, counts.sum() / 5)
    assert chisquare(counts, expected).pvalue > 0.01


def test_negative_bags_have_no_target_instances():
    inst = gen_gaussian_instances(SyntheticConfig(num_classes=4, per_class_count=50, shape=(3,), seed=1))
    ds = make_bags(inst, target_class=2, bag_size=4, seed=1)
    for b in ds.bags:
        n_target = int(np.sum(inst.classes[list(b.instance_ids)] == 2))
        assert n_target == b.positive_count
        assert b.weak_label == weak_label(inst.classes[list(b.instance_ids)], 2)


def test_remainder_discarded():
    ds = make_bags(_instances([0, 1, 1, 1, 1, 1, 1]), target_class=0, bag_size=3, seed=0, eval_fraction=0.0)
    assert ds.num_bags == 2
    assert all(len(b.instance_ids) == 3 for b in ds.bags)


@pytest.mark.parametrize("bag_size", [0, -2])
def test_bad_bag_size(bag_size):
    with pytest.raises(BagError):
        make_bags(_instances([0, 1, 2]), 0, bag_size, 0)


def test_insufficient_instances_names_shortfall():
    with pytest.raises(BagError, match="short by 2"):
        make_bags(_instances([0, 1, 2]), 0, 5, 0)
    with pytest.raises(BagError, match="target class 9"):
        make_bags(_instances([0, 1, 2, 3, 4, 5]), 9, 2, 0)


def test_eval_split_from_reserved_instances():
    classes = np.tile(np.arange(5), 40)
    eval_idx = np.arange(150, 200)
    ds = make_bags(_instances(classes), 0, 5, 0, eval_instances=eval_idx)
    for i in ds.eval_ids:
        assert set(ds.bags[i].instance_ids) <= set(eval_idx.tolist())
    for i in ds.positive_ids + ds.negative_ids:
        assert not set(ds.bags[i].instance_ids) & set(eval_idx.tolist())


def test_split_pools():
    bags = tuple(Bag(i, (2 * i, 2 * i + 1), y, y) for i, y in enumerate([1, 0, 0, 1]))
    ds = BagDataset(bags, (0, 3), (1, 2), (), target_class=0, bag_size=2, seed=0)
    assert split_pools(ds) == ({0, 3}, {1, 2})

    all_pos = BagDataset(bags[:1], (0,), (), (), 0, 2, 0)
    assert split_pools(all_pos) == ({0}, frozenset())


def test_split_pools_cover_training_bags():
    classes = np.repeat(np.arange(10), 6000)
    ds = make_bags(_instances(classes, dim=1), 0, 5, 0, eval_fraction=0.0)
    pos, neg = split_pools(ds)
    assert len(pos) + len(neg) == 12000


def test_dataset_rejects_overlapping_sets():
    bags = (Bag(0, (0,), 1, 1), Bag(1, (1,), 0, 0))
    with pytest.raises(BagError):
        BagDataset(bags, (0, 1), (1,), (), 0, 1, 0)


def test_bag_label_consistency_enforced():
    with pytest.raises(BagError):
        Bag(0, (1, 2), 1, 0)


def test_serialization_round_trip(tmp_path, small_gaussian_bags):
    path = tmp_path / "bags.json"
    small_gaussian_bags.save(path)
    loaded = BagDataset.load(path)
    assert loaded == small_gaussian_bags
    assert loaded.source["source"] == "gaussian"


@settings(max_examples=30, deadline=None)
@given(
    n_classes=st.integers(2, 5),
    per_class=st.integers(3, 30),
    bag_size=st.integers(1, 6),
    seed=st.integers(0, 2**32 - 1),
)
def test_generated_dataset_invariants(n_classes, per_class, bag_size, seed):
    inst = gen_gaussian_instances(SyntheticConfig(num_classes=n_classes, per_class_count=per_class, shape=(2,), seed=1))
    if len(inst) < bag_size:
        return
    ds = make_bags(inst, 0, bag_size, seed)
    members = [i for b in ds.bags for i in b.instance_ids]
    assert len(members) == len(set(members))
    for b in ds.bags:
        assert b.weak_label == weak_label(inst.classes[list(b.instance_ids)], 0)
        assert len(b.instance_ids) == bag_size
    assert make_bags(inst, 0, bag_size, seed) == ds
