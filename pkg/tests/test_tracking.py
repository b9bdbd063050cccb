import numpy as np
import pytest

from gsedit.errors import IndexOutOfRange
from gsedit.scene import GaussianCloud
from gsedit.selector import EditMask
from gsedit.tracking import (
    TrackedCloud,
    clone_op,
    load_op_log,
    prune_op,
    replay,
    save_op_log,
    split_op,
)

from conftest import make_cloud


class ReferenceSimulator:
    """Independent list-based (id, label) bookkeeping used as the oracle."""

    def __init__(self, ids, labels, next_id):
        self.items = [(int(i), int(l)) for i, l in zip(ids, labels)]
        self.next_id = int(next_id)

    def clone(self, idx):
        _, label = self.items[idx]
        self.items.append((self.next_id, label))
        self.next_id += 1

    def split(self, idx):
        _, label = self.items[idx]
        self.items.append((self.next_id, label))
        self.items.append((self.next_id + 1, label))
        self.next_id += 2
        del self.items[idx]

    def prune(self, idx):
        del self.items[idx]

    def multiset(self):
        return sorted(self.items)


def tracked(labels, rng=None):
    rng = rng or np.random.default_rng(0)
    cloud = make_cloud([
        (rng.normal(size=3), rng.uniform(-1.5, -0.5, 3),
         rng.normal(size=4) + [2, 0, 0, 0], rng.normal(), rng.normal(size=3))
        for _ in labels
    ])
    mask = EditMask.from_labels(cloud.ids(), np.array(labels))
    return TrackedCloud(cloud=cloud, mask=mask)


def multiset(tc):
    return sorted(zip((int(i) for i in tc.cloud.ids()),
                      (int(l) for l in tc.mask.labels)))


class TestCloneOp:
    def test_clone_of_mask1_gives_two_ones(self):
        tc = tracked([1])
        clone_op(tc, 0)
        assert list(tc.mask.labels) == [1, 1]
        assert len(tc.cloud) == 2

    def test_clone_of_mask0_gives_two_zeros(self):
        tc = tracked([0])
        clone_op(tc, 0)
        assert list(tc.mask.labels) == [0, 0]

    def test_clone_preserves_other_entries_bitwise(self):
        tc = tracked([1, 0, 1])
        before = [g.copy() for g in tc.cloud.primitives]
        labels_before = tc.mask.labels.copy()
        clone_op(tc, 1)
        for i, g in enumerate(before):
            np.testing.assert_array_equal(tc.cloud.primitives[i].position, g.position)
            assert tc.cloud.primitives[i].id == g.id
        np.testing.assert_array_equal(tc.mask.labels[:3], labels_before)

    def test_clone_nudges_position(self):
        tc = tracked([1])
        parent_pos = tc.cloud.primitives[0].position.copy()
        clone_op(tc, 0)
        child = tc.cloud.primitives[1]
        delta = np.linalg.norm(child.position - parent_pos)
        assert delta == pytest.approx(1e-4, rel=1e-9)

    def test_out_of_range(self):
        tc = tracked([1])
        with pytest.raises(IndexOutOfRange):
            clone_op(tc, 5)


class TestSplitOp:
    def test_split_of_mask1_parent(self):
        tc = tracked([1, 0])
        parent_id = tc.cloud.primitives[0].id
        split_op(tc, 0, rng=np.random.default_rng(7))
        assert len(tc.cloud) == 3
        assert parent_id not in tc.cloud.ids()
        # surviving mask-0 plus two mask-1 children
        assert sorted(tc.mask.labels) == [0, 1, 1]

    def test_split_only_gaussian(self):
        tc = tracked([1])
        split_op(tc, 0, rng=np.random.default_rng(3))
        assert len(tc.cloud) == 2
        assert list(tc.mask.labels) == [1, 1]

    def test_split_shrinks_children(self):
        tc = tracked([1])
        parent_ls = tc.cloud.primitives[0].log_scale.copy()
        split_op(tc, 0, rng=np.random.default_rng(3))
        for child in tc.cloud.primitives:
            np.testing.assert_allclose(child.log_scale, parent_ls - np.log(1.6))


class TestPruneOp:
    def test_prune_all_descending(self):
        tc = tracked([1, 0, 1, 0])
        for idx in range(3, -1, -1):
            prune_op(tc, idx)
        assert len(tc.cloud) == 0 and len(tc.mask) == 0

    def test_prune_then_clone_keeps_alignment(self):
        tc = tracked([1, 0, 1])
        prune_op(tc, 1)
        clone_op(tc, 0)
        assert len(tc.mask) == len(tc.cloud) == 3

    def test_prune_mask0_preserves_mask1_count(self):
        tc = tracked([1, 0, 1])
        ones_before = int(tc.mask.labels.sum())
        prune_op(tc, 1)
        assert int(tc.mask.labels.sum()) == ones_before


def random_walk(tc, sim, rng, length):
    """Apply a shared random op sequence to both implementations."""
    for _ in range(length):
        n = len(tc)
        assert n == len(sim.items)
        if n == 0:
            break
        op = rng.integers(0, 3)
        idx = int(rng.integers(0, n))
        if op == 0:
            clone_op(tc, idx)
            sim.clone(idx)
        elif op == 1:
            split_op(tc, idx, rng=rng)
            sim.split(idx)
        else:
            prune_op(tc, idx)
            sim.prune(idx)
        assert len(tc.mask) == len(tc.cloud)


class TestRandomSequences:
    @pytest.mark.parametrize("seed", range(8))
    def test_matches_reference_simulator(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=rng.integers(1, 6)).tolist()
        tc = tracked(labels, rng)
        sim = ReferenceSimulator(tc.cloud.ids(), tc.mask.labels, tc.cloud.next_id)
        random_walk(tc, sim, rng, 60)
        assert multiset(tc) == sim.multiset()

    def test_mask0_count_changes_only_by_mask0_prune(self):
        rng = np.random.default_rng(42)
        tc = tracked([0, 1, 0, 1, 1], rng)
        zeros = int((tc.mask.labels == 0).sum())
        for _ in range(40):
            n = len(tc)
            op = rng.integers(0, 2)  # only clone/split mask-1 entries
            ones_idx = np.nonzero(tc.mask.labels == 1)[0]
            idx = int(rng.choice(ones_idx))
            if op == 0:
                clone_op(tc, idx)
            else:
                split_op(tc, idx, rng=rng)
            assert int((tc.mask.labels == 0).sum()) == zeros


class TestReplay:
    def test_replay_reproduces_bitwise(self):
        rng = np.random.default_rng(5)
        tc = tracked([1, 0, 1], rng)
        checkpoint = tc.snapshot()
        sim = ReferenceSimulator(tc.cloud.ids(), tc.mask.labels, tc.cloud.next_id)
        random_walk(tc, sim, rng, 50)
        again = replay(checkpoint, tc.op_log)
        assert len(again) == len(tc)
        for a, b in zip(again.cloud.primitives, tc.cloud.primitives):
            assert a.id == b.id
            np.testing.assert_array_equal(a.position, b.position)
            np.testing.assert_array_equal(a.log_scale, b.log_scale)
            np.testing.assert_array_equal(a.rotation, b.rotation)
            assert a.opacity_logit == b.opacity_logit
        np.testing.assert_array_equal(again.mask.labels, tc.mask.labels)
        assert again.cloud.next_id == tc.cloud.next_id
        assert again.cloud.generation == tc.cloud.generation

    def test_op_log_jsonl_round_trip(self, tmp_path):
        rng = np.random.default_rng(9)
        tc = tracked([1, 1, 0], rng)
        checkpoint = tc.snapshot()
        sim = ReferenceSimulator(tc.cloud.ids(), tc.mask.labels, tc.cloud.next_id)
        random_walk(tc, sim, rng, 30)
        path = tmp_path / "ops.jsonl"
        save_op_log(path, tc.op_log)
        ops = load_op_log(path)
        again = replay(checkpoint, ops)
        np.testing.assert_array_equal(again.cloud.ids(), tc.cloud.ids())
        for a, b in zip(again.cloud.primitives, tc.cloud.primitives):
            np.testing.assert_array_equal(a.position, b.position)
