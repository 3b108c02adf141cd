import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dilemma.rng import (
    ConfigError,
    SparsitySchedule,
    dense_plan,
    derive_stream,
    fnv1a64,
    importance_based_dropping,
    mix64,
    round_half_up,
    sample_corruption_plan,
    sample_sparsity,
    stream_seed,
)


class TestMixFunctions:
    def test_splitmix_reference_output(self):
        # first output of the reference SplitMix64 generator seeded with 0
        assert mix64(0) == 0xE220A8397B1DCDAF

    def test_fnv_reference_values(self):
        assert fnv1a64(b"") == 0xCBF29CE484222325
        assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
        assert fnv1a64(b"foobar") == 0x85944171F73967E8

    def test_stream_seed_composition(self):
        s = mix64(mix64(mix64(mix64(7) ^ fnv1a64(b"aug")) ^ 3) ^ 11)
        assert stream_seed(7, "aug", 3, 11) == s

    def test_negative_keys_wrap(self):
        assert stream_seed(0, "x", -1, 0) == stream_seed(0, "x", (1 << 64) - 1, 0)


class TestDeriveStream:
    def test_same_tuple_same_sequence(self):
        a = derive_stream(42, "corrupt", 1, 5)
        b = derive_stream(42, "corrupt", 1, 5)
        assert [a.next_u64() for _ in range(100)] == [b.next_u64() for _ in range(100)]

    def test_index_collision_scan(self):
        firsts = {derive_stream(9, "corrupt", 0, i).next_u64() for i in range(1000)}
        assert len(firsts) == 1000

    def test_purpose_separation(self):
        for e, i in [(0, 0), (1, 2), (5, 77)]:
            a = [derive_stream(3, "aug", e, i).next_u64() for _ in range(4)]
            b = [derive_stream(3, "corrupt", e, i).next_u64() for _ in range(4)]
            assert a != b

    def test_streams_share_no_state(self):
        a = derive_stream(1, "shuffle")
        before = derive_stream(1, "flip").next_u64()
        a.next_u64()
        assert derive_stream(1, "flip").next_u64() == before


class TestSchedule:
    def test_default_expected_multiplier(self):
        assert SparsitySchedule().expected_multiplier == pytest.approx(2.5)

    def test_single_entry_always_drawn(self):
        sched = SparsitySchedule(((0.65, 4),))
        draws = {sample_sparsity(sched, derive_stream(0, "schedule", 0, k)) for k in range(50)}
        assert draws == {(0.65, 4)}

    def test_uniform_frequencies(self):
        sched = SparsitySchedule()
        gen_stream = derive_stream(0, "schedule-freq")
        counts = np.zeros(4)
        lookup = {e: i for i, e in enumerate(sched.entries)}
        for _ in range(40000):
            counts[lookup[sample_sparsity(sched, gen_stream)]] += 1
        np.testing.assert_allclose(counts / 40000, 0.25, atol=0.01)

    def test_text_round_trip(self):
        sched = SparsitySchedule()
        assert sched.to_text() == "0:1,0.4:2,0.55:3,0.65:4"
        assert SparsitySchedule.from_text(sched.to_text()) == sched

    @pytest.mark.parametrize("entries", [(), ((1.0, 2),), ((0.5, 0),), ((-0.1, 1),)])
    def test_invalid_schedules(self, entries):
        with pytest.raises(ConfigError):
            SparsitySchedule(entries)

    def test_bad_text(self):
        with pytest.raises(ConfigError):
            SparsitySchedule.from_text("0.5-2")


class TestRounding:
    @pytest.mark.parametrize("x,expected", [(0.5, 1), (1.5, 2), (2.5, 3), (68.6, 69), (13.8, 14), (0.35 * 196, 69), (0.49, 0)])
    def test_half_up(self, x, expected):
        assert round_half_up(x) == expected


class TestCorruptionPlan:
    def test_paper_scale_counts(self):
        plan = sample_corruption_plan(196, 0.65, 0.2, derive_stream(0, "corrupt"))
        assert len(plan.kept) == 69
        assert len(plan.mismatched) == 14
        assert plan.labels.sum() == 14

    def test_dense_has_no_mismatch(self):
        for theta in (0.0, 0.2, 1.0):
            plan = sample_corruption_plan(196, 0.0, theta, derive_stream(1, "corrupt", 0, int(theta * 10)))
            np.testing.assert_array_equal(plan.kept, np.arange(196))
            assert len(plan.mismatched) == 0 and plan.is_dense
            np.testing.assert_array_equal(plan.pos_assignment, plan.kept)

    def test_small_grid_property_scan(self):
        for i in range(10_000):
            plan = sample_corruption_plan(16, 0.5, 0.25, derive_stream(5, "corrupt", 0, i))
            assert len(plan.kept) == 8 and len(plan.mismatched) == 2
            targets = plan.pos_assignment[plan.labels == 1]
            assert len(set(targets.tolist())) == 2
            assert not np.isin(targets, plan.kept).any()

    def test_validate_catches_inconsistency(self):
        plan = sample_corruption_plan(64, 0.55, 0.2, derive_stream(0, "corrupt"))
        plan.validate()
        plan.labels[0] = 1 - plan.labels[0]
        with pytest.raises(AssertionError):
            plan.validate()

    def test_keep_floor_of_one(self):
        plan = sample_corruption_plan(16, 0.99, 0.2, derive_stream(0, "corrupt"))
        assert len(plan.kept) == 1

    def test_bit_identical_for_same_key(self):
        a = sample_corruption_plan(64, 0.4, 0.2, derive_stream(8, "corrupt", 2, 9))
        b = sample_corruption_plan(64, 0.4, 0.2, derive_stream(8, "corrupt", 2, 9))
        np.testing.assert_array_equal(a.kept, b.kept)
        np.testing.assert_array_equal(a.pos_assignment, b.pos_assignment)

    def test_dense_plan_helper(self):
        plan = dense_plan(9)
        plan.validate()
        assert plan.is_dense and len(plan.dropped) == 0

    @pytest.mark.parametrize("s,theta", [(1.0, 0.2), (-0.1, 0.2), (0.5, 1.5)])
    def test_rejects_bad_arguments(self, s, theta):
        with pytest.raises(ValueError):
            sample_corruption_plan(16, s, theta, derive_stream(0, "corrupt"))

    def test_importance_dropping_unsupported(self):
        with pytest.raises(NotImplementedError):
            importance_based_dropping()

    @settings(max_examples=150, deadline=None)
    @given(
        n=st.integers(2, 200),
        s=st.sampled_from([0.0, 0.2, 0.4, 0.55, 0.65, 0.9]),
        theta=st.floats(0.0, 1.0),
        key=st.integers(0, 2**32),
    )
    def test_plan_invariants(self, n, s, theta, key):
        plan = sample_corruption_plan(n, s, theta, derive_stream(key, "corrupt"))
        plan.validate()
        m = len(plan.kept)
        assert m == max(1, round_half_up((1 - s) * n))
        assert np.all(np.diff(plan.kept) > 0)
        assert plan.labels.sum() == len(plan.mismatched)
        assert len(plan.mismatched) <= len(plan.dropped)
        targets = plan.pos_assignment[plan.labels == 1]
        assert len(np.unique(targets)) == len(targets)
        assert not np.isin(targets, plan.kept).any()
        keep = plan.labels == 0
        np.testing.assert_array_equal(plan.pos_assignment[keep], plan.kept[keep])
        if s == 0.0:
            assert len(plan.mismatched) == 0
