"""Sharded execution: assignment, buffer wire format, replica consistency."""

from __future__ import annotations

import numpy as np
import pytest

from minishampoo.dist import (
    AssignmentPlan,
    BufferOverflowError,
    DivergedReplicasError,
    GatherBuffer,
    InvalidGroupSizeError,
    SCALAR_BYTES,
    WorkerSim,
    buffer_size,
    build_workers,
    comm_meter,
    distributed_step,
    enumerate_blocks,
    greedy_assign,
)
from minishampoo.grafting import GraftKind
from minishampoo.optim import NonFiniteGradientError, Shampoo, ShampooConfig
from minishampoo.precond import LargeDimMethod


def rich_config(**overrides) -> ShampooConfig:
    base = dict(
        lr=0.05,
        lr_schedule="constant",
        betas=(0.9, 0.999),
        momentum=0.9,
        use_nesterov=True,
        weight_decay=1e-4,
        use_decoupled_weight_decay=True,
        grafting=GraftKind.ADAGRAD,
        precondition_frequency=1,
        start_preconditioning_step=0,
        max_preconditioner_dim=4,
    )
    base.update(overrides)
    return ShampooConfig(**base)


class TestGreedyAssign:
    def test_worked_example(self):
        plan = greedy_assign([6, 5, 4, 3, 2], world_size=2, group_size=2)
        assert plan.assignments[0] == frozenset({0, 3, 4})
        assert plan.assignments[1] == frozenset({1, 2})
        assert plan.counters == (11, 9)
        assert buffer_size(plan) == 2 * 11 * 8 == 176

    def test_single_block_goes_to_rank_zero(self):
        plan = greedy_assign([7], world_size=4, group_size=4)
        assert plan.assignments[0] == frozenset({0})
        for rank in range(1, 4):
            assert plan.assignments[rank] == frozenset()
        assert plan.counters == (7, 0, 0, 0)

    def test_equal_counts_one_each(self):
        plan = greedy_assign([4, 4, 4, 4], world_size=4, group_size=4)
        for rank in range(4):
            assert len(plan.assignments[rank]) == 1
        # balanced plan: buffer is exactly the total payload, no padding
        assert buffer_size(plan) == 16 * SCALAR_BYTES

    def test_replication_across_groups(self):
        plan = greedy_assign([6, 5, 4, 3, 2], world_size=4, group_size=2)
        assert plan.assignments[0] == plan.assignments[2]
        assert plan.assignments[1] == plan.assignments[3]
        assert plan.num_groups == 2

    def test_invalid_group_size(self):
        with pytest.raises(InvalidGroupSizeError):
            greedy_assign([3, 2], world_size=4, group_size=3)
        with pytest.raises(InvalidGroupSizeError):
            greedy_assign([3], world_size=0, group_size=1)

    def test_nonpositive_counts(self):
        with pytest.raises(ValueError):
            greedy_assign([3, 0], world_size=2, group_size=2)

    def test_partition_and_balance_bound(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n = int(rng.integers(1, 12))
            counts = [int(c) for c in rng.integers(1, 400, size=n)]
            group = int(rng.choice([1, 2, 4]))
            plan = greedy_assign(counts, world_size=group, group_size=group)
            union = set()
            for k in range(group):
                owned = plan.assignments[k]
                assert union.isdisjoint(owned)
                union |= owned
            assert union == set(range(n))
            assert max(plan.counters) <= sum(counts) / group + max(counts)

    def test_layout_regions_disjoint_and_contained(self):
        plan = greedy_assign([6, 5, 4, 3, 2], world_size=2, group_size=2)
        width = plan.max_payload_bytes
        seen: list[tuple[int, int]] = []
        for i, region in plan.buffer_layout.items():
            assert region.byte_length == plan.var_counts[i] * SCALAR_BYTES
            start, end = region.byte_offset, region.byte_offset + region.byte_length
            assert region.owner_rank * width <= start
            assert end <= (region.owner_rank + 1) * width
            for s, e in seen:
                assert end <= s or e <= start
            seen.append((start, end))

    def test_json_dump_shape(self):
        plan = greedy_assign([6, 5], world_size=2, group_size=2)
        d = plan.to_json_dict()
        assert d["world_size"] == 2 and d["buffer_bytes"] == buffer_size(plan)
        assert d["blocks"]["0"]["owner_rank"] == 0


class TestGatherBuffer:
    def test_round_trip_bitwise(self):
        plan = greedy_assign([6, 5, 4], world_size=2, group_size=2)
        buf = GatherBuffer(plan)
        rng = np.random.default_rng(1)
        payloads = {i: rng.standard_normal(c) for i, c in enumerate(plan.var_counts)}
        for i, values in payloads.items():
            buf.write_block(i, values)
        for i, values in payloads.items():
            assert np.array_equal(buf.read_block(i), values)

    def test_padding_stays_zero(self):
        plan = greedy_assign([6, 5], world_size=2, group_size=2)
        buf = GatherBuffer(plan)
        buf.write_block(0, np.ones(6))
        buf.write_block(1, np.ones(5))
        # rank 1 owns 5 of 6 slots: final 8 bytes of its region are padding
        region = buf.region_bytes(1)
        assert region[5 * 8 :] == bytes(8)

    def test_wrong_payload_size(self):
        plan = greedy_assign([6, 5], world_size=2, group_size=2)
        buf = GatherBuffer(plan)
        with pytest.raises(BufferOverflowError):
            buf.write_block(0, np.ones(7))

    def test_wrong_buffer_length(self):
        plan = greedy_assign([6, 5], world_size=2, group_size=2)
        with pytest.raises(BufferOverflowError):
            GatherBuffer(plan, data=b"\x00" * 17)


class TestDistributedStep:
    SHAPES = [(6, 4), (5,), (3, 3)]

    def make_inputs(self, seed=0, steps=10):
        rng = np.random.default_rng(seed)
        params = [rng.standard_normal(s) for s in self.SHAPES]
        grad_seqs = [
            [rng.standard_normal(s) for s in self.SHAPES] for _ in range(steps)
        ]
        return params, grad_seqs

    def test_single_worker_matches_plain_step(self):
        params, grad_seqs = self.make_inputs()
        cfg = rich_config()
        plain = Shampoo([p.copy() for p in params], cfg)
        _, workers = build_workers(params, cfg, world_size=1, group_size=1)
        for grads in grad_seqs:
            plain.step(grads)
            distributed_step(workers, grads)
        for a, b in zip(plain.params(), workers[0].params()):
            assert np.array_equal(a, b)

    def test_world_size_invariance(self):
        params, grad_seqs = self.make_inputs(seed=2)
        cfg = rich_config()
        trajectories = {}
        for world, group in [(1, 1), (2, 2), (4, 2), (4, 4)]:
            _, workers = build_workers(params, cfg, world, group)
            for grads in grad_seqs:
                result = distributed_step(workers, grads)
            trajectories[(world, group)] = [p.copy() for p in result]
        reference = trajectories[(1, 1)]
        for key, traj in trajectories.items():
            for a, b in zip(reference, traj):
                assert np.abs(a - b).max() <= 1e-12, key

    def test_replicas_bit_identical_each_step(self):
        params, grad_seqs = self.make_inputs(seed=3, steps=5)
        cfg = rich_config()
        _, workers = build_workers(params, cfg, world_size=4, group_size=2)
        for grads in grad_seqs:
            distributed_step(workers, grads)
            reference = workers[0].params()
            for w in workers[1:]:
                for a, b in zip(reference, w.params()):
                    assert np.array_equal(a, b)

    def test_owned_only_state(self):
        params, _ = self.make_inputs()
        cfg = rich_config()
        plan, workers = build_workers(params, cfg, world_size=2, group_size=2)
        for w in workers:
            owned_pairs = {
                (w.blocks[g].param_index, w.blocks[g].block_index)
                for g in w.owned_ids
            }
            for i, slot in enumerate(w.optimizer.slots):
                for b, block in enumerate(slot.blocks):
                    if (i, b) in owned_pairs:
                        assert block.kind != "unowned"
                    else:
                        assert block.kind == "unowned"
                        assert block.shampoo is None and block.graft is None

    def test_diverged_replicas_detected(self):
        params, grad_seqs = self.make_inputs(seed=4, steps=2)
        cfg = rich_config()
        _, workers = build_workers(params, cfg, world_size=2, group_size=1)
        distributed_step(workers, grad_seqs[0])
        workers[1].optimizer.slots[0].param[0, 0] += 1.0
        with pytest.raises(DivergedReplicasError):
            distributed_step(workers, grad_seqs[1])

    def test_non_finite_gradient_rejected(self):
        params, grad_seqs = self.make_inputs(steps=1)
        cfg = rich_config()
        _, workers = build_workers(params, cfg, world_size=2, group_size=2)
        bad = [g.copy() for g in grad_seqs[0]]
        bad[0][0, 0] = np.inf
        with pytest.raises(NonFiniteGradientError):
            distributed_step(workers, bad)


class TestCommMeter:
    def test_matrix_state_accounting(self):
        cfg = ShampooConfig(max_preconditioner_dim=8)
        blocks = enumerate_blocks([(8, 8)], cfg)
        plan = greedy_assign([b.var_count for b in blocks], 1, 1)
        report = comm_meter(plan, [b.shape for b in blocks])
        assert report.per_worker_state_scalars == (4 * 64,)
        assert report.per_worker_state_bytes == (4 * 64 * 8,)

    def test_split_matrix_halves_state(self):
        cfg = ShampooConfig(max_preconditioner_dim=8)
        blocks = enumerate_blocks([(16, 8)], cfg)  # two 8x8 blocks
        assert len(blocks) == 2
        plan = greedy_assign([b.var_count for b in blocks], 2, 2)
        report = comm_meter(plan, [b.shape for b in blocks])
        assert report.per_worker_state_scalars == (4 * 64, 4 * 64)

    def test_cube_state_accounting(self):
        b = 4
        cfg = ShampooConfig(max_preconditioner_dim=b)
        blocks = enumerate_blocks([(b, b, b)], cfg)
        plan = greedy_assign([blk.var_count for blk in blocks], 1, 1)
        report = comm_meter(plan, [blk.shape for blk in blocks])
        assert sum(report.per_worker_state_scalars) == 6 * b * b

    def test_gather_volume_scales_with_groups(self):
        plan_one = greedy_assign([6, 5, 4, 3], world_size=4, group_size=4)
        plan_two = greedy_assign([6, 5, 4, 3], world_size=4, group_size=2)
        shapes = [(6,), (5,), (4,), (3,)]
        one = comm_meter(plan_one, shapes, steps=3)
        two = comm_meter(plan_two, shapes, steps=3)
        assert one.world_bytes_per_step == buffer_size(plan_one)
        assert two.world_bytes_per_step == 2 * buffer_size(plan_two)
        assert one.total_bytes_gathered == 3 * one.world_bytes_per_step

    def test_diagonal_fallback_accounting(self):
        plan = greedy_assign([12], world_size=1, group_size=1)
        report = comm_meter(plan, [(3, 4)], method=LargeDimMethod.DIAGONAL)
        assert report.per_worker_state_scalars == (7,)
        report = comm_meter(plan, [(3, 4)], method=LargeDimMethod.ADAGRAD)
        assert report.per_worker_state_scalars == (12,)
