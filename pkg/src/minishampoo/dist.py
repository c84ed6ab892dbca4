"""Simulated sharded data-parallel execution.

Preconditioner blocks are assigned greedily to the workers of a process
group; every group holds the same assignment, so groups are exact replicas.
Each step, a worker computes search directions only for the blocks it owns,
serializes them into its slot of a shared byte buffer, and the gather
concatenates the per-rank regions in rank order.  Every worker then decodes
all directions and applies the same parameter update, which keeps replicas
bit-identical without any cross-worker reduction of state.

Communication is an in-process exchange: the gather is an ordered
concatenation of region bytes, faithful to the collective's semantics with
no transport underneath.  Workers between gathers touch disjoint state, so
they could run on separate threads; the rank-ordered concatenation makes the
result schedule-independent either way.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from minishampoo.optim import NonFiniteGradientError, Shampoo, ShampooConfig
from minishampoo.precond import LargeDimMethod, plan_parameter, state_scalar_count

__all__ = [
    "InvalidGroupSizeError",
    "BufferOverflowError",
    "DivergedReplicasError",
    "BlockRegion",
    "GlobalBlock",
    "AssignmentPlan",
    "GatherBuffer",
    "WorkerSim",
    "CommReport",
    "greedy_assign",
    "buffer_size",
    "enumerate_blocks",
    "build_workers",
    "distributed_step",
    "comm_meter",
    "REPLICA_TOLERANCE",
    "SCALAR_BYTES",
]

# one little-endian float64 per direction scalar
SCALAR_BYTES = 8
SCALAR_DTYPE = np.dtype("<f8")

# replicas drifting past this after a step signals a determinism bug
REPLICA_TOLERANCE = 1e-12


class InvalidGroupSizeError(ValueError):
    """Group size does not evenly divide the world size."""


class BufferOverflowError(RuntimeError):
    """A serialized payload violated the buffer layout (programming error)."""


class DivergedReplicasError(RuntimeError):
    """Worker parameter copies disagree after a step."""


@dataclass(frozen=True)
class BlockRegion:
    """Where one block's direction lives inside the gather buffer."""

    owner_rank: int  # group rank, 0 <= owner_rank < group_size
    byte_offset: int  # absolute offset into the flat buffer
    byte_length: int


@dataclass(frozen=True)
class GlobalBlock:
    """One preconditioner block in the flat cross-parameter ordering."""

    block_id: int
    param_index: int
    block_index: int
    var_count: int
    shape: tuple[int, ...]


@dataclass(frozen=True)
class AssignmentPlan:
    """Replicated block-to-rank assignment plus the buffer layout.

    assignments has one entry per global rank; ranks sharing a group rank
    hold identical sets, so the plan is the same in every group.
    """

    world_size: int
    group_size: int
    assignments: tuple[frozenset[int], ...]
    counters: tuple[int, ...]
    buffer_layout: dict[int, BlockRegion]
    var_counts: tuple[int, ...]

    @property
    def num_groups(self) -> int:
        return self.world_size // self.group_size

    @property
    def max_payload_bytes(self) -> int:
        return max(self.counters) * SCALAR_BYTES

    def owned_by_group_rank(self, k: int) -> frozenset[int]:
        return self.assignments[k]

    def to_json_dict(self) -> dict:
        return {
            "world_size": self.world_size,
            "group_size": self.group_size,
            "num_groups": self.num_groups,
            "counters": list(self.counters),
            "buffer_bytes": buffer_size(self),
            "assignments": [sorted(a) for a in self.assignments],
            "blocks": {
                str(i): {
                    "owner_rank": r.owner_rank,
                    "byte_offset": r.byte_offset,
                    "byte_length": r.byte_length,
                }
                for i, r in sorted(self.buffer_layout.items())
            },
        }


def greedy_assign(
    block_var_counts: Sequence[int], world_size: int, group_size: int
) -> AssignmentPlan:
    """Balance blocks over the ranks of one group, replicated to all groups.

    Blocks are taken in descending variable count (stable, ties by original
    index) and each goes to the group rank with the smallest running counter,
    ties to the lowest rank.
    """
    if world_size < 1 or group_size < 1 or world_size % group_size != 0:
        raise InvalidGroupSizeError(
            f"group size {group_size} must divide world size {world_size}"
        )
    counts = [int(c) for c in block_var_counts]
    if any(c <= 0 for c in counts):
        raise ValueError("block variable counts must be positive")

    counters = [0] * group_size
    owned: list[set[int]] = [set() for _ in range(group_size)]
    for i in sorted(range(len(counts)), key=lambda i: (-counts[i], i)):
        k = min(range(group_size), key=lambda k: (counters[k], k))
        owned[k].add(i)
        counters[k] += counts[i]

    max_payload = max(counters) * SCALAR_BYTES if counts else 0
    layout: dict[int, BlockRegion] = {}
    for k in range(group_size):
        at = k * max_payload
        for i in sorted(owned[k]):
            length = counts[i] * SCALAR_BYTES
            layout[i] = BlockRegion(k, at, length)
            at += length

    assignments = tuple(
        frozenset(owned[rank % group_size]) for rank in range(world_size)
    )
    return AssignmentPlan(
        world_size=world_size,
        group_size=group_size,
        assignments=assignments,
        counters=tuple(counters),
        buffer_layout=layout,
        var_counts=tuple(counts),
    )


def buffer_size(plan: AssignmentPlan) -> int:
    """Flat gather buffer length: group size times the widest rank payload."""
    if not plan.var_counts:
        return 0
    return plan.group_size * plan.max_payload_bytes


class GatherBuffer:
    """Flat byte buffer with per-rank regions padded to the maximum payload."""

    def __init__(self, plan: AssignmentPlan, data: bytes | None = None):
        self.plan = plan
        size = buffer_size(plan)
        if data is None:
            self._data = bytearray(size)  # padding stays zeroed
        else:
            if len(data) != size:
                raise BufferOverflowError(
                    f"buffer is {len(data)} bytes, layout needs {size}"
                )
            self._data = bytearray(data)

    @property
    def data(self) -> bytes:
        return bytes(self._data)

    def region_bytes(self, group_rank: int) -> bytes:
        width = self.plan.max_payload_bytes
        return bytes(self._data[group_rank * width : (group_rank + 1) * width])

    def write_block(self, block_id: int, values: np.ndarray) -> None:
        region = self.plan.buffer_layout[block_id]
        payload = np.ascontiguousarray(values, dtype=SCALAR_DTYPE).tobytes()
        if len(payload) != region.byte_length:
            raise BufferOverflowError(
                f"block {block_id}: payload {len(payload)} bytes, "
                f"region holds {region.byte_length}"
            )
        end = region.byte_offset + region.byte_length
        rank_end = (region.owner_rank + 1) * self.plan.max_payload_bytes
        if end > rank_end or end > len(self._data):
            raise BufferOverflowError(
                f"block {block_id}: region [{region.byte_offset}, {end}) "
                f"escapes rank {region.owner_rank}'s slot"
            )
        self._data[region.byte_offset : end] = payload

    def read_block(self, block_id: int) -> np.ndarray:
        region = self.plan.buffer_layout[block_id]
        end = region.byte_offset + region.byte_length
        return np.frombuffer(self._data[region.byte_offset : end], SCALAR_DTYPE).copy()


def enumerate_blocks(
    param_shapes: Sequence[tuple[int, ...]], config: ShampooConfig
) -> tuple[GlobalBlock, ...]:
    """Flat, deterministic ordering of every block of every parameter."""
    blocks: list[GlobalBlock] = []
    for i, shape in enumerate(param_shapes):
        plan = plan_parameter(shape, config.max_preconditioner_dim, config.large_dim_method)
        for b, spec in enumerate(plan.blocks):
            blocks.append(
                GlobalBlock(len(blocks), i, b, spec.var_count, spec.shape)
            )
    return tuple(blocks)


@dataclass
class WorkerSim:
    """One simulated worker: a rank, its owned blocks, and local-only state."""

    rank: int
    group_index: int
    group_rank: int
    owned_ids: frozenset[int]
    optimizer: Shampoo
    blocks: tuple[GlobalBlock, ...]
    plan: AssignmentPlan

    def compute_directions(self, grads: Sequence[np.ndarray]) -> dict[int, np.ndarray]:
        """Search directions for owned blocks only, advancing owned state."""
        t = self.optimizer.step_count
        merged = [
            np.asarray(g, dtype=np.float64).reshape(slot.plan.merged_shape)
            for g, slot in zip(grads, self.optimizer.slots)
        ]
        directions: dict[int, np.ndarray] = {}
        for gid in sorted(self.owned_ids):
            block = self.blocks[gid]
            spec = self.optimizer.slots[block.param_index].plan.blocks[block.block_index]
            g_block = merged[block.param_index][spec.slices]
            directions[gid] = self.optimizer.block_direction(
                block.param_index, block.block_index, g_block, t
            )
        return directions

    def fill_region(self, directions: dict[int, np.ndarray]) -> bytes:
        """Serialize owned directions into this rank's buffer region."""
        scratch = GatherBuffer(self.plan)
        for gid, direction in directions.items():
            scratch.write_block(gid, direction)
        return scratch.region_bytes(self.group_rank)

    def apply_gathered(self, gathered: GatherBuffer) -> None:
        """Decode every block's direction and update all parameters."""
        t = self.optimizer.step_count
        by_pair = {}
        for block in self.blocks:
            flat = gathered.read_block(block.block_id)
            by_pair[(block.param_index, block.block_index)] = flat.reshape(block.shape)
        self.optimizer.apply_directions(by_pair, t)
        self.optimizer.advance_step()

    def params(self) -> list[np.ndarray]:
        return self.optimizer.params()


def build_workers(
    params: Sequence[np.ndarray],
    config: ShampooConfig,
    world_size: int,
    group_size: int,
) -> tuple[AssignmentPlan, list[WorkerSim]]:
    """Plan the assignment and construct one worker per rank.

    Every worker receives its own copy of the parameters and holds optimizer
    state only for its owned blocks.
    """
    blocks = enumerate_blocks([tuple(np.shape(p)) for p in params], config)
    plan = greedy_assign([b.var_count for b in blocks], world_size, group_size)
    workers = []
    for rank in range(world_size):
        owned_ids = plan.assignments[rank]
        owned_pairs = {
            (blocks[gid].param_index, blocks[gid].block_index) for gid in owned_ids
        }
        optimizer = Shampoo(
            [np.array(p, dtype=np.float64) for p in params], config, owned=owned_pairs
        )
        workers.append(
            WorkerSim(
                rank=rank,
                group_index=rank // group_size,
                group_rank=rank % group_size,
                owned_ids=owned_ids,
                optimizer=optimizer,
                blocks=blocks,
                plan=plan,
            )
        )
    return plan, workers


def distributed_step(
    workers: Sequence[WorkerSim], grads: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """One sharded step: compute owned directions, gather, apply everywhere.

    Returns the (identical) updated parameters of rank 0.  Raises
    DivergedReplicasError if any worker's copy drifts past REPLICA_TOLERANCE,
    which would mean the step stopped being a pure work partition.
    """
    if not workers:
        raise ValueError("no workers")
    plan = workers[0].plan
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(
                "gradient contains non-finite entries; step aborted"
            )

    by_group: dict[int, list[WorkerSim]] = {}
    for w in workers:
        by_group.setdefault(w.group_index, []).append(w)

    for group in by_group.values():
        group.sort(key=lambda w: w.group_rank)
        regions = [w.fill_region(w.compute_directions(grads)) for w in group]
        gathered = GatherBuffer(plan, data=b"".join(regions))
        for w in group:
            w.apply_gathered(gathered)

    reference = workers[0].params()
    for w in workers[1:]:
        for p_ref, p in zip(reference, w.params()):
            drift = float(np.abs(p_ref - p).max()) if p_ref.size else 0.0
            if drift > REPLICA_TOLERANCE:
                raise DivergedReplicasError(
                    f"rank {w.rank} drifted {drift:.3e} from rank 0"
                )
    return reference


@dataclass(frozen=True)
class CommReport:
    """Deterministic communication and memory accounting for a plan."""

    steps: int
    bytes_gathered_per_step: int  # one group's buffer, per step
    world_bytes_per_step: int  # all replica groups together
    total_bytes_gathered: int
    per_worker_state_scalars: tuple[int, ...]
    per_worker_state_bytes: tuple[int, ...]

    def to_json_dict(self) -> dict:
        return {
            "steps": self.steps,
            "bytes_gathered_per_step": self.bytes_gathered_per_step,
            "world_bytes_per_step": self.world_bytes_per_step,
            "total_bytes_gathered": self.total_bytes_gathered,
            "per_worker_state_scalars": list(self.per_worker_state_scalars),
            "per_worker_state_bytes": list(self.per_worker_state_bytes),
        }


def comm_meter(
    plan: AssignmentPlan,
    block_shapes: Sequence[tuple[int, ...]],
    method: LargeDimMethod = LargeDimMethod.BLOCKING,
    steps: int = 1,
) -> CommReport:
    """Gathered bytes per step and per-worker peak state footprint.

    State scalars follow the factor-accounting formulas for the given
    large-dimension method, summed over each rank's owned blocks; ranks in
    different groups replicate, so entries repeat with period group_size.
    """
    if len(block_shapes) != len(plan.var_counts):
        raise ValueError("one shape per planned block required")
    per_group = buffer_size(plan)
    world = per_group * plan.num_groups
    state_scalars = []
    for rank in range(plan.world_size):
        owned = plan.assignments[rank]
        state_scalars.append(
            sum(state_scalar_count(tuple(block_shapes[i]), method) for i in owned)
        )
    return CommReport(
        steps=steps,
        bytes_gathered_per_step=per_group,
        world_bytes_per_step=world,
        total_bytes_gathered=world * steps,
        per_worker_state_scalars=tuple(state_scalars),
        per_worker_state_bytes=tuple(s * SCALAR_BYTES for s in state_scalars),
    )
