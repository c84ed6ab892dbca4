"""The block-preconditioned optimizer step.

Per parameter and per block, one step runs in a fixed order: weight decay
into the gradient (unless decoupled), factor/graft state updates from the raw
gradient, a periodic root-inverse refresh, gradient filtering with bias
correction, the grafted direction, magnitude transfer onto the preconditioned
direction (identity during warmup), decoupled weight decay, momentum with
optional Nesterov correction, and finally the parameter update W -= lr * P.

Every block is self-contained: its direction is a pure function of its own
states and its own gradient slice, which is what makes sharded execution a
pure work partition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from minishampoo.grafting import GraftKind, GraftState, rescale_to_graft
from minishampoo.matfun import GuardStats, Solver
from minishampoo.precond import (
    AdaGradFallbackState,
    BlockPlan,
    BlockSpec,
    DiagonalShampooState,
    LargeDimMethod,
    ShampooBlockState,
    plan_parameter,
)

__all__ = [
    "ShampooConfig",
    "Shampoo",
    "BlockSlot",
    "ParamSlot",
    "NonFiniteGradientError",
    "OutOfRangeError",
    "lr_at",
]


class NonFiniteGradientError(ValueError):
    """A gradient contained NaN or infinity; the step was aborted untouched."""


class OutOfRangeError(ValueError):
    """Step index outside the schedule's domain."""


@dataclass(frozen=True)
class ShampooConfig:
    """Hyperparameters for the optimizer.

    Defaults follow the reference large-batch recipe: zero first-moment
    filtering with 0.999 factor EMA, Nesterov momentum 0.9, decoupled weight
    decay 1e-4, SGD grafting, and a spectral solver with epsilon 1e-12.
    """

    lr: float = 0.1
    lr_schedule: str = "constant"  # "constant" | "warmup_cosine"
    warmup_steps: int = 0
    total_steps: int = 0
    betas: tuple[float, float] = (0.0, 0.999)
    epsilon: float = 1e-12
    momentum: float = 0.9
    use_nesterov: bool = True
    weight_decay: float = 1e-4
    use_decoupled_weight_decay: bool = True
    use_bias_correction: bool = True
    max_preconditioner_dim: int = 2048
    precondition_frequency: int = 50
    start_preconditioning_step: float = 0
    exponent_override: int = 0
    exponent_multiplier: float = 1.0
    grafting: GraftKind = GraftKind.SGD
    grafting_epsilon: float = 1e-8
    grafting_beta2: float = 0.999
    large_dim_method: LargeDimMethod = LargeDimMethod.BLOCKING
    solver: Solver = Solver.EIGH
    newton_tolerance: float = 1e-6
    precision: str = "double"  # "double" | "single"

    def __post_init__(self):
        beta1, beta2 = self.betas
        if not (0.0 <= beta1 < 1.0):
            raise ValueError("betas[0] must lie in [0, 1)")
        if not (0.0 < beta2 <= 1.0):
            raise ValueError("betas[1] must lie in (0, 1]")
        if not (0.0 < self.grafting_beta2 <= 1.0):
            raise ValueError("grafting_beta2 must lie in (0, 1]")
        if self.lr <= 0.0:
            raise ValueError("lr must be positive")
        if self.epsilon < 0.0:
            raise ValueError("epsilon must be non-negative")
        if self.momentum < 0.0 or self.momentum >= 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0.0:
            raise ValueError("weight_decay must be non-negative")
        if self.max_preconditioner_dim < 1:
            raise ValueError("max_preconditioner_dim must be at least 1")
        if self.precondition_frequency < 1:
            raise ValueError("precondition_frequency must be at least 1")
        if self.start_preconditioning_step < 0:
            raise ValueError("start_preconditioning_step must be non-negative")
        if self.exponent_override < 0:
            raise ValueError("exponent_override must be a non-negative integer")
        if self.exponent_multiplier <= 0.0:
            raise ValueError("exponent_multiplier must be positive")
        if self.grafting_epsilon <= 0.0:
            raise ValueError("grafting_epsilon must be positive")
        if self.lr_schedule not in ("constant", "warmup_cosine"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.lr_schedule == "warmup_cosine":
            if self.total_steps < 1:
                raise ValueError("warmup_cosine requires total_steps >= 1")
            if not (0 <= self.warmup_steps <= self.total_steps):
                raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.precision not in ("double", "single"):
            raise ValueError(f"unknown precision {self.precision!r}")
        if self.solver is Solver.COUPLED_NEWTON and self.exponent_multiplier != 1.0:
            raise ValueError(
                "the coupled Newton solver supports exponent_multiplier=1 only"
            )

    @property
    def factor_dtype(self) -> np.dtype:
        return np.float32 if self.precision == "single" else np.float64


def lr_at(config: ShampooConfig, t: int) -> float:
    """Learning rate at step t.

    warmup_cosine ramps linearly from lr/warmup_steps at t=0 up to lr, then
    decays as lr * 0.5 * (1 + cos(pi * (t - w) / (T - w))).
    """
    if t < 0:
        raise OutOfRangeError(f"step {t} is negative")
    if config.lr_schedule == "constant":
        return config.lr
    if t >= config.total_steps:
        raise OutOfRangeError(f"step {t} beyond total_steps {config.total_steps}")
    w = config.warmup_steps
    if t < w:
        return config.lr * (t + 1) / w
    span = config.total_steps - w
    if span == 0:
        return config.lr
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (t - w) / span))


@dataclass
class BlockSlot:
    """All per-block optimizer state."""

    spec: BlockSpec
    kind: str  # "shampoo" | "adagrad" | "diagonal" | "graft_only"
    shampoo: ShampooBlockState | None
    diagonal: AdaGradFallbackState | DiagonalShampooState | None
    graft: GraftState
    filtered_grad: np.ndarray | None
    momentum: np.ndarray | None


@dataclass
class ParamSlot:
    """One parameter with its block plan and per-block states."""

    param: np.ndarray
    plan: BlockPlan
    blocks: list[BlockSlot] = field(default_factory=list)

    @property
    def merged_view(self) -> np.ndarray:
        return self.param.reshape(self.plan.merged_shape)


class Shampoo:
    """Block-preconditioned optimizer over a list of numpy parameters.

    Parameters are updated in place.  When `owned` restricts the instance to
    a subset of (param, block) ids, states exist only for those blocks and
    only their directions may be computed; applying directions still touches
    every block (the sharded trainer gathers them first).
    """

    def __init__(
        self,
        params: list[np.ndarray],
        config: ShampooConfig,
        owned: set[tuple[int, int]] | None = None,
    ):
        self.config = config
        self.guard_stats = GuardStats()
        self.slots: list[ParamSlot] = []
        self._t = 0
        for i, param in enumerate(params):
            param = np.ascontiguousarray(np.asarray(param, dtype=np.float64))
            plan = plan_parameter(
                param.shape, config.max_preconditioner_dim, config.large_dim_method
            )
            slot = ParamSlot(param=param, plan=plan)
            for b, spec in enumerate(plan.blocks):
                if owned is not None and (i, b) not in owned:
                    slot.blocks.append(
                        BlockSlot(spec, "unowned", None, None, None, None, None)
                    )
                    continue
                slot.blocks.append(self._build_block(plan, spec))
            self.slots.append(slot)

    def _build_block(self, plan: BlockPlan, spec: BlockSpec) -> BlockSlot:
        cfg = self.config
        beta1, beta2 = cfg.betas
        shape = spec.shape
        shampoo_state = None
        diagonal_state = None
        if all(d == 1 for d in shape):
            kind = "graft_only"
        elif plan.method is LargeDimMethod.BLOCKING:
            kind = "shampoo"
            shampoo_state = ShampooBlockState(
                shape,
                beta2=beta2,
                epsilon=cfg.epsilon,
                exponent_override=cfg.exponent_override,
                exponent_multiplier=cfg.exponent_multiplier,
                solver=cfg.solver,
                newton_tolerance=cfg.newton_tolerance,
                bias_correction=cfg.use_bias_correction,
                dtype=cfg.factor_dtype,
                guard_stats=self.guard_stats,
            )
        elif plan.method is LargeDimMethod.ADAGRAD:
            kind = "adagrad"
            diagonal_state = AdaGradFallbackState(
                shape,
                beta2=beta2,
                division_epsilon=cfg.grafting_epsilon,
                bias_correction=cfg.use_bias_correction,
                dtype=cfg.factor_dtype,
            )
        else:
            kind = "diagonal"
            diagonal_state = DiagonalShampooState(
                shape,
                beta2=beta2,
                epsilon=cfg.epsilon,
                exponent_override=cfg.exponent_override,
                exponent_multiplier=cfg.exponent_multiplier,
                bias_correction=cfg.use_bias_correction,
                dtype=cfg.factor_dtype,
            )
        graft = GraftState(
            cfg.grafting,
            shape,
            beta2=cfg.grafting_beta2,
            epsilon=cfg.grafting_epsilon,
            bias_correction=cfg.use_bias_correction,
        )
        filtered = np.zeros(shape) if beta1 > 0.0 else None
        momentum = np.zeros(shape) if cfg.momentum > 0.0 else None
        return BlockSlot(spec, kind, shampoo_state, diagonal_state, graft, filtered, momentum)

    @property
    def step_count(self) -> int:
        return self._t

    def advance_step(self) -> None:
        """Count one applied step; used by drivers that bypass step()."""
        self._t += 1

    def params(self) -> list[np.ndarray]:
        return [slot.param for slot in self.slots]

    def block_direction(self, i: int, b: int, g_block: np.ndarray, t: int) -> np.ndarray:
        """Compute one block's descent direction, advancing its state.

        Returns P such that the update is W_block -= lr(t) * P.
        """
        cfg = self.config
        beta1, _ = cfg.betas
        slot = self.slots[i]
        block = slot.blocks[b]
        if block.kind == "unowned":
            raise ValueError(f"block ({i}, {b}) is not owned by this instance")
        w_block = slot.merged_view[block.spec.slices]

        g = np.asarray(g_block, dtype=np.float64)
        if cfg.weight_decay > 0.0 and not cfg.use_decoupled_weight_decay:
            g = g + cfg.weight_decay * w_block

        if block.shampoo is not None:
            block.shampoo.update(g)
        elif block.diagonal is not None:
            block.diagonal.update(g)
        block.graft.update(g)

        if block.shampoo is not None:
            block.shampoo.maybe_refresh(
                t,
                frequency=cfg.precondition_frequency,
                start_step=cfg.start_preconditioning_step,
            )

        if beta1 > 0.0:
            block.filtered_grad *= beta1
            block.filtered_grad += (1.0 - beta1) * g
            if cfg.use_bias_correction:
                g_eff = block.filtered_grad / (1.0 - beta1 ** (t + 1))
            else:
                g_eff = block.filtered_grad.copy()
        else:
            g_eff = g

        p_graft = block.graft.direction(g_eff)

        p: np.ndarray
        if t >= cfg.start_preconditioning_step and block.kind != "graft_only":
            if block.kind == "shampoo" and block.shampoo.ready:
                shampoo_dir = block.shampoo.precondition(g_eff)
                p = -rescale_to_graft(shampoo_dir, p_graft)
            elif block.kind == "shampoo":
                # start step not aligned with the refresh cadence: still warm
                p = p_graft
            else:
                fallback_dir = block.diagonal.precondition(g_eff, t)
                p = -rescale_to_graft(fallback_dir, p_graft)
        else:
            p = p_graft

        if cfg.weight_decay > 0.0 and cfg.use_decoupled_weight_decay:
            p = p + cfg.weight_decay * w_block

        if cfg.momentum > 0.0:
            block.momentum *= cfg.momentum
            block.momentum += p
            if cfg.use_nesterov:
                p = cfg.momentum * block.momentum + p
            else:
                p = block.momentum
        return p

    def apply_directions(
        self, directions: dict[tuple[int, int], np.ndarray], t: int
    ) -> None:
        """W_block -= lr(t) * P for every supplied block."""
        lr = lr_at(self.config, t)
        for (i, b), p in directions.items():
            slot = self.slots[i]
            spec = slot.plan.blocks[b]
            slot.merged_view[spec.slices] -= lr * p

    def step(self, grads: list[np.ndarray]) -> None:
        """One full optimizer step over all parameters."""
        if len(grads) != len(self.slots):
            raise ValueError(
                f"expected {len(self.slots)} gradients, got {len(grads)}"
            )
        for g in grads:
            if not np.all(np.isfinite(g)):
                raise NonFiniteGradientError(
                    "gradient contains non-finite entries; step aborted"
                )
        t = self._t
        directions: dict[tuple[int, int], np.ndarray] = {}
        for i, (slot, grad) in enumerate(zip(self.slots, grads)):
            if tuple(np.shape(grad)) != tuple(slot.param.shape):
                raise ValueError(
                    f"gradient {i} has shape {np.shape(grad)}, "
                    f"expected {slot.param.shape}"
                )
            g_merged = np.asarray(grad, dtype=np.float64).reshape(
                slot.plan.merged_shape
            )
            for b, block in enumerate(slot.blocks):
                directions[(i, b)] = self.block_direction(
                    i, b, g_merged[block.spec.slices], t
                )
        self.apply_directions(directions, t)
        self._t += 1

    # -- checkpointing ---------------------------------------------------

    def state_tree(self) -> dict:
        """Nested state: param index -> block index -> name -> payload.

        Arrays are copied so the snapshot stays valid if stepping continues.
        """
        tree: dict = {}
        for i, slot in enumerate(self.slots):
            param_tree: dict = {}
            for b, block in enumerate(slot.blocks):
                if block.kind == "unowned":
                    continue
                entry: dict = {"kind": block.kind, "graft_step": block.graft.step}
                if block.graft.accumulator is not None:
                    entry["graft_accumulator"] = block.graft.accumulator.copy()
                if block.filtered_grad is not None:
                    entry["filtered_grad"] = block.filtered_grad.copy()
                if block.momentum is not None:
                    entry["momentum"] = block.momentum.copy()
                if block.shampoo is not None:
                    s = block.shampoo
                    entry["step"] = s.step
                    entry["last_inverse_step"] = s.last_inverse_step
                    for k, factor in enumerate(s.factors):
                        entry[f"factor{k}"] = factor.copy()
                    if s.inv_factors is not None:
                        for k, inv in enumerate(s.inv_factors):
                            entry[f"inv_factor{k}"] = inv.copy()
                elif isinstance(block.diagonal, AdaGradFallbackState):
                    entry["step"] = block.diagonal.step
                    entry["accumulator"] = block.diagonal.accumulator.copy()
                elif isinstance(block.diagonal, DiagonalShampooState):
                    entry["step"] = block.diagonal.step
                    for k, diag in enumerate(block.diagonal.diagonals):
                        entry[f"diag{k}"] = diag.copy()
                param_tree[b] = entry
            tree[i] = param_tree
        return {"t": self._t, "params": tree}

    def load_state_tree(self, tree: dict) -> None:
        self._t = int(tree["t"])
        for i, slot in enumerate(self.slots):
            param_tree = tree["params"].get(i, {})
            for b, block in enumerate(slot.blocks):
                if block.kind == "unowned":
                    continue
                entry = param_tree[b]
                block.graft.step = int(entry["graft_step"])
                if block.graft.accumulator is not None:
                    block.graft.accumulator[...] = entry["graft_accumulator"]
                if block.filtered_grad is not None:
                    block.filtered_grad[...] = entry["filtered_grad"]
                if block.momentum is not None:
                    block.momentum[...] = entry["momentum"]
                if block.shampoo is not None:
                    s = block.shampoo
                    s.step = int(entry["step"])
                    s.last_inverse_step = int(entry["last_inverse_step"])
                    for k in range(len(s.factors)):
                        s.factors[k][...] = entry[f"factor{k}"]
                    inv_keys = [k for k in entry if k.startswith("inv_factor")]
                    if inv_keys:
                        # inverses keep their stored dtype: a double retry may
                        # have produced float64 even under single precision
                        s.inv_factors = [
                            np.array(entry[f"inv_factor{k}"])
                            for k in range(len(s.factors))
                        ]
                elif isinstance(block.diagonal, AdaGradFallbackState):
                    block.diagonal.step = int(entry["step"])
                    block.diagonal.accumulator[...] = entry["accumulator"]
                elif isinstance(block.diagonal, DiagonalShampooState):
                    block.diagonal.step = int(entry["step"])
                    for k in range(len(block.diagonal.diagonals)):
                        block.diagonal.diagonals[k][...] = entry[f"diag{k}"]
