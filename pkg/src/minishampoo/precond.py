"""Per-parameter preconditioner machinery.

Shapes a parameter for block preconditioning (merging small consecutive
dimensions, tiling oversized ones into blocks) and maintains the per-block
second-moment state: Kronecker factor matrices with periodically refreshed
root inverses, or diagonal fallbacks when a dimension is too large to carry
a dense factor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from itertools import product

import numpy as np

from minishampoo import matfun
from minishampoo.matfun import GuardStats, RootInverseRequest, Solver

__all__ = [
    "LargeDimMethod",
    "BlockSpec",
    "BlockPlan",
    "ShapeMismatchError",
    "NotYetPreconditionedError",
    "merge_dims",
    "block_partition",
    "select_large_dim_method",
    "plan_parameter",
    "mode_contraction",
    "mode_multiply",
    "mode_square_sums",
    "ShampooBlockState",
    "AdaGradFallbackState",
    "DiagonalShampooState",
    "state_scalar_count",
]


class ShapeMismatchError(ValueError):
    """Gradient shape does not match the state it is fed to."""


class NotYetPreconditionedError(RuntimeError):
    """precondition() called before the first root-inverse refresh."""


class LargeDimMethod(Enum):
    BLOCKING = "blocking"
    ADAGRAD = "adagrad"
    DIAGONAL = "diagonal"


def merge_dims(shape: tuple[int, ...], max_dim: int) -> tuple[int, ...]:
    """Greedily fold consecutive dimensions while the product stays <= max_dim.

    Size-1 dimensions are always absorbed.  A dimension that alone exceeds
    max_dim is kept as-is and merging continues to its right.  The element
    count is preserved; an all-ones (or empty) shape collapses to (1,).
    """
    if max_dim < 1:
        raise ValueError("max_dim must be at least 1")
    if any(d < 1 for d in shape):
        raise ValueError(f"dimensions must be positive, got {shape}")
    merged: list[int] = []
    running = 1
    for d in shape:
        if running * d <= max_dim or running == 1 or d == 1:
            running *= d
        else:
            merged.append(running)
            running = d
    if running > 1 or not merged:
        merged.append(running)
    return tuple(merged)


@dataclass(frozen=True)
class BlockSpec:
    """One block of a merged tensor: half-open index ranges per dimension."""

    ranges: tuple[tuple[int, int], ...]

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(hi - lo for lo, hi in self.ranges)

    @property
    def var_count(self) -> int:
        return math.prod(self.shape)

    @property
    def slices(self) -> tuple[slice, ...]:
        return tuple(slice(lo, hi) for lo, hi in self.ranges)


def block_partition(shape: tuple[int, ...], block_size: int) -> tuple[BlockSpec, ...]:
    """Tile a shape into ceil(d/b) ranges per dimension, row-major order.

    All ranges have length block_size except possibly the last in each
    dimension.
    """
    if block_size < 1:
        raise ValueError("block_size must be at least 1")
    per_dim: list[list[tuple[int, int]]] = []
    for d in shape:
        cuts = [(lo, min(lo + block_size, d)) for lo in range(0, d, block_size)]
        per_dim.append(cuts)
    return tuple(BlockSpec(ranges=combo) for combo in product(*per_dim))


def select_large_dim_method(
    shape: tuple[int, ...], block_size: int, configured: LargeDimMethod
) -> LargeDimMethod:
    """The configured fallback applies only when some dimension exceeds b."""
    if all(d <= block_size for d in shape):
        return LargeDimMethod.BLOCKING
    return configured


@dataclass(frozen=True)
class BlockPlan:
    """How one parameter is reshaped and partitioned for preconditioning."""

    original_shape: tuple[int, ...]
    merged_shape: tuple[int, ...]
    block_size: int
    method: LargeDimMethod
    blocks: tuple[BlockSpec, ...]

    @property
    def block_shapes(self) -> tuple[tuple[int, ...], ...]:
        return tuple(b.shape for b in self.blocks)


def plan_parameter(
    shape: tuple[int, ...], max_dim: int, configured: LargeDimMethod
) -> BlockPlan:
    """Merge, choose the effective method, and partition into blocks.

    The diagonal fallbacks never alter block shapes: they keep the whole
    merged tensor as a single block.
    """
    merged = merge_dims(tuple(shape), max_dim)
    method = select_large_dim_method(merged, max_dim, configured)
    if method is LargeDimMethod.BLOCKING:
        blocks = block_partition(merged, max_dim)
    else:
        blocks = (BlockSpec(ranges=tuple((0, d) for d in merged)),)
    return BlockPlan(
        original_shape=tuple(shape),
        merged_shape=merged,
        block_size=max_dim,
        method=method,
        blocks=blocks,
    )


def mode_contraction(g: np.ndarray, mode: int) -> np.ndarray:
    """Contract g with itself over all modes but `mode` (a d_k x d_k matrix)."""
    axes = tuple(i for i in range(g.ndim) if i != mode)
    c = np.tensordot(g, g, axes=(axes, axes))
    return (c + c.T) / 2


def mode_multiply(mat: np.ndarray, g: np.ndarray, mode: int) -> np.ndarray:
    """Apply a matrix along one mode of a tensor: refold(mat @ unfold_k(g))."""
    if mat.shape[1] != g.shape[mode]:
        raise ShapeMismatchError(
            f"matrix {mat.shape} does not act on mode {mode} of {g.shape}"
        )
    return np.moveaxis(np.tensordot(mat, g, axes=(1, mode)), 0, mode)


def mode_square_sums(g: np.ndarray, mode: int) -> np.ndarray:
    """Diagonal of the mode contraction: sums of squares over other modes."""
    axes = tuple(i for i in range(g.ndim) if i != mode)
    return np.sum(g * g, axis=axes) if axes else g * g


def _check_shape(g: np.ndarray, shape: tuple[int, ...]) -> None:
    if tuple(g.shape) != shape:
        raise ShapeMismatchError(f"expected gradient of shape {shape}, got {g.shape}")


class ShampooBlockState:
    """Kronecker factor accumulators and their cached root inverses.

    One factor matrix per tensor mode.  With beta2=1 the factors are plain
    sums of mode contractions; otherwise exponential moving averages.  Root
    inverses are recomputed only at refresh steps and read stale in between.
    Not thread-safe; callers serialize per block.
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        *,
        beta2: float = 1.0,
        epsilon: float = 1e-12,
        exponent_override: int = 0,
        exponent_multiplier: float = 1.0,
        solver: Solver = Solver.EIGH,
        newton_tolerance: float = matfun.NEWTON_DEFAULT_TOL,
        bias_correction: bool = False,
        dtype: np.dtype = np.float64,
        guard_stats: GuardStats | None = None,
    ):
        if not shape:
            raise ValueError("scalar blocks bypass Shampoo entirely")
        self.shape = tuple(shape)
        self.order = len(self.shape)
        self.beta2 = beta2
        self.epsilon = epsilon
        self.root_p = exponent_override if exponent_override else 2 * self.order
        self.exponent_multiplier = exponent_multiplier
        self.solver = solver
        self.newton_tolerance = newton_tolerance
        self.bias_correction = bias_correction
        self.guard_stats = guard_stats if guard_stats is not None else GuardStats()
        self.factors = [np.zeros((d, d), dtype=dtype) for d in self.shape]
        self.inv_factors: list[np.ndarray] | None = None
        self.step = 0
        self.last_inverse_step = -1

    @property
    def ready(self) -> bool:
        return self.inv_factors is not None

    def update(self, g: np.ndarray) -> None:
        """Accumulate one gradient into every factor."""
        _check_shape(g, self.shape)
        for k, factor in enumerate(self.factors):
            c = mode_contraction(g, k).astype(factor.dtype, copy=False)
            if self.beta2 == 1.0:
                factor += c
            else:
                factor *= self.beta2
                factor += (1.0 - self.beta2) * c
        self.step += 1

    def maybe_refresh(self, t: int, *, frequency: int, start_step: float) -> bool:
        """Recompute root inverses when t >= start_step and t % frequency == 0."""
        if t < start_step or t % frequency != 0:
            return False
        correction = 1.0
        if self.bias_correction and self.beta2 < 1.0:
            correction = 1.0 - self.beta2 ** (t + 1)
        new_inverses = []
        for k, factor in enumerate(self.factors):
            request = RootInverseRequest(
                matrix=factor / correction,
                root_p=self.root_p,
                exponent_multiplier=self.exponent_multiplier,
                epsilon=self.epsilon,
                solver=self.solver,
                tolerance=self.newton_tolerance,
            )
            previous = self.inv_factors[k] if self.inv_factors is not None else None
            new_inverses.append(
                matfun.guarded_root_inverse(request, previous=previous, stats=self.guard_stats)
            )
        self.inv_factors = new_inverses
        self.last_inverse_step = t
        return True

    def precondition(self, g: np.ndarray) -> np.ndarray:
        """Multiply g by the cached root inverse along every mode."""
        _check_shape(g, self.shape)
        if self.inv_factors is None:
            raise NotYetPreconditionedError(
                "no root inverses computed yet; caller must be in grafting warmup"
            )
        out = np.asarray(g, dtype=np.float64)
        for k, inv in enumerate(self.inv_factors):
            out = mode_multiply(np.asarray(inv, dtype=np.float64), out, k)
        return out


class AdaGradFallbackState:
    """Elementwise second-moment accumulator used in place of Shampoo.

    For tensors with a dimension too large to factor.  The division epsilon
    follows the grafting convention (added after the square root).
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        *,
        beta2: float = 1.0,
        division_epsilon: float = 1e-8,
        bias_correction: bool = False,
        dtype: np.dtype = np.float64,
    ):
        self.shape = tuple(shape)
        self.beta2 = beta2
        self.division_epsilon = division_epsilon
        self.bias_correction = bias_correction
        self.accumulator = np.zeros(self.shape, dtype=dtype)
        self.step = 0

    def update(self, g: np.ndarray) -> None:
        _check_shape(g, self.shape)
        sq = (g * g).astype(self.accumulator.dtype, copy=False)
        if self.beta2 == 1.0:
            self.accumulator += sq
        else:
            self.accumulator *= self.beta2
            self.accumulator += (1.0 - self.beta2) * sq
        self.step += 1

    def precondition(self, g: np.ndarray, t: int) -> np.ndarray:
        _check_shape(g, self.shape)
        acc = np.asarray(self.accumulator, dtype=np.float64)
        if self.bias_correction and self.beta2 < 1.0:
            acc = acc / (1.0 - self.beta2 ** (t + 1))
        return g / (np.sqrt(acc) + self.division_epsilon)


class DiagonalShampooState:
    """Per-mode diagonal factor vectors (diagonal Shampoo).

    Stores one vector per tensor mode holding the diagonal of that mode's
    contraction.  No inverse vectors are cached; the root inverse is applied
    lazily at precondition time, with the same epsilon clamp the dense path
    uses (entries are sums of squares, so clamping reduces to adding epsilon).
    """

    def __init__(
        self,
        shape: tuple[int, ...],
        *,
        beta2: float = 1.0,
        epsilon: float = 1e-12,
        exponent_override: int = 0,
        exponent_multiplier: float = 1.0,
        bias_correction: bool = False,
        dtype: np.dtype = np.float64,
    ):
        if not shape:
            raise ValueError("scalar blocks bypass Shampoo entirely")
        self.shape = tuple(shape)
        self.order = len(self.shape)
        self.beta2 = beta2
        self.epsilon = epsilon
        self.root_p = exponent_override if exponent_override else 2 * self.order
        self.exponent_multiplier = exponent_multiplier
        self.bias_correction = bias_correction
        self.diagonals = [np.zeros(d, dtype=dtype) for d in self.shape]
        self.step = 0

    def update(self, g: np.ndarray) -> None:
        _check_shape(g, self.shape)
        for k, diag in enumerate(self.diagonals):
            sq = mode_square_sums(g, k).astype(diag.dtype, copy=False)
            if self.beta2 == 1.0:
                diag += sq
            else:
                diag *= self.beta2
                diag += (1.0 - self.beta2) * sq
        self.step += 1

    def precondition(
        self,
        g: np.ndarray,
        t: int,
        mode_exponents: tuple[float | None, ...] | None = None,
    ) -> np.ndarray:
        """Scale each mode by a power of its (clamped) diagonal factor.

        mode_exponents overrides the default -eta/root_p per mode; None skips
        a mode entirely.
        """
        _check_shape(g, self.shape)
        if mode_exponents is None:
            mode_exponents = tuple(
                -self.exponent_multiplier / self.root_p for _ in range(self.order)
            )
        if len(mode_exponents) != self.order:
            raise ShapeMismatchError("one exponent per tensor mode required")
        correction = 1.0
        if self.bias_correction and self.beta2 < 1.0:
            correction = 1.0 - self.beta2 ** (t + 1)
        out = np.asarray(g, dtype=np.float64)
        for k, exponent in enumerate(mode_exponents):
            if exponent is None:
                continue
            diag = np.asarray(self.diagonals[k], dtype=np.float64) / correction
            scale = (diag + self.epsilon) ** exponent
            shape = [1] * self.order
            shape[k] = self.shape[k]
            out = out * scale.reshape(shape)
        return out


def state_scalar_count(shape: tuple[int, ...], method: LargeDimMethod) -> int:
    """Preconditioner memory for one block, in scalars.

    Dense blocking carries a factor and its inverse per mode (2 * sum d_k^2);
    the AdaGrad fallback one accumulator (prod d_k); diagonal Shampoo one
    vector per mode (sum d_k).
    """
    if method is LargeDimMethod.BLOCKING:
        return 2 * sum(d * d for d in shape)
    if method is LargeDimMethod.ADAGRAD:
        return math.prod(shape)
    return sum(shape)
