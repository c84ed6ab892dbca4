"""Desk-scale Kronecker-factored (Shampoo) optimizer with grafting.

A from-scratch numpy implementation: block preconditioning with merged and
blocked tensor dimensions, learning-rate grafting onto first-order methods,
spectral and coupled-Newton matrix root inverses, and a simulated sharded
data-parallel trainer with byte-exact gather-buffer accounting.
"""

from minishampoo.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from minishampoo.config import ConfigError, RunConfig
from minishampoo.dist import (
    AssignmentPlan,
    CommReport,
    build_workers,
    buffer_size,
    comm_meter,
    distributed_step,
    enumerate_blocks,
    greedy_assign,
)
from minishampoo.grafting import GraftKind, GraftState, rescale_to_graft
from minishampoo.matfun import (
    GuardStats,
    NewtonTrace,
    RootInverseRequest,
    Solver,
    guarded_root_inverse,
    root_inverse_eigh,
    root_inverse_newton,
    sym_eigh,
)
from minishampoo.optim import (
    NonFiniteGradientError,
    OutOfRangeError,
    Shampoo,
    ShampooConfig,
    lr_at,
)
from minishampoo.precond import (
    LargeDimMethod,
    plan_parameter,
    state_scalar_count,
)
from minishampoo.train import (
    DataBundle,
    Mlp,
    RunResult,
    load_csv,
    make_synthetic_classes,
    prepare_bundle,
    run_training,
)

__version__ = "0.1.0"

__all__ = [
    "AssignmentPlan",
    "CheckpointError",
    "CommReport",
    "ConfigError",
    "DataBundle",
    "GraftKind",
    "GraftState",
    "GuardStats",
    "LargeDimMethod",
    "Mlp",
    "NewtonTrace",
    "NonFiniteGradientError",
    "OutOfRangeError",
    "RootInverseRequest",
    "RunConfig",
    "RunResult",
    "Shampoo",
    "ShampooConfig",
    "Solver",
    "buffer_size",
    "build_workers",
    "comm_meter",
    "distributed_step",
    "enumerate_blocks",
    "greedy_assign",
    "guarded_root_inverse",
    "load_checkpoint",
    "load_csv",
    "lr_at",
    "make_synthetic_classes",
    "plan_parameter",
    "prepare_bundle",
    "rescale_to_graft",
    "root_inverse_eigh",
    "root_inverse_newton",
    "run_training",
    "save_checkpoint",
    "state_scalar_count",
    "sym_eigh",
    "__version__",
]
