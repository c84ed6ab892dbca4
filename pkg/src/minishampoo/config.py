"""Flat key-value run configuration.

One RunConfig carries everything a training run needs: optimizer
hyperparameters, model widths, dataset choice, sharding degree, and output
paths.  The text form is one `key = value` per line with `#` comments;
parsing is strict, so a misspelled key fails instead of silently using a
default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

from minishampoo.grafting import GraftKind
from minishampoo.matfun import Solver
from minishampoo.optim import ShampooConfig
from minishampoo.precond import LargeDimMethod

__all__ = ["ConfigError", "RunConfig"]


class ConfigError(ValueError):
    """Unknown key, malformed value, or invalid combination."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_int_tuple(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


@dataclass
class RunConfig:
    """Everything needed to reproduce one run, with large-batch defaults."""

    # optimizer
    lr: float = 0.1
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    total_steps: int = 0
    beta1: float = 0.0
    beta2: float = 0.999
    epsilon: float = 1e-12
    momentum: float = 0.9
    use_nesterov: bool = True
    weight_decay: float = 1e-4
    use_decoupled_weight_decay: bool = True
    use_bias_correction: bool = True
    max_preconditioner_dim: int = 2048
    precondition_frequency: int = 50
    start_preconditioning_step: float = 0.0
    exponent_override: int = 0
    exponent_multiplier: float = 1.0
    grafting: str = "sgd"
    grafting_epsilon: float = 1e-8
    grafting_beta2: float = 0.999
    large_dim_method: str = "blocking"
    solver: str = "eigh"
    newton_tolerance: float = 1e-6
    precision: str = "double"
    # model
    hidden_widths: tuple[int, ...] = (64,)
    activation: str = "relu"
    # data
    dataset: str = "synthetic"
    csv_path: str = ""
    csv_label_column: str = "label"
    num_classes: int = 10
    input_dim: int = 32
    num_samples: int = 8192
    val_fraction: float = 0.2
    normalize: bool = True
    # run
    seed: int = 0
    steps: int = 100
    batch_size: int = 64
    loss: str = "softmax_cross_entropy"
    world_size: int = 1
    num_trainers_per_group: int = -1  # -1 means one group spanning the world
    metrics_path: str = "metrics.csv"
    checkpoint_path: str = ""

    # -- text round trip ---------------------------------------------------

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def parse_value(cls, name: str, text: str):
        """Parse one value by the field's declared type."""
        by_name = {f.name: f for f in fields(cls)}
        if name not in by_name:
            raise ConfigError(f"unknown config key {name!r}")
        default = getattr(cls, name)
        text = text.strip()
        try:
            if isinstance(default, bool):
                return _parse_bool(text)
            if isinstance(default, int):
                return int(text)
            if isinstance(default, float):
                return float(text)  # accepts "inf"
            if isinstance(default, tuple):
                return _parse_int_tuple(text)
            return text
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for {name}: {text!r}") from exc

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            key = key.strip()
            values[key] = cls.parse_value(key, value)
        return cls(**values)

    @classmethod
    def from_file(cls, path: str) -> "RunConfig":
        with open(path) as fh:
            return cls.from_text(fh.read())

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                rendered = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                rendered = "true" if value else "false"
            elif isinstance(value, float):
                rendered = repr(value)
            else:
                rendered = str(value)
            lines.append(f"{f.name} = {rendered}")
        return "\n".join(lines) + "\n"

    # -- resolution ---------------------------------------------------------

    @property
    def group_size(self) -> int:
        return self.world_size if self.num_trainers_per_group < 0 else self.num_trainers_per_group

    @property
    def model_widths(self) -> list[int]:
        out_dim = self.num_classes if self.loss == "softmax_cross_entropy" else 1
        return [self.input_dim, *self.hidden_widths, out_dim]

    def to_shampoo_config(self) -> ShampooConfig:
        try:
            grafting = GraftKind(self.grafting)
        except ValueError as exc:
            raise ConfigError(f"unknown grafting kind {self.grafting!r}") from exc
        try:
            solver = Solver(self.solver)
        except ValueError as exc:
            raise ConfigError(f"unknown solver {self.solver!r}") from exc
        try:
            method = LargeDimMethod(self.large_dim_method)
        except ValueError as exc:
            raise ConfigError(
                f"unknown large_dim_method {self.large_dim_method!r}"
            ) from exc
        total = self.total_steps
        if self.lr_schedule == "warmup_cosine" and total == 0:
            total = self.steps
        start = self.start_preconditioning_step
        try:
            return ShampooConfig(
                lr=self.lr,
                lr_schedule=self.lr_schedule,
                warmup_steps=self.warmup_steps,
                total_steps=total,
                betas=(self.beta1, self.beta2),
                epsilon=self.epsilon,
                momentum=self.momentum,
                use_nesterov=self.use_nesterov,
                weight_decay=self.weight_decay,
                use_decoupled_weight_decay=self.use_decoupled_weight_decay,
                use_bias_correction=self.use_bias_correction,
                max_preconditioner_dim=self.max_preconditioner_dim,
                precondition_frequency=self.precondition_frequency,
                start_preconditioning_step=(
                    math.inf if math.isinf(start) else int(start)
                ),
                exponent_override=self.exponent_override,
                exponent_multiplier=self.exponent_multiplier,
                grafting=grafting,
                grafting_epsilon=self.grafting_epsilon,
                grafting_beta2=self.grafting_beta2,
                large_dim_method=method,
                solver=solver,
                newton_tolerance=self.newton_tolerance,
                precision=self.precision,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def validate(self) -> None:
        self.to_shampoo_config()
        if self.steps < 0:
            raise ConfigError("steps must be non-negative")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.world_size < 1:
            raise ConfigError("world_size must be at least 1")
        if self.group_size < 1 or self.world_size % self.group_size != 0:
            raise ConfigError(
                f"num_trainers_per_group {self.group_size} must divide "
                f"world_size {self.world_size}"
            )
        if self.dataset not in ("synthetic", "csv"):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.dataset == "csv" and not self.csv_path:
            raise ConfigError("csv dataset requires csv_path")
        if self.loss not in ("softmax_cross_entropy", "mse"):
            raise ConfigError(f"unknown loss {self.loss!r}")
        if not self.hidden_widths or any(w < 1 for w in self.hidden_widths):
            raise ConfigError("hidden_widths must be positive integers")
        if not (0.0 <= self.val_fraction < 1.0):
            raise ConfigError("val_fraction must lie in [0, 1)")
