"""Command-line entry points: train, plan, verify, inspect.

Flags mirror RunConfig keys one-to-one (underscores become dashes), so any
line of a config file can be overridden at the command line.  Precedence is
defaults < config file < flags, with the SHAMPOO_SEED environment variable
taking final say over the seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields

import numpy as np

from minishampoo.checkpoint import load_checkpoint, save_checkpoint
from minishampoo.config import ConfigError, RunConfig
from minishampoo.dist import comm_meter, enumerate_blocks, greedy_assign
from minishampoo.oracles import (
    adafactor_relation_check,
    fullmatrix_equivalence_check,
    momentum_equivalence_check,
    rowwise_equivalence_check,
    solver_agreement_check,
)
from minishampoo.precond import LargeDimMethod, plan_parameter, state_scalar_count
from minishampoo.train import (
    Mlp,
    MetricsRow,
    load_csv,
    make_synthetic_classes,
    prepare_bundle,
    run_training,
)

__all__ = ["main"]

METRICS_COLUMNS = (
    "step",
    "loss",
    "val_loss",
    "accuracy",
    "lr",
    "step_ms",
    "gathered_bytes",
)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="key = value config file")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(getattr(RunConfig, f.name), bool):
            parser.add_argument(
                flag, dest=f.name, default=None, action=argparse.BooleanOptionalAction
            )
        else:
            parser.add_argument(flag, dest=f.name, default=None, metavar="VALUE")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    for f in fields(RunConfig):
        supplied = getattr(args, f.name, None)
        if supplied is None:
            continue
        if isinstance(supplied, bool):
            setattr(cfg, f.name, supplied)
        else:
            setattr(cfg, f.name, RunConfig.parse_value(f.name, supplied))
    if "SHAMPOO_SEED" in os.environ:
        try:
            cfg.seed = int(os.environ["SHAMPOO_SEED"])
        except ValueError as exc:
            raise ConfigError(
                f"SHAMPOO_SEED must be an integer, got "
                f"{os.environ['SHAMPOO_SEED']!r}"
            ) from exc
    cfg.validate()
    return cfg


def _build_bundle(cfg: RunConfig):
    if cfg.dataset == "synthetic":
        features, labels = make_synthetic_classes(
            cfg.seed, cfg.num_classes, cfg.input_dim, cfg.num_samples
        )
    else:
        features, labels = load_csv(cfg.csv_path, cfg.csv_label_column)
    if cfg.loss == "mse" and labels.ndim == 1:
        labels = np.asarray(labels, dtype=np.float64)[:, None]
    return prepare_bundle(
        features,
        labels,
        seed=cfg.seed,
        val_fraction=cfg.val_fraction,
        normalize=cfg.normalize,
    )


def write_metrics(path: str, rows: list[MetricsRow], cfg: RunConfig) -> None:
    """CSV with the resolved config echoed as `# key = value` lines."""
    with open(path, "w") as fh:
        for line in cfg.to_text().splitlines():
            fh.write(f"# {line}\n")
        fh.write(",".join(METRICS_COLUMNS) + "\n")
        for row in rows:
            fh.write(
                f"{row.step},{row.loss!r},{row.val_loss!r},{row.accuracy!r},"
                f"{row.lr!r},{row.step_ms!r},{row.gathered_bytes}\n"
            )


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    bundle = _build_bundle(cfg)

    initial_state = None
    if args.resume:
        step, params, initial_state = load_checkpoint(args.resume)
        model = Mlp(params, activation=cfg.activation)
        if list(model.widths) != cfg.model_widths:
            raise ConfigError(
                f"checkpoint widths {list(model.widths)} != config "
                f"{cfg.model_widths}"
            )
        if step != initial_state["t"]:
            raise ConfigError("checkpoint step disagrees with its state tree")
    else:
        model = Mlp.initialize(cfg.model_widths, cfg.activation, cfg.seed)

    result = run_training(
        bundle,
        model,
        cfg.to_shampoo_config(),
        steps=cfg.steps,
        batch_size=cfg.batch_size,
        seed=cfg.seed,
        loss_kind=cfg.loss,
        world_size=cfg.world_size,
        group_size=cfg.group_size,
        initial_state=initial_state,
    )

    write_metrics(cfg.metrics_path, result.metrics, cfg)
    if cfg.checkpoint_path:
        save_checkpoint(
            cfg.checkpoint_path,
            result.state_tree["t"],
            result.model.weights,
            result.state_tree,
        )
    if result.metrics:
        last = result.metrics[-1]
        print(
            f"step {last.step}: loss {last.loss:.6f} val_loss {last.val_loss:.6f} "
            f"accuracy {last.accuracy:.4f}"
        )
    print(f"wrote {len(result.metrics)} metric rows to {cfg.metrics_path}")
    if cfg.checkpoint_path:
        print(f"wrote checkpoint to {cfg.checkpoint_path}")
    return 0


def cmd_plan(args: argparse.Namespace) -> int:
    cfg = _resolve_config(args)
    shampoo_cfg = cfg.to_shampoo_config()
    widths = cfg.model_widths
    shapes = [(d_out, d_in) for d_in, d_out in zip(widths, widths[1:])]
    blocks = enumerate_blocks(shapes, shampoo_cfg)
    plan = greedy_assign(
        [b.var_count for b in blocks], cfg.world_size, cfg.group_size
    )
    report = comm_meter(
        plan,
        [b.shape for b in blocks],
        method=shampoo_cfg.large_dim_method,
        steps=cfg.steps,
    )

    per_parameter = []
    for shape in shapes:
        methods = {}
        for method in LargeDimMethod:
            param_plan = plan_parameter(
                shape, shampoo_cfg.max_preconditioner_dim, method
            )
            methods[method.value] = sum(
                state_scalar_count(spec.shape, method)
                for spec in param_plan.blocks
            )
        param_plan = plan_parameter(
            shape, shampoo_cfg.max_preconditioner_dim, shampoo_cfg.large_dim_method
        )
        per_parameter.append(
            {
                "shape": list(shape),
                "merged_shape": list(param_plan.merged_shape),
                "num_blocks": len(param_plan.blocks),
                "state_scalars_by_method": methods,
            }
        )

    print(
        json.dumps(
            {
                "plan": plan.to_json_dict(),
                "comm": report.to_json_dict(),
                "per_parameter": per_parameter,
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


VERIFY_TOLERANCES = {
    "momentum": 1e-10,
    "nesterov": 1e-10,
    "row_wise_adagrad": 1e-12,
    "adafactor": 1e-10,
    "full_matrix_adagrad": 1e-10,
    "solver_identity_eigh": 1e-6,
    "solver_identity_newton": 1e-6,
    "solver_agreement": 1e-6,
}


def cmd_verify(args: argparse.Namespace) -> int:
    agreement = solver_agreement_check()
    deviations = {
        "momentum": momentum_equivalence_check(nesterov=False),
        "nesterov": momentum_equivalence_check(nesterov=True),
        "row_wise_adagrad": rowwise_equivalence_check(),
        "adafactor": adafactor_relation_check(),
        "full_matrix_adagrad": fullmatrix_equivalence_check(),
        "solver_identity_eigh": agreement.max_identity_residual_eigh,
        "solver_identity_newton": agreement.max_identity_residual_newton,
        "solver_agreement": agreement.max_relative_disagreement,
    }
    checks = [
        {
            "name": name,
            "deviation": deviations[name],
            "tolerance": VERIFY_TOLERANCES[name],
            "pass": deviations[name] <= VERIFY_TOLERANCES[name],
        }
        for name in VERIFY_TOLERANCES
    ]
    all_pass = all(c["pass"] for c in checks)
    if args.json:
        print(json.dumps({"checks": checks, "all_pass": all_pass}, indent=2))
    else:
        for c in checks:
            status = "PASS" if c["pass"] else "FAIL"
            print(
                f"{status} {c['name']}: deviation {c['deviation']:.3e} "
                f"(tolerance {c['tolerance']:.0e})"
            )
        print("all checks passed" if all_pass else "CHECKS FAILED")
    return 0 if all_pass else 1


def cmd_inspect(args: argparse.Namespace) -> int:
    step, params, state = load_checkpoint(args.checkpoint)
    print(f"checkpoint: step {step}")
    print(f"parameters: {len(params)}")
    for i, p in enumerate(params):
        print(f"  [{i}] shape {tuple(p.shape)} dtype {p.dtype}")
    print("state tree:")
    for i in sorted(state["params"]):
        for b in sorted(state["params"][i]):
            entry = state["params"][i][b]
            pieces = []
            for name in sorted(entry):
                value = entry[name]
                if isinstance(value, np.ndarray):
                    pieces.append(f"{name}{list(value.shape)}")
                else:
                    pieces.append(f"{name}={value}")
            print(f"  param {i} block {b}: " + ", ".join(pieces))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="minishampoo",
        description="Block-preconditioned optimizer: train, plan, verify, inspect.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training job")
    _add_config_flags(p_train)
    p_train.add_argument("--resume", metavar="CHECKPOINT", default=None)
    p_train.set_defaults(func=cmd_train)

    p_plan = sub.add_parser("plan", help="print the sharding plan as JSON")
    _add_config_flags(p_plan)
    p_plan.set_defaults(func=cmd_plan)

    p_verify = sub.add_parser("verify", help="run the equivalence checks")
    p_verify.add_argument("--json", action="store_true")
    p_verify.set_defaults(func=cmd_verify)

    p_inspect = sub.add_parser("inspect", help="pretty-print a checkpoint")
    p_inspect.add_argument("checkpoint")
    p_inspect.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
