"""One-file JSON checkpoints.

Layout: format_version, step, the parameter arrays, and the optimizer's
nested state tree (parameter index -> block index -> state name -> payload).
Arrays are stored as hex-encoded little-endian bytes with an explicit shape
and dtype, so a checkpoint round-trips bitwise: save -> load -> save yields
an identical file.  Parsing is strict; unknown keys are rejected rather than
ignored, because a typo that silently drops state is worse than a crash.
"""

from __future__ import annotations

import json
import re

import numpy as np

__all__ = ["CheckpointError", "FORMAT_VERSION", "save_checkpoint", "load_checkpoint"]

FORMAT_VERSION = 1

_TOP_KEYS = {"format_version", "step", "params", "state"}
_ARRAY_KEYS = {"shape", "dtype", "hex"}
_ALLOWED_DTYPES = {"<f8", "<f4"}

# every state name the optimizer can emit; indexed families take a suffix
_SCALAR_STATE_NAMES = {"kind", "graft_step", "step", "last_inverse_step"}
_ARRAY_STATE_NAMES = {"graft_accumulator", "filtered_grad", "momentum", "accumulator"}
_INDEXED_STATE_RE = re.compile(r"^(factor|inv_factor|diag)\d+$")


class CheckpointError(ValueError):
    """Malformed checkpoint: wrong version, unknown key, or bad payload."""


def _encode_array(arr: np.ndarray) -> dict:
    arr = np.ascontiguousarray(arr)
    if arr.dtype == np.float64:
        dtype = "<f8"
    elif arr.dtype == np.float32:
        dtype = "<f4"
    else:
        raise CheckpointError(f"unsupported array dtype {arr.dtype}")
    data = arr.astype(np.dtype(dtype), copy=False).tobytes()
    return {"shape": list(arr.shape), "dtype": dtype, "hex": data.hex()}


def _decode_array(obj: dict, where: str) -> np.ndarray:
    if set(obj) != _ARRAY_KEYS:
        raise CheckpointError(
            f"{where}: array payload keys {sorted(obj)} != {sorted(_ARRAY_KEYS)}"
        )
    if obj["dtype"] not in _ALLOWED_DTYPES:
        raise CheckpointError(f"{where}: unsupported dtype {obj['dtype']!r}")
    shape = tuple(int(d) for d in obj["shape"])
    try:
        data = bytes.fromhex(obj["hex"])
    except ValueError as exc:
        raise CheckpointError(f"{where}: invalid hex payload") from exc
    dtype = np.dtype(obj["dtype"])
    expected = int(np.prod(shape)) * dtype.itemsize if shape else dtype.itemsize
    if len(data) != int(np.prod(shape, dtype=np.int64)) * dtype.itemsize:
        raise CheckpointError(
            f"{where}: payload is {len(data)} bytes, shape {shape} needs {expected}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def _valid_state_name(name: str) -> bool:
    return (
        name in _SCALAR_STATE_NAMES
        or name in _ARRAY_STATE_NAMES
        or _INDEXED_STATE_RE.match(name) is not None
    )


def _encode_state(tree: dict) -> dict:
    out: dict = {"t": int(tree["t"]), "params": {}}
    for i, param_tree in tree["params"].items():
        encoded_param: dict = {}
        for b, entry in param_tree.items():
            encoded_entry: dict = {}
            for name, value in entry.items():
                if isinstance(value, np.ndarray):
                    encoded_entry[name] = _encode_array(value)
                else:
                    encoded_entry[name] = value
            encoded_param[str(b)] = encoded_entry
        out["params"][str(i)] = encoded_param
    return out


def _decode_state(obj: dict) -> dict:
    if set(obj) != {"t", "params"}:
        raise CheckpointError(f"state keys {sorted(obj)} != ['params', 't']")
    tree: dict = {"t": int(obj["t"]), "params": {}}
    for i_str, param_tree in obj["params"].items():
        param_out = {}
        for b_str, entry in param_tree.items():
            entry_out = {}
            for name, value in entry.items():
                where = f"state[{i_str}][{b_str}][{name}]"
                if not _valid_state_name(name):
                    raise CheckpointError(f"{where}: unknown state name")
                if isinstance(value, dict):
                    entry_out[name] = _decode_array(value, where)
                else:
                    entry_out[name] = value
            param_out[int(b_str)] = entry_out
        tree["params"][int(i_str)] = param_out
    return tree


def save_checkpoint(
    path: str, step: int, params: list[np.ndarray], state: dict
) -> None:
    obj = {
        "format_version": FORMAT_VERSION,
        "step": int(step),
        "params": [_encode_array(p) for p in params],
        "state": _encode_state(state),
    }
    with open(path, "w") as fh:
        json.dump(obj, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def load_checkpoint(path: str) -> tuple[int, list[np.ndarray], dict]:
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or set(obj) != _TOP_KEYS:
        raise CheckpointError(
            f"top-level keys {sorted(obj) if isinstance(obj, dict) else type(obj)} "
            f"!= {sorted(_TOP_KEYS)}"
        )
    if obj["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"format_version {obj['format_version']} != {FORMAT_VERSION}"
        )
    params = [
        _decode_array(p, f"params[{i}]") for i, p in enumerate(obj["params"])
    ]
    state = _decode_state(obj["state"])
    return int(obj["step"]), params, state
