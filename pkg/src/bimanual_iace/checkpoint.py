"""Checkpoint container: a text manifest of named tensors followed by their raw bytes.

Layout::

    format: bimanual-iace-checkpoint
    version: 1
    param: <name>=<python literal>        every estimator hyperparameter
    model: joint_dim=<J> image_shape=<H,W,C>
    stats: <name>=<comma separated repr floats>
    loss_history: <comma separated repr floats>
    tensor: <name> <dtype> <d0,d1,...> <offset> <nbytes>
    end_header
    <payload>                             little-endian IEEE-754, row-major

Offsets are relative to the start of the payload. The file depends only on the
parameter values and settings, so identical training runs give identical bytes.
"""

from __future__ import annotations

import ast
import os
from pathlib import Path

import numpy as np
import torch

from .data import EpisodeFormatError, NormStats

FORMAT_NAME = "bimanual-iace-checkpoint"
FORMAT_VERSION = 1
_DTYPES = {"float32": (torch.float32, np.dtype("<f4")), "float64": (torch.float64, np.dtype("<f8"))}
_STAT_FIELDS = ("joints_mean", "joints_std", "actions_mean", "actions_std")


class CheckpointError(EpisodeFormatError):
    """Malformed checkpoint, or one that does not fit the requested task."""


def _vec(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def _parse_vec(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")] if text else [], dtype=np.float64)


def save_checkpoint(policy, path) -> None:
    cfg = policy.config_
    lines = [f"format: {FORMAT_NAME}", f"version: {FORMAT_VERSION}"]
    for name, value in sorted(policy.get_params().items()):
        lines.append(f"param: {name}={value!r}")
    lines.append(f"model: joint_dim={cfg.joint_dim} image_shape={','.join(map(str, cfg.image_shape))}")
    for name in _STAT_FIELDS:
        lines.append(f"stats: {name}={_vec(getattr(policy.norm_stats_, name))}")
    lines.append(f"loss_history: {_vec(getattr(policy, 'loss_history_', []))}")

    chunks, offset = [], 0
    for name, tensor in policy.network_.state_dict().items():
        dtype_name = str(tensor.dtype).removeprefix("torch.")
        if dtype_name not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        raw = tensor.detach().cpu().contiguous().numpy().astype(_DTYPES[dtype_name][1], copy=False).tobytes()
        shape = ",".join(map(str, tensor.shape))
        lines.append(f"tensor: {name} {dtype_name} {shape} {offset} {len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    lines.append("end_header")
    blob = ("\n".join(lines) + "\n").encode("ascii") + b"".join(chunks)

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def read_header(blob: bytes) -> tuple[dict, int]:
    marker = b"end_header\n"
    end = blob.find(marker)
    if end < 0:
        raise CheckpointError("truncated checkpoint: header terminator missing")
    head = {"param": {}, "stats": {}, "tensors": []}
    for line in blob[:end].decode("ascii").splitlines():
        key, _, value = line.partition(": ")
        if key == "param":
            name, _, literal = value.partition("=")
            head["param"][name] = ast.literal_eval(literal)
        elif key == "stats":
            name, _, vec = value.partition("=")
            head["stats"][name] = _parse_vec(vec)
        elif key == "tensor":
            name, dtype, shape, off, nbytes = value.split(" ")
            dims = tuple(int(s) for s in shape.split(",")) if shape else ()
            head["tensors"].append((name, dtype, dims, int(off), int(nbytes)))
        elif key == "model":
            fields = dict(item.split("=") for item in value.split(" "))
            head["joint_dim"] = int(fields["joint_dim"])
            head["image_shape"] = tuple(int(s) for s in fields["image_shape"].split(","))
        elif key == "loss_history":
            head["loss_history"] = _parse_vec(value).tolist()
        else:
            head[key] = value
    if head.get("format") != FORMAT_NAME:
        raise CheckpointError(f"not a checkpoint file: format={head.get('format')!r}")
    if head.get("version") != str(FORMAT_VERSION):
        raise CheckpointError(f"checkpoint version mismatch: {head.get('version')!r}")
    return head, end + len(marker)


def load_checkpoint(path):
    from .estimator import IACEPolicy

    blob = Path(path).read_bytes()
    head, start = read_header(blob)
    payload = memoryview(blob)[start:]
    policy = IACEPolicy(**head["param"])
    stats = NormStats(*(head["stats"][k] for k in _STAT_FIELDS))
    policy._build(head["joint_dim"], head["image_shape"], stats)
    # stored stats already carry the gripper override
    policy.norm_stats_ = stats
    policy.loss_history_ = head.get("loss_history", [])

    state = {}
    for name, dtype, dims, off, nbytes in head["tensors"]:
        if off + nbytes > len(payload):
            raise CheckpointError(f"tensor {name} runs past the end of the file")
        torch_dtype, np_dtype = _DTYPES[dtype]
        arr = np.frombuffer(payload[off:off + nbytes], dtype=np_dtype).reshape(dims)
        state[name] = torch.from_numpy(arr.astype(np_dtype.newbyteorder("="), copy=True)).to(torch_dtype)
    try:
        policy.network_.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(str(exc)) from exc
    policy.network_.eval()
    return policy
