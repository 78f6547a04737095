"""Portable binary checkpoints: networks, Adam state, rng state and training metadata.

Layout (all integers little-endian)::

    magic      8 bytes   b"TILTRLCK"
    version    uint32
    hlen       uint32    length of the JSON header in bytes
    header     hlen bytes UTF-8 JSON
    payload    float64 little-endian arrays, in header order
    checksum   32 bytes  SHA-256 of every preceding byte

See docs/checkpoint_format.md for the header schema.
"""
import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from tiltrl.net import AdamState, MlpParams
from tiltrl.ppo import AgentState

MAGIC = b"TILTRLCK"
VERSION = 1
_PREFIX = struct.Struct("<8sII")
_DIGEST = 32


class CheckpointError(ValueError):
    """Unreadable, truncated, corrupted or version-mismatched checkpoint."""


@dataclass
class Checkpoint:
    agent: AgentState
    iteration: int = 0
    steps: int = 0
    stage: int = 0
    seed: int = 0
    rng_state: dict = None
    history: list = field(default_factory=list)
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def _net_meta(params):
    return {"layout": list(params.layout), "has_log_std": params.log_std is not None}


def _groups(agent):
    """Named groups of arrays in serialization order."""
    return [
        ("policy", agent.policy.arrays()),
        ("value", agent.value.arrays()),
        ("policy_m", agent.policy_opt.m),
        ("policy_v", agent.policy_opt.v),
        ("value_m", agent.value_opt.m),
        ("value_v", agent.value_opt.v),
    ]


def _opt_meta(opt):
    return {"t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2, "eps": opt.eps}


def save_checkpoint(path, ckpt):
    """Write atomically (temp file then rename)."""
    groups = _groups(ckpt.agent)
    header = {
        "policy": _net_meta(ckpt.agent.policy),
        "value": _net_meta(ckpt.agent.value),
        "policy_opt": _opt_meta(ckpt.agent.policy_opt),
        "value_opt": _opt_meta(ckpt.agent.value_opt),
        "arrays": [{"group": name, "shapes": [list(a.shape) for a in arrays]} for name, arrays in groups],
        "iteration": int(ckpt.iteration),
        "steps": int(ckpt.steps),
        "stage": int(ckpt.stage),
        "seed": int(ckpt.seed),
        "rng_state": ckpt.rng_state,
        "history": [float(h) for h in ckpt.history],
        "config_hash": ckpt.config_hash,
        "extra": ckpt.extra,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, arrays in groups for a in arrays)
    body = _PREFIX.pack(MAGIC, VERSION, len(hbytes)) + hbytes + payload
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(body + hashlib.sha256(body).digest())
    os.replace(tmp, path)


def _read_group(buf, offset, shapes):
    arrays = []
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n
        if end > len(buf):
            raise CheckpointError("payload shorter than the header describes")
        arrays.append(np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(float).reshape(shape))
        offset = end
    return arrays, offset


def _net_from(meta, arrays):
    n = len(meta["layout"]) - 1
    expected = 2 * n + (1 if meta["has_log_std"] else 0)
    if len(arrays) != expected:
        raise CheckpointError("array count does not match the network layout")
    return MlpParams(arrays[:n], arrays[n:2 * n], arrays[2 * n] if meta["has_log_std"] else None)


def _opt_from(meta, m, v):
    return AdamState(m, v, int(meta["t"]), float(meta["lr"]), float(meta["beta1"]), float(meta["beta2"]),
                     float(meta["eps"]))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(data) < _PREFIX.size + _DIGEST:
        raise CheckpointError("file too short to be a checkpoint")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("bad magic bytes")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    body, digest = data[:-_DIGEST], data[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checksum mismatch: file is truncated or corrupted")
    try:
        header = json.loads(body[_PREFIX.size:_PREFIX.size + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    offset = _PREFIX.size + hlen
    groups = {}
    for entry in header["arrays"]:
        groups[entry["group"]], offset = _read_group(body, offset, [tuple(s) for s in entry["shapes"]])
    if offset != len(body):
        raise CheckpointError("trailing bytes after payload")
    agent = AgentState(
        _net_from(header["policy"], groups["policy"]),
        _net_from(header["value"], groups["value"]),
        _opt_from(header["policy_opt"], groups["policy_m"], groups["policy_v"]),
        _opt_from(header["value_opt"], groups["value_m"], groups["value_v"]),
    )
    return Checkpoint(agent, header["iteration"], header["steps"], header["stage"], header["seed"],
                      header["rng_state"], header["history"], header["config_hash"], header.get("extra", {}))
