"""Checkpoint container for network weights and optimizer state.

Layout (little-endian)::

    4 bytes   ASCII magic ``S4XC``
    1 byte    version (0x01)
    3 bytes   reserved zeros
    4 bytes   uint32 length L of the header
    L bytes   UTF-8 JSON header
    ...       float32 payloads, concatenated in header order

The header is ``{"kind", "config", "step", "seed", "extra", "tensors"}``
where ``tensors`` is a list of ``{"name", "shape", "offset"}`` sorted by
name; offsets count bytes from the start of the payload section. Tensor
names prefixed ``optim/`` hold Adam moments; everything else is a network
parameter or buffer.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"S4XC"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def encode_checkpoint(kind, config: dict, tensors: dict, step=0, seed=0, extra=None) -> bytes:
    names = sorted(tensors)
    entries, payloads, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(arr.tobytes())
        offset += arr.nbytes
    header = _canonical(
        {"kind": kind, "config": config, "step": int(step), "seed": int(seed), "extra": extra or {}, "tensors": entries}
    )
    return MAGIC + bytes([VERSION, 0, 0, 0]) + struct.pack("<I", len(header)) + header + b"".join(payloads)


def decode_checkpoint(blob: bytes):
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if len(blob) < 12:
        raise CheckpointError("checkpoint header is truncated")
    if blob[4] != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob[4]}")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    try:
        header = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    if 12 + hlen > len(blob):
        raise CheckpointError("checkpoint header is truncated")
    base = 12 + hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 4 * count > len(blob):
            raise CheckpointError(f"payload of {e['name']} is truncated")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start)
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, tensors


def state_tensors(module: torch.nn.Module, optimizer: torch.optim.Optimizer | None = None) -> dict:
    """Flatten module parameters (and Adam moments) into named float32 arrays."""
    out = {name: p.detach().cpu().float().numpy() for name, p in module.state_dict().items()}
    if optimizer is not None:
        names = {id(p): n for n, p in module.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                st = optimizer.state.get(p)
                if not st:
                    continue
                n = names[id(p)]
                out[f"optim/{n}/exp_avg"] = st["exp_avg"].detach().cpu().numpy()
                out[f"optim/{n}/exp_avg_sq"] = st["exp_avg_sq"].detach().cpu().numpy()
                out[f"optim/{n}/step"] = np.asarray([float(st["step"])], dtype=np.float32)
    return out


def load_module_state(module: torch.nn.Module, tensors: dict):
    """Copy named arrays into ``module``, verifying every name and shape."""
    own = module.state_dict()
    params = {k: v for k, v in tensors.items() if not k.startswith("optim/")}
    missing = set(own) - set(params)
    unexpected = set(params) - set(own)
    if missing or unexpected:
        raise CheckpointError(f"parameter mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
    for name, ref in own.items():
        if tuple(ref.shape) != tuple(params[name].shape):
            raise CheckpointError(f"{name}: checkpoint shape {params[name].shape} != model shape {tuple(ref.shape)}")
    module.load_state_dict({k: torch.from_numpy(v).to(own[k].dtype) for k, v in params.items()})


def load_optimizer_state(module, optimizer, tensors: dict):
    names = dict(module.named_parameters())
    for n, p in names.items():
        key = f"optim/{n}/exp_avg"
        if key not in tensors:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(tensors[f"optim/{n}/step"][0])),
            "exp_avg": torch.from_numpy(tensors[key].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"optim/{n}/exp_avg_sq"].copy()),
        }


def save(path, kind, config, module, optimizer=None, step=0, seed=0, extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(kind, config, state_tensors(module, optimizer), step, seed, extra))


def load(path):
    return decode_checkpoint(Path(path).read_bytes())
