"""Single-file checkpoint container.

Layout::

    MAGIC (16 bytes) | header length (uint64 LE) | header JSON | array bytes | SHA-256 (32 bytes)

The header lists each array as ``{"name", "dtype", "shape", "offset", "nbytes"}``
and carries a free-form ``meta`` mapping (configs, counters). The trailing
digest covers every preceding byte. Writing is deterministic, so a
save -> load -> save cycle reproduces the file byte for byte.

Parameter names follow ``component/block-index/layer/kind``, e.g.
``generator/blocks/3/norm_0/mlp_gamma/weight`` or
``discriminator/scales/1/layers/2/0/bias``; optimizer moments live under
``optim/<g|d>/<parameter name>/<exp_avg|exp_avg_sq|step>`` and RNG state under
``rng/torch``.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CMRSYNTH-CKPT\x00\x00\x00"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def atomic_write_bytes(path, payload):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_container(arrays, meta):
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.require(arr, requirements="C")  # ascontiguousarray would promote 0-d to 1-d
        data = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        })
        chunks.append(data)
        offset += len(data)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta, "arrays": entries},
        sort_keys=True, separators=(",", ":"),
    ).encode()
    body = MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_container(payload):
    if len(payload) < len(MAGIC) + 8 + 32 or not payload.startswith(MAGIC):
        raise CheckpointError("corrupted checkpoint: bad magic")
    body, digest = payload[:-32], payload[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("corrupted checkpoint: checksum mismatch")
    (hlen,) = struct.unpack("<Q", body[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    header = json.loads(body[start:start + hlen])
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint version mismatch: file {header.get('version')}, expected {FORMAT_VERSION}"
        )
    data = body[start + hlen:]
    arrays = {}
    for e in header["arrays"]:
        raw = data[e["offset"]:e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"]


def save_container(path, arrays, meta):
    atomic_write_bytes(path, encode_container(arrays, meta))


def load_container(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint: {path}")
    return decode_container(path.read_bytes())


def canonical_name(component, key):
    return f"{component}/{key.replace('.', '/')}"


def module_arrays(module, component):
    return {canonical_name(component, k): v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_arrays(module, component, arrays):
    """Copy arrays into ``module`` bit-exactly; raise on any missing key or shape mismatch."""
    state = module.state_dict()
    new_state = {}
    for key, current in state.items():
        name = canonical_name(component, key)
        if name not in arrays:
            raise CheckpointError(f"shape mismatch: checkpoint lacks parameter {name}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(current.shape):
            raise CheckpointError(
                f"shape mismatch: {name} is {tuple(arr.shape)} in checkpoint, "
                f"{tuple(current.shape)} in model"
            )
        new_state[key] = torch.from_numpy(arr.copy()).to(current.dtype)
    extra = sorted(n for n in arrays if n.startswith(component + "/")
                   and n not in {canonical_name(component, k) for k in state})
    if extra:
        raise CheckpointError(f"shape mismatch: unexpected parameter {extra[0]}")
    module.load_state_dict(new_state)


def model_arrays(model):
    arrays = module_arrays(model.generator, "generator")
    if model.encoder is not None:
        arrays.update(module_arrays(model.encoder, "encoder"))
    arrays.update(module_arrays(model.discriminator, "discriminator"))
    return arrays


def load_model_arrays(model, arrays):
    load_module_arrays(model.generator, "generator", arrays)
    if model.encoder is not None:
        load_module_arrays(model.encoder, "encoder", arrays)
    load_module_arrays(model.discriminator, "discriminator", arrays)


def named_params(model, which):
    """(canonical name, parameter) pairs in optimizer order for 'g' or 'd'."""
    if which == "g":
        pairs = [(canonical_name("generator", n), p) for n, p in model.generator.named_parameters()]
        if model.encoder is not None:
            pairs += [(canonical_name("encoder", n), p) for n, p in model.encoder.named_parameters()]
        return pairs
    return [(canonical_name("discriminator", n), p) for n, p in model.discriminator.named_parameters()]


def optimizer_arrays(optimizer, names, tag):
    state = optimizer.state_dict()["state"]
    arrays = {}
    for idx, name in enumerate(names):
        for key, value in sorted(state.get(idx, {}).items()):
            arrays[f"optim/{tag}/{name}/{key}"] = value.detach().cpu().numpy() if torch.is_tensor(value) \
                else np.asarray(value)
    return arrays


def load_optimizer_arrays(optimizer, names, tag, arrays):
    sd = optimizer.state_dict()
    state = {}
    for idx, name in enumerate(names):
        prefix = f"optim/{tag}/{name}/"
        entry = {k[len(prefix):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith(prefix)}
        if entry:
            state[idx] = entry
    sd["state"] = state
    optimizer.load_state_dict(sd)
