"""Named-tensor checkpoint container.

Layout::

    b"IFVITCKP"                 magic
    uint32  format version
    uint64  header length
    header  UTF-8 JSON: config (canonical text), parameter manifest
            (name, branch, shape, byte offset into payload), free-form meta
    payload little-endian float32 arrays, back to back
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .backbone import Model, ModelConfig, parameter_layout
from .errors import ConfigurationError, FormatError
from . import numerics as nx

MAGIC = b"IFVITCKP"
FORMAT_VERSION = 1


def save_checkpoint(path, model, meta=None):
    manifest, offset = [], 0
    for name, p in model.params.items():
        nbytes = 4 * p.data.size
        manifest.append({"name": name, "branch": model.branches[name], "shape": list(p.shape), "offset": offset})
        offset += nbytes
    header = json.dumps({"format_version": FORMAT_VERSION, "config": model.config.canonical(),
                         "params": manifest, "meta": meta or {}}, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        f.write(header)
        for p in model.params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def read_header(path):
    with open(path, "rb") as f:
        head = f.read(len(MAGIC) + 12)
        if len(head) < len(MAGIC) + 12 or head[:len(MAGIC)] != MAGIC:
            raise FormatError(f"{path} is not a checkpoint", offset=0)
        version, hlen = struct.unpack("<IQ", head[len(MAGIC):])
        if version != FORMAT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}", offset=len(MAGIC))
        raw = f.read(hlen)
        if len(raw) != hlen:
            raise FormatError("truncated checkpoint header", offset=len(head) + len(raw))
    return json.loads(raw.decode()), len(head) + hlen


def load_checkpoint(path, expected_config=None, dtype=np.float32):
    """Rebuild the model stored at ``path``; returns ``(model, meta)``.

    With ``expected_config``, refuses to load a checkpoint built from a different
    architecture and names both configs.
    """
    header, start = read_header(path)
    config = ModelConfig.from_dict(json.loads(header["config"]))
    if expected_config is not None and expected_config != config:
        raise ConfigurationError("checkpoint/config mismatch:\n  checkpoint: "
                                 f"{config.canonical()}\n  requested:  {expected_config.canonical()}")
    layout = [(n, b, tuple(s)) for n, b, s in parameter_layout(config)]
    stored = [(e["name"], e["branch"], tuple(e["shape"])) for e in header["params"]]
    if layout != stored:
        raise FormatError("parameter manifest does not match the stored config", offset=start)
    with open(path, "rb") as f:
        f.seek(start)
        payload = f.read()
    params, branches = {}, {}
    for e in header["params"]:
        n = int(np.prod(e["shape"]))
        lo = e["offset"]
        if lo + 4 * n > len(payload):
            raise FormatError(f"truncated payload for {e['name']}", offset=start + len(payload))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=lo).reshape(e["shape"]).astype(dtype)
        params[e["name"]] = nx.Tensor(arr, requires_grad=True)
        branches[e["name"]] = e["branch"]
    return Model(config, params, branches), header.get("meta", {})
