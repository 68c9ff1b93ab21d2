"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DAQC" | version u32 | config length u32 | config JSON (UTF-8)
    tensor count u32
    per tensor: name length u16 | name UTF-8 | rank u8 | dims u64 * rank | float32 data
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict

import numpy as np

from .errors import CheckpointVersionError, DataError
from .model import ModelBundle, ModelConfig

MAGIC = b"DAQC"
FORMAT_VERSION = 1


def config_block(bundle, extra=None):
    block = {"model": asdict(bundle.config), "has_critic": bundle.critic is not None}
    if extra:
        block.update(extra)
    return block


def dumps(bundle, extra=None):
    cfg = json.dumps(config_block(bundle, extra), sort_keys=True, separators=(",", ":")).encode()
    state = bundle.state_dict()
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(cfg)), cfg,
             struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f4")
        bname = name.encode()
        parts += [struct.pack("<H", len(bname)), bname, struct.pack("<B", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    return b"".join(parts)


def save(bundle, path, extra=None):
    data = dumps(bundle, extra)
    tmp = f"{path}.tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise DataError(f"cannot write checkpoint {path}: {exc}") from None
    return path


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise DataError("truncated checkpoint")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf):
    """-> (config block dict, {name: float32 array})."""
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise DataError("not a DAQC checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version} is not supported "
                                     f"(this build reads version {FORMAT_VERSION})")
    (n,) = r.unpack("<I")
    try:
        config = json.loads(r.take(n).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint config block: {exc}") from None
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (ln,) = r.unpack("<H")
        name = r.take(ln).decode()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims).astype(np.float32)
    if r.pos != len(buf):
        raise DataError("trailing bytes after checkpoint tensors")
    return config, tensors


def load(path):
    """-> (ModelBundle in eval mode, config block)."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    config, tensors = loads(buf)
    bundle = ModelBundle.create(ModelConfig.from_dict(config["model"]), seed=0,
                                with_critic=config.get("has_critic", False))
    bundle.load_state_dict(tensors)
    bundle.eval()
    return bundle, config
