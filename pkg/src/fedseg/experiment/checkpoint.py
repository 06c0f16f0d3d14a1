"""Binary checkpoint format.

Little-endian layout::

    b"FSEG"                      magic
    u16   version                (currently 1)
    32B   SHA-256 of the model config
    u32   length of the config JSON, then the JSON bytes
    u32   entry count
    per entry:
        u16 name length, UTF-8 name
        u8  ndim, ndim x u32 dims
        float32 payload, C order
    u32   CRC-32 of every preceding byte

Values are stored as float32 and widened back to float64 on load.
"""
from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..errors import CheckpointError, CRCError, DigestError, VersionError
from ..model import AttentionUNet, UNetConfig, build_model

MAGIC = b"FSEG"
VERSION = 1


def encode_checkpoint(model: AttentionUNet) -> bytes:
    buf = io.BytesIO()
    cfg_json = json.dumps(asdict(model.config), sort_keys=True).encode()
    buf.write(MAGIC)
    buf.write(struct.pack("<H", VERSION))
    buf.write(model.config.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: AttentionUNet, path) -> Path:
    """Write atomically (temp file, then rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes, source: str):
        self.data, self.pos, self.source = data, 0, source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: unexpected end of data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(data: bytes, config: UNetConfig | None = None, source: str = "<bytes>") -> AttentionUNet:
    """Validate and decode. Checks run in order: magic, CRC, version, digest.

    With ``config`` given the stored digest must match it; otherwise the
    embedded config is used.
    """
    if data[:4] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(data) < 4 + 2 + 32 + 4 + 4:
        raise CRCError(f"{source}: file truncated")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise CRCError(f"{source}: CRC mismatch (corrupt or truncated file)")
    r = _Reader(body, source)
    r.take(4)
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise VersionError(f"{source}: format version {version}, expected {VERSION}")
    digest = r.take(32)
    (cfg_len,) = r.unpack("<I")
    stored_cfg = UNetConfig(**json.loads(r.take(cfg_len)))
    if stored_cfg.digest() != digest:
        raise DigestError(f"{source}: embedded config does not match its digest")
    if config is not None and config.digest() != digest:
        raise DigestError(f"{source}: checkpoint was written for a different model config")
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape, dtype=np.int64))
        state[name] = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(shape).astype(np.float64)
    if r.pos != len(body):
        raise CheckpointError(f"{source}: trailing bytes after last entry")
    model = build_model(stored_cfg, seed=0)
    try:
        model.load_state_dict(state)
    except (KeyError, ValueError) as e:
        raise CheckpointError(f"{source}: {e}") from None
    return model


def load_checkpoint(path, config: UNetConfig | None = None) -> AttentionUNet:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: {e.strerror}") from None
    return decode_checkpoint(data, config, str(path))
