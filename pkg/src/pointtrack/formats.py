"""On-disk formats: parameter checkpoints, key=value configs, raw frame dumps.

Checkpoint layout (little-endian throughout)::

    b"TPT2"  u32 version  u32 count
    count x { u32 name_len, name (utf-8), u32 rank, u64 dims[rank], f32 payload }

Frame dump layout::

    b"TVID"  u32 T  u32 H  u32 W   then float32 T*3*H*W
"""

from __future__ import annotations

import dataclasses
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

CKPT_MAGIC = b"TPT2"
CKPT_VERSION = 1
FRAMES_MAGIC = b"TVID"


def save_checkpoint(path, tensors: dict) -> None:
    """Write named arrays as float32; names are written in sorted order."""
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path, dtype=np.float32) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValidationError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CKPT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            size = int(np.prod(dims, dtype=np.int64))
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims)
            pos += 4 * size
            out[name] = arr.astype(dtype)
    except (struct.error, ValueError) as exc:
        raise ValidationError(f"{path}: truncated checkpoint") from exc
    return out


def write_keyvalue(path, obj) -> None:
    """Serialise a flat dataclass (or dict) as ``key=value`` lines."""
    items = dataclasses.asdict(obj) if dataclasses.is_dataclass(obj) else dict(obj)
    lines = [f"{k}={_fmt(v)}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_keyvalue(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"config not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def coerce_fields(cls, raw: dict):
    """Build dataclass ``cls`` from string values, converting by field type."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for k, v in raw.items():
        if k not in fields:
            raise ValidationError(f"unknown {cls.__name__} key: {k}")
        default = fields[k].default
        kwargs[k] = _parse(v, type(default) if default is not dataclasses.MISSING else str)
    return cls(**kwargs)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _parse(v: str, typ):
    if typ is bool:
        if v.lower() in ("1", "true", "yes", "on"):
            return True
        if v.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationError(f"not a boolean: {v!r}")
    if typ is tuple:
        return tuple(int(x) for x in v.split(",") if x)
    try:
        return typ(v)
    except ValueError as exc:
        raise ValidationError(f"cannot parse {v!r} as {typ.__name__}") from exc


def save_frames(path, frames: np.ndarray) -> None:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValidationError(f"frames must be T x 3 x H x W, got {frames.shape}")
    t, _, h, w = frames.shape
    Path(path).write_bytes(FRAMES_MAGIC + struct.pack("<III", t, h, w) + frames.tobytes())


def load_frames(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"frames file not found: {path}")
    buf = path.read_bytes()
    if buf[:4] != FRAMES_MAGIC:
        raise ValidationError(f"{path}: bad frames magic")
    t, h, w = struct.unpack_from("<III", buf, 4)
    count = t * 3 * h * w
    if len(buf) != 16 + 4 * count:
        raise ValidationError(f"{path}: payload size does not match header")
    return np.frombuffer(buf, dtype="<f4", offset=16).reshape(t, 3, h, w).astype(np.float32)
