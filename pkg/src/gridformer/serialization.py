"""Binary tensor fixtures (GFT1) and model checkpoints (GFCK).

GFT1: ``b"GFT1"``, u32 rank, rank x u32 extents, u8 dtype tag (0=f32, 1=f64),
then little-endian row-major scalars.

GFCK: ``b"GFCK"``, u32 format version, u32 byte length + UTF-8 config text
(``key=value`` lines), u32 parameter count, then per parameter a u32 byte
length + UTF-8 path followed by the tensor in GFT1 form.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .config import dump_dataclass, parse_lines, update_dataclass
from .errors import FormatError
from .grid import GridConfig, GridFormer

TENSOR_MAGIC = b"GFT1"
CHECKPOINT_MAGIC = b"GFCK"
CHECKPOINT_VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _read_exact(f: BinaryIO, n: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated file: wanted {n} bytes, got {len(data)}")
    return data


def _u32(f: BinaryIO) -> int:
    return struct.unpack("<I", _read_exact(f, 4))[0]


def write_tensor(f: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype not in _TAGS:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    if not 1 <= arr.ndim <= 4:
        raise FormatError(f"rank must be 1-4, got {arr.ndim}")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
    tag = _TAGS[arr.dtype]
    f.write(struct.pack("<B", tag))
    f.write(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes())


def read_tensor(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != TENSOR_MAGIC:
        raise FormatError("bad tensor magic")
    rank = _u32(f)
    if not 1 <= rank <= 4:
        raise FormatError(f"bad tensor rank {rank}")
    shape = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank))
    tag = _read_exact(f, 1)[0]
    if tag not in _DTYPES:
        raise FormatError(f"bad dtype tag {tag}")
    dt = _DTYPES[tag]
    n = int(np.prod(shape))
    arr = np.frombuffer(_read_exact(f, n * dt.itemsize), dtype=dt).reshape(shape)
    return arr.astype(dt.newbyteorder("="))


def save_tensor(arr: np.ndarray, path: str | Path) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def _write_str(f: BinaryIO, s: str) -> None:
    b = s.encode()
    f.write(struct.pack("<I", len(b)))
    f.write(b)


def _read_str(f: BinaryIO) -> str:
    return _read_exact(f, _u32(f)).decode()


def checkpoint_save(model: GridFormer, path: str | Path) -> None:
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    _write_str(buf, dump_dataclass(model.config))
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        _write_str(buf, name)
        write_tensor(buf, p.data)
    Path(path).write_bytes(buf.getvalue())


def _read_checkpoint(path: str | Path) -> tuple[GridConfig, list[tuple[str, np.ndarray]]]:
    f = io.BytesIO(Path(path).read_bytes())
    if _read_exact(f, 4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    version = _u32(f)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config = update_dataclass(GridConfig(), parse_lines(_read_str(f)).get("grid", {}))
    entries = [(_read_str(f), read_tensor(f)) for _ in range(_u32(f))]
    if f.read(1):
        raise FormatError(f"{path}: trailing bytes after last parameter")
    return config, entries


def load_parameters(model: GridFormer, entries: list[tuple[str, np.ndarray]]) -> None:
    """Copy ``entries`` into ``model``; any path/shape mismatch is an error."""
    own = list(model.named_parameters())
    for (name, p), (ename, arr) in zip(own, entries):
        if name != ename or p.shape != arr.shape:
            raise FormatError(f"parameter mismatch at {name!r}: checkpoint has {ename!r} {arr.shape}, model {p.shape}")
    if len(own) != len(entries):
        first = own[len(entries)][0] if len(own) > len(entries) else entries[len(own)][0]
        raise FormatError(f"parameter mismatch at {first!r}: counts {len(own)} vs {len(entries)}")
    for (_, p), (_, arr) in zip(own, entries):
        p.data = arr.astype(p.dtype, copy=True)


def checkpoint_load(path: str | Path, into: GridFormer | None = None) -> GridFormer:
    """Read a checkpoint; build a fresh model unless ``into`` is given."""
    config, entries = _read_checkpoint(path)
    model = into if into is not None else GridFormer(config)
    load_parameters(model, entries)
    return model
