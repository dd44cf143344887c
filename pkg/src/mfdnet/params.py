"""Named parameter store with a byte-exact binary serialization.

Record layout (all integers little-endian)::

    header:  b"MFDP" | u16 format version | u32 record count | i64 init seed
    record:  u16 name length | name (utf-8) | u8 dtype code | u8 ndim
             | u32 dims... | raw little-endian values
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np
import torch

MAGIC = b"MFDP"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


class ParamFormatError(ValueError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class ParamStore:
    """Ordered mapping ``name -> ndarray`` plus the seed that produced it."""

    def __init__(self, arrays=None, init_seed=0):
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict()
        self.init_seed = int(init_seed)
        for name, arr in (arrays or {}).items():
            self[name] = arr

    def __setitem__(self, name, arr):
        arr = np.asarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        if arr.dtype not in _CODES:
            raise TypeError(f"{name}: unsupported dtype {arr.dtype}")
        self.arrays[name] = arr

    def __getitem__(self, name):
        return self.arrays[name]

    def __contains__(self, name):
        return name in self.arrays

    def __iter__(self):
        return iter(self.arrays)

    def __len__(self):
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def num_scalars(self):
        return sum(int(a.size) for a in self.arrays.values())

    def equals(self, other) -> bool:
        """Bit-exact comparison of names, dtypes, shapes, and values."""
        if list(self.arrays) != list(other.arrays):
            return False
        for name, a in self.arrays.items():
            b = other.arrays[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    @classmethod
    def from_module(cls, module: torch.nn.Module, init_seed=0) -> "ParamStore":
        store = cls(init_seed=init_seed)
        for name, p in module.named_parameters():
            store[name] = p.detach().cpu().numpy().copy()
        return store

    def load_into(self, module: torch.nn.Module) -> None:
        params = dict(module.named_parameters())
        missing = set(params) - set(self.arrays)
        extra = set(self.arrays) - set(params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        with torch.no_grad():
            for name, p in params.items():
                arr = self.arrays[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(f"{name}: shape {arr.shape} != {tuple(p.shape)}")
                p.copy_(torch.from_numpy(arr.copy()).to(p.dtype))

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<HIq", FORMAT_VERSION, len(self.arrays), self.init_seed)]
        for name, arr in self.arrays.items():
            raw_name = name.encode("utf-8")
            code = _CODES[arr.dtype]
            out.append(struct.pack("<H", len(raw_name)))
            out.append(raw_name)
            out.append(struct.pack("<BB", code, arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, data: bytes, base_offset=0) -> "ParamStore":
        view = memoryview(data)
        pos = 0

        def take(n, what):
            nonlocal pos
            if pos + n > len(view):
                raise ParamFormatError(f"truncated while reading {what}", base_offset + pos)
            chunk = view[pos:pos + n]
            pos += n
            return chunk

        if bytes(take(4, "magic")) != MAGIC:
            raise ParamFormatError("bad parameter-store magic", base_offset)
        version, count, seed = struct.unpack("<HIq", take(14, "header"))
        if version != FORMAT_VERSION:
            raise ParamFormatError(f"unsupported parameter-store version {version}", base_offset + 4)
        store = cls(init_seed=seed)
        for _ in range(count):
            start = pos
            (name_len,) = struct.unpack("<H", take(2, "name length"))
            name = bytes(take(name_len, "name")).decode("utf-8")
            code, ndim = struct.unpack("<BB", take(2, "dtype/ndim"))
            if code not in _DTYPES:
                raise ParamFormatError(f"{name}: unknown dtype code {code}", base_offset + start)
            shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
            dt = _DTYPES[code]
            nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
            raw = take(nbytes, f"values of {name}")
            store[name] = np.frombuffer(bytes(raw), dtype=dt).reshape(shape).copy()
        if pos != len(view):
            raise ParamFormatError("trailing bytes after last record", base_offset + pos)
        return store
