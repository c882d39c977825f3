"""
Binary tensor container used for checkpoints, seeds and exported attention.

Layout (all integers little-endian)::

    magic    4 bytes  b"CBRA"
    version  u16
    meta_len u32, followed by meta_len bytes of UTF-8 JSON metadata
    count    u32
    count x tensor:
        name_len u16, name (UTF-8)
        dtype    u8   (see DTYPE_CODES)
        ndim     u8
        shape    ndim x u32
        payload  row-major little-endian values
"""

import json
import os
import struct
from contextlib import contextmanager
from pathlib import Path
from typing import Any, BinaryIO, Dict, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from .exceptions import CheckpointError, StorageError

MAGIC = b"CBRA"
VERSION = 1

DTYPE_CODES: Dict[int, np.dtype] = {
    1: np.dtype("<f4"),
    2: np.dtype("<f8"),
    3: np.dtype("<i8"),
    4: np.dtype("<i4"),
    5: np.dtype("u1"),
    6: np.dtype("?"),
}
_CODE_BY_KIND = {dtype.str.lstrip("<|"): code for code, dtype in DTYPE_CODES.items()}

ArrayLike = Union[torch.Tensor, np.ndarray]


def _to_numpy(value: ArrayLike) -> np.ndarray:
    if isinstance(value, torch.Tensor):
        value = value.detach().cpu().numpy()
    return np.ascontiguousarray(value)


def _dtype_code(name: str, array: np.ndarray) -> int:
    key = array.dtype.newbyteorder("<").str.lstrip("<|") if array.dtype.byteorder not in "|" else array.dtype.str.lstrip("|")
    if key not in _CODE_BY_KIND:
        raise StorageError(f"tensor '{name}' has unsupported dtype {array.dtype}")
    return _CODE_BY_KIND[key]


class TensorStore:
    """Reads and writes one container file."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    @contextmanager
    def _atomic_writer(self):
        """
        Open a temporary sibling file and move it into place on success.

        Yields:
            Binary file handle

        Raises:
            StorageError: If writing fails; the temporary file is removed
        """
        self.path.parent.mkdir(parents=True, exist_ok=True)
        tmp = self.path.with_name(self.path.name + ".tmp")
        try:
            with open(tmp, "wb") as fh:
                yield fh
            os.replace(tmp, self.path)
        except Exception as e:
            if tmp.exists():
                tmp.unlink()
            if isinstance(e, StorageError):
                raise
            raise StorageError(f"failed to write {self.path}: {e}") from e

    def write(self, tensors: Dict[str, ArrayLike], metadata: Optional[Dict[str, Any]] = None) -> None:
        meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
        with self._atomic_writer() as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<HI", VERSION, len(meta)))
            fh.write(meta)
            fh.write(struct.pack("<I", len(tensors)))
            for name, value in tensors.items():
                array = _to_numpy(value)
                code = _dtype_code(name, array)
                encoded = name.encode("utf-8")
                fh.write(struct.pack("<H", len(encoded)))
                fh.write(encoded)
                fh.write(struct.pack("<BB", code, array.ndim))
                fh.write(struct.pack(f"<{array.ndim}I", *array.shape))
                fh.write(array.astype(DTYPE_CODES[code], copy=False).tobytes(order="C"))

    @staticmethod
    def _read_exact(fh: BinaryIO, size: int) -> bytes:
        data = fh.read(size)
        if len(data) != size:
            raise StorageError("unexpected end of file")
        return data

    def read(self) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
        """
        Returns:
            (tensors by name, metadata)

        Raises:
            StorageError: On a missing file, bad magic, unknown version or truncated payload
        """
        if not self.path.exists():
            raise StorageError(f"no such tensor file: {self.path}")
        tensors: Dict[str, torch.Tensor] = {}
        with open(self.path, "rb") as fh:
            if self._read_exact(fh, 4) != MAGIC:
                raise StorageError(f"{self.path} is not a tensor container")
            version, meta_len = struct.unpack("<HI", self._read_exact(fh, 6))
            if version != VERSION:
                raise StorageError(f"{self.path} has unsupported version {version}")
            metadata = json.loads(self._read_exact(fh, meta_len).decode("utf-8"))
            (count,) = struct.unpack("<I", self._read_exact(fh, 4))
            for _ in range(count):
                (name_len,) = struct.unpack("<H", self._read_exact(fh, 2))
                name = self._read_exact(fh, name_len).decode("utf-8")
                code, ndim = struct.unpack("<BB", self._read_exact(fh, 2))
                if code not in DTYPE_CODES:
                    raise StorageError(f"tensor '{name}' has unknown dtype code {code}")
                shape = struct.unpack(f"<{ndim}I", self._read_exact(fh, 4 * ndim))
                dtype = DTYPE_CODES[code]
                size = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                array = np.frombuffer(self._read_exact(fh, size), dtype=dtype).reshape(shape)
                tensors[name] = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))
        return tensors, metadata


# ============= CHECKPOINTS =============

def save_checkpoint(model: nn.Module, path: Union[str, Path], metadata: Dict[str, Any]) -> None:
    """Write every parameter and buffer of ``model``."""
    TensorStore(path).write(model.state_dict(), metadata)


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, torch.Tensor], Dict[str, Any]]:
    return TensorStore(path).read()


def load_state_into(model: nn.Module, state: Dict[str, torch.Tensor]) -> None:
    """
    Copy ``state`` into ``model`` after checking names and shapes.

    Raises:
        CheckpointError: Naming the first missing, unexpected or mis-shaped tensor
    """
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in state:
            raise CheckpointError(f"checkpoint is missing tensor '{name}'", name)
        if tuple(state[name].shape) != tuple(tensor.shape):
            raise CheckpointError(
                f"tensor '{name}' has shape {tuple(state[name].shape)}, model expects {tuple(tensor.shape)}",
                name,
            )
    for name in state:
        if name not in expected:
            raise CheckpointError(f"checkpoint has unexpected tensor '{name}'", name)
    model.load_state_dict({name: state[name].to(expected[name].dtype) for name in expected})
