"""Pattern-aware compressed weight storage (FKW) and a CSR baseline.

FKW byte layout, little-endian throughout::

    header      "FKW1" u32 F, u32 C, u8 kh, u8 kw, u16 k, u16 P     (18 bytes)
    library     P x k u8 flat kernel offsets, ascending per pattern
    permutation F x u16 filter order used for the directory and values
    directory   F*C slots of (1 presence bit + ceil(log2 P) id bits),
                MSB-first, padded to a whole byte
    values      k x f32 per present kernel, in directory order

A removed kernel stores presence 0 and an all-zero id field.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .model_ir import FormatError
from .pruner import REMOVED, Pattern, PatternAssignment, PatternLibrary

MAGIC = b"FKW1"
_HEADER = struct.Struct("<4sIIBBHH")
HEADER_BYTES = _HEADER.size


class ConsistencyError(ValueError):
    """Pruned tensor has nonzeros the assignment does not account for."""


def id_bits(p: int) -> int:
    return max(0, math.ceil(math.log2(p))) if p > 1 else 0


@dataclass(frozen=True, eq=False)
class CompressedLayer:
    filters: int
    channels: int
    kh: int
    kw: int
    k: int
    library: np.ndarray  # (P, k) uint8
    permutation: np.ndarray  # (F,) uint16
    directory: bytes
    values: np.ndarray  # (n_present * k,) float32

    @property
    def num_patterns(self) -> int:
        return int(self.library.shape[0])

    @property
    def slot_bits(self) -> int:
        return 1 + id_bits(self.num_patterns)

    @property
    def directory_offset(self) -> int:
        return HEADER_BYTES + self.library.size + 2 * self.filters

    @property
    def nbytes(self) -> int:
        return self.directory_offset + len(self.directory) + 4 * self.values.size

    def to_bytes(self) -> bytes:
        head = _HEADER.pack(MAGIC, self.filters, self.channels, self.kh, self.kw,
                            self.k, self.num_patterns)
        return b"".join([
            head,
            self.library.astype(np.uint8).tobytes(),
            self.permutation.astype("<u2").tobytes(),
            self.directory,
            self.values.astype("<f4").tobytes(),
        ])

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedLayer":
        data = bytes(data)
        if len(data) < HEADER_BYTES:
            raise FormatError("truncated header", len(data))
        magic, f, c, kh, kw, k, p = _HEADER.unpack_from(data, 0)
        if magic != MAGIC:
            raise FormatError("bad magic", 0)
        if p < 1 or k < 1 or kh < 1 or kw < 1:
            raise FormatError("degenerate header field", 4)
        pos = HEADER_BYTES
        need = p * k
        if pos + need > len(data):
            raise FormatError("truncated pattern library", len(data))
        library = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(p, k)
        pos += need
        if pos + 2 * f > len(data):
            raise FormatError("truncated permutation", len(data))
        perm = np.frombuffer(data, dtype="<u2", count=f, offset=pos)
        pos += 2 * f
        dir_len = (f * c * (1 + id_bits(p)) + 7) // 8
        if pos + dir_len > len(data):
            raise FormatError("truncated kernel directory", len(data))
        directory = data[pos:pos + dir_len]
        pos += dir_len
        n_present = int(np.unpackbits(np.frombuffer(directory, dtype=np.uint8))[
            : f * c * (1 + id_bits(p))].reshape(-1, 1 + id_bits(p))[:, 0].sum()) if f * c else 0
        if pos + 4 * k * n_present > len(data):
            raise FormatError("truncated values", len(data))
        values = np.frombuffer(data, dtype="<f4", count=k * n_present, offset=pos)
        pos += 4 * k * n_present
        if pos != len(data):
            raise FormatError(f"{len(data) - pos} trailing bytes", pos)
        layer = cls(f, c, kh, kw, k, library, perm, directory, values)
        _validate_static(layer)
        return layer


def _validate_static(layer: CompressedLayer) -> None:
    cells = layer.kh * layer.kw
    lib_at = HEADER_BYTES
    for i, row in enumerate(layer.library):
        if np.any(row >= cells) or np.any(np.diff(row.astype(int)) <= 0):
            raise FormatError(f"pattern {i} has invalid offsets", lib_at + i * layer.k)
    perm_at = lib_at + layer.library.size
    if sorted(layer.permutation.tolist()) != list(range(layer.filters)):
        raise FormatError("filter permutation is not a permutation", perm_at)


def _decode_directory(layer: CompressedLayer) -> np.ndarray:
    """Pattern id per slot (directory order), REMOVED where absent."""
    nslots = layer.filters * layer.channels
    width = layer.slot_bits
    if len(layer.directory) != (nslots * width + 7) // 8:
        raise FormatError("kernel directory has the wrong length", layer.directory_offset)
    bits = np.unpackbits(np.frombuffer(layer.directory, dtype=np.uint8))[: nslots * width]
    slots = bits.reshape(nslots, width).astype(np.int64)
    weights = 1 << np.arange(width - 2, -1, -1) if width > 1 else np.zeros(0, dtype=np.int64)
    ids = slots[:, 1:] @ weights if width > 1 else np.zeros(nslots, dtype=np.int64)
    present = slots[:, 0].astype(bool)
    bad = np.flatnonzero((ids >= layer.num_patterns) | (~present & (ids != 0)))
    if bad.size:
        slot = int(bad[0])
        raise FormatError(f"invalid directory slot {slot}",
                          layer.directory_offset + (slot * width) // 8)
    return np.where(present, ids, REMOVED)


def compress_fkw(pruned: np.ndarray, assignment: PatternAssignment,
                 permutation: Optional[Sequence[int]] = None) -> CompressedLayer:
    w = np.asarray(pruned)
    f, c, kh, kw = w.shape
    lib = assignment.library
    if assignment.shape != (f, c) or (lib.kh, lib.kw) != (kh, kw):
        raise ConsistencyError(f"tensor {w.shape} does not match assignment {assignment.shape}")
    if len(lib) > 256 or kh * kw > 256 or f > 0xFFFF:
        raise ValueError("FKW supports at most 256 patterns, 256 kernel cells and 65535 filters")
    outside = (w != 0) & ~assignment.mask()
    if outside.any():
        bad = tuple(int(x) for x in np.argwhere(outside)[0])
        raise ConsistencyError(f"nonzero weight at {bad} is off-pattern or in a removed kernel")
    perm = np.arange(f) if permutation is None else np.asarray(permutation, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(f)):
        raise ValueError("permutation must be a permutation of the filter indices")

    width = 1 + id_bits(len(lib))
    ids = assignment.ids[perm].astype(np.int64).ravel()
    present = ids != REMOVED
    slots = np.zeros((ids.size, width), dtype=np.uint8)
    slots[:, 0] = present
    for b in range(1, width):
        slots[:, b] = np.where(present, (ids >> (width - 1 - b)) & 1, 0)
    directory = np.packbits(slots.ravel()).tobytes() if ids.size else b""

    offsets = np.array([p.offsets(kw) for p in lib.patterns], dtype=np.int64)
    flat = w[perm].reshape(f * c, kh * kw)
    rows = np.flatnonzero(present)
    values = np.take_along_axis(flat[rows], offsets[ids[rows]], axis=1).ravel() if rows.size \
        else np.zeros(0)
    return CompressedLayer(
        filters=f, channels=c, kh=kh, kw=kw, k=lib.k,
        library=offsets.astype(np.uint8),
        permutation=perm.astype(np.uint16),
        directory=directory,
        values=values.astype(np.float32),
    )


def decompress_fkw(layer: Union[CompressedLayer, bytes]):
    """Rebuild ``(dense pruned tensor, assignment)`` in the original filter order."""
    if not isinstance(layer, CompressedLayer):
        layer = CompressedLayer.from_bytes(layer)
    _validate_static(layer)
    f, c, kh, kw, k = layer.filters, layer.channels, layer.kh, layer.kw, layer.k
    ids = _decode_directory(layer)
    present = ids != REMOVED
    if int(present.sum()) * k != layer.values.size:
        raise FormatError("value count does not match the directory",
                          layer.directory_offset + len(layer.directory))
    flat = np.zeros((f * c, kh * kw), dtype=np.float32)
    rows = np.flatnonzero(present)
    if rows.size:
        cols = layer.library.astype(np.int64)[ids[rows]]
        flat[rows[:, None], cols] = layer.values.reshape(-1, k)
    perm = layer.permutation.astype(np.int64)
    dense = np.zeros((f, c, kh, kw), dtype=np.float32)
    dense[perm] = flat.reshape(f, c, kh, kw)
    full_ids = np.empty((f, c), dtype=np.int16)
    full_ids[perm] = ids.reshape(f, c)
    library = PatternLibrary(tuple(Pattern.from_offsets(row, kw) for row in layer.library), kh, kw)
    return dense, PatternAssignment(full_ids, library)


@dataclass(frozen=True, eq=False)
class CsrLayer:
    """Filters as rows, flattened (c, kh, kw) as columns; u32 indices, f32 values."""

    shape: tuple
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    @property
    def nbytes(self) -> int:
        return 4 * self.row_ptr.size + 4 * self.col_idx.size + 4 * self.values.size

    def to_dense(self) -> np.ndarray:
        f = self.shape[0]
        out = np.zeros((f, int(np.prod(self.shape[1:]))), dtype=np.float32)
        for row in range(f):
            lo, hi = self.row_ptr[row], self.row_ptr[row + 1]
            out[row, self.col_idx[lo:hi]] = self.values[lo:hi]
        return out.reshape(self.shape)


def encode_csr(pruned: np.ndarray) -> CsrLayer:
    w = np.asarray(pruned)
    mat = w.reshape(w.shape[0], -1)
    rows, cols = np.nonzero(mat)
    counts = np.bincount(rows, minlength=mat.shape[0])
    row_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.uint32)
    return CsrLayer(tuple(w.shape), row_ptr, cols.astype(np.uint32),
                    mat[rows, cols].astype(np.float32))


@dataclass(frozen=True)
class SizeReport:
    fkw_bytes: int
    csr_bytes: int
    ratio: float  # csr / fkw


def compare_sizes(pruned: np.ndarray, assignment: PatternAssignment,
                  permutation: Optional[Sequence[int]] = None) -> SizeReport:
    """Byte sizes of both encodings. A layer with no stored kernel reports ratio 1.0."""
    fkw = compress_fkw(pruned, assignment, permutation)
    csr = encode_csr(pruned)
    if not assignment.present.any():
        return SizeReport(fkw.nbytes, csr.nbytes, 1.0)
    return SizeReport(fkw.nbytes, csr.nbytes, csr.nbytes / fkw.nbytes)


def size_rows_csv(rows: Sequence[tuple]) -> str:
    """CSV text for (layer, SizeReport) pairs."""
    out = ["layer,fkw_bytes,csr_bytes,ratio"]
    for name, rep in rows:
        out.append(f"{name},{rep.fkw_bytes},{rep.csr_bytes},{rep.ratio:.6f}")
    return "\n".join(out) + "\n"
