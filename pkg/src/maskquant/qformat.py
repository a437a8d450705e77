"""Bit-exact packed storage of quantized layers ("QPK1").

File layout, all integers little-endian:

    magic        4 bytes  b"QPK1"
    layer_count  u32
    per layer:
        name_len   u16, then UTF-8 name bytes
        rows m     u64 x 3   (rows, cols, group_width)
        row_mean   u8 flag; if 1, rows x float16
        num_groups u64
        per group, in column order:
            cols   u64      (columns in this group)
            order  u8       (number of binary terms)
            planes order x ceil(rows*cols/64) x u64
            alpha_r order x rows x float16
            alpha_c order x cols x float16

Sign planes are packed row-major, LSB-first within each 64-bit word, bit 1
meaning +1; trailing pad bits are zero and are verified on decode. Scales
are stored half precision and widened before any arithmetic.

The byte accounting in :func:`memory_estimate` mirrors this writer exactly,
so an estimate over the same layer descriptions equals the encoded file
size.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .daq import QuantizedGroup
from .errors import ShapeError

MAGIC = b"QPK1"
_MAX_ORDER = 3


class QpkFormatError(Exception):
    """Malformed QPK payload."""


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """Pack a +-1 matrix into u64 words: row-major bits, LSB first, +1 -> 1."""
    signs = np.asarray(signs)
    if signs.ndim != 2:
        raise ShapeError("sign matrix must be 2-D")
    if not np.isin(signs, (-1, 1)).all():
        raise ValueError("sign matrix entries must be +-1")
    bits = (signs > 0).astype(np.uint8).ravel()
    pad = (-bits.size) % 64
    if pad:
        bits = np.concatenate([bits, np.zeros(pad, dtype=np.uint8)])
    packed = np.packbits(bits, bitorder="little")
    return packed.view("<u8").copy()


def unpack_signs(words: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`pack_signs`; rejects nonzero padding bits."""
    words = np.asarray(words, dtype="<u8")
    expected = (rows * cols + 63) // 64
    if words.size != expected:
        raise QpkFormatError(f"plane has {words.size} words, expected {expected}")
    bits = np.unpackbits(words.view(np.uint8), bitorder="little")
    if bits[rows * cols :].any():
        raise QpkFormatError("nonzero padding bits in sign plane")
    plane = bits[: rows * cols].reshape(rows, cols)
    return np.where(plane, 1, -1).astype(np.int8)


@dataclass
class PackedGroup:
    rows: int
    cols: int
    order: int
    planes: np.ndarray   # (order, words) u64
    alpha_r: np.ndarray  # (order, rows) float16
    alpha_c: np.ndarray  # (order, cols) float16


@dataclass
class QpkLayer:
    name: str
    rows: int
    cols: int
    group_width: int
    row_mean: np.ndarray | None  # (rows,) float16
    groups: list[PackedGroup]

    def column_ranges(self) -> list[tuple[int, int]]:
        ranges = []
        start = 0
        for g in self.groups:
            ranges.append((start, start + g.cols))
            start += g.cols
        return ranges


def pack_group(group: QuantizedGroup) -> PackedGroup:
    rows, cols = group.shape
    return PackedGroup(
        rows=rows,
        cols=cols,
        order=len(group.orders),
        planes=np.stack([pack_signs(term.signs) for term in group.orders]),
        alpha_r=np.stack([term.alpha_r.astype(np.float16) for term in group.orders]),
        alpha_c=np.stack([term.alpha_c.astype(np.float16) for term in group.orders]),
    )


def build_layer(
    name: str,
    groups: Sequence[QuantizedGroup],
    group_width: int,
    cols: int,
    row_mean: np.ndarray | None = None,
) -> QpkLayer:
    """Assemble per-group fits into one encodable layer record."""
    if not groups:
        raise ShapeError("layer needs at least one group")
    rows = groups[0].shape[0]
    if any(g.shape[0] != rows for g in groups):
        raise ShapeError("groups disagree on row count")
    if sum(g.shape[1] for g in groups) != cols:
        raise ShapeError("group widths do not sum to the layer's columns")
    mean16 = None
    if row_mean is not None:
        mean16 = np.asarray(row_mean, dtype=np.float16)
        if mean16.shape != (rows,):
            raise ShapeError(f"row_mean shape {mean16.shape}, expected ({rows},)")
    return QpkLayer(
        name=name,
        rows=rows,
        cols=cols,
        group_width=group_width,
        row_mean=mean16,
        groups=[pack_group(g) for g in groups],
    )


def dequantize_group(group: PackedGroup) -> np.ndarray:
    """Widen scales to float32 and sum the sign terms; no row mean."""
    out = np.zeros((group.rows, group.cols), dtype=np.float32)
    for k in range(group.order):
        signs = unpack_signs(group.planes[k], group.rows, group.cols)
        scale = np.outer(
            group.alpha_r[k].astype(np.float32), group.alpha_c[k].astype(np.float32)
        )
        out += scale * signs
    return out


def dequantize(layer: QpkLayer) -> np.ndarray:
    """Full layer reconstruction including the stored row mean."""
    out = np.zeros((layer.rows, layer.cols), dtype=np.float32)
    for (start, end), group in zip(layer.column_ranges(), layer.groups):
        out[:, start:end] = dequantize_group(group)
    if layer.row_mean is not None:
        out += layer.row_mean.astype(np.float32)[:, None]
    return out


def rc_matvec(layer: QpkLayer, x: np.ndarray) -> np.ndarray:
    """Multiply the packed layer by a vector without materializing it.

    Per term, the column scales fold into the input once (v = alpha_c * x),
    and the bit plane contributes masked adds: sum_j B_ij v_j =
    2 * (plane @ v) - sum(v). Matches dense dequantize-then-multiply to
    float rounding.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (layer.cols,):
        raise ShapeError(f"vector has shape {x.shape}, layer expects ({layer.cols},)")
    y = np.zeros(layer.rows, dtype=np.float64)
    if layer.row_mean is not None:
        y += layer.row_mean.astype(np.float64) * x.sum()
    for (start, end), group in zip(layer.column_ranges(), layer.groups):
        xg = x[start:end]
        for k in range(group.order):
            plane = unpack_signs(group.planes[k], group.rows, group.cols) > 0
            v = group.alpha_c[k].astype(np.float64) * xg
            row_dot = 2.0 * (plane @ v) - v.sum()
            y += group.alpha_r[k].astype(np.float64) * row_dot
    return y


# --- encoding ---------------------------------------------------------------


def _plane_words(rows: int, cols: int) -> int:
    return (rows * cols + 63) // 64


def write_qpk(path: str | os.PathLike, layers: Sequence[QpkLayer]) -> None:
    buf = bytearray()
    buf += MAGIC
    buf += struct.pack("<I", len(layers))
    for layer in layers:
        name = layer.name.encode("utf-8")
        buf += struct.pack("<H", len(name))
        buf += name
        buf += struct.pack("<QQQ", layer.rows, layer.cols, layer.group_width)
        if layer.row_mean is not None:
            buf += b"\x01"
            buf += layer.row_mean.astype("<f2").tobytes()
        else:
            buf += b"\x00"
        buf += struct.pack("<Q", len(layer.groups))
        for g in layer.groups:
            buf += struct.pack("<QB", g.cols, g.order)
            buf += g.planes.astype("<u8").tobytes()
            buf += g.alpha_r.astype("<f2").tobytes()
            buf += g.alpha_c.astype("<f2").tobytes()
    Path(path).write_bytes(bytes(buf))


class _Reader:
    def __init__(self, raw: bytes, label: str):
        self.raw = raw
        self.pos = 0
        self.label = label

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise QpkFormatError(f"{self.label}: truncated at byte {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_qpk(path: str | os.PathLike) -> list[QpkLayer]:
    raw = Path(path).read_bytes()
    rd = _Reader(raw, str(path))
    if rd.take(4) != MAGIC:
        raise QpkFormatError(f"{path}: not a QPK1 file")
    (layer_count,) = rd.unpack("<I")
    layers = []
    for _ in range(layer_count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("utf-8")
        rows, cols, group_width = rd.unpack("<QQQ")
        if rows < 1 or cols < 1 or group_width < 1:
            raise QpkFormatError(f"{path}: implausible shape for layer {name!r}")
        (has_mean,) = rd.unpack("<B")
        row_mean = None
        if has_mean == 1:
            row_mean = np.frombuffer(rd.take(2 * rows), dtype="<f2").copy()
        elif has_mean != 0:
            raise QpkFormatError(f"{path}: bad row-mean flag {has_mean}")
        (num_groups,) = rd.unpack("<Q")
        groups = []
        covered = 0
        for _ in range(num_groups):
            g_cols, order = rd.unpack("<QB")
            if not 1 <= order <= _MAX_ORDER:
                raise QpkFormatError(f"{path}: bad order {order} in layer {name!r}")
            if g_cols < 1 or covered + g_cols > cols:
                raise QpkFormatError(f"{path}: group overruns layer {name!r}")
            words = _plane_words(rows, g_cols)
            planes = np.frombuffer(rd.take(8 * words * order), dtype="<u8").reshape(
                order, words
            ).copy()
            alpha_r = np.frombuffer(rd.take(2 * rows * order), dtype="<f2").reshape(
                order, rows
            ).copy()
            alpha_c = np.frombuffer(rd.take(2 * g_cols * order), dtype="<f2").reshape(
                order, g_cols
            ).copy()
            for k in range(order):
                unpack_signs(planes[k], rows, g_cols)  # validates padding bits
            groups.append(
                PackedGroup(
                    rows=rows,
                    cols=g_cols,
                    order=order,
                    planes=planes,
                    alpha_r=alpha_r,
                    alpha_c=alpha_c,
                )
            )
            covered += g_cols
        if covered != cols:
            raise QpkFormatError(f"{path}: groups cover {covered} of {cols} columns")
        layers.append(
            QpkLayer(
                name=name,
                rows=rows,
                cols=cols,
                group_width=group_width,
                row_mean=row_mean,
                groups=groups,
            )
        )
    if rd.pos != len(raw):
        raise QpkFormatError(f"{path}: {len(raw) - rd.pos} trailing bytes")
    return layers


# --- size accounting ---------------------------------------------------------


@dataclass(frozen=True)
class LayerShape:
    """Description of one quantized layer for size estimation."""

    name: str
    rows: int
    cols: int
    group_width: int = 128
    orders: int | Sequence[int] = 2  # uniform order, or one per group
    row_mean: bool = True

    def group_cols(self) -> list[int]:
        return [
            min(self.group_width, self.cols - start)
            for start in range(0, self.cols, self.group_width)
        ]

    def group_orders(self) -> list[int]:
        n_groups = len(self.group_cols())
        if isinstance(self.orders, int):
            return [self.orders] * n_groups
        orders = list(self.orders)
        if len(orders) != n_groups:
            raise ShapeError(
                f"{self.name}: {len(orders)} orders for {n_groups} groups"
            )
        return orders


def memory_estimate(layers: Sequence[LayerShape], fp16_params: int = 0) -> int:
    """Exact encoded size in bytes of the described layers, headers included,
    plus two bytes per parameter kept in half precision outside the file."""
    total = 4 + 4  # magic + layer count
    for layer in layers:
        total += 2 + len(layer.name.encode("utf-8"))
        total += 8 * 3 + 1
        if layer.row_mean:
            total += 2 * layer.rows
        total += 8
        for g_cols, order in zip(layer.group_cols(), layer.group_orders()):
            total += 8 + 1
            total += order * 8 * _plane_words(layer.rows, g_cols)
            total += order * 2 * (layer.rows + g_cols)
    return total + 2 * fp16_params


def describe_qpk(layers: Sequence[QpkLayer]) -> list[LayerShape]:
    """Layer descriptions matching already-encoded data, for size checks."""
    return [
        LayerShape(
            name=layer.name,
            rows=layer.rows,
            cols=layer.cols,
            group_width=layer.group_width,
            orders=[g.order for g in layer.groups],
            row_mean=layer.row_mean is not None,
        )
        for layer in layers
    ]


def gigabytes(size_bytes: int) -> float:
    """Decimal gigabytes, the convention used in model-size tables."""
    return size_bytes / 1e9


def llada8b_like_layers() -> tuple[list[LayerShape], int]:
    """Size-estimation stand-in for an 8B-parameter masked diffusion model.

    Assumptions: 32 transformer blocks with hidden width 4096 and MLP width
    12288; per block, four 4096x4096 attention projections plus gate/up
    (12288x4096) and down (4096x12288) MLP projections, all quantized at a
    2-bit average with 128-column groups, half-precision scales, and stored
    row means. Tied-size embedding and output head (vocab 126464 x 4096)
    stay in half precision. Roughly 7.0e9 quantized and 1.0e9 half-precision
    parameters.
    """
    layers = []
    for block in range(32):
        for suffix, rows, cols in (
            ("attn.q", 4096, 4096),
            ("attn.k", 4096, 4096),
            ("attn.v", 4096, 4096),
            ("attn.o", 4096, 4096),
            ("mlp.gate", 12288, 4096),
            ("mlp.up", 12288, 4096),
            ("mlp.down", 4096, 12288),
        ):
            layers.append(
                LayerShape(name=f"block{block}.{suffix}", rows=rows, cols=cols)
            )
    fp16_params = 2 * 126464 * 4096
    return layers, fp16_params
