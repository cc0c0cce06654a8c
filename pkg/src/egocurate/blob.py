"""Versioned little-endian binary containers for KDE models and feature matrices.

Layout (both kinds)::

    magic      4 bytes   b"EGKD" (model) or b"EGFM" (feature matrix)
    version    uint16    currently 1
    mode       uint16    0 = shared bandwidths, 1 = per-point (models only)
    property   uint16    index into PROPERTIES, 0xFFFF when unset
    (pad)      2 bytes
    n          uint64    rows
    d          uint64    columns
    proj_in    uint64    input dimension of the stored projection, 0 if none

followed by float64 little-endian values: the ``n x d`` points, then the
bandwidths (``d`` values in shared mode, ``n`` in per-point mode), then,
when ``proj_in > 0``, the projection mean (``proj_in``) and components
(``d x proj_in``). A feature matrix has only the ``n x d`` block.
"""

from __future__ import annotations

import struct

import numpy as np

from . import PROPERTIES, DataError
from .kde import DensityModel, Projection

MODEL_MAGIC = b"EGKD"
FEATURE_MAGIC = b"EGFM"
VERSION = 1
_HEADER = struct.Struct("<4sHHH2xQQQ")
_NO_PROPERTY = 0xFFFF
_MODES = ("shared", "per_point")


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def dump_model(model: DensityModel, prop: str | None = None) -> bytes:
    proj = model.projection
    proj_in = 0 if proj is None else proj.mean.size
    code = _NO_PROPERTY if prop is None else PROPERTIES.index(prop)
    head = _HEADER.pack(MODEL_MAGIC, VERSION, _MODES.index(model.mode), code, model.n, model.dim, proj_in)
    body = _f64(model.points) + _f64(model.bandwidths)
    if proj is not None:
        body += _f64(proj.mean) + _f64(proj.components)
    return head + body


def _read(buf, offset, count):
    end = offset + 8 * count
    if end > len(buf):
        raise DataError("truncated blob")
    return np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64), end


def _header(buf, magic):
    if len(buf) < _HEADER.size:
        raise DataError("truncated blob header")
    got, version, mode, code, n, d, proj_in = _HEADER.unpack_from(buf)
    if got != magic:
        raise DataError(f"bad magic {got!r}, expected {magic!r}")
    if version != VERSION:
        raise DataError(f"unsupported blob version {version}")
    return mode, code, n, d, proj_in


def load_model(buf: bytes) -> tuple[DensityModel, str | None]:
    mode, code, n, d, proj_in = _header(buf, MODEL_MAGIC)
    if mode >= len(_MODES):
        raise DataError(f"unknown model mode {mode}")
    pts, off = _read(buf, _HEADER.size, n * d)
    bw, off = _read(buf, off, d if mode == 0 else n)
    proj = None
    if proj_in:
        mean, off = _read(buf, off, proj_in)
        comps, off = _read(buf, off, d * proj_in)
        proj = Projection(mean, comps.reshape(d, proj_in))
    if off != len(buf):
        raise DataError("trailing bytes after model body")
    prop = None if code == _NO_PROPERTY else PROPERTIES[code]
    return DensityModel(pts.reshape(n, d), bw, _MODES[mode], (), proj), prop


def dump_matrix(x) -> bytes:
    a = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return _HEADER.pack(FEATURE_MAGIC, VERSION, 0, _NO_PROPERTY, a.shape[0], a.shape[1], 0) + _f64(a)


def load_matrix(buf: bytes) -> np.ndarray:
    _, _, n, d, _ = _header(buf, FEATURE_MAGIC)
    vals, off = _read(buf, _HEADER.size, n * d)
    if off != len(buf):
        raise DataError("trailing bytes after matrix body")
    return vals.reshape(n, d)
