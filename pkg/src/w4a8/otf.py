"""OTF tensor files.

Layout (little-endian)::

    b"OTF1" | dtype u8 | ndim u8 | ndim x u64 dims | row-major payload

dtype codes: 0 = f32, 1 = i8, 2 = packed-i4 (two nibbles per byte, low nibble
first), 3 = i32.

A quantized tensor is a directory holding ``payload.otf``, ``scales.otf``,
optional ``zero_points.otf`` and a ``scheme.txt`` of ``key=value`` lines.
Non-uniform clipping factors go to ``clip_gamma.otf``/``clip_beta.otf``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np

from .tensor import (
    DenseTensor,
    Granularity,
    PackedInt4Buffer,
    QuantizedTensor,
    QuantScheme,
)

MAGIC = b"OTF1"
F32, I8, PACKED_I4, I32 = 0, 1, 2, 3

_NUMPY_DTYPES = {F32: np.dtype("<f4"), I8: np.dtype("i1"), I32: np.dtype("<i4")}


class OTFError(ValueError):
    """Base class for malformed OTF input."""


class BadMagicError(OTFError):
    pass


class TruncatedPayloadError(OTFError):
    pass


class UnsupportedDtypeError(OTFError):
    pass


class TrailingDataError(OTFError):
    pass


@dataclass(frozen=True)
class OTFRecord:
    """A decoded file: dtype code, dims and the payload.

    ``data`` is a numpy array shaped ``dims`` for f32/i8/i32, or a
    :class:`PackedInt4Buffer` for packed-i4.
    """

    dtype: int
    dims: Tuple[int, ...]
    data: Union[np.ndarray, PackedInt4Buffer]


def encode(data: Union[np.ndarray, PackedInt4Buffer], dims=None) -> bytes:
    if isinstance(data, PackedInt4Buffer):
        if data.encoding != "sint4":
            raise ValueError("only two's-complement nibbles are stored in OTF files")
        dims = tuple(dims) if dims is not None else (data.element_count,)
        if int(np.prod(dims, dtype=np.int64)) != data.element_count:
            raise ValueError(f"dims {dims} do not match {data.element_count} elements")
        code, payload = PACKED_I4, data.data.tobytes()
    else:
        arr = np.asarray(data)
        for code, dt in _NUMPY_DTYPES.items():
            if arr.dtype == dt or arr.dtype == dt.newbyteorder("="):
                break
        else:
            raise UnsupportedDtypeError(f"cannot store dtype {arr.dtype}")
        dims = tuple(arr.shape) if dims is None else tuple(dims)
        payload = np.ascontiguousarray(arr, dtype=_NUMPY_DTYPES[code]).tobytes()
    if len(dims) > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BB", code, len(dims)) + struct.pack(f"<{len(dims)}Q", *dims)
    return header + payload


def decode(buf: bytes) -> OTFRecord:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}")
    if len(buf) < 6:
        raise TruncatedPayloadError("header truncated")
    code, ndim = struct.unpack_from("<BB", buf, 4)
    if code not in (F32, I8, PACKED_I4, I32):
        raise UnsupportedDtypeError(f"unsupported dtype code {code}")
    off = 6 + 8 * ndim
    if len(buf) < off:
        raise TruncatedPayloadError("dimension table truncated")
    dims = struct.unpack_from(f"<{ndim}Q", buf, 6)
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    if code == PACKED_I4:
        nbytes = (count + 1) // 2
    else:
        nbytes = count * _NUMPY_DTYPES[code].itemsize
    body = buf[off:]
    if len(body) < nbytes:
        raise TruncatedPayloadError(f"payload has {len(body)} bytes, expected {nbytes}")
    if len(body) > nbytes:
        raise TrailingDataError(f"{len(body) - nbytes} unexpected bytes after payload")
    if code == PACKED_I4:
        data = PackedInt4Buffer(np.frombuffer(body, dtype=np.uint8), count)
    else:
        data = np.frombuffer(body, dtype=_NUMPY_DTYPES[code]).reshape(dims).copy()
    return OTFRecord(code, tuple(dims), data)


def write_otf(path, data, dims=None) -> None:
    path = Path(path)
    try:
        path.write_bytes(encode(data, dims))
    except OSError as exc:
        raise OSError(f"cannot write tensor file {path}: {exc.strerror or exc}") from exc


def read_otf(path) -> OTFRecord:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read tensor file {path}: {exc.strerror or exc}") from exc
    try:
        return decode(buf)
    except OTFError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _scheme_text(scheme: QuantScheme) -> str:
    lines = [
        f"bits={scheme.bits}",
        f"symmetric={'true' if scheme.symmetric else 'false'}",
        f"granularity={scheme.granularity.value}",
        f"group_size={scheme.group_size or 0}",
    ]
    for name in ("clip_gamma", "clip_beta"):
        value = getattr(scheme, name)
        if not isinstance(value, tuple):
            lines.append(f"{name}={value!r}")
    return "\n".join(lines) + "\n"


def _parse_scheme(text: str, directory: Path) -> QuantScheme:
    kv = {}
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise OTFError(f"{directory}/scheme.txt: malformed line {raw!r}")
        kv[key.strip()] = value.strip()
    try:
        granularity = Granularity(kv["granularity"])
        group_size = int(kv.get("group_size", "0")) or None
        clips = {}
        for name in ("clip_gamma", "clip_beta"):
            if name in kv:
                clips[name] = float(kv[name])
            elif (directory / f"{name}.otf").exists():
                arr = read_otf(directory / f"{name}.otf").data
                clips[name] = tuple(float(v) for v in np.asarray(arr).reshape(-1))
        return QuantScheme(
            bits=int(kv["bits"]),
            symmetric=kv["symmetric"].lower() == "true",
            granularity=granularity,
            group_size=group_size if granularity is Granularity.PER_GROUP else None,
            **clips,
        )
    except KeyError as exc:
        raise OTFError(f"{directory}/scheme.txt: missing key {exc.args[0]}") from None


def write_tensor(t: Union[DenseTensor, QuantizedTensor], path) -> None:
    """Write a dense tensor as one OTF file, a quantized one as a directory."""
    path = Path(path)
    if isinstance(t, DenseTensor):
        write_otf(path, t.data)
        return
    if not isinstance(t, QuantizedTensor):
        raise TypeError(f"cannot write {type(t).__name__}")
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create tensor directory {path}: {exc.strerror or exc}") from exc
    if isinstance(t.payload, PackedInt4Buffer):
        write_otf(path / "payload.otf", t.payload, t.shape)
    else:
        write_otf(path / "payload.otf", t.codes)
    write_otf(path / "scales.otf", t.scales)
    zp = path / "zero_points.otf"
    if t.zero_points is not None:
        write_otf(zp, t.zero_points)
    elif zp.exists():
        zp.unlink()
    for name in ("clip_gamma", "clip_beta"):
        value = getattr(t.scheme, name)
        f = path / f"{name}.otf"
        if isinstance(value, tuple):
            write_otf(f, np.array(value, dtype=np.float32))
        elif f.exists():
            f.unlink()
    (path / "scheme.txt").write_text(_scheme_text(t.scheme))


def read_tensor(path) -> Union[DenseTensor, QuantizedTensor, OTFRecord]:
    """Read a tensor written by :func:`write_tensor`.

    A directory gives a :class:`QuantizedTensor`; an f32 file of rank 1 or 2
    gives a :class:`DenseTensor`. Other integer files come back as the raw
    :class:`OTFRecord`.
    """
    path = Path(path)
    if path.is_dir():
        return _read_quantized(path)
    rec = read_otf(path)
    if rec.dtype == F32 and len(rec.dims) in (1, 2):
        return DenseTensor(rec.data.reshape(-1, rec.dims[-1]) if len(rec.dims) == 2 else rec.data)
    return rec


def _read_quantized(path: Path) -> QuantizedTensor:
    if not (path / "scheme.txt").exists():
        raise OTFError(f"{path}: not a quantized tensor directory (no scheme.txt)")
    scheme = _parse_scheme((path / "scheme.txt").read_text(), path)
    payload = read_otf(path / "payload.otf")
    if len(payload.dims) != 2:
        raise OTFError(f"{path}/payload.otf: expected 2 dims, got {payload.dims}")
    scales = read_otf(path / "scales.otf").data
    zp = None
    if (path / "zero_points.otf").exists():
        zp = read_otf(path / "zero_points.otf").data
    if payload.dtype not in (I8, PACKED_I4):
        raise UnsupportedDtypeError(f"{path}/payload.otf: quantized payload must be i8 or packed-i4")
    return QuantizedTensor(payload.data, scales, scheme, payload.dims, zero_points=zp)
