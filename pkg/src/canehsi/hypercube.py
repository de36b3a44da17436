"""Cube, mask and curve containers plus their on-disk formats.

Cubes are stored in memory as C-ordered ``(height, width, bands)`` float32
arrays, which is exactly band-interleaved-by-pixel: flat index
``((r * width) + c) * bands + b``.

HSC layout (little-endian)::

    b"HSC1" | u32 height | u32 width | u32 bands | u8 kind
    | bands x f32 wavelengths | height*width*bands x f32 payload (BIP)
"""
from __future__ import annotations

import csv
import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HSC_MAGIC = b"HSC1"
_HEADER = struct.Struct("<4sIIIB")
# refuse anything above 2**31 floats; keeps payload offsets in 64-bit range
MAX_ELEMENTS = 2**31


class CubeKind(enum.IntEnum):
    RAW_DN = 0
    REFLECTANCE = 1


class HSCError(ValueError):
    """Base class for malformed cube files."""


class BadMagicError(HSCError):
    pass


class TruncatedError(HSCError):
    pass


class NonFiniteError(HSCError):
    pass


class DimensionOverflowError(HSCError):
    pass


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HyperCube:
    data: np.ndarray
    wavelengths_nm: np.ndarray
    kind: CubeKind = CubeKind.RAW_DN

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (H, W, B), got shape {data.shape}")
        h, w, b = data.shape
        if h == 0 or w == 0 or b == 0:
            raise ValueError(f"zero-sized cube dimension: {data.shape}")
        wl = np.array(self.wavelengths_nm, dtype=np.float32).reshape(-1)
        if wl.size != b:
            raise ValueError(f"{wl.size} wavelengths for {b} bands")
        if b > 1 and not np.all(np.diff(wl) > 0):
            raise ValueError("wavelengths must be strictly increasing")
        if not np.all(np.isfinite(data)):
            raise NonFiniteError("cube contains NaN or Inf")
        kind = CubeKind(self.kind)
        if kind == CubeKind.REFLECTANCE and np.any(data < 0):
            raise ValueError("reflectance cube has negative values")
        object.__setattr__(self, "data", _readonly(data))
        object.__setattr__(self, "wavelengths_nm", _readonly(wl))
        object.__setattr__(self, "kind", kind)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def pixels(self) -> np.ndarray:
        """All spectra as an ``(H*W, B)`` view in row-major pixel order."""
        return self.data.reshape(-1, self.bands)

    def with_data(self, data: np.ndarray, kind: CubeKind | None = None) -> "HyperCube":
        return HyperCube(data, self.wavelengths_nm, self.kind if kind is None else kind)

    def __eq__(self, other):
        if not isinstance(other, HyperCube):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.shape == other.shape
            and np.array_equal(self.wavelengths_nm, other.wavelengths_nm)
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class Mask:
    bits: np.ndarray

    def __post_init__(self):
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {bits.shape}")
        object.__setattr__(self, "bits", _readonly(bits))

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    def check_matches(self, cube: HyperCube) -> None:
        if self.bits.shape != cube.data.shape[:2]:
            raise ValueError(f"mask {self.bits.shape} does not match cube {cube.data.shape[:2]}")

    def __eq__(self, other):
        if not isinstance(other, Mask):
            return NotImplemented
        return np.array_equal(self.bits, other.bits)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SpectralCurve:
    wavelengths_nm: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        wl = np.array(self.wavelengths_nm, dtype=np.float32).reshape(-1)
        vals = np.array(self.values, dtype=np.float32).reshape(-1)
        if wl.size != vals.size:
            raise ValueError(f"curve has {wl.size} wavelengths but {vals.size} values")
        if not np.all(np.isfinite(vals)):
            raise ValueError("curve values must be finite")
        object.__setattr__(self, "wavelengths_nm", _readonly(wl))
        object.__setattr__(self, "values", _readonly(vals))

    def __len__(self):
        return self.values.size

    def __eq__(self, other):
        if not isinstance(other, SpectralCurve):
            return NotImplemented
        return np.array_equal(self.wavelengths_nm, other.wavelengths_nm) and np.array_equal(
            self.values, other.values
        )

    __hash__ = None

    def to_json(self) -> dict:
        return {
            "wavelengths_nm": [float(x) for x in self.wavelengths_nm],
            "values": [float(x) for x in self.values],
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpectralCurve":
        return cls(d["wavelengths_nm"], d["values"])


def pixel_spectrum(cube: HyperCube, r: int, c: int) -> SpectralCurve:
    if not (0 <= r < cube.height and 0 <= c < cube.width):
        raise IndexError(f"pixel ({r}, {c}) outside {cube.height}x{cube.width} cube")
    return SpectralCurve(cube.wavelengths_nm, cube.data[r, c])


# --- HSC cube files -------------------------------------------------------


def save_cube(cube: HyperCube, path) -> None:
    header = _HEADER.pack(HSC_MAGIC, cube.height, cube.width, cube.bands, int(cube.kind))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(cube.wavelengths_nm.astype("<f4").tobytes())
        fh.write(cube.data.astype("<f4").tobytes())


def load_cube(path) -> HyperCube:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != HSC_MAGIC:
        raise BadMagicError(f"{path}: not an HSC1 file (magic {raw[:4]!r})")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header truncated")
    _, h, w, b, kind = _HEADER.unpack_from(raw)
    n = h * w * b
    if n > MAX_ELEMENTS:
        raise DimensionOverflowError(f"{path}: {h}x{w}x{b} exceeds {MAX_ELEMENTS} elements")
    if kind not in (0, 1):
        raise HSCError(f"{path}: unknown cube kind {kind}")
    need = _HEADER.size + 4 * (b + n)
    if len(raw) < need:
        raise TruncatedError(f"{path}: expected {need} bytes, found {len(raw)}")
    off = _HEADER.size
    wl = np.frombuffer(raw, dtype="<f4", count=b, offset=off)
    data = np.frombuffer(raw, dtype="<f4", count=n, offset=off + 4 * b)
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{path}: payload contains NaN or Inf")
    return HyperCube(data.reshape(h, w, b), wl, CubeKind(kind))


# --- PGM masks and maps ---------------------------------------------------


def save_mask_pgm(mask: Mask, path) -> None:
    h, w = mask.bits.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(mask.bits, 255, 0).astype(np.uint8).tobytes())


def save_pgm16(values: np.ndarray, path) -> None:
    """Write a 2-D uint16 array as a binary 16-bit PGM (big-endian per netpbm)."""
    h, w = values.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(np.asarray(values, dtype=">u2").tobytes())


def _pgm_tokens(raw: bytes):
    # header is 4 whitespace-separated tokens with optional '#' comments, then one whitespace byte
    tokens, i = [], 0
    while len(tokens) < 4:
        while i < len(raw) and raw[i : i + 1].isspace():
            i += 1
        if raw[i : i + 1] == b"#":
            while i < len(raw) and raw[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < len(raw) and not raw[j : j + 1].isspace():
            j += 1
        if j == i:
            raise ValueError("truncated PGM header")
        tokens.append(raw[i:j])
        i = j
    return tokens, i + 1


def load_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, start = _pgm_tokens(raw)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    return data.reshape(h, w)


def load_mask_pgm(path) -> Mask:
    return Mask(load_pgm(path) > 127)


# --- curves ---------------------------------------------------------------


def save_curve_csv(curve: SpectralCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["wavelength_nm", "value"])
        for wl, v in zip(curve.wavelengths_nm, curve.values):
            wr.writerow([repr(float(wl)), repr(float(v))])


def load_curve_csv(path) -> SpectralCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if rows[0] != ["wavelength_nm", "value"]:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    body = np.array(rows[1:], dtype=np.float64)
    return SpectralCurve(body[:, 0], body[:, 1])


def even_wavelengths(bands: int, start_nm: float = 690.0, stop_nm: float = 840.0) -> np.ndarray:
    """Evenly spaced band centres; 11 bands over 690-840 nm matches the camera."""
    if bands == 1:
        return np.array([start_nm], dtype=np.float32)
    return np.linspace(start_nm, stop_nm, bands).astype(np.float32)
