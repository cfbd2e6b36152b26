"""Cube data model and ENVI band-sequential I/O.

A cube stores reflectance as a band-major matrix ``data`` of shape (M, L),
where pixel ``l = row * width + col`` (row-major flattening). Every spatial
operation in the package relies on that convention.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    DimensionMismatch,
    HeaderParse,
    NonFinite,
    PayloadSizeMismatch,
    UnsupportedInterleave,
    WavelengthOrder,
)

RES_FACTORS = {"HR": 1, "MED": 2, "LOW": 6}  # block side; replication = side**2
DEFAULT_SCALE = 10000.0

_ENVI_DTYPES = {
    2: np.dtype("int16"),
    4: np.dtype("float32"),
    5: np.dtype("float64"),
    12: np.dtype("uint16"),
}


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class HyperCube:
    """Band-major reflectance matrix with its spatial grid and band centers."""

    data: np.ndarray
    width: int
    height: int
    wavelengths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _frozen(np.atleast_2d(self.data)))
        object.__setattr__(self, "wavelengths", _frozen(np.atleast_1d(self.wavelengths)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def n_bands(self) -> int:
        return self.data.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[1]

    def image(self) -> np.ndarray:
        """View of the data as (bands, height, width)."""
        return self.data.reshape(self.n_bands, self.height, self.width)

    @classmethod
    def from_image(cls, img, wavelengths) -> "HyperCube":
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 2:
            img = img[None]
        m, h, w = img.shape
        return cls(img.reshape(m, h * w), w, h, wavelengths)

    def with_data(self, data) -> "HyperCube":
        """Same grid and wavelengths, new band-major data."""
        return HyperCube(data, self.width, self.height, self.wavelengths)


@dataclass(frozen=True, eq=False)
class MultiResCube:
    """Multispectral cube on the finest grid with per-band resolution tags."""

    cube: HyperCube
    res_class: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "res_class", tuple(str(c).upper() for c in self.res_class))

    @property
    def hr_indices(self) -> list[int]:
        return [i for i, c in enumerate(self.res_class) if c == "HR"]


@dataclass(frozen=True, eq=False)
class SrtMatrix:
    """Spectral response transform: row i integrates HSI bands into MSI band i."""

    d: np.ndarray = field()

    def __post_init__(self):
        object.__setattr__(self, "d", _frozen(np.atleast_2d(self.d)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.d.shape


def validate_cube(cube: HyperCube) -> None:
    """Raise if any HyperCube invariant fails; return None otherwise."""
    if cube.data.ndim != 2:
        raise DimensionMismatch(f"data must be 2-D, got ndim={cube.data.ndim}")
    if cube.width < 1 or cube.height < 1 or cube.n_pixels != cube.width * cube.height:
        raise DimensionMismatch(
            f"pixel count {cube.n_pixels} != width*height = {cube.width}*{cube.height}"
        )
    if cube.wavelengths.shape != (cube.n_bands,):
        raise DimensionMismatch(
            f"{cube.wavelengths.size} wavelengths for {cube.n_bands} bands"
        )
    if not np.all(np.isfinite(cube.data)):
        raise NonFinite("cube contains NaN or Inf")
    if not np.all(np.isfinite(cube.wavelengths)):
        raise NonFinite("wavelengths contain NaN or Inf")
    if np.any(np.diff(cube.wavelengths) <= 0):
        raise WavelengthOrder("wavelengths must be strictly increasing")


def validate_multires(mr: MultiResCube) -> None:
    validate_cube(mr.cube)
    cube = mr.cube
    if len(mr.res_class) != cube.n_bands:
        raise DimensionMismatch(f"{len(mr.res_class)} resolution tags for {cube.n_bands} bands")
    unknown = set(mr.res_class) - set(RES_FACTORS)
    if unknown:
        raise DimensionMismatch(f"unknown resolution classes {sorted(unknown)}")
    if "HR" not in mr.res_class:
        raise DimensionMismatch("at least one band must be tagged HR")
    img = cube.image()
    for b, cls in enumerate(mr.res_class):
        s = RES_FACTORS[cls]
        if s == 1:
            continue
        if cube.height % s or cube.width % s:
            raise DimensionMismatch(f"{cls} band {b} needs dims divisible by {s}")
        blocks = img[b].reshape(cube.height // s, s, cube.width // s, s)
        if np.any(blocks != blocks[:, :1, :, :1]):
            raise DimensionMismatch(f"{cls} band {b} is not constant over {s}x{s} blocks")


def validate_srt(srt: SrtMatrix, n_bands_h: int | None = None) -> None:
    d = srt.d
    mm, m = d.shape
    if mm >= m:
        raise DimensionMismatch(f"SRT must have fewer rows than columns, got {d.shape}")
    if n_bands_h is not None and m != n_bands_h:
        raise DimensionMismatch(f"SRT has {m} columns, cube has {n_bands_h} bands")
    if not np.all(np.isfinite(d)):
        raise NonFinite("SRT contains NaN or Inf")
    if np.any(d < 0):
        raise DimensionMismatch("SRT entries must be nonnegative")
    if np.any(d.max(axis=1) <= 0):
        raise DimensionMismatch("every SRT row needs a positive entry")


# ---------------------------------------------------------------------------
# ENVI I/O
# ---------------------------------------------------------------------------


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".hdr", ".bsq"):
        p = p.with_suffix("")
    return p.with_suffix(".hdr"), p.with_suffix(".bsq")


def _fmt_list(values) -> str:
    return "{" + ", ".join(values) + "}"


def write_envi(
    cube: HyperCube,
    path,
    res_class: Sequence[str] | None = None,
    extra: dict | None = None,
) -> Path:
    """Write ``cube`` as ``<path>.hdr`` + ``<path>.bsq`` (float32, little endian).

    The payload is stored already normalized, so the header declares a
    reflectance scale factor of 1.
    """
    validate_cube(cube)
    hdr, bsq = _paths(path)
    lines = [
        "ENVI",
        f"samples = {cube.width}",
        f"lines = {cube.height}",
        f"bands = {cube.n_bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        "interleave = bsq",
        "byte order = 0",
        "reflectance scale factor = 1",
        "wavelength units = Nanometers",
        "wavelength = " + _fmt_list(repr(float(w)) for w in cube.wavelengths),
    ]
    if res_class is not None:
        lines.append("resolution class = " + _fmt_list(str(c).upper() for c in res_class))
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    hdr.parent.mkdir(parents=True, exist_ok=True)
    hdr.write_text("\n".join(lines) + "\n")
    cube.data.astype("<f4").tofile(bsq)
    return hdr


def parse_header(text: str) -> dict[str, str]:
    """Parse an ENVI header into a lower-cased ``key -> raw value`` mapping."""
    body = text.lstrip("﻿").splitlines()
    if not body or body[0].strip() != "ENVI":
        raise HeaderParse("header must start with 'ENVI'")
    out: dict[str, str] = {}
    i = 1
    while i < len(body):
        line = body[i]
        i += 1
        if not line.strip() or line.lstrip().startswith(";"):
            continue
        if "=" not in line:
            raise HeaderParse(f"malformed header line: {line!r}")
        key, value = line.split("=", 1)
        value = value.strip()
        if value.startswith("{"):
            while "}" not in value:
                if i >= len(body):
                    raise HeaderParse(f"unterminated brace list for {key.strip()!r}")
                value += " " + body[i].strip()
                i += 1
        out[key.strip().lower()] = value
    return out


def _brace_list(value: str) -> list[str]:
    value = value.strip()
    if not (value.startswith("{") and value.endswith("}")):
        raise HeaderParse(f"expected brace list, got {value!r}")
    return [t.strip() for t in value[1:-1].split(",") if t.strip()]


def _int_key(hdr: dict, key: str) -> int:
    try:
        return int(hdr[key])
    except KeyError:
        raise HeaderParse(f"missing header key {key!r}") from None
    except ValueError:
        raise HeaderParse(f"non-integer value for {key!r}: {hdr[key]!r}") from None


def _read(path) -> tuple[HyperCube, dict]:
    hdr_path, bsq_path = _paths(path)
    try:
        hdr = parse_header(hdr_path.read_text())
    except UnicodeDecodeError as exc:
        raise HeaderParse(str(exc)) from exc
    samples, lines_, bands = (_int_key(hdr, k) for k in ("samples", "lines", "bands"))
    interleave = hdr.get("interleave", "bsq").strip().lower()
    if interleave != "bsq":
        raise UnsupportedInterleave(f"interleave {interleave!r} is not band-sequential")
    dtype_code = _int_key(hdr, "data type")
    if dtype_code not in _ENVI_DTYPES:
        raise HeaderParse(f"unsupported data type {dtype_code}")
    dtype = _ENVI_DTYPES[dtype_code].newbyteorder(
        ">" if hdr.get("byte order", "0").strip() == "1" else "<"
    )
    offset = int(hdr.get("header offset", "0"))
    expected = samples * lines_ * bands * dtype.itemsize
    actual = os.path.getsize(bsq_path) - offset
    if actual != expected:
        raise PayloadSizeMismatch(
            f"payload holds {actual} bytes, header implies {expected}"
        )
    raw = np.fromfile(bsq_path, dtype=dtype, offset=offset)
    scale = float(hdr.get("reflectance scale factor", DEFAULT_SCALE))
    data = raw.astype(np.float64).reshape(bands, lines_ * samples)
    if scale != 1.0:
        data = data / scale
    if "wavelength" in hdr:
        try:
            wl = [float(t) for t in _brace_list(hdr["wavelength"])]
        except ValueError as exc:
            raise HeaderParse(f"bad wavelength list: {exc}") from exc
    else:
        wl = list(range(bands))
    if len(wl) != bands:
        raise HeaderParse(f"{len(wl)} wavelengths listed for {bands} bands")
    cube = HyperCube(data, samples, lines_, wl)
    validate_cube(cube)
    return cube, hdr


def read_envi(path) -> HyperCube:
    return _read(path)[0]


def read_multires(path) -> MultiResCube:
    cube, hdr = _read(path)
    if "resolution class" in hdr:
        classes = tuple(_brace_list(hdr["resolution class"]))
    else:
        classes = ("HR",) * cube.n_bands
    mr = MultiResCube(cube, classes)
    validate_multires(mr)
    return mr


def write_multires(mr: MultiResCube, path) -> Path:
    validate_multires(mr)
    return write_envi(mr.cube, path, res_class=mr.res_class)


def read_srt_csv(path) -> SrtMatrix:
    """Load an SRT matrix stored as comma-separated rows (one row per MSI band)."""
    d = np.loadtxt(path, delimiter=",", ndmin=2)
    return SrtMatrix(d)


def write_srt_csv(srt: SrtMatrix, path) -> None:
    np.savetxt(path, srt.d, delimiter=",", fmt="%.17g")
