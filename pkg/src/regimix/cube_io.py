"""Reading and writing hyperspectral cubes, endmember libraries and maps.

Cubes are held in memory band-sequential, ``data.shape == (bands, rows, cols)``,
as float64. On disk they are ENVI header + raw binary. Endmember libraries are
plain CSV (one band per row) and 2-D maps are exported as CSV or plain PGM.
"""
from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

REFLECTANCE_MIN = -0.05
REFLECTANCE_MAX = 1.5

_RAW_SUFFIXES = ("", ".img", ".raw", ".dat", ".bsq", ".bil", ".bip")
_REQUIRED_KEYS = ("samples", "lines", "bands", "data type", "interleave", "byte order")


class FormatError(ValueError):
    """A file on disk does not follow the documented layout."""


@dataclass
class Cube:
    """A reflectance cube stored as ``(bands, rows, cols)``."""

    data: np.ndarray
    wavelengths: Optional[np.ndarray] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (bands, rows, cols), got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError("bands must be ≥ 1, rows and cols must be ≥ 1")
        if not np.all(np.isfinite(data)):
            raise ValueError("cube contains non-finite values")
        lo, hi = data.min(), data.max()
        if lo < REFLECTANCE_MIN or hi > REFLECTANCE_MAX:
            raise ValueError(
                f"reflectance outside [{REFLECTANCE_MIN}, {REFLECTANCE_MAX}]: min={lo}, max={hi}")
        self.data = data
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (data.shape[0],):
                raise ValueError(f"expected {data.shape[0]} wavelengths, got {wl.size}")
            if np.any(np.diff(wl) <= 0):
                raise ValueError("wavelengths must be strictly increasing")
            self.wavelengths = wl

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def pixels(self) -> np.ndarray:
        """Reflectance clamped to [0, 1] as a ``(rows*cols, bands)`` matrix, row-major pixel order."""
        return np.clip(self.data, 0.0, 1.0).reshape(self.bands, -1).T.copy()


@dataclass
class EndmemberSet:
    """``M`` pure spectra as the columns of a ``(bands, M)`` matrix."""

    spectra: np.ndarray
    names: list = field(default_factory=list)

    def __post_init__(self):
        spectra = np.asarray(self.spectra, dtype=np.float64)
        if spectra.ndim != 2:
            raise ValueError("endmember spectra must be a (bands, M) matrix")
        if spectra.shape[1] < 2:
            raise ValueError("need M ≥ 2 endmembers")
        if spectra.shape[0] < 1:
            raise ValueError("no band rows")
        if not np.all(np.isfinite(spectra)):
            raise ValueError("endmember spectra contain non-finite values")
        if spectra.min() < 0.0 or spectra.max() > 1.0:
            raise ValueError("endmember reflectance must lie in [0, 1]")
        self.spectra = spectra
        if not self.names:
            self.names = [f"em{m}" for m in range(spectra.shape[1])]
        if len(self.names) != spectra.shape[1]:
            raise ValueError("one name per endmember required")
        self.names = [str(n) for n in self.names]

    @property
    def bands(self) -> int:
        return self.spectra.shape[0]

    @property
    def M(self) -> int:
        return self.spectra.shape[1]


# ---------------------------------------------------------------------------
# ENVI

def read_envi_header(header_path) -> dict:
    """Parse an ENVI ``key = value`` header into a dict with lower-case keys.

    Brace-delimited values may span lines; list values come back as lists of
    stripped strings, except ``description`` which stays a single string.
    """
    text = Path(header_path).read_text()
    lines = text.splitlines()
    if not lines or not lines[0].strip().startswith("ENVI"):
        raise FormatError(f"{header_path}: missing 'ENVI' signature on first line")
    header = {}
    i = 1
    while i < len(lines):
        line = lines[i]
        i += 1
        if "=" not in line or line.lstrip().startswith(";"):
            continue
        key, _, value = line.partition("=")
        key = key.strip().lower()
        value = value.strip()
        if value.startswith("{"):
            while not value.endswith("}"):
                if i >= len(lines):
                    raise FormatError(f"{header_path}: unterminated braces for key '{key}'")
                value += " " + lines[i].strip()
                i += 1
            inner = value[1:-1].strip()
            if key == "description":
                header[key] = inner
            else:
                header[key] = [v.strip() for v in inner.split(",") if v.strip()]
        else:
            header[key] = value
    return header


def _header_int(header, key):
    try:
        return int(header[key])
    except KeyError:
        raise FormatError(f"missing required header key '{key}'") from None
    except (TypeError, ValueError):
        raise FormatError(f"header key '{key}' is not an integer: {header[key]!r}") from None


def _find_raw_file(header_path: Path) -> Path:
    stem = header_path.with_suffix("")
    for suffix in _RAW_SUFFIXES:
        candidate = Path(str(stem) + suffix)
        if candidate.is_file() and candidate != header_path:
            return candidate
    raise FormatError(f"no raw data file found next to {header_path}")


def read_envi_cube(header_path) -> Cube:
    """Load an ENVI cube into band-sequential memory order.

    Supports data type 4 (float32) and 12 (uint16). uint16 data are divided
    by the header's ``reflectance scale factor`` (default 10000).
    """
    header_path = Path(header_path)
    header = read_envi_header(header_path)
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise FormatError(f"missing required header key '{key}'")
    samples = _header_int(header, "samples")
    lines = _header_int(header, "lines")
    bands = _header_int(header, "bands")
    if bands < 1:
        raise FormatError("bands must be ≥ 1")
    if samples < 1 or lines < 1:
        raise FormatError("samples and lines must be ≥ 1")
    dtype_code = _header_int(header, "data type")
    byte_order = _header_int(header, "byte order")
    if byte_order not in (0, 1):
        raise FormatError(f"byte order must be 0 or 1, got {byte_order}")
    endian = "<" if byte_order == 0 else ">"
    if dtype_code == 4:
        dtype = np.dtype(endian + "f4")
    elif dtype_code == 12:
        dtype = np.dtype(endian + "u2")
    else:
        raise FormatError(f"unsupported data type {dtype_code} (supported: 4, 12)")
    interleave = str(header["interleave"]).strip().lower()
    if interleave not in ("bsq", "bil", "bip"):
        raise FormatError(f"unsupported interleave '{interleave}'")
    offset = int(header.get("header offset", 0))

    raw_path = _find_raw_file(header_path)
    raw = raw_path.read_bytes()
    expected = offset + samples * lines * bands * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{raw_path}: size {len(raw)} bytes, header implies {expected}")
    flat = np.frombuffer(raw, dtype=dtype, offset=offset)

    if interleave == "bsq":
        data = flat.reshape(bands, lines, samples)
    elif interleave == "bil":
        data = flat.reshape(lines, bands, samples).transpose(1, 0, 2)
    else:
        data = flat.reshape(lines, samples, bands).transpose(2, 0, 1)
    data = data.astype(np.float64)
    if dtype_code == 12:
        scale = float(header.get("reflectance scale factor", 10000.0))
        if scale <= 0:
            raise FormatError("reflectance scale factor must be positive")
        data = data / scale
    if not np.all(np.isfinite(data)):
        raise FormatError(f"{raw_path}: non-finite values in cube")

    wavelengths = None
    if "wavelength" in header:
        try:
            wavelengths = np.array([float(v) for v in header["wavelength"]])
        except (TypeError, ValueError):
            raise FormatError("unparsable wavelength list") from None
    try:
        return Cube(np.ascontiguousarray(data), wavelengths)
    except ValueError as exc:
        raise FormatError(f"{header_path}: {exc}") from None


def write_envi_cube(cube: Cube, header_path) -> None:
    """Write ``cube`` as little-endian float32 BSQ; the raw file gets suffix ``.img``.

    Values are validated before anything touches the disk, and are rounded
    to float32 on write.
    """
    if not str(header_path):
        raise ValueError("empty header path")
    data = np.asarray(cube.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("refusing to write a cube with non-finite values")
    header_path = Path(header_path)
    raw_path = header_path.with_suffix(".img")
    bands, rows, cols = data.shape
    lines = [
        "ENVI",
        "description = {regimix cube}",
        f"samples = {cols}",
        f"lines = {rows}",
        f"bands = {bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        "interleave = bsq",
        "byte order = 0",
    ]
    if cube.wavelengths is not None:
        lines.append("wavelength units = Nanometers")
        lines.append("wavelength = {" + ", ".join(repr(float(w)) for w in cube.wavelengths) + "}")
    payload = data.astype("<f4").tobytes(order="C")
    raw_path.write_bytes(payload)
    header_path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Endmember CSV

def read_endmembers_csv(path) -> EndmemberSet:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise FormatError(f"{path}: empty file")
    names = [c.strip() for c in rows[0]]
    if len(names) < 2:
        raise FormatError(f"{path}: need M ≥ 2 endmember columns")
    body = rows[1:]
    if not body:
        raise FormatError(f"{path}: no band rows")
    values = []
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(names):
            raise FormatError(f"{path}:{lineno}: ragged row ({len(row)} cells, expected {len(names)})")
        try:
            values.append([float(c) for c in row])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric cell") from None
    try:
        return EndmemberSet(np.array(values), names)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_endmembers_csv(endmembers: EndmemberSet, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(endmembers.names)
        for row in endmembers.spectra:
            writer.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Maps

def _pgm_levels(values: np.ndarray):
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros(values.shape, dtype=np.int64), lo, hi
    scaled = (values - lo) / (hi - lo) * 255.0
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.int64), lo, hi


def write_map(values, path, format: str = "csv", mask: Optional[np.ndarray] = None) -> None:
    """Export a 2-D map as CSV (full precision) or plain P2 PGM.

    PGM values are min-max scaled onto 0..255, a constant map becomes all
    zeros, and the scaling is recorded as ``# min=<a> max=<b>``. Pixels where
    ``mask`` is True are written as ``nan`` in CSV and 0 in PGM, and do not
    take part in the scaling.
    """
    if not str(path):
        raise ValueError("empty output path")
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"map must be 2-D, got shape {values.shape}")
    valid = np.ones(values.shape, dtype=bool) if mask is None else ~np.asarray(mask, dtype=bool)
    if not np.all(np.isfinite(values[valid])):
        raise ValueError("map contains non-finite unmasked values")
    if format == "csv":
        with open(path, "w") as fh:
            for r in range(values.shape[0]):
                cells = []
                for c in range(values.shape[1]):
                    if not valid[r, c]:
                        cells.append("nan")
                    elif np.issubdtype(values.dtype, np.integer):
                        cells.append(str(int(values[r, c])))
                    else:
                        cells.append(repr(float(values[r, c])))
                fh.write(",".join(cells) + "\n")
    elif format == "pgm":
        levels = np.zeros(values.shape, dtype=np.int64)
        if valid.any():
            lv, lo, hi = _pgm_levels(values[valid].astype(np.float64))
            levels[valid] = lv
        else:
            lo = hi = 0.0
        rows, cols = values.shape
        out = ["P2", f"# min={lo!r} max={hi!r}", f"{cols} {rows}", "255"]
        out += [" ".join(str(v) for v in row) for row in levels]
        with open(path, "w") as fh:
            fh.write("\n".join(out) + "\n")
    else:
        raise ValueError(f"unknown map format {format!r} (expected 'csv' or 'pgm')")


def read_map_csv(path) -> np.ndarray:
    with open(path) as fh:
        rows = [[float(c) for c in line.strip().split(",")] for line in fh if line.strip()]
    return np.array(rows)


def read_pgm(path):
    """Read a plain P2 PGM written by :func:`write_map`; returns ``(levels, lo, hi)``."""
    text = Path(path).read_text()
    lo = hi = None
    tokens = []
    for line in text.splitlines():
        if line.startswith("#"):
            m = re.match(r"#\s*min=(\S+)\s+max=(\S+)", line)
            if m:
                lo, hi = float(m.group(1)), float(m.group(2))
            continue
        tokens += line.split()
    if not tokens or tokens[0] != "P2":
        raise FormatError(f"{path}: not a plain P2 PGM")
    cols, rows, _maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    levels = np.array([int(t) for t in tokens[4:]], dtype=np.int64)
    if levels.size != rows * cols:
        raise FormatError(f"{path}: expected {rows * cols} pixels, found {levels.size}")
    return levels.reshape(rows, cols), lo, hi


def as_spectra(E) -> np.ndarray:
    """Accept an :class:`EndmemberSet` or a plain ``(bands, M)`` array."""
    return np.asarray(getattr(E, "spectra", E), dtype=np.float64)


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path


def maps_from_pixels(values: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Reshape per-pixel values ``(N, ...)`` in row-major order back to ``(..., rows, cols)``."""
    values = np.asarray(values)
    if values.ndim == 1:
        return values.reshape(rows, cols)
    return np.moveaxis(values.reshape(rows, cols, *values.shape[1:]), (0, 1), (-2, -1))


__all__: Sequence[str] = [
    "Cube", "EndmemberSet", "FormatError", "read_envi_header", "read_envi_cube",
    "write_envi_cube", "read_endmembers_csv", "write_endmembers_csv", "write_map",
    "read_map_csv", "read_pgm", "as_spectra", "maps_from_pixels",
]
