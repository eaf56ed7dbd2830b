"""Regular-grid rasters in the ESRI ASCII grid text format.

Values are held as a 2-D float64 array of shape ``(nrows, ncols)`` with row 0
the northernmost row, exactly as they appear in the file.  Cells equal to the
header's nodata sentinel are treated as missing by every statistic.

Number formatting is canonical: a value is written with six decimals
(``%.6f``) whenever that string parses back to the identical float, and with
the shortest round-trip representation otherwise.  ``read_raster(write_raster(r))``
is therefore bit-identical for every finite raster.
"""

from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "NODATA_value")
DEFAULT_NODATA = -9999.0


class RasterFormatError(ValueError):
    """Malformed grid file; the message carries the offending line number."""


@dataclass(frozen=True)
class RasterHeader:
    ncols: int
    nrows: int
    xll: float
    yll: float
    cellsize: float
    nodata: float = DEFAULT_NODATA

    def __post_init__(self):
        if int(self.ncols) < 1 or int(self.nrows) < 1:
            raise ValueError(f"grid must have at least one cell, got {self.nrows}x{self.ncols}")
        if not self.cellsize > 0:
            raise ValueError(f"cellsize must be > 0, got {self.cellsize}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nrows, self.ncols)

    @property
    def xmax(self) -> float:
        return self.xll + self.ncols * self.cellsize

    @property
    def ytop(self) -> float:
        return self.yll + self.nrows * self.cellsize

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """x of each column centre and y of each row centre (row 0 north)."""
        xs = self.xll + (np.arange(self.ncols) + 0.5) * self.cellsize
        ys = self.ytop - (np.arange(self.nrows) + 0.5) * self.cellsize
        return xs, ys


class Raster:
    """A header plus a ``(nrows, ncols)`` array of values.

    The array is made read-only on construction; operations return new rasters.
    """

    __slots__ = ("header", "values")

    def __init__(self, header: RasterHeader, values):
        arr = np.array(values, dtype=np.float64)
        if arr.size != header.ncols * header.nrows:
            raise ValueError(
                f"values length {arr.size} != ncols*nrows = {header.ncols * header.nrows}"
            )
        arr = arr.reshape(header.nrows, header.ncols)
        arr.setflags(write=False)
        self.header = header
        self.values = arr

    @property
    def mask(self) -> np.ndarray:
        """True where the cell holds data."""
        return self.values != self.header.nodata

    def filled(self, fill=np.nan) -> np.ndarray:
        """Copy of the values with nodata cells replaced by ``fill``."""
        out = np.array(self.values)
        out[~self.mask] = fill
        return out

    def with_values(self, values) -> "Raster":
        return Raster(self.header, values)

    def __eq__(self, other):
        if not isinstance(other, Raster):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.values, other.values)

    def __repr__(self):
        h = self.header
        return f"Raster({h.nrows}x{h.ncols}, cellsize={h.cellsize}, xll={h.xll}, yll={h.yll})"


def from_array(values, cellsize=1.0, xll=0.0, yll=0.0, nodata=DEFAULT_NODATA) -> Raster:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("expected a 2-D array")
    header = RasterHeader(arr.shape[1], arr.shape[0], float(xll), float(yll), float(cellsize), float(nodata))
    return Raster(header, arr)


# ---------------------------------------------------------------------------
# text format

def _fmt(x: float) -> str:
    s = "%.6f" % x
    if float(s) == x:
        return s
    return repr(float(x))


def _fmt_header_number(x: float) -> str:
    if float(x).is_integer() and abs(x) < 1e15:
        return str(int(x))
    return repr(float(x))


def format_values(values: np.ndarray, nodata: float) -> list[str]:
    nodata_tok = _fmt_header_number(nodata)
    lines = []
    for row in np.asarray(values, dtype=np.float64):
        toks = [nodata_tok if v == nodata else _fmt(v) for v in row.tolist()]
        lines.append(" ".join(toks))
    return lines


def write_raster(r: Raster, path) -> None:
    """Write ``r`` atomically (temp file + rename) in the grid text format."""
    path = Path(path)
    h = r.header
    if not np.all(np.isfinite(r.values)):
        raise ValueError("cannot write non-finite values; use the nodata sentinel")
    lines = [
        f"ncols {h.ncols}",
        f"nrows {h.nrows}",
        f"xllcorner {_fmt_header_number(h.xll)}",
        f"yllcorner {_fmt_header_number(h.yll)}",
        f"cellsize {_fmt_header_number(h.cellsize)}",
        f"NODATA_value {_fmt_header_number(h.nodata)}",
    ]
    lines.extend(format_values(r.values, h.nodata))
    text = "\n".join(lines) + "\n"
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _parse_number(tok: str, lineno: int, what: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise RasterFormatError(f"line {lineno}: non-numeric {what} {tok!r}") from None


def read_raster(path) -> Raster:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if len(lines) < len(HEADER_KEYS):
        raise RasterFormatError(f"line {len(lines) + 1}: malformed header, file ends early")

    fields = {}
    for i, key in enumerate(HEADER_KEYS):
        parts = lines[i].split()
        if len(parts) != 2 or parts[0].lower() != key.lower():
            raise RasterFormatError(
                f"line {i + 1}: malformed header, expected '{key} <value>', got {lines[i]!r}"
            )
        fields[key] = _parse_number(parts[1], i + 1, f"header value for {key}")
    for key in ("ncols", "nrows"):
        v = fields[key]
        if not v.is_integer() or v < 1:
            idx = HEADER_KEYS.index(key) + 1
            raise RasterFormatError(f"line {idx}: malformed header, {key} must be a positive integer")
    if not fields["cellsize"] > 0:
        raise RasterFormatError("line 5: malformed header, cellsize must be > 0")

    ncols, nrows = int(fields["ncols"]), int(fields["nrows"])
    body = lines[len(HEADER_KEYS):]
    tokens = " ".join(body).split()
    try:
        values = np.array(tokens, dtype=np.float64)
    except ValueError:
        for j, line in enumerate(body):
            for tok in line.split():
                _parse_number(tok, j + len(HEADER_KEYS) + 1, "value")
        raise  # pragma: no cover
    expected = ncols * nrows
    if values.size != expected:
        last = len(HEADER_KEYS) + len(body)
        raise RasterFormatError(
            f"line {last}: value count mismatch, header declares {nrows}x{ncols}={expected}, "
            f"found {values.size}"
        )
    header = RasterHeader(ncols, nrows, fields["xllcorner"], fields["yllcorner"],
                          fields["cellsize"], fields["NODATA_value"])
    return Raster(header, values)


# ---------------------------------------------------------------------------
# geometry operations

def trim(r: Raster, nrows: int, ncols: int) -> Raster:
    """Keep the first ``nrows`` x ``ncols`` cells (drops the south and east edges)."""
    h = r.header
    dropped = h.nrows - nrows
    header = replace(h, ncols=ncols, nrows=nrows, yll=h.yll + dropped * h.cellsize)
    return Raster(header, r.values[:nrows, :ncols])


def resample_average(r: Raster, factor: int, method: str = "average") -> Raster:
    """Coarsen by an integer ``factor``.

    Extents that are not multiples of ``factor`` are trimmed at the high-index
    edges (south rows, east columns) so the north-west corner stays fixed.
    ``method="average"`` takes the block mean and marks a block nodata if any
    of its cells is nodata; ``method="nearest"`` takes the block cell nearest
    the block centre, ties going to the lower index.
    """
    factor = int(factor)
    if factor <= 0:
        raise ValueError(f"resampling factor must be a positive integer, got {factor}")
    if factor == 1:
        return r
    h = r.header
    nr, nc = h.nrows // factor, h.ncols // factor
    if nr < 1 or nc < 1:
        raise ValueError(f"factor {factor} larger than the grid {h.nrows}x{h.ncols}")
    fine = trim(r, nr * factor, nc * factor)
    header = replace(fine.header, nrows=nr, ncols=nc, cellsize=h.cellsize * factor)
    blocks = fine.values.reshape(nr, factor, nc, factor)
    if method == "nearest":
        k = (factor - 1) // 2
        return Raster(header, blocks[:, k, :, k])
    if method != "average":
        raise ValueError(f"unknown resampling method {method!r}")
    out = blocks.mean(axis=(1, 3))
    missing = (blocks == h.nodata).any(axis=(1, 3))
    out[missing] = h.nodata
    return Raster(header, out)


def cell_index(header: RasterHeader, x: float, y: float) -> tuple[int, int]:
    """(row, col) of the cell containing (x, y).

    A point on a shared cell edge belongs to the cell with the lower index,
    i.e. the western column and the northern row.
    """
    cs = header.cellsize
    if not (header.xll <= x <= header.xmax and header.yll <= y <= header.ytop):
        raise ValueError(
            f"point ({x}, {y}) outside raster bounds "
            f"[{header.xll}, {header.xmax}] x [{header.yll}, {header.ytop}]"
        )
    col = max(math.ceil((x - header.xll) / cs) - 1, 0)
    row = max(math.ceil((header.ytop - y) / cs) - 1, 0)
    return min(row, header.nrows - 1), min(col, header.ncols - 1)


def sample_at(r: Raster, x: float, y: float) -> float:
    row, col = cell_index(r.header, x, y)
    return float(r.values[row, col])
