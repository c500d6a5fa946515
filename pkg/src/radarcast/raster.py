"""Gridded reflectivity scans, overlapping pixel-array layouts, and text I/O.

A scan is a row-major float grid of dBZ values with NaN as the explicit
missing / no-echo marker.  A layout drapes a regular lattice of square,
mutually overlapping pixel arrays over the grid; the lattice is the spatial
index for everything downstream (motion vectors, growth values, the
autoregressive model).  Map coordinates are a flat km plane with
``km = origin + pixel_index * cell_size``.

Patches with at least ``MISSING_LIMIT`` of their cells missing are
considered too thin for correlation or growth work; below that threshold
missing cells are treated as 0 dBZ.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

# Fraction of missing cells above which a patch is flagged low-quality.
MISSING_LIMIT = 0.2

_MAGIC = "RADAR"
_VERSION = "v1"


@dataclass(frozen=True)
class ReflectivityField:
    """One timestamped reflectivity scan on a regular grid.

    Attributes:
        width, height: grid size in pixels.
        origin: (x0, y0) map coordinates of pixel (0, 0), in km.
        cell_size: km per pixel (square cells).
        timestamp: integer scan index.
        values: (height, width) float array in dBZ, NaN where missing.
        annotation: optional trailer note carried through file round trips.
    """

    width: int
    height: int
    origin: tuple[float, float]
    cell_size: float
    timestamp: int
    values: np.ndarray
    annotation: str | None = None

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != (self.height, self.width):
            raise ValueError(
                f"values shape {vals.shape} does not match "
                f"{self.height}x{self.width} grid"
            )
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if np.isinf(vals).any():
            raise ValueError("non-missing values must be finite")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def pixel_to_km(self, px, py):
        """Map fractional pixel coordinates to km coordinates."""
        return (
            self.origin[0] + np.asarray(px, dtype=float) * self.cell_size,
            self.origin[1] + np.asarray(py, dtype=float) * self.cell_size,
        )

    def km_to_pixel(self, x, y):
        """Map km coordinates to fractional pixel coordinates."""
        return (
            (np.asarray(x, dtype=float) - self.origin[0]) / self.cell_size,
            (np.asarray(y, dtype=float) - self.origin[1]) / self.cell_size,
        )


def bilinear_sample(values, px, py):
    """Sample a grid at fractional pixel positions by bilinear interpolation.

    Points outside [0, W-1] x [0, H-1] give NaN.  Integer-aligned points
    return the stored cell value bit-exactly.  NaN cells propagate into any
    sample that puts nonzero weight on them.

    Args:
        values: (H, W) grid.
        px, py: arrays of fractional pixel coordinates (x = column, y = row).

    Returns:
        Array of samples with the broadcast shape of px/py.
    """
    values = np.asarray(values, dtype=float)
    h, w = values.shape
    px = np.asarray(px, dtype=float)
    py = np.asarray(py, dtype=float)
    px, py = np.broadcast_arrays(px, py)

    out = np.full(px.shape, np.nan)
    inside = (px >= 0.0) & (px <= w - 1) & (py >= 0.0) & (py <= h - 1)
    if not inside.any():
        return out

    x = px[inside]
    y = py[inside]
    x0 = np.clip(np.floor(x), 0, max(w - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(y), 0, max(h - 2, 0)).astype(np.intp)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    acc = np.zeros(x.shape)
    # Zero-weight corners are skipped so NaN neighbors cannot poison
    # integer-aligned samples.
    for wgt, ix, iy in (
        ((1.0 - fx) * (1.0 - fy), x0, y0),
        (fx * (1.0 - fy), x1, y0),
        ((1.0 - fx) * fy, x0, y1),
        (fx * fy, x1, y1),
    ):
        nz = wgt > 0.0
        if nz.any():
            acc[nz] += wgt[nz] * values[iy[nz], ix[nz]]
    out[inside] = acc
    return out


@dataclass(frozen=True)
class ArrayLayout:
    """Regular lattice of overlapping square pixel arrays.

    Centers are ordered row-major (lattice row by lattice row).  The km
    coordinates are derived from the owning grid's origin and cell size.
    """

    array_size: int
    spacing: int
    nx: int
    ny: int
    centers_px: np.ndarray  # (n, 2), columns (x, y) in pixels
    origin: tuple[float, float]
    cell_size: float

    def __post_init__(self):
        if self.array_size % 2 == 0 or self.array_size < 3:
            raise ValueError("array_size must be odd and >= 3")
        if self.spacing < 1:
            raise ValueError("spacing must be >= 1")
        centers = np.asarray(self.centers_px, dtype=float)
        centers = centers.copy()
        centers.setflags(write=False)
        object.__setattr__(self, "centers_px", centers)

    @property
    def n(self):
        return self.nx * self.ny

    @property
    def half(self):
        return (self.array_size - 1) // 2

    @property
    def spacing_km(self):
        return self.spacing * self.cell_size

    @property
    def centers_km(self):
        return self.origin + self.centers_px * self.cell_size

    def km_to_pixel(self, points_km):
        return (np.asarray(points_km, dtype=float) - self.origin) / self.cell_size


def build_layout(width, height, array_size, spacing, origin=(0.0, 0.0), cell_size=1.0):
    """Build the maximal centered lattice of array centers over a grid.

    Every array's footprint must fit inside the image; leftover slack is
    split evenly so the lattice is centered.  Arrays overlap whenever
    spacing < array_size.

    Args:
        width, height: grid size in pixels.
        array_size: odd side length of each pixel array.
        spacing: pixels between adjacent array centers.
        origin, cell_size: map georeference of the grid.

    Returns:
        ArrayLayout with row-major centers.

    Raises:
        ValueError: array_size even, larger than the grid, or spacing < 1.
    """
    if array_size % 2 == 0:
        raise ValueError("array_size must be odd")
    if array_size > min(width, height):
        raise ValueError("array_size larger than the grid")
    if array_size < 3:
        raise ValueError("array_size must be >= 3")
    if spacing < 1:
        raise ValueError("spacing must be >= 1")

    half = (array_size - 1) // 2

    def axis_positions(extent):
        lo, hi = half, extent - 1 - half
        count = (hi - lo) // spacing + 1
        slack = (hi - lo) - (count - 1) * spacing
        start = lo + slack // 2
        return start + spacing * np.arange(count)

    xs = axis_positions(width)
    ys = axis_positions(height)
    gx, gy = np.meshgrid(xs, ys)  # row-major: y outer, x inner
    centers = np.column_stack([gx.ravel(), gy.ravel()]).astype(float)
    return ArrayLayout(
        array_size=array_size,
        spacing=spacing,
        nx=len(xs),
        ny=len(ys),
        centers_px=centers,
        origin=(float(origin[0]), float(origin[1])),
        cell_size=float(cell_size),
    )


def extract_patch(field, center_km, array_size):
    """Extract the array_size x array_size patch centered at a km position.

    Values are sampled bilinearly at non-integer positions; cells falling
    outside the grid come back as NaN.  Integer-aligned centers reproduce
    the underlying sub-grid exactly.

    Raises:
        DataError: the footprint does not intersect the grid at all.
    """
    cx, cy = field.km_to_pixel(center_km[0], center_km[1])
    half = (array_size - 1) // 2
    offs = np.arange(array_size) - half
    px = cx + offs[np.newaxis, :]
    py = cy + offs[:, np.newaxis]
    if (px.max() < 0 or px.min() > field.width - 1
            or py.max() < 0 or py.min() > field.height - 1):
        raise DataError(
            f"patch at km ({center_km[0]:.3f}, {center_km[1]:.3f}) "
            "does not intersect the grid"
        )
    return bilinear_sample(field.values, np.broadcast_to(px, (array_size, array_size)),
                           np.broadcast_to(py, (array_size, array_size)))


@dataclass
class TrackState:
    """Array-center positions through time, plus the per-step velocities
    that produced them (needed for exact inverse translation).

    positions[k] holds the (n, 2) km centers at window time k+1, so
    positions[0] always equals the layout centers.
    """

    layout: ArrayLayout
    positions: list
    step_velocities: list = field(default_factory=list)

    def __post_init__(self):
        if not self.positions:
            raise ValueError("track needs at least the initial positions")
        if len(self.step_velocities) != len(self.positions) - 1:
            raise ValueError("need exactly one step velocity per transition")
        first = np.asarray(self.positions[0], dtype=float)
        if not np.allclose(first, self.layout.centers_km, atol=1e-12):
            raise ValueError("initial positions must equal the layout centers")

    @classmethod
    def from_layout(cls, layout):
        return cls(layout=layout, positions=[np.array(layout.centers_km)])

    @property
    def n_times(self):
        return len(self.positions)

    def positions_at(self, t):
        """Positions at window time t (1-based)."""
        if not 1 <= t <= self.n_times:
            raise ValueError(f"time {t} outside tracked window 1..{self.n_times}")
        return self.positions[t - 1]


def _format_value(v):
    return "NA" if np.isnan(v) else repr(float(v))


def atomic_write_text(path, text):
    """Write text to path via a temp file + rename."""
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_field(fld, path):
    """Write one scan in the text raster format (atomic replace)."""
    lines = [
        f"{_MAGIC} {_VERSION} {fld.width} {fld.height} "
        f"{repr(float(fld.origin[0]))} {repr(float(fld.origin[1]))} "
        f"{repr(float(fld.cell_size))} {fld.timestamp}"
    ]
    for row in fld.values:
        lines.append(" ".join(_format_value(v) for v in row))
    if fld.annotation:
        lines.append(f"# {fld.annotation}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_field(path):
    """Read one scan from the text raster format."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read raster file {path}: {exc}") from exc
    if not lines:
        raise DataError(f"{path}: empty raster file")

    header = lines[0].split()
    if len(header) != 8 or header[0] != _MAGIC or header[1] != _VERSION:
        raise DataError(f"{path}: malformed header {lines[0]!r}")
    try:
        width, height = int(header[2]), int(header[3])
        x0, y0, cell = float(header[4]), float(header[5]), float(header[6])
        timestamp = int(header[7])
    except ValueError as exc:
        raise DataError(f"{path}: malformed header field: {exc}") from exc

    if len(lines) < 1 + height:
        raise DataError(f"{path}: expected {height} data rows, found {len(lines) - 1}")
    values = np.empty((height, width))
    for r in range(height):
        tokens = lines[1 + r].split()
        if len(tokens) != width:
            raise DataError(
                f"{path}: row {r} has {len(tokens)} values, expected {width}"
            )
        for c, tok in enumerate(tokens):
            if tok == "NA":
                values[r, c] = np.nan
            else:
                try:
                    values[r, c] = float(tok)
                except ValueError as exc:
                    raise DataError(f"{path}: bad value {tok!r} at row {r}") from exc

    annotation = None
    for extra in lines[1 + height:]:
        stripped = extra.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            annotation = stripped.lstrip("#").strip()
        else:
            raise DataError(f"{path}: unexpected trailing content {stripped!r}")

    return ReflectivityField(
        width=width, height=height, origin=(x0, y0), cell_size=cell,
        timestamp=timestamp, values=values, annotation=annotation,
    )


def validate_sequence(fields):
    """Check cross-scan consistency: shared geometry, strictly increasing
    timestamps with a constant step."""
    if not fields:
        raise DataError("empty scan sequence")
    first = fields[0]
    for fld in fields[1:]:
        if (fld.width, fld.height) != (first.width, first.height):
            raise DataError("inconsistent dimensions across the sequence")
        if fld.origin != first.origin or fld.cell_size != first.cell_size:
            raise DataError("inconsistent georeference across the sequence")
    stamps = [f.timestamp for f in fields]
    diffs = np.diff(stamps)
    if len(diffs) and (diffs <= 0).any():
        raise DataError("non-monotone timestamps in sequence")
    if len(diffs) > 1 and len(set(diffs.tolist())) != 1:
        raise DataError(f"timestamps must advance by a constant step, got {stamps}")
    return fields


def read_sequence(paths):
    """Read an ordered list of scans and validate them as a sequence."""
    return validate_sequence([read_field(p) for p in paths])
