"""Ground-truth scene generation for end-to-end verification.

Scenes are built on an oversized canvas and cropped, so frames near the
grid boundary carry real inflowing texture instead of wrap artifacts.
Frames follow the two-step recursion Z(t+1) = shift(Z(t-1), 2 steps) +
2 * growth(t) exactly; integer motion uses pure rolls, which makes growth
extraction invertible to rounding error.  The truth bundle records the
realized velocities, exact array tracks, per-array growth (patch means of
the realized pixel growth), and any parameters behind a stochastic growth
process.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .advect import sample_reflectivity
from .errors import DataError
from .raster import ReflectivityField, bilinear_sample, build_layout
from .stcar import CarParams, build_weights, sample_stcar


@dataclass
class VelocitySpec:
    """uniform: (vx, vy) px/step everywhere; rotational / divergent:
    linear fields around a center with the given rate per step."""

    kind: str = "uniform"
    vx: float = 0.0
    vy: float = 0.0
    rate: float = 0.0
    center: tuple[float, float] | None = None

    def field_at(self, px, py, width, height):
        if self.kind == "uniform":
            u = np.full(np.shape(px), float(self.vx))
            v = np.full(np.shape(py), float(self.vy))
            return u, v
        cx, cy = self.center if self.center else ((width - 1) / 2, (height - 1) / 2)
        dx = np.asarray(px, dtype=float) - cx
        dy = np.asarray(py, dtype=float) - cy
        if self.kind == "rotational":
            return -self.rate * dy, self.rate * dx
        if self.kind == "divergent":
            return self.rate * dx, self.rate * dy
        raise ValueError(f"unknown velocity kind {self.kind!r}")

    def max_speed(self, width, height):
        if self.kind == "uniform":
            return math.hypot(self.vx, self.vy)
        return abs(self.rate) * math.hypot(width, height) / 2


@dataclass
class GrowthSpec:
    """zero; constant rate; a persistent bump field; or "stcar", a
    stochastic per-array process (optionally on top of the bump field)."""

    kind: str = "zero"
    rate: float = 0.0                          # constant: dBZ per step
    blobs: list = field(default_factory=list)  # (cx, cy, amplitude, radius) px
    rho: float = 0.0
    sigma: float = 0.0
    r: tuple = ()


@dataclass
class SceneSpec:
    width: int = 96
    height: int = 96
    n_steps: int = 7
    cell_size: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)
    velocity: VelocitySpec = field(default_factory=VelocitySpec)
    blobs: list = field(default_factory=list)  # (cx, cy, amplitude, radius) px
    noise_sigma: float = 0.0
    frame_noise: float = 0.0                   # non-advecting observation noise
    growth: GrowthSpec = field(default_factory=GrowthSpec)
    array_size: int = 19
    spacing: int = 5
    seed: int = 0

    def validate(self):
        if self.n_steps < 2:
            raise DataError("a scene needs at least two frames")
        if any(amp < 0 for (_, _, amp, _) in self.blobs):
            raise DataError("blob amplitudes must be >= 0")
        if self.noise_sigma < 0 or self.frame_noise < 0:
            raise DataError("noise levels must be >= 0")
        return self


@dataclass
class SceneTruth:
    """What the generator knows about a scene."""

    layout: object
    positions: list          # (n, 2) km array centers per time, 1-based list
    velocity_km: np.ndarray  # (n, 2) km/step at the initial centers
    growth: dict             # time -> (n,) patch-mean growth truth
    growth_valid: dict       # time -> (n,) bool
    params: dict             # rho / sigma / r for stochastic growth


def _blob_field(width, height, blobs, offset=(0, 0)):
    out = np.zeros((height, width))
    if not blobs:
        return out
    gx, gy = np.meshgrid(np.arange(width), np.arange(height))
    for (cx, cy, amp, radius) in blobs:
        d2 = (gx - (cx + offset[0])) ** 2 + (gy - (cy + offset[1])) ** 2
        out += amp * np.exp(-d2 / (2.0 * radius**2))
    return out


def _shift(arr, vx, vy):
    """Shift content by (vx, vy) pixels with wraparound; pure roll for
    integer shifts, bilinear blend of rolls otherwise."""
    ix, fx = int(math.floor(vx)), vx - math.floor(vx)
    iy, fy = int(math.floor(vy)), vy - math.floor(vy)
    base = np.roll(np.roll(arr, iy, axis=0), ix, axis=1)
    if fx == 0.0 and fy == 0.0:
        return base
    right = np.roll(base, 1, axis=1)
    down = np.roll(base, 1, axis=0)
    diag = np.roll(right, 1, axis=0)
    return ((1 - fx) * (1 - fy) * base + fx * (1 - fy) * right
            + (1 - fx) * fy * down + fx * fy * diag)


def _warp_backtrace(arr, vspec, width, height, pad, steps):
    """Sample arr at positions back-traced along a non-uniform flow
    (bilinear, wrap).  Approximate by construction; only rotational and
    divergent scenes use it."""
    from scipy.ndimage import map_coordinates

    h, w = arr.shape
    gx, gy = np.meshgrid(np.arange(w, dtype=float), np.arange(h, dtype=float))
    sx, sy = gx, gy
    for _ in range(steps):
        u, v = vspec.field_at(sx - pad, sy - pad, width, height)
        sx = sx - u
        sy = sy - v
    return map_coordinates(arr, [sy, sx], order=1, mode="grid-wrap")


def _lattice_splat(values, layout, canvas_w, canvas_h, pad):
    """Bilinearly spread per-array lattice values onto canvas pixels
    (zero outside the lattice hull)."""
    grid = np.asarray(values, dtype=float).reshape(layout.ny, layout.nx)
    first = layout.centers_px[0]
    gx, gy = np.meshgrid(np.arange(canvas_w, dtype=float),
                         np.arange(canvas_h, dtype=float))
    lx = (gx - pad - first[0]) / layout.spacing
    ly = (gy - pad - first[1]) / layout.spacing
    return np.nan_to_num(bilinear_sample(grid, lx, ly), nan=0.0)


class _GrowthSource:
    """Per-time growth canvases in frame-1 coordinates.

    raw(t) is the growth content attached to the arrays at time t before
    advection; the generator shifts it into frame coordinates itself.
    """

    def __init__(self, spec, layout, canvas_w, canvas_h, pad, rng):
        g = spec.growth
        self.kind = g.kind
        self.shape = (canvas_h, canvas_w)
        self.params = {}
        self._draws = None
        if g.kind == "zero":
            self.base = None
        elif g.kind == "constant":
            self.base = np.full(self.shape, float(g.rate))
        elif g.kind == "blob":
            self.base = _blob_field(canvas_w, canvas_h, g.blobs, offset=(pad, pad))
        elif g.kind == "stcar":
            self.base = _blob_field(canvas_w, canvas_h, g.blobs, offset=(pad, pad))
            from .raster import TrackState

            track = TrackState.from_layout(layout)
            struct = build_weights(track, 1, 1.5 * layout.spacing_km)
            params = CarParams(rho=g.rho, sigma=g.sigma)
            r = np.asarray(g.r if len(g.r) else [0.0], dtype=float)
            seed = int(rng.integers(0, 2**31 - 1))
            draws = sample_stcar(struct, params, r, spec.n_steps, seed)
            self._draws = [
                _lattice_splat(y, layout, canvas_w, canvas_h, pad) for y in draws
            ]
            self.params = {"rho": g.rho, "sigma": g.sigma, "r": tuple(g.r),
                           "lattice_values": draws}
        else:
            raise DataError(f"unknown growth kind {g.kind!r}")

    def raw(self, t):
        """Growth canvas for time t (1-based), frame-1 coordinates."""
        if self.kind == "zero":
            return np.zeros(self.shape)
        if self.kind == "stcar":
            return self.base + self._draws[t - 1]
        return self.base


def generate_scene(spec):
    """Synthesize a scan sequence with known motion, texture, and growth.

    Returns:
        (fields, truth): frames as ReflectivityField objects with
        timestamps 1..n_steps, and the SceneTruth bundle.

    Raises:
        DataError: the spec violates its invariants.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    w, h, steps = spec.width, spec.height, spec.n_steps
    layout = build_layout(w, h, spec.array_size, spec.spacing,
                          origin=spec.origin, cell_size=spec.cell_size)

    vmax = spec.velocity.max_speed(w, h)
    pad = int(math.ceil(vmax * (steps + 1))) + spec.array_size + 2
    cw, ch = w + 2 * pad, h + 2 * pad
    uniform = spec.velocity.kind == "uniform"

    base = _blob_field(cw, ch, spec.blobs, offset=(pad, pad))
    if spec.noise_sigma > 0:
        base = base + spec.noise_sigma * rng.standard_normal((ch, cw))

    source = _GrowthSource(spec, layout, cw, ch, pad, rng)

    # Frame-t growth canvases: content advects with the flow, so the raw
    # field for time t is shifted by the cumulative (t-1)-step motion.
    growth_frames = {}

    def growth_frame(t):
        if t not in growth_frames:
            raw = source.raw(t)
            if uniform:
                growth_frames[t] = _shift(raw, (t - 1) * spec.velocity.vx,
                                          (t - 1) * spec.velocity.vy)
            elif t > 1:
                growth_frames[t] = _warp_backtrace(source.raw(t), spec.velocity,
                                                   w, h, pad, t - 1)
            else:
                growth_frames[t] = raw
        return growth_frames[t]

    canvases = [base]
    if uniform:
        vx, vy = spec.velocity.vx, spec.velocity.vy
        canvases.append(_shift(base + growth_frame(1), vx, vy))
        for t in range(2, steps):
            # Z(t+1) = shift(Z(t-1), 2 steps) + 2 * shift(growth(t), 1 step)
            canvases.append(_shift(canvases[t - 2], 2 * vx, 2 * vy)
                            + 2.0 * _shift(growth_frame(t), vx, vy))
    else:
        canvases.append(_warp_backtrace(base, spec.velocity, w, h, pad, 1)
                        + growth_frame(1))
        for t in range(2, steps):
            warped = _warp_backtrace(canvases[t - 2], spec.velocity, w, h, pad, 2)
            canvases.append(warped + 2.0 * growth_frame(t))

    crop = (slice(pad, pad + h), slice(pad, pad + w))
    frames = []
    for t, canvas in enumerate(canvases, start=1):
        vals = canvas[crop].copy()
        if spec.frame_noise > 0:
            vals = vals + spec.frame_noise * rng.standard_normal((h, w))
        frames.append(ReflectivityField(
            width=w, height=h, origin=spec.origin, cell_size=spec.cell_size,
            timestamp=t, values=vals,
        ))

    truth = _build_truth(spec, layout, growth_frame, crop, source.params)
    return frames, truth


def _truth_positions(spec, layout, steps):
    centers = np.array(layout.centers_km)
    cell = spec.cell_size
    positions = [centers]
    if spec.velocity.kind == "uniform":
        step_km = np.array([spec.velocity.vx, spec.velocity.vy]) * cell
        for t in range(1, steps):
            positions.append(centers + t * step_km)
    else:
        for _ in range(1, steps):
            cur = positions[-1]
            px = (cur[:, 0] - spec.origin[0]) / cell
            py = (cur[:, 1] - spec.origin[1]) / cell
            u, v = spec.velocity.field_at(px, py, spec.width, spec.height)
            positions.append(cur + np.column_stack([u, v]) * cell)
    return positions


def _build_truth(spec, layout, growth_frame, crop, params):
    steps = spec.n_steps
    positions = _truth_positions(spec, layout, steps)
    px0 = layout.centers_px
    u0, v0 = spec.velocity.field_at(px0[:, 0], px0[:, 1], spec.width, spec.height)
    velocity_km = np.column_stack([u0, v0]) * spec.cell_size

    growth = {}
    growth_valid = {}
    for t in range(2, steps):  # times where extraction is defined
        gframe = growth_frame(t)[crop]
        gfield = ReflectivityField(
            width=spec.width, height=spec.height, origin=spec.origin,
            cell_size=spec.cell_size, timestamp=t, values=gframe,
        )
        sample = sample_reflectivity(gfield, positions[t - 1], spec.array_size)
        growth[t] = sample.values
        growth_valid[t] = sample.valid

    return SceneTruth(layout=layout, positions=positions,
                      velocity_km=velocity_km, growth=growth,
                      growth_valid=growth_valid, params=dict(params))


@dataclass
class ErrorStats:
    """Componentwise error statistics between estimate and truth."""

    max_abs: float
    rmse: float
    bias: float
    mismatch_fraction: float


def truth_compare(estimated, truth):
    """Error statistics (max, RMSE, bias, exact-mismatch fraction) between
    two arrays of matching shape.

    Raises:
        ValueError: shape mismatch.
    """
    est = np.asarray(estimated, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"shape mismatch: {est.shape} vs {tru.shape}")
    diff = est - tru
    return ErrorStats(
        max_abs=float(np.max(np.abs(diff))) if diff.size else 0.0,
        rmse=float(np.sqrt(np.mean(diff**2))) if diff.size else 0.0,
        bias=float(np.mean(diff)) if diff.size else 0.0,
        mismatch_fraction=float(np.mean(est != tru)) if diff.size else 0.0,
    )


# Flat key-value scene files ------------------------------------------------

def write_scene_spec(spec, path):
    """Serialize a scene spec as flat key = value text."""
    from .raster import atomic_write_text

    lines = [
        f"width = {spec.width}",
        f"height = {spec.height}",
        f"steps = {spec.n_steps}",
        f"cell_size = {spec.cell_size!r}",
        f"origin = {spec.origin[0]!r} {spec.origin[1]!r}",
        f"array_size = {spec.array_size}",
        f"spacing = {spec.spacing}",
        f"seed = {spec.seed}",
        f"noise = {spec.noise_sigma!r}",
        f"frame_noise = {spec.frame_noise!r}",
    ]
    v = spec.velocity
    if v.kind == "uniform":
        lines.append(f"velocity = uniform {v.vx!r} {v.vy!r}")
    else:
        lines.append(f"velocity = {v.kind} {v.rate!r}")
    for (cx, cy, amp, radius) in spec.blobs:
        lines.append(f"blob = {cx!r} {cy!r} {amp!r} {radius!r}")
    g = spec.growth
    if g.kind == "zero":
        lines.append("growth = zero")
    elif g.kind == "constant":
        lines.append(f"growth = constant {g.rate!r}")
    elif g.kind == "blob":
        lines.append("growth = blob")
    else:
        rpart = " ".join(repr(float(x)) for x in g.r)
        lines.append(f"growth = stcar {g.rho!r} {g.sigma!r} {rpart}")
    for (cx, cy, amp, radius) in g.blobs:
        lines.append(f"growth_blob = {cx!r} {cy!r} {amp!r} {radius!r}")
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_scene_spec(path):
    """Parse a flat key = value scene file into a SceneSpec."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read scene spec {path}: {exc}") from exc

    spec = SceneSpec()
    blobs, gblobs = [], []
    for raw in lines:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}: malformed line {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        toks = val.split()
        try:
            if key == "width":
                spec.width = int(val)
            elif key == "height":
                spec.height = int(val)
            elif key == "steps":
                spec.n_steps = int(val)
            elif key == "cell_size":
                spec.cell_size = float(val)
            elif key == "origin":
                spec.origin = (float(toks[0]), float(toks[1]))
            elif key == "array_size":
                spec.array_size = int(val)
            elif key == "spacing":
                spec.spacing = int(val)
            elif key == "seed":
                spec.seed = int(val)
            elif key == "noise":
                spec.noise_sigma = float(val)
            elif key == "frame_noise":
                spec.frame_noise = float(val)
            elif key == "velocity":
                if toks[0] == "uniform":
                    spec.velocity = VelocitySpec(kind="uniform",
                                                 vx=float(toks[1]), vy=float(toks[2]))
                else:
                    spec.velocity = VelocitySpec(kind=toks[0], rate=float(toks[1]))
            elif key == "blob":
                blobs.append(tuple(float(x) for x in toks))
            elif key == "growth":
                if toks[0] == "zero":
                    spec.growth = GrowthSpec(kind="zero")
                elif toks[0] == "constant":
                    spec.growth = GrowthSpec(kind="constant", rate=float(toks[1]))
                elif toks[0] == "blob":
                    spec.growth = GrowthSpec(kind="blob")
                elif toks[0] == "stcar":
                    spec.growth = GrowthSpec(
                        kind="stcar", rho=float(toks[1]), sigma=float(toks[2]),
                        r=tuple(float(x) for x in toks[3:]))
                else:
                    raise DataError(f"{path}: unknown growth kind {toks[0]!r}")
            elif key == "growth_blob":
                gblobs.append(tuple(float(x) for x in toks))
            else:
                raise DataError(f"{path}: unknown scene key {key!r}")
        except (IndexError, ValueError) as exc:
            raise DataError(f"{path}: bad value for {key!r}: {exc}") from exc
    spec.blobs = blobs
    spec.growth.blobs = gblobs
    return spec
