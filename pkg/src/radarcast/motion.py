"""Velocity-field construction from consecutive scan pairs.

Correlation tracking over the array lattice yields raw per-array motion
vectors; a divergence-penalized least-squares pass smooths them toward a
mass-consistent field; translation operators then advance tracked array
positions along the smoothed field (and back).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DataError
from .raster import MISSING_LIMIT, TrackState, bilinear_sample


@dataclass
class MotionConfig:
    """Knobs for correlation tracking and velocity smoothing.

    search_radius is in pixels; the search window is the full
    (2R+1)^2 integer-lag box.  continuity_weight is the divergence
    penalty multiplier (lattice units; 0 disables smoothing).
    """

    search_radius: int = 5
    min_valid_correlation: float = 0.3
    min_patch_variance: float = 1e-6  # dBZ^2
    continuity_weight: float = 1.0
    solver_tol: float = 1e-10
    solver_maxiter: int | None = None

    def validate(self):
        if self.search_radius < 1:
            raise ConfigError("search_radius must be >= 1")
        if not -1.0 <= self.min_valid_correlation <= 1.0:
            raise ConfigError("min_valid_correlation must be in [-1, 1]")
        if self.min_patch_variance < 0:
            raise ConfigError("min_patch_variance must be >= 0")
        if self.continuity_weight < 0:
            raise ConfigError("continuity_weight must be >= 0")
        if self.solver_tol <= 0:
            raise ConfigError("solver_tol must be > 0")
        return self


@dataclass
class VelocityField:
    """Per-array motion vectors in km per time step.

    u/v are the smoothed components used for advection; u_raw/v_raw keep
    the tracker output (NaN where the array is invalid).  The correlation
    column is the best match score found by the tracker.
    """

    layout: object
    timestamp: int
    u_raw: np.ndarray
    v_raw: np.ndarray
    u: np.ndarray
    v: np.ndarray
    correlation: np.ndarray
    valid: np.ndarray

    def sample(self, points_km):
        """Bilinearly interpolate the smoothed field at km positions.

        Positions outside the lattice hull are clamped to its edge
        (constant extrapolation), so advection never produces NaN.
        """
        lay = self.layout
        pts = np.asarray(points_km, dtype=float)
        origin_km = lay.centers_km[0]  # first lattice node, row-major
        lx = (pts[:, 0] - origin_km[0]) / lay.spacing_km
        ly = (pts[:, 1] - origin_km[1]) / lay.spacing_km
        lx = np.clip(lx, 0.0, lay.nx - 1)
        ly = np.clip(ly, 0.0, lay.ny - 1)
        ug = self.u.reshape(lay.ny, lay.nx)
        vg = self.v.reshape(lay.ny, lay.nx)
        return np.column_stack([
            bilinear_sample(ug, lx, ly),
            bilinear_sample(vg, lx, ly),
        ])


def _candidate_lags(radius):
    """Integer lags in the search box, ordered for deterministic
    tie-breaking: magnitude first, then (dy, dx) lexicographic."""
    lags = [(dy, dx)
            for dy in range(-radius, radius + 1)
            for dx in range(-radius, radius + 1)]
    lags.sort(key=lambda d: (d[0] * d[0] + d[1] * d[1], d[0], d[1]))
    return lags


def trec(scan_t, scan_t1, layout, cfg):
    """Track echoes by correlation between two consecutive scans.

    For each array, all candidate displacements in the (2R+1)^2 lag box
    are scored with the Pearson correlation between the source patch in
    scan_t and the displaced patch in scan_t1; the maximizer (ties broken
    toward the smallest displacement, then lexicographic (dy, dx)) gives
    the raw velocity vector.  Arrays with flat source patches, too many
    missing cells, or a weak best correlation are flagged invalid.

    Returns a VelocityField whose smoothed components initially equal the
    raw ones (run smooth_velocity to replace them).
    """
    cfg.validate()
    if (scan_t.width, scan_t.height) != (scan_t1.width, scan_t1.height):
        raise DataError("scan dimension mismatch")
    if scan_t1.timestamp <= scan_t.timestamp:
        raise DataError("second scan must be later than the first")
    if layout.n == 0:
        raise DataError("empty layout")

    a = layout.array_size
    half = layout.half
    n = layout.n
    centers = layout.centers_px
    if not np.allclose(centers, np.round(centers)):
        raise DataError("layout centers must be integer-aligned for tracking")
    tops = np.round(centers).astype(np.intp) - half  # (n, 2) as (x, y) top-left

    z0 = np.nan_to_num(scan_t.values, nan=0.0)
    z1 = np.nan_to_num(scan_t1.values, nan=0.0)
    m0 = np.isnan(scan_t.values).astype(float)
    m1 = np.isnan(scan_t1.values).astype(float)

    win0 = sliding_window_view(z0, (a, a))
    win1 = sliding_window_view(z1, (a, a))
    miss0 = sliding_window_view(m0, (a, a))
    miss1 = sliding_window_view(m1, (a, a))
    max_ty, max_tx = win1.shape[0] - 1, win1.shape[1] - 1

    src = win0[tops[:, 1], tops[:, 0]].reshape(n, -1)
    src_missing = miss0[tops[:, 1], tops[:, 0]].reshape(n, -1).mean(axis=1)
    src_c = src - src.mean(axis=1, keepdims=True)
    src_norm = np.sqrt(np.einsum("ij,ij->i", src_c, src_c))
    src_var = src_norm**2 / (a * a)

    usable = (src_missing < MISSING_LIMIT) & (src_var >= cfg.min_patch_variance)

    best_corr = np.full(n, -np.inf)
    best_lag = np.zeros((n, 2), dtype=np.intp)  # (dy, dx)
    for dy, dx in _candidate_lags(cfg.search_radius):
        ty = tops[:, 1] + dy
        tx = tops[:, 0] + dx
        ok = usable & (ty >= 0) & (ty <= max_ty) & (tx >= 0) & (tx <= max_tx)
        if not ok.any():
            continue
        cand = win1[ty[ok], tx[ok]].reshape(ok.sum(), -1)
        cand_missing = miss1[ty[ok], tx[ok]].reshape(ok.sum(), -1).mean(axis=1)
        cand_c = cand - cand.mean(axis=1, keepdims=True)
        cand_norm = np.sqrt(np.einsum("ij,ij->i", cand_c, cand_c))
        denom = src_norm[ok] * cand_norm
        with np.errstate(invalid="ignore", divide="ignore"):
            corr = np.einsum("ij,ij->i", src_c[ok], cand_c) / denom
        corr[(cand_norm == 0.0) | (cand_missing >= MISSING_LIMIT)] = -np.inf
        # Strict > keeps the first (highest-priority) lag on exact ties.
        idx = np.flatnonzero(ok)
        better = corr > best_corr[idx]
        upd = idx[better]
        best_corr[upd] = corr[better]
        best_lag[upd] = (dy, dx)

    valid = usable & np.isfinite(best_corr) & (best_corr >= cfg.min_valid_correlation)
    u_raw = np.where(valid, best_lag[:, 1] * layout.cell_size, np.nan)
    v_raw = np.where(valid, best_lag[:, 0] * layout.cell_size, np.nan)
    correlation = np.where(np.isfinite(best_corr), best_corr, np.nan)

    return VelocityField(
        layout=layout,
        timestamp=scan_t.timestamp,
        u_raw=u_raw,
        v_raw=v_raw,
        u=u_raw.copy(),
        v=v_raw.copy(),
        correlation=correlation,
        valid=valid,
    )


def _lattice_difference_ops(ny, nx):
    """Central-difference operators on the lattice (one-sided at the
    boundary, unit lattice spacing).  Returns (Dx, Dy) as n x n sparse."""
    n = ny * nx

    def axis_op(count, stride):
        rows, cols, vals = [], [], []
        for r in range(ny):
            for c in range(nx):
                i = r * nx + c
                k = c if stride == 1 else r
                if count == 1:
                    continue  # no variation measurable along this axis
                if 0 < k < count - 1:
                    rows += [i, i]
                    cols += [i + stride, i - stride]
                    vals += [0.5, -0.5]
                elif k == 0:
                    rows += [i, i]
                    cols += [i + stride, i]
                    vals += [1.0, -1.0]
                else:
                    rows += [i, i]
                    cols += [i, i - stride]
                    vals += [1.0, -1.0]
        return sp.csr_matrix((vals, (rows, cols)), shape=(n, n))

    return axis_op(nx, 1), axis_op(ny, nx)


def divergence_penalty(u, v, layout):
    """Sum of squared discrete divergence over the lattice."""
    dx_op, dy_op = _lattice_difference_ops(layout.ny, layout.nx)
    div = dx_op @ np.asarray(u, dtype=float) + dy_op @ np.asarray(v, dtype=float)
    return float(div @ div)


def _harmonic_fill(grid, valid):
    """Fill invalid lattice nodes by solving the Laplace equation with the
    valid nodes as Dirichlet data (4-neighbor graph)."""
    ny, nx = grid.shape
    if valid.all():
        return grid.copy()
    if not valid.any():
        raise DataError("no valid velocity vectors to interpolate from")

    invalid_idx = np.flatnonzero(~valid.ravel())
    pos = {j: k for k, j in enumerate(invalid_idx)}
    m = len(invalid_idx)
    rows, cols, vals = [], [], []
    rhs = np.zeros(m)
    flat = grid.ravel()
    for k, j in enumerate(invalid_idx):
        r, c = divmod(j, nx)
        deg = 0
        for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if not (0 <= rr < ny and 0 <= cc < nx):
                continue
            deg += 1
            jj = rr * nx + cc
            if valid.ravel()[jj]:
                rhs[k] += flat[jj]
            else:
                rows.append(k)
                cols.append(pos[jj])
                vals.append(-1.0)
        rows.append(k)
        cols.append(k)
        vals.append(float(deg))
    lap = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    filled = grid.copy().ravel()
    filled[invalid_idx] = spla.spsolve(lap.tocsc(), rhs)
    return filled.reshape(ny, nx)


def smooth_velocity(raw, layout, cfg):
    """Smooth a raw velocity field under the divergence penalty.

    Minimizes sum((raw - v)^2) + lambda * sum(div v)^2 over the lattice,
    with central differences (one-sided at the boundary).  Invalid arrays
    contribute no tracker data; their raw entries are first replaced by
    harmonic interpolation from valid neighbors, and the completed field
    is what the quadratic is anchored to.  The solution's divergence
    penalty never exceeds the (completed) raw field's.

    Raises:
        ConfigError: continuity_weight < 0.
    """
    if cfg.continuity_weight < 0:
        raise ConfigError("continuity_weight must be >= 0")

    ny, nx = layout.ny, layout.nx
    ug = _harmonic_fill(raw.u_raw.reshape(ny, nx), raw.valid.reshape(ny, nx))
    vg = _harmonic_fill(raw.v_raw.reshape(ny, nx), raw.valid.reshape(ny, nx))
    u0 = ug.ravel()
    v0 = vg.ravel()

    lam = cfg.continuity_weight
    if lam == 0.0:
        u_s, v_s = u0, v0
    else:
        n = ny * nx
        dx_op, dy_op = _lattice_difference_ops(ny, nx)
        eye = sp.identity(n, format="csr")
        system = sp.bmat(
            [[eye + lam * (dx_op.T @ dx_op), lam * (dx_op.T @ dy_op)],
             [lam * (dy_op.T @ dx_op), eye + lam * (dy_op.T @ dy_op)]],
            format="csr",
        )
        rhs = np.concatenate([u0, v0])
        sol, info = spla.cg(system, rhs, rtol=cfg.solver_tol, atol=0.0,
                            maxiter=cfg.solver_maxiter)
        if info != 0:
            sol = spla.spsolve(system.tocsc(), rhs)
        u_s, v_s = sol[:n], sol[n:]

    return replace(raw, u=u_s, v=v_s)


def translate(track, velocity, m):
    """Advance (m=+1) or rewind (m=-1) tracked positions by one step.

    Forward motion samples the smoothed field at the current positions and
    stores the sampled step velocities; the inverse subtracts the stored
    step so a forward/backward pair cancels to rounding error.  Multi-step
    translation is composition of single steps.

    Raises:
        ValueError: |m| != 1.
        DataError: inverse translation requested at the initial time.
    """
    if m not in (1, -1):
        raise ValueError("translate advances one step at a time (|m| = 1)")
    if m == 1:
        vel = velocity.sample(track.positions[-1])
        new_pos = track.positions[-1] + vel
        return TrackState(
            layout=track.layout,
            positions=track.positions + [new_pos],
            step_velocities=track.step_velocities + [vel],
        )
    if track.n_times < 2:
        raise DataError("no earlier state: cannot invert translation at t=1")
    recovered = track.positions[-1] - track.step_velocities[-1]
    return TrackState(
        layout=track.layout,
        positions=track.positions[:-2] + [recovered],
        step_velocities=track.step_velocities[:-1],
    )


def advance_track(track, velocity, steps):
    """Compose forward translations for the given number of steps."""
    for _ in range(steps):
        track = translate(track, velocity, 1)
    return track


def write_velocity_csv(vel, path):
    """Write per-array vectors: array_id, x_km, y_km, u_raw, v_raw,
    u_smooth, v_smooth, corr, valid."""
    from .raster import atomic_write_text

    centers = vel.layout.centers_km
    lines = ["array_id,x_km,y_km,u_raw,v_raw,u_smooth,v_smooth,corr,valid"]
    for i in range(vel.layout.n):
        lines.append(
            f"{i},{centers[i, 0]!r},{centers[i, 1]!r},"
            f"{vel.u_raw[i]!r},{vel.v_raw[i]!r},{vel.u[i]!r},{vel.v[i]!r},"
            f"{vel.correlation[i]!r},{int(vel.valid[i])}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
