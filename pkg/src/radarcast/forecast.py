"""Iterative short-horizon nowcasting and the advection-only baseline.

One forecast step predicts the growth field from its recent history
through the fitted space-time autoregression, then advances reflectivity
two steps along the trajectories; later steps feed predicted growth means
back as pseudo-history while array positions advance under the last
estimated (frozen) velocity field.  The baseline advects the latest scan
with zero growth.  Reflectivity-to-rain-rate conversion uses the standard
Z = 200 R^1.6 power law.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla

from .advect import sample_reflectivity
from .errors import DataError
from .motion import translate
from .raster import ReflectivityField, atomic_write_text
from .stcar import b_apply, b_solve


@dataclass
class ForecastStep:
    """One horizon step: predicted per-array reflectivity and variance."""

    step: int          # 1-based horizon offset
    timestamp: int
    positions: np.ndarray
    values: np.ndarray
    variance: np.ndarray


@dataclass
class Forecast:
    """A stack of horizon steps produced by one method."""

    method: str        # "stcar" | "persistence"
    base_time: int     # window time t' of the last observed scan
    base_timestamp: int
    array_ids: np.ndarray
    steps: list

    @property
    def horizon(self):
        return len(self.steps)


@dataclass
class SequenceFit:
    """Everything the forecaster needs from an estimation run.

    Growth fields, structures, and per-time fits are aligned on the same
    active-array subset; params_for / structure_for fall back to the last
    fitted time for horizons beyond the window.
    """

    kernel: object
    structures: dict
    time_fits: dict
    growth: dict       # window time -> GrowthField (aligned with structures)
    r: np.ndarray
    q: int
    array_ids: np.ndarray
    r_degenerate: bool = False

    def last_time(self):
        return max(self.time_fits)

    def structure_for(self, t):
        return self.structures.get(t, self.structures[max(self.structures)])

    def params_for(self, t):
        fit = self.time_fits.get(t, self.time_fits[self.last_time()])
        return fit.rho, fit.sigma


def predict_growth(fit, t_star, history=None):
    """Mean and covariance spec of the growth field at time t_star.

    mean = sum_j r_j B_{t*}^{-1} B_{t*-j} G_{t*-j}, with the inverse
    applied as a sparse solve; covariance is sigma^2 (W_D - rho W)^{-1}
    at the t_star parameters, returned as (struct, rho, sigma).

    Args:
        history: optional dict time -> growth values overriding fit.growth
            (used by the iterative forecaster to feed predictions back).

    Raises:
        DataError: missing history at some required lag.
    """
    growth_at = dict(fit.growth)
    if history:
        growth_at.update(history)

    struct_star = fit.structure_for(t_star)
    rho_star, sigma_star = fit.params_for(t_star)
    drive = np.zeros(struct_star.n)
    for j in range(1, fit.q + 1):
        t_j = t_star - j
        if t_j not in growth_at:
            raise DataError(f"no growth history at time {t_j} for prediction")
        g_j = growth_at[t_j]
        values = g_j.values if hasattr(g_j, "values") else np.asarray(g_j, float)
        rho_j, _ = fit.params_for(t_j)
        drive += fit.r[j - 1] * b_apply(fit.structure_for(t_j), rho_j, values)
    mean = b_solve(struct_star, rho_star, drive)
    return mean, (struct_star, rho_star, sigma_star)


def _growth_variance_diag(cov_spec):
    struct, rho, sigma = cov_spec
    p = (struct.w_d - rho * struct.W).toarray()
    cf = sla.cho_factor(p, lower=True)
    inv = sla.cho_solve(cf, np.eye(struct.n))
    return sigma**2 * np.diag(inv).copy()


def forecast_reflectivity(fit, track, fields, t_star, p, velocity):
    """Iterative p-step nowcast from the fitted growth model.

    Seeds the two-step recursion with the observed reflectivities at
    t_star - 1 and t_star sampled along the track, predicts growth means
    one step at a time (feeding them back as history), and advances the
    array positions with the frozen velocity field.  Reported variances
    are the per-step conditional growth variances mapped through the
    recursion factor (independent of the history values).
    """
    if p < 1:
        raise ValueError("horizon must be >= 1")
    if t_star < 2 or t_star > len(fields):
        raise DataError(f"base time {t_star} outside the scan window")
    layout = track.layout
    ids = fit.array_ids

    sample_m1 = sample_reflectivity(fields[t_star - 2], track.positions_at(t_star - 1),
                                    layout.array_size)
    sample_0 = sample_reflectivity(fields[t_star - 1], track.positions_at(t_star),
                                   layout.array_size)
    z_buffer = {
        t_star - 1: sample_m1.values[ids],
        t_star: sample_0.values[ids],
    }

    step = fields[1].timestamp - fields[0].timestamp if len(fields) > 1 else 1
    base_ts = fields[t_star - 1].timestamp

    cur_track = _truncate_track(track, t_star)

    history = {}
    steps = []
    var_cache = {}
    for m in range(1, p + 1):
        t_pred = t_star + m - 1  # growth time driving scan t_star + m
        mean, cov_spec = predict_growth(fit, t_pred, history=history)
        history[t_pred] = mean
        z_next = z_buffer[t_star + m - 2] + 2.0 * mean
        z_buffer[t_star + m] = z_next

        key = (id(cov_spec[0]), cov_spec[1], cov_spec[2])
        if key not in var_cache:
            var_cache[key] = _growth_variance_diag(cov_spec)
        variance = 4.0 * var_cache[key]

        cur_track = translate(cur_track, velocity, 1)
        steps.append(ForecastStep(
            step=m,
            timestamp=base_ts + m * step,
            positions=cur_track.positions[-1][ids],
            values=z_next,
            variance=variance,
        ))
    return Forecast(method="stcar", base_time=t_star, base_timestamp=base_ts,
                    array_ids=ids, steps=steps)


def _truncate_track(track, n_keep):
    from .raster import TrackState

    if track.n_times == n_keep:
        return track
    return TrackState(layout=track.layout,
                      positions=track.positions[:n_keep],
                      step_velocities=track.step_velocities[:n_keep - 1])


def persistence_baseline(track, fields, t_star, p, velocity, array_ids=None):
    """Advection-only forecast: each array keeps its last observed
    reflectivity while its position advances under the frozen field."""
    if p < 1:
        raise ValueError("horizon must be >= 1")
    layout = track.layout
    ids = (np.arange(layout.n) if array_ids is None
           else np.asarray(array_ids, dtype=np.intp))
    sample_0 = sample_reflectivity(fields[t_star - 1], track.positions_at(t_star),
                                   layout.array_size)
    values = sample_0.values[ids]

    step = fields[1].timestamp - fields[0].timestamp if len(fields) > 1 else 1
    base_ts = fields[t_star - 1].timestamp

    cur_track = _truncate_track(track, t_star)

    steps = []
    for m in range(1, p + 1):
        cur_track = translate(cur_track, velocity, 1)
        steps.append(ForecastStep(
            step=m,
            timestamp=base_ts + m * step,
            positions=cur_track.positions[-1][ids],
            values=values.copy(),
            variance=np.zeros(len(ids)),
        ))
    return Forecast(method="persistence", base_time=t_star, base_timestamp=base_ts,
                    array_ids=ids, steps=steps)


def dbz_to_rainrate(dbz):
    """Rain rate in mm/hr from reflectivity in dBZ (Z = 200 R^1.6)."""
    z = np.power(10.0, np.asarray(dbz, dtype=float) / 10.0)
    return np.power(z / 200.0, 1.0 / 1.6)


def rainrate_to_dbz(rate):
    """Reflectivity in dBZ from rain rate in mm/hr (inverse power law)."""
    return 10.0 * np.log10(200.0 * np.power(np.asarray(rate, dtype=float), 1.6))


def forecast_to_field(fstep, template, method, base_time, max_dist_km):
    """Rasterize one forecast step by nearest-array assignment.

    Pixels farther than max_dist_km from every forecast center stay
    missing; values are clamped to the 0 dBZ no-echo floor at this
    serialization boundary (the model itself is never clamped).
    """
    from scipy.spatial import cKDTree

    h, w = template.height, template.width
    gx, gy = np.meshgrid(np.arange(w), np.arange(h))
    gkx, gky = template.pixel_to_km(gx.ravel(), gy.ravel())
    dist, idx = cKDTree(fstep.positions).query(np.column_stack([gkx, gky]))
    vals = np.maximum(fstep.values[idx], 0.0)
    grid = np.where(dist <= max_dist_km, vals, np.nan).reshape(h, w)
    return ReflectivityField(
        width=w, height=h, origin=template.origin,
        cell_size=template.cell_size, timestamp=fstep.timestamp,
        values=grid,
        annotation=f"FORECAST method={method} base={base_time} step={fstep.step}",
    )


def write_forecast_csv(forecasts, path):
    """Per-array forecast table: method, base_t, step, t, array_id, x_km,
    y_km, zhat_dbz, var_dbz2.  Values carry the 0 dBZ floor."""
    lines = ["method,base_t,step,t,array_id,x_km,y_km,zhat_dbz,var_dbz2"]
    for fc in forecasts:
        for st in fc.steps:
            clamped = np.maximum(st.values, 0.0)
            for k, aid in enumerate(fc.array_ids):
                lines.append(
                    f"{fc.method},{fc.base_timestamp},{st.step},{st.timestamp},"
                    f"{aid},{st.positions[k, 0]!r},{st.positions[k, 1]!r},"
                    f"{clamped[k]!r},{st.variance[k]!r}"
                )
    atomic_write_text(path, "\n".join(lines) + "\n")
