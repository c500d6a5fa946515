"""End-to-end orchestration: scans -> motion -> tracks -> growth ->
per-time fits -> temporal coefficients -> forecasts -> evaluation.

The estimation stage works on the "active" arrays: those valid in every
growth field of the window.  Growth vectors, design matrices, and weight
structures are all restricted to that subset so the linear algebra stays
aligned; forecasts report the original array ids.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .advect import GrowthField, extract_growth_series, sample_reflectivity
from .errors import DataError, EstimationError
from .estimate import irwgls, wls_temporal
from .forecast import Forecast, SequenceFit, forecast_reflectivity, persistence_baseline
from .motion import smooth_velocity, translate, trec
from .raster import TrackState, build_layout, validate_sequence
from .stcar import build_weights, place_kernels

log = logging.getLogger(__name__)


@dataclass
class FitBundle:
    """A fitted window: everything needed to forecast and audit."""

    layout: object
    track: TrackState
    velocities: list      # one smoothed VelocityField per scan pair
    growths: list         # GrowthField per interior time (all arrays)
    fit: SequenceFit      # model restricted to the active arrays


def estimate_motion(fields, cfg):
    """Velocity fields for each consecutive scan pair, smoothed."""
    layout = build_layout(fields[0].width, fields[0].height,
                          cfg.array_size, cfg.spacing,
                          origin=fields[0].origin, cell_size=fields[0].cell_size)
    velocities = []
    for a, b in zip(fields[:-1], fields[1:]):
        raw = trec(a, b, layout, cfg.motion_config())
        velocities.append(smooth_velocity(raw, layout, cfg.motion_config()))
    return layout, velocities


def build_track(layout, velocities):
    """Forward-translate the layout through the per-step velocity fields."""
    track = TrackState.from_layout(layout)
    for vel in velocities:
        track = translate(track, vel, 1)
    return track


def fit_sequence(fields, cfg):
    """Run the full estimation pipeline on a scan window.

    Needs at least q+3 scans (q+1 interior growth times).  Non-converged
    per-time fits and a degenerate temporal solve are flagged, not fatal.

    Raises:
        DataError: too few scans, or too few jointly valid arrays.
    """
    validate_sequence(fields)
    q = cfg.q
    if len(fields) < q + 3:
        raise DataError(
            f"need at least {q + 3} scans for temporal order {q}, got {len(fields)}"
        )

    layout, velocities = estimate_motion(fields, cfg)
    track = build_track(layout, velocities)
    growths = extract_growth_series(fields, track, cfg.array_size)

    active = np.ones(layout.n, dtype=bool)
    for g in growths:
        active &= g.valid
    n_active = int(active.sum())
    if n_active < max(cfg.kernels, 4):
        raise DataError(
            f"only {n_active} arrays valid across the window; "
            f"cannot support {cfg.kernels} kernels"
        )

    kernel = place_kernels(growths[-1], growths[-1].positions, cfg.kernels,
                           cfg.kernel_bandwidth_km, cfg.seed)

    d = cfg.neighbor_distance_km
    if d <= 0:
        d = 1.5 * layout.spacing_km

    structures = {}
    time_fits = {}
    sub_growths = []
    est_cfg = cfg.estimation_config()
    for g in growths:
        struct = build_weights(track, g.t, d, cfg.weight_function, mask=active)
        positions = g.positions[active]
        design = kernel.design(positions)
        fit = irwgls(g.values[active], design, struct, est_cfg)
        structures[g.t] = struct
        time_fits[g.t] = fit
        sub_growths.append(GrowthField(t=g.t, values=g.values[active],
                                       valid=g.valid[active],
                                       positions=positions))
        if not fit.converged:
            log.warning("time %d: estimation did not converge in %d iterations",
                        g.t, fit.n_iter)

    r_degenerate = False
    try:
        r = wls_temporal(sub_growths, list(time_fits.values()),
                         list(structures.values()), q)
    except EstimationError as exc:
        log.warning("temporal fit degenerate (%s); using zero coefficients", exc)
        r = np.zeros(q)
        r_degenerate = True

    seq_fit = SequenceFit(
        kernel=kernel,
        structures=structures,
        time_fits=time_fits,
        growth={g.t: g for g in sub_growths},
        r=r,
        q=q,
        array_ids=np.flatnonzero(active),
        r_degenerate=r_degenerate,
    )
    return FitBundle(layout=layout, track=track, velocities=velocities,
                     growths=growths, fit=seq_fit)


def run_forecast(bundle, fields, horizon, method="stcar"):
    """Forecast from the last scan of a fitted window."""
    t_star = len(fields)
    frozen = bundle.velocities[-1]
    if method == "stcar":
        return forecast_reflectivity(bundle.fit, bundle.track, fields,
                                     t_star, horizon, frozen)
    if method == "persistence":
        return persistence_baseline(bundle.track, fields, t_star, horizon,
                                    frozen, array_ids=bundle.fit.array_ids)
    raise ValueError(f"unknown forecast method {method!r}")


def rebuild_fit(fields, cfg, kernel, q, r, time_fits):
    """Reconstruct a forecastable bundle from scans plus a stored fit.

    Motion, tracking, and growth extraction are deterministic, so the
    model state can be re-derived and married to the stored parameters.
    """
    validate_sequence(fields)
    layout, velocities = estimate_motion(fields, cfg)
    track = build_track(layout, velocities)
    growths = extract_growth_series(fields, track, cfg.array_size)

    active = np.ones(layout.n, dtype=bool)
    for g in growths:
        active &= g.valid

    d = cfg.neighbor_distance_km
    if d <= 0:
        d = 1.5 * layout.spacing_km

    structures = {}
    sub_growths = {}
    for g in growths:
        structures[g.t] = build_weights(track, g.t, d, cfg.weight_function,
                                        mask=active)
        sub_growths[g.t] = GrowthField(t=g.t, values=g.values[active],
                                       valid=g.valid[active],
                                       positions=g.positions[active])

    fit_times = {f.t for f in time_fits}
    if not fit_times.issubset(structures.keys()):
        raise DataError("stored fit covers times absent from the scan window")

    seq_fit = SequenceFit(
        kernel=kernel,
        structures=structures,
        time_fits={f.t: f for f in time_fits},
        growth=sub_growths,
        r=np.asarray(r, dtype=float),
        q=q,
        array_ids=np.flatnonzero(active),
    )
    return FitBundle(layout=layout, track=track, velocities=velocities,
                     growths=growths, fit=seq_fit)


def accumulate_mse(per_step_mse):
    """Running mean of per-step MSEs through each horizon."""
    vals = np.asarray(per_step_mse, dtype=float)
    return np.cumsum(vals) / np.arange(1, len(vals) + 1)


@dataclass
class EvalRow:
    method: str
    horizon: int
    n: int
    mse: float
    acc_mse: float
    n_thresh: int
    mse_thresh: float
    acc_mse_thresh: float


def evaluate_forecasts(forecasts, truth_fields, array_size, threshold):
    """Accumulative MSE of forecasts against truth scans, per method.

    Truth reflectivity is sampled per array (patch mean) at the forecast
    positions; predictions carry the 0 dBZ floor they are issued with.
    Alongside the all-array scores, arrays whose observed reflectivity
    exceeds the threshold are scored separately.

    Args:
        forecasts: Forecast objects sharing the same horizon.
        truth_fields: observed scans at the forecast steps, in order.

    Raises:
        DataError: horizon mismatch with the provided truth scans.
    """
    rows = []
    for fc in forecasts:
        if fc.horizon > len(truth_fields):
            raise DataError(
                f"forecast horizon {fc.horizon} exceeds {len(truth_fields)} "
                "truth scans"
            )
        mses, mses_thr, ns, ns_thr = [], [], [], []
        for m, st in enumerate(fc.steps):
            truth = sample_reflectivity(truth_fields[m], st.positions, array_size)
            ok = truth.valid & np.isfinite(st.values)
            pred = np.maximum(st.values[ok], 0.0)
            obs = truth.values[ok]
            err2 = (pred - obs) ** 2
            mses.append(float(err2.mean()) if len(err2) else np.nan)
            ns.append(int(ok.sum()))
            hot = obs > threshold
            mses_thr.append(float(err2[hot].mean()) if hot.any() else np.nan)
            ns_thr.append(int(hot.sum()))
        acc = accumulate_mse(mses)
        acc_thr = accumulate_mse(mses_thr)
        for m in range(fc.horizon):
            rows.append(EvalRow(
                method=fc.method, horizon=m + 1, n=ns[m], mse=mses[m],
                acc_mse=float(acc[m]), n_thresh=ns_thr[m],
                mse_thresh=mses_thr[m], acc_mse_thresh=float(acc_thr[m]),
            ))
    return rows


def write_metrics_csv(rows, path):
    from .raster import atomic_write_text

    lines = ["method,horizon,n,mse,acc_mse,n_thresh,mse_thresh,acc_mse_thresh"]
    for r in rows:
        lines.append(
            f"{r.method},{r.horizon},{r.n},{r.mse!r},{r.acc_mse!r},"
            f"{r.n_thresh},{r.mse_thresh!r},{r.acc_mse_thresh!r}"
        )
    atomic_write_text(path, "\n".join(lines) + "\n")
