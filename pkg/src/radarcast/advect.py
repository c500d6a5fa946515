"""Forced advection: reflectivity along array trajectories and the
growth/decay field extracted as the Lagrangian mismatch between scans.

Each array carries one scalar reflectivity, the mean of its patch at the
tracked position.  Growth at time t is half the difference between the
reflectivity sampled two steps apart along the trajectory; advancing a
reflectivity by twice the growth inverts the extraction exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .raster import MISSING_LIMIT, atomic_write_text, bilinear_sample


class ArraySample(NamedTuple):
    """Per-array scalar reflectivities with validity flags."""

    values: np.ndarray
    valid: np.ndarray


@dataclass
class GrowthField:
    """Per-array reflectivity growth (dBZ per step) at one time index.

    Defined only at interior times of a window (needs scans one step
    before and after).  positions hold the array centers x_{i,t} in km.
    """

    t: int
    values: np.ndarray
    valid: np.ndarray
    positions: np.ndarray

    def __post_init__(self):
        if not (len(self.values) == len(self.valid) == len(self.positions)):
            raise ValueError("growth arrays must share one entry per array")


def sample_reflectivity(field, positions_km, array_size):
    """Mean patch reflectivity at each array position.

    Bilinear sampling on an array_size x array_size patch; cells outside
    the grid count as missing.  Patches missing at least the low-quality
    fraction (including arrays fully outside) are flagged invalid, below
    that missing cells contribute 0 dBZ.
    """
    positions_km = np.asarray(positions_km, dtype=float)
    n = len(positions_km)
    half = (array_size - 1) // 2
    offs = np.arange(array_size) - half

    cx, cy = field.km_to_pixel(positions_km[:, 0], positions_km[:, 1])
    px = cx[:, None, None] + offs[None, None, :]
    py = cy[:, None, None] + offs[None, :, None]
    patch = bilinear_sample(field.values, np.broadcast_to(px, (n, array_size, array_size)),
                            np.broadcast_to(py, (n, array_size, array_size)))
    missing = np.isnan(patch)
    frac = missing.reshape(n, -1).mean(axis=1)
    valid = frac < MISSING_LIMIT
    values = np.where(missing, 0.0, patch).reshape(n, -1).mean(axis=1)
    values = np.where(valid, values, np.nan)
    return ArraySample(values=values, valid=valid)


def growth_from_scans(sample_prev, sample_next, t, positions):
    """Growth as half the Lagrangian mismatch between two scans.

    sample_prev must be taken two steps before sample_next along the same
    trajectories.  Arrays invalid at either endpoint stay invalid.
    """
    if len(sample_prev.values) != len(sample_next.values):
        raise ValueError("array count mismatch between the two samples")
    valid = sample_prev.valid & sample_next.valid
    values = np.where(valid, (sample_next.values - sample_prev.values) / 2.0, np.nan)
    return GrowthField(t=t, values=values, valid=valid,
                       positions=np.asarray(positions, dtype=float))


def advance_reflectivity(sample_prev, growth):
    """Advance reflectivity two steps along trajectories: Z + 2 * growth."""
    if len(sample_prev.values) != len(growth.values):
        raise ValueError("array count mismatch between sample and growth")
    valid = sample_prev.valid & growth.valid
    values = np.where(valid, sample_prev.values + 2.0 * growth.values, np.nan)
    return ArraySample(values=values, valid=valid)


def extract_growth_series(fields, track, array_size):
    """Growth fields for every interior time of a tracked scan window.

    fields[k] is the scan at window time k+1; the track must cover the
    whole window.  An array that goes invalid (drifts off-grid or samples
    a low-quality patch) stays invalid for all later growth fields.
    """
    n_times = len(fields)
    if track.n_times < n_times:
        raise ValueError("track does not cover the scan window")
    samples = [
        sample_reflectivity(fields[k], track.positions_at(k + 1), array_size)
        for k in range(n_times)
    ]
    growths = []
    ever_invalid = np.zeros(len(track.positions[0]), dtype=bool)
    for t in range(2, n_times):  # window times with both neighbors observed
        ever_invalid |= ~samples[t - 2].valid
        ever_invalid |= ~samples[t].valid
        g = growth_from_scans(samples[t - 2], samples[t], t,
                              track.positions_at(t))
        g.valid &= ~ever_invalid
        g.values[~g.valid] = np.nan
        growths.append(g)
    return growths


def write_growth_csv(growths, path):
    """Write growth fields: array_id, t, x_km, y_km, growth_dbz, valid."""
    lines = ["array_id,t,x_km,y_km,growth_dbz,valid"]
    for g in growths:
        for i in range(len(g.values)):
            lines.append(
                f"{i},{g.t},{g.positions[i, 0]!r},{g.positions[i, 1]!r},"
                f"{g.values[i]!r},{int(g.valid[i])}"
            )
    atomic_write_text(path, "\n".join(lines) + "\n")
