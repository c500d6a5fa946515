"""Two-step parameter estimation for the growth model.

Per time: iteratively re-weighted generalized least squares alternates a
GLS solve for the trend coefficients with a profiled 1-D maximum
likelihood search for the spatial association and scale, rebuilding the
working covariance each round.  Across times: the temporal coefficients
come from one stacked weighted least squares solve on the growth fields
themselves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from .errors import DataError, EstimationError
from .raster import atomic_write_text
from .stcar import KernelMeanModel, cholesky_logdet, precision_matrix, rho_bounds

# Residual energy (relative to the data) below which a fit is treated as
# an exact interpolation rather than sent to the likelihood search.
_DEGENERATE_RATIO = 1e-20


@dataclass
class EstimationConfig:
    max_iter: int = 20
    tol: float = 1e-4          # relative-change stopping rule
    rho_tol: float = 1e-8      # line-search tolerance, fraction of interval
    multistart: int = 5        # segments for the rho search
    ridge: float = 1e-8        # trace-scaled ridge on the normal equations
    q: int = 2                 # temporal autoregression order

    def validate(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.tol <= 0 or self.rho_tol <= 0:
            raise ValueError("tolerances must be > 0")
        if self.multistart < 1:
            raise ValueError("multistart must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if self.q < 1:
            raise ValueError("q must be >= 1")
        return self


@dataclass
class TimeFit:
    """One time's estimates plus convergence metadata."""

    t: int
    gamma: np.ndarray
    rho: float
    sigma: float
    loglik: float
    n_iter: int
    converged: bool
    degenerate: bool = False


def fgls_gamma(g, design, precision=None, ridge=0.0):
    """Feasible GLS estimate of the trend coefficients.

    Solves (F' Q F + eps I) gamma = F' Q g where Q is the precision
    (inverse covariance) of the residual field; Q = None means identity,
    i.e. ordinary least squares.  eps is ridge scaled by trace(F'QF)/p.

    Raises:
        EstimationError: non-finite inputs or an unsolvable system.
    """
    g = np.asarray(g, dtype=float)
    design = np.asarray(design, dtype=float)
    if not np.isfinite(g).all() or not np.isfinite(design).all():
        raise EstimationError("non-finite values in the GLS inputs")
    if precision is None:
        qf = design
        qg = g
    else:
        qf = precision @ design
        qg = precision @ g
    a = design.T @ qf
    b = design.T @ qg
    p = a.shape[0]
    if ridge > 0:
        a = a + (ridge * np.trace(a) / p) * np.eye(p)
    try:
        return sla.solve(a, b, assume_a="pos")
    except sla.LinAlgError:
        sol, _, rank, _ = sla.lstsq(a, b)
        if rank < p and ridge > 0:
            raise EstimationError("design rank deficient beyond ridge repair")
        return sol


def _profile_terms(y, struct):
    """Quadratic-form coefficients of y' (W_D - rho W) y as (a, b):
    the value is a - rho * b."""
    y = np.asarray(y, dtype=float)
    a = float(y @ (struct.w_plus * y))
    b = float(y @ (struct.W @ y))
    return a, b


def _logdet_precision(struct, rho):
    """log |W_D - rho W|, via the cached spectrum when available."""
    eigs = struct.normalized_adjacency_eigs()
    if eigs is not None:
        return struct.logdet_wd() + float(np.log1p(-rho * eigs).sum())
    return cholesky_logdet(precision_matrix(struct, rho))


def profile_mle_rho_sigma(y, struct, multistart=5, rho_tol=1e-8, fixed_rho=None):
    """Profile maximum likelihood for the spatial association and scale.

    Minimizes (n/2) log(y' P y / n) - log|P| / 2 over rho strictly inside
    the admissible interval (P = W_D - rho W), using bracketed searches on
    equal sub-intervals to guard against multimodality; the scale then
    follows in closed form.  Passing fixed_rho skips the search.

    Returns:
        (rho_hat, sigma_hat, loglik) with loglik the full Gaussian
        log-likelihood at the optimum.

    Raises:
        EstimationError: zero or non-finite residuals.
    """
    y = np.asarray(y, dtype=float)
    if not np.isfinite(y).all():
        raise EstimationError("non-finite residuals")
    n = struct.n
    a, b = _profile_terms(y, struct)
    if a <= 0.0:
        raise EstimationError("zero residual field: likelihood is degenerate")

    def objective(rho):
        quad = a - rho * b
        if quad <= 0.0:
            return np.inf
        return 0.5 * n * math.log(quad / n) - 0.5 * _logdet_precision(struct, rho)

    if fixed_rho is not None:
        rho_hat = float(fixed_rho)
    else:
        lo, hi = rho_bounds(struct)
        width = hi - lo
        delta = 1e-6 * width
        lo, hi = lo + delta, hi - delta
        edges = np.linspace(lo, hi, multistart + 1)
        best = (np.inf, 0.0)
        for k in range(multistart):
            res = minimize_scalar(objective, bounds=(edges[k], edges[k + 1]),
                                  method="bounded",
                                  options={"xatol": rho_tol * width})
            if res.fun < best[0]:
                best = (res.fun, float(res.x))
        if not np.isfinite(best[0]):
            raise EstimationError("profile objective non-finite over the interval")
        rho_hat = best[1]

    sigma2 = (a - rho_hat * b) / n
    sigma_hat = math.sqrt(max(sigma2, 0.0))
    loglik = (-0.5 * n * math.log(2.0 * math.pi * sigma2)
              + 0.5 * _logdet_precision(struct, rho_hat) - 0.5 * n)
    return rho_hat, sigma_hat, loglik


def irwgls(g, design, struct, cfg):
    """Iteratively re-weighted GLS for one time's growth field.

    Starts from an identity working covariance (so the first pass is
    OLS), then alternates the trend solve and the profiled likelihood
    until the relative changes of all three estimates drop below the
    tolerance.  Non-convergence is reported in the flag, not raised.
    An (almost) exactly interpolated field short-circuits with rho = 0
    and the residual scale.
    """
    cfg.validate()
    g = np.asarray(g, dtype=float)
    n = struct.n
    if len(g) != n:
        raise ValueError("growth vector does not match the weight structure")

    scale_a, _ = _profile_terms(g, struct)
    precision = None
    gamma = rho = sigma = None
    loglik = math.nan
    converged = False
    degenerate = False
    n_iter = 0

    for n_iter in range(1, cfg.max_iter + 1):
        gamma_new = fgls_gamma(g, design, precision, ridge=cfg.ridge)
        resid = g - design @ gamma_new
        a, _ = _profile_terms(resid, struct)
        if a <= _DEGENERATE_RATIO * max(scale_a, 1e-300):
            rho_new, sigma_new = 0.0, math.sqrt(a / n)
            loglik = math.inf
            degenerate = True
        else:
            rho_new, sigma_new, loglik = profile_mle_rho_sigma(
                resid, struct, multistart=cfg.multistart, rho_tol=cfg.rho_tol)

        if gamma is not None:
            rel = max(
                _rel_change(gamma_new, gamma),
                _rel_change(rho_new, rho),
                _rel_change(sigma_new, sigma),
            )
            if rel < cfg.tol:
                gamma, rho, sigma = gamma_new, rho_new, sigma_new
                converged = True
                break
        gamma, rho, sigma = gamma_new, rho_new, sigma_new
        if degenerate:
            converged = True
            break
        precision = precision_matrix(struct, rho, sigma)

    return TimeFit(t=struct.t, gamma=gamma, rho=rho, sigma=sigma,
                   loglik=loglik, n_iter=n_iter, converged=converged,
                   degenerate=degenerate)


def _rel_change(new, old):
    new = np.atleast_1d(np.asarray(new, dtype=float))
    old = np.atleast_1d(np.asarray(old, dtype=float))
    return float(np.linalg.norm(new - old) / (np.linalg.norm(old) + 1e-8))


def wls_temporal(growths, fits, structs, q):
    """Weighted least squares for the temporal coefficients.

    Stacks the regression of each growth field on its q predecessors
    (the trend and residual lags collapse onto the lagged growth itself),
    with per-time weights w_plus / sigma^2, and solves the q x q normal
    equations.  Growth vectors must be aligned with the structure rows;
    only arrays valid at the response and all lag times enter.

    Raises:
        DataError: fewer than q+1 growth fields.
        EstimationError: singular normal equations (e.g. all-zero growth).
    """
    if len(growths) < q + 1:
        raise DataError(f"need at least {q + 1} growth fields for order {q}")
    by_t = {g.t: g for g in growths}
    fit_by_t = {f.t: f for f in fits}
    struct_by_t = {s.t: s for s in structs}

    ata = np.zeros((q, q))
    atb = np.zeros(q)
    used = 0
    for g in growths:
        t = g.t
        lags = [by_t.get(t - j) for j in range(1, q + 1)]
        if any(lag is None for lag in lags):
            continue
        fit = fit_by_t[t]
        struct = struct_by_t[t]
        if len(g.values) != struct.n:
            raise ValueError("growth vector not aligned with the weight structure")
        rows = g.valid.copy()
        for lag in lags:
            rows &= lag.valid
        if not rows.any():
            continue
        x = np.column_stack([lag.values[rows] for lag in lags])
        resp = g.values[rows]
        wts = struct.w_plus[rows] / max(fit.sigma**2, 1e-300)
        ata += (x * wts[:, None]).T @ x
        atb += x.T @ (wts * resp)
        used += 1
    if used == 0:
        raise DataError("no usable response times for the temporal fit")
    try:
        r = sla.solve(ata, atb, assume_a="pos")
    except sla.LinAlgError as exc:
        raise EstimationError("singular temporal normal equations") from exc
    if not np.isfinite(r).all():
        raise EstimationError("non-finite temporal coefficients")
    return r


def write_fit_file(path, kernel, q, r, fits, metadata=None):
    """Serialize a fitted model as flat key-value text (decimal exact)."""
    lines = ["STCARFIT v1"]
    meta = dict(metadata or {})
    for key, val in meta.items():
        lines.append(f"{key} = {val}")
    lines.append(f"kernels = {kernel.n_kernels}")
    lines.append(f"bandwidth_km = {kernel.bandwidth!r}")
    centers = " ".join(repr(float(v)) for v in kernel.centers.ravel())
    lines.append(f"kernel_centers = {centers}")
    lines.append(f"q = {q}")
    lines.append("r = " + " ".join(repr(float(v)) for v in np.atleast_1d(r)))
    for fit in fits:
        lines.append(f"[time {fit.t}]")
        lines.append(f"rho = {fit.rho!r}")
        lines.append(f"sigma = {fit.sigma!r}")
        lines.append(f"loglik = {fit.loglik!r}")
        lines.append(f"iterations = {fit.n_iter}")
        lines.append(f"converged = {int(fit.converged)}")
        lines.append(f"degenerate = {int(fit.degenerate)}")
        lines.append("gamma = " + " ".join(repr(float(v)) for v in fit.gamma))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_fit_file(path):
    """Parse a fit file back into (kernel, q, r, fits, metadata)."""
    try:
        with open(path) as fh:
            lines = [ln.rstrip("\n") for ln in fh]
    except OSError as exc:
        raise DataError(f"cannot read fit file {path}: {exc}") from exc
    if not lines or lines[0].strip() != "STCARFIT v1":
        raise DataError(f"{path}: not a fit file")

    meta = {}
    fits = []
    current = None
    known = {"kernels", "bandwidth_km", "kernel_centers", "q", "r"}
    for ln in lines[1:]:
        ln = ln.strip()
        if not ln:
            continue
        if ln.startswith("[time "):
            if current is not None:
                fits.append(current)
            current = {"t": int(ln[len("[time "):-1])}
            continue
        if "=" not in ln:
            raise DataError(f"{path}: malformed line {ln!r}")
        key, _, val = ln.partition("=")
        key, val = key.strip(), val.strip()
        if current is None:
            meta[key] = val
        else:
            current[key] = val
    if current is not None:
        fits.append(current)

    missing = known - set(meta)
    if missing:
        raise DataError(f"{path}: missing keys {sorted(missing)}")
    n_kernels = int(meta.pop("kernels"))
    bandwidth = float(meta.pop("bandwidth_km"))
    centers = np.fromstring(meta.pop("kernel_centers"), sep=" ").reshape(n_kernels, 2)
    q = int(meta.pop("q"))
    r = np.fromstring(meta.pop("r"), sep=" ")
    if len(r) != q:
        raise DataError(f"{path}: expected {q} temporal coefficients, got {len(r)}")

    parsed = []
    for blk in fits:
        parsed.append(TimeFit(
            t=int(blk["t"]),
            gamma=np.fromstring(blk["gamma"], sep=" "),
            rho=float(blk["rho"]),
            sigma=float(blk["sigma"]),
            loglik=float(blk["loglik"]),
            n_iter=int(blk["iterations"]),
            converged=bool(int(blk["converged"])),
            degenerate=bool(int(blk["degenerate"])),
        ))
    kernel = KernelMeanModel(centers=centers, bandwidth=bandwidth)
    return kernel, q, r, parsed, meta
