"""Spatio-temporal conditional autoregressive machinery for growth fields.

The growth field at each time splits into a kernel-weighted linear trend
plus a zero-mean Gaussian residual whose precision is W_D - rho * W, built
from a fixed neighborhood graph with (possibly time-varying) symmetric
weights.  A temporal autoregression of order q ties the residual fields
together; this module provides the weight structure, the admissible rho
interval, covariance assembly, and an exact sampler used as the oracle in
tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .errors import DataError, NotPositiveDefinite

# Structures at or below this size get a cached dense spectrum of the
# normalized adjacency, making log-determinants O(n) per candidate rho.
EIG_DENSE_LIMIT = 2048

WEIGHT_FUNCTIONS = ("binary", "inverse_distance")


@dataclass
class KernelMeanModel:
    """Gaussian kernel mixture of local linear trends.

    Each kernel is a radially symmetric bump exp(-|x - c|^2 / (2 b^2))
    multiplying a (1, x, y) linear basis, so the design matrix has three
    columns per kernel.
    """

    centers: np.ndarray  # (J, 2) km
    bandwidth: float  # km

    @property
    def n_kernels(self):
        return len(self.centers)

    @property
    def n_coef(self):
        return 3 * self.n_kernels

    def kernel_weights(self, positions):
        """Bump values pi_j(x) at each position, shape (n, J)."""
        pos = np.asarray(positions, dtype=float)
        d2 = ((pos[:, None, :] - self.centers[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2.0 * self.bandwidth**2))

    def design(self, positions):
        """Stacked design matrix [diag(pi_1) F_1, ..., diag(pi_J) F_J]."""
        pos = np.asarray(positions, dtype=float)
        n = len(pos)
        pi = self.kernel_weights(pos)
        base = np.column_stack([np.ones(n), pos[:, 0], pos[:, 1]])
        cols = [pi[:, j:j + 1] * base for j in range(self.n_kernels)]
        return np.hstack(cols)


def place_kernels(growth, positions, n_kernels, bandwidth, seed):
    """Choose kernel centers by K-means over valid array positions.

    Positions are weighted by |growth| so kernels concentrate where the
    field is active; with an all-zero growth field the weighting falls
    back to uniform.  The seed fixes the clustering initialization.

    Raises:
        ValueError: fewer than one kernel, or fewer valid arrays than
            kernels.
    """
    from sklearn.cluster import KMeans

    if n_kernels < 1:
        raise ValueError("need at least one kernel")
    positions = np.asarray(positions, dtype=float)
    valid = np.asarray(growth.valid, dtype=bool)
    if valid.sum() < n_kernels:
        raise ValueError(
            f"{int(valid.sum())} valid arrays cannot support {n_kernels} kernels"
        )
    pts = positions[valid]
    w = np.abs(np.asarray(growth.values, dtype=float)[valid])
    if not np.isfinite(w).all() or w.sum() <= 0:
        w = np.ones(len(pts))
    km = KMeans(n_clusters=n_kernels, random_state=seed, n_init=10)
    km.fit(pts, sample_weight=w)
    return KernelMeanModel(centers=km.cluster_centers_.astype(float),
                           bandwidth=float(bandwidth))


@dataclass
class CarStructure:
    """Neighborhood weights for one time snapshot.

    The neighbor sets come from the initial array positions and stay
    fixed; the weights are evaluated at the snapshot time's positions, so
    they are symmetric whenever the weight function depends only on the
    pairwise distance.
    """

    t: int
    neighbor_distance: float
    weight_fn: str
    ids: np.ndarray  # original array indices behind each row
    W: sp.csr_matrix
    w_plus: np.ndarray
    _eigs: np.ndarray | None = field(default=None, repr=False)

    @property
    def n(self):
        return len(self.w_plus)

    @property
    def w_d(self):
        return sp.diags(self.w_plus, format="csr")

    def normalized_adjacency_eigs(self):
        """Spectrum of W_D^{-1/2} W W_D^{-1/2} (same as W_D^{-1} W),
        computed densely once and cached.  None above the dense limit."""
        if self._eigs is None and self.n <= EIG_DENSE_LIMIT:
            scale = 1.0 / np.sqrt(self.w_plus)
            s = (self.W.toarray() * scale[:, None]) * scale[None, :]
            self._eigs = np.sort(sla.eigvalsh(s))
        return self._eigs

    def logdet_wd(self):
        return float(np.log(self.w_plus).sum())


def build_weights(track, t, neighbor_distance, weight_fn="binary", mask=None):
    """Build the symmetric weight snapshot at window time t.

    Neighborhoods use the initial positions (strictly closer than
    neighbor_distance); weights use the positions at time t.  With
    weight_fn "binary" every neighbor pair gets weight 1, with
    "inverse_distance" it gets 1 / distance at time t.

    Args:
        mask: optional boolean selector restricting the structure to a
            subset of arrays (used to drop arrays invalid in the window).

    Raises:
        DataError: some array has no neighbors (zero row sum).
    """
    if weight_fn not in WEIGHT_FUNCTIONS:
        raise ValueError(f"unknown weight function {weight_fn!r}")
    initial = np.asarray(track.positions_at(1), dtype=float)
    current = np.asarray(track.positions_at(t), dtype=float)
    if mask is not None:
        ids = np.flatnonzero(np.asarray(mask, dtype=bool))
    else:
        ids = np.arange(len(initial))
    initial = initial[ids]
    current = current[ids]
    n = len(ids)
    if n == 0:
        raise DataError("no arrays available to build the weight structure")

    pairs = cKDTree(initial).query_pairs(r=neighbor_distance, output_type="ndarray")
    if len(pairs):
        d0 = np.linalg.norm(initial[pairs[:, 0]] - initial[pairs[:, 1]], axis=1)
        pairs = pairs[d0 < neighbor_distance]  # strict inequality

    if len(pairs) == 0:
        raise DataError(
            f"all {n} arrays isolated under neighbor distance {neighbor_distance}"
        )
    if weight_fn == "binary":
        wvals = np.ones(len(pairs))
    else:
        dt = np.linalg.norm(current[pairs[:, 0]] - current[pairs[:, 1]], axis=1)
        if (dt <= 0).any():
            raise DataError("coincident arrays make inverse-distance weights singular")
        wvals = 1.0 / dt

    rows = np.concatenate([pairs[:, 0], pairs[:, 1]])
    cols = np.concatenate([pairs[:, 1], pairs[:, 0]])
    vals = np.concatenate([wvals, wvals])
    w = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    w_plus = np.asarray(w.sum(axis=1)).ravel()
    if (w_plus <= 0).any():
        bad = ids[int(np.argmin(w_plus))]
        raise DataError(f"array {bad} is isolated (zero weight row sum)")

    return CarStructure(t=t, neighbor_distance=float(neighbor_distance),
                        weight_fn=weight_fn, ids=ids, W=w, w_plus=w_plus)


@dataclass
class CarParams:
    """Spatial association and scale for one time."""

    rho: float
    sigma: float
    bounds: tuple[float, float] | None = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


def rho_bounds(struct):
    """Admissible open interval for the spatial association parameter.

    The precision W_D - rho W is positive definite exactly for rho between
    the reciprocals of the extreme eigenvalues of W_D^{-1} W; those are
    computed on the symmetrized similar matrix.  The interval always
    contains 0.
    """
    eigs = struct.normalized_adjacency_eigs()
    if eigs is not None:
        lo_eig, hi_eig = eigs[0], eigs[-1]
    else:
        scale = 1.0 / np.sqrt(struct.w_plus)
        s = sp.diags(scale) @ struct.W @ sp.diags(scale)
        hi_eig = spla.eigsh(s, k=1, which="LA", return_eigenvectors=False)[0]
        lo_eig = spla.eigsh(s, k=1, which="SA", return_eigenvectors=False)[0]
    return (1.0 / lo_eig, 1.0 / hi_eig)


def precision_matrix(struct, rho, sigma=1.0):
    """Sparse precision (W_D - rho W) / sigma^2."""
    return (struct.w_d - rho * struct.W) / sigma**2


def b_matrix(struct, rho):
    """Sparse B = I - rho W_D^{-1} W."""
    n = struct.n
    inv_wd = sp.diags(1.0 / struct.w_plus)
    return sp.identity(n, format="csr") - rho * (inv_wd @ struct.W)


def b_apply(struct, rho, x):
    """B x without forming B: x - rho * (W x) / w_plus."""
    return x - rho * (struct.W @ x) / struct.w_plus


def b_solve(struct, rho, x):
    """B^{-1} x via the sparse solve (W_D - rho W) y = W_D x."""
    p = (struct.w_d - rho * struct.W).tocsc()
    return spla.spsolve(p, struct.w_plus * x)


def cholesky_logdet(mat):
    """Log-determinant of an SPD matrix via Cholesky.

    Dense input uses LAPACK directly; sparse input uses a symmetric-mode
    LU factorization whose positive pivots certify definiteness.

    Raises:
        NotPositiveDefinite: the matrix is not positive definite.
    """
    if sp.issparse(mat):
        try:
            lu = spla.splu(mat.tocsc(), permc_spec="MMD_AT_PLUS_A",
                           options={"SymmetricMode": True},
                           diag_pivot_thresh=0.0)
        except RuntimeError as exc:
            raise NotPositiveDefinite(str(exc)) from exc
        diag = lu.U.diagonal()
        if (diag <= 0).any():
            raise NotPositiveDefinite("nonpositive pivot in factorization")
        return float(np.log(diag).sum())
    try:
        chol = sla.cholesky(np.asarray(mat), lower=True)
    except sla.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    return 2.0 * float(np.log(np.diag(chol)).sum())


def car_covariance(struct, params):
    """Dense covariance sigma^2 (W_D - rho W)^{-1}.

    The factorization itself is the definiteness check, so a rho outside
    the admissible interval surfaces as NotPositiveDefinite.
    """
    p = (struct.w_d - params.rho * struct.W).toarray()
    try:
        cf = sla.cho_factor(p, lower=True)
    except sla.LinAlgError as exc:
        lo, hi = rho_bounds(struct)
        raise NotPositiveDefinite(
            f"rho={params.rho} gives an indefinite precision "
            f"(admissible interval ({lo:.6g}, {hi:.6g}))"
        ) from exc
    cov = sla.cho_solve(cf, np.eye(struct.n))
    cov *= params.sigma**2
    return (cov + cov.T) / 2.0


def innovation_sampler(struct, params, rng):
    """Draw one innovation with covariance sigma^2 W_D^{-1} P W_D^{-1},
    P = W_D - rho W, using the dense Cholesky factor of P."""
    p = (struct.w_d - params.rho * struct.W).toarray()
    try:
        chol = sla.cholesky(p, lower=True)
    except sla.LinAlgError as exc:
        raise NotPositiveDefinite(f"rho={params.rho} outside bounds") from exc
    xi = rng.standard_normal(struct.n)
    return params.sigma * (chol @ xi) / struct.w_plus


def sample_stcar(struct, params, r, horizon, seed, init_history=None):
    """Simulate residual growth fields from the space-time autoregression.

    Each step solves B Y_t = sum_j r_j B Y_{t-j} + eps_t with innovations
    from the conditional covariance; a step with no available history is a
    plain marginal draw N(0, sigma^2 (W_D - rho W)^{-1}).

    Args:
        struct: weight structure shared across steps.
        params: CarParams, or a list of one per step.
        r: temporal coefficients (length q).
        horizon: number of fields to generate.
        seed: RNG seed.
        init_history: optional list of earlier fields, most recent last.

    Returns:
        List of horizon arrays of shape (n,).
    """
    rng = np.random.default_rng(seed)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    q = len(r)
    if isinstance(params, CarParams):
        params = [params] * horizon
    if len(params) != horizon:
        raise ValueError("need one CarParams per step")

    history = [np.asarray(h, dtype=float) for h in (init_history or [])]
    out = []
    for k in range(horizon):
        pk = params[k]
        eps = innovation_sampler(struct, pk, rng)
        drive = eps.copy()
        for j in range(1, q + 1):
            if len(history) >= j:
                # B at the lagged time; structure shared, params may vary.
                pj = params[max(k - j, 0)] if k - j >= 0 else pk
                drive += r[j - 1] * b_apply(struct, pj.rho, history[-j])
        y = b_solve(struct, pk.rho, drive)
        history.append(y)
        out.append(y)
    return out
