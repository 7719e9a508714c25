"""Linear mixed models with cluster and individual random intercepts.

Builds fixed-effect design matrices for the four covariate-adjustment
strategies and fits

    y = X beta + Z_c c + Z_d d + eps,
    c ~ N(0, s2_c I),  d ~ N(0, s2_d I),  eps ~ N(0, s2_e I)

by REML.  The marginal covariance V is block diagonal over clusters and,
within a cluster, a rank-structured update of the identity: with variance
ratios g_c = s2_c/s2_e, g_d = s2_d/s2_e and A = [sqrt(g_d) Z, sqrt(g_c) 1],

    V_i = s2_e * (I + A A').

All solves and determinants go through the (m_i+1) x (m_i+1) capacitance
K = I + A'A, which is diagonal-plus-arrow (Z'Z is diagonal with the
per-individual row counts), so one objective evaluation costs
O(sum_i m_i p^2) regardless of the number of rows.  The residual variance
is profiled out analytically and the two ratios are optimized by
L-BFGS-B with an analytic gradient; boundary estimates (ratio ~ 0) are
flagged as singular fits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

_BIG = 1e30


class DfUnavailableError(RuntimeError):
    """Satterthwaite degrees of freedom could not be computed."""


class ModelVariant(str, Enum):
    """The four analysis models (fixed-effect column sets)."""

    STEPWISE_LINEAR_COV = "eq1"  # intercept, exposure, current covariate
    FIXED_TIME = "eq2"  # intercept, exposure, period dummies
    FIXED_TIME_BASELINE_COV = "eq3"  # eq2 + covariate at entry
    FIXED_TIME_STEPWISE_COV = "eq4"  # eq2 + current covariate

    @property
    def uses_period_dummies(self) -> bool:
        return self is not ModelVariant.STEPWISE_LINEAR_COV


class ModelMatrices:
    """Fixed-effects matrix, outcome vector, and grouping indices.

    Rows are kept in dataset order; fitting code works on an internally
    cluster-sorted copy.  ``contrast_theta`` selects the exposure
    coefficient.
    """

    def __init__(self, X, y, cluster_index, individual_index, variant,
                 column_names):
        self.X = np.ascontiguousarray(X, dtype=np.float64)
        self.y = np.asarray(y, dtype=np.float64)
        self.cluster_index = np.asarray(cluster_index)
        self.individual_index = np.asarray(individual_index)
        self.variant = variant
        self.column_names = list(column_names)
        self.contrast_theta = np.zeros(self.X.shape[1])
        self.contrast_theta[1] = 1.0
        self._structure: _Structure | None = None

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_params(self) -> int:
        return self.X.shape[1]

    @property
    def structure(self) -> "_Structure":
        if self._structure is None:
            self._structure = _Structure(self)
        return self._structure


def build_matrices(dataset, spec: ModelVariant) -> ModelMatrices:
    """Assemble X and y for one analysis model from a generated dataset.

    Period dummies use period 1 as the reference level.  Raises
    ``ValueError`` on empty data or a rank-deficient X.
    """
    variant = ModelVariant(spec)
    n = dataset.n_obs
    if n == 0:
        raise ValueError("dataset has no observations")

    cols = [np.ones(n), dataset.exposed.astype(np.float64)]
    names = ["intercept", "exposure"]
    if variant.uses_period_dummies:
        n_periods = dataset.design.n_periods
        for j in range(2, n_periods + 1):
            cols.append((dataset.period == j).astype(np.float64))
            names.append(f"period_{j}")
    if variant is ModelVariant.STEPWISE_LINEAR_COV:
        cols.append(dataset.covariate.astype(np.float64))
        names.append("covariate")
    elif variant is ModelVariant.FIXED_TIME_BASELINE_COV:
        cols.append(dataset.baseline_covariate[dataset.individual])
        names.append("baseline_covariate")
    elif variant is ModelVariant.FIXED_TIME_STEPWISE_COV:
        cols.append(dataset.covariate.astype(np.float64))
        names.append("covariate")

    X = np.column_stack(cols)
    _, cluster_codes = np.unique(dataset.cluster, return_inverse=True)
    _, individual_codes = np.unique(dataset.individual, return_inverse=True)

    xtx = X.T @ X
    eigvals = np.linalg.eigvalsh(xtx)
    if eigvals[0] <= 1e-10 * max(eigvals[-1], 1.0):
        raise ValueError(
            f"rank-deficient design matrix for {variant.value} "
            f"(relative min eigenvalue {eigvals[0] / max(eigvals[-1], 1.0):.2e})"
        )
    return ModelMatrices(X, dataset.outcome, cluster_codes, individual_codes,
                         variant, names)


# ---------------------------------------------------------------------------
# Per-cluster structure and the profiled REML criterion
# ---------------------------------------------------------------------------


class _ClusterBlock:
    """Static per-cluster pieces reused by every objective evaluation."""

    __slots__ = ("rows", "X", "y", "codes", "counts", "n", "m", "P", "s")

    def __init__(self, rows, X, y, individual_index):
        self.rows = rows
        self.X = X
        self.y = y
        _, codes = np.unique(individual_index, return_inverse=True)
        self.codes = codes
        self.counts = np.bincount(codes).astype(np.float64)
        self.n = X.shape[0]
        self.m = self.counts.shape[0]
        B = np.column_stack([X, y])
        q = B.shape[1]
        P = np.empty((self.m, q))
        for col in range(q):
            P[:, col] = np.bincount(codes, weights=B[:, col], minlength=self.m)
        self.P = P
        self.s = B.sum(axis=0)


class _Structure:
    """Cluster-sorted data plus groupby sums shared across evaluations."""

    def __init__(self, mats: ModelMatrices):
        order = np.argsort(mats.cluster_index, kind="stable")
        self.order = order
        self.X = mats.X[order]
        self.y = mats.y[order]
        self.cluster = np.asarray(mats.cluster_index)[order]
        self.individual = np.asarray(mats.individual_index)[order]
        self.p = mats.n_params
        self.N = mats.n_obs
        bounds = np.flatnonzero(np.diff(self.cluster)) + 1
        starts = np.concatenate([[0], bounds])
        stops = np.concatenate([bounds, [self.N]])
        self.blocks = [
            _ClusterBlock(
                np.arange(a, b), self.X[a:b], self.y[a:b], self.individual[a:b]
            )
            for a, b in zip(starts, stops)
        ]
        self.n_clusters = len(self.blocks)
        B = np.column_stack([self.X, self.y])
        self.BtB = B.T @ B


def _arrow_solve(l, w, s, T):
    """Solve K z = T for the arrow matrix with Cholesky [[diag(l),0],[w',s]]."""
    u_top = T[:-1] / l[:, None]
    u_last = (T[-1] - w @ u_top) / s
    z_last = u_last / s
    z_top = (u_top - np.outer(w, z_last)) / l[:, None]
    return np.vstack([z_top, z_last[None, :]])


def _cluster_factor(blk: _ClusterBlock, gc: float, gd: float):
    """Arrow Cholesky of K = I + A'A for one cluster at ratios (gc, gd)."""
    delta = 1.0 + gd * blk.counts
    l = np.sqrt(delta)
    w = math.sqrt(gd * gc) * blk.counts / l
    # Schur complement is 1 + gc * sum(n_k / (1 + gd n_k)) >= 1.
    s2 = 1.0 + gc * blk.n - w @ w
    return delta, l, w, math.sqrt(s2), s2


def _cluster_pass(struct: _Structure, gc: float, gd: float, keep: bool = False):
    """One sweep over clusters: M = [X|y]' Sigma^-1 [X|y] and log|Sigma|."""
    sq_d = math.sqrt(gd)
    sq_c = math.sqrt(gc)
    M = struct.BtB.copy()
    logdet = 0.0
    saved = [] if keep else None
    for blk in struct.blocks:
        delta, l, w, s, s2 = _cluster_factor(blk, gc, gd)
        T = np.vstack([sq_d * blk.P, sq_c * blk.s[None, :]])
        z = _arrow_solve(l, w, s, T)
        M -= T.T @ z
        logdet += float(np.log(delta).sum() + math.log(s2))
        if keep:
            saved.append((l, w, s, z))
    return M, logdet, saved


def _gls_from_m(M, N, p):
    """beta, residual quadratic form, Cholesky factor, and log|X'Sigma^-1 X|."""
    XtSX = M[:p, :p]
    XtSy = M[:p, p]
    ytSy = M[p, p]
    L = np.linalg.cholesky(XtSX)
    u = solve_triangular(L, XtSy, lower=True)
    beta = solve_triangular(L.T, u, lower=False)
    S = float(ytSy - u @ u)
    logdet_xsx = 2.0 * float(np.log(np.diag(L)).sum())
    return beta, S, L, logdet_xsx


def _profiled(struct: _Structure, gamma, want_grad: bool):
    """Profiled REML criterion f(gc, gd) = (N-p) log S + log|Sigma| + log|X'Sigma^-1 X|.

    Minimizing f maximizes the REML log-likelihood with the residual
    variance profiled out as S/(N-p).  Returns (f, grad or None).
    """
    gc, gd = float(gamma[0]), float(gamma[1])
    p = struct.p
    N = struct.N
    M, logdet_sigma, saved = _cluster_pass(struct, gc, gd, keep=want_grad)
    try:
        beta, S, L, logdet_xsx = _gls_from_m(M, N, p)
    except np.linalg.LinAlgError:
        return _BIG, np.zeros(2)
    if S <= 0 or not np.isfinite(S):
        return _BIG, np.zeros(2)
    f = (N - p) * math.log(S) + logdet_sigma + logdet_xsx
    if not np.isfinite(f):
        return _BIG, np.zeros(2)
    if not want_grad:
        return f, None

    sq_d = math.sqrt(gd)
    sq_c = math.sqrt(gc)
    eye = np.eye(p)
    Bsig = cho_solve((L, True), eye)  # (X'Sigma^-1 X)^-1
    quad_c = quad_d = 0.0  # r~' G_m r~ with r~ = Sigma^-1 r
    tr_c = tr_d = 0.0  # tr(Sigma^-1 G_m)
    Fc = np.zeros((p, p))
    Fd = np.zeros((p, p))
    for blk, (l, w, s, z) in zip(struct.blocks, saved):
        counts = blk.counts
        delta = l * l
        s2 = s * s
        # residual group sums
        z_r = blk.P[:, p] - blk.P[:, :p] @ beta
        o_r = blk.s[p] - blk.s[:p] @ beta
        a_r = np.concatenate([sq_d * z_r, [sq_c * o_r]])
        h = _arrow_solve(l, w, s, a_r[:, None])[:, 0]
        zt_sr = z_r - (sq_d * counts * h[:-1] + sq_c * counts * h[-1])
        ot_sr = o_r - (sq_d * (counts @ h[:-1]) + sq_c * blk.n * h[-1])
        quad_d += float(zt_sr @ zt_sr)
        quad_c += float(ot_sr * ot_sr)
        # traces of Sigma^-1 against the two random-effect Grams
        a1 = np.concatenate([sq_d * counts, [sq_c * blk.n]])
        h1 = _arrow_solve(l, w, s, a1[:, None])[:, 0]
        tr_c += blk.n - float(a1 @ h1)
        v = sq_d * sq_c * counts  # arrow border of K itself
        vd = v / delta
        kinv_mm = 1.0 / s2
        kinv_km = -vd / s2
        kinv_kk = 1.0 / delta + vd * vd / s2
        n2 = counts * counts
        tr_kh = float(
            (kinv_kk * (gd * n2)).sum()
            + 2.0 * (kinv_km * (sq_d * sq_c * n2)).sum()
            + kinv_mm * gc * n2.sum()
        )
        tr_d += float(counts.sum()) - tr_kh
        # fixed-effect information pieces
        zX = z[:, :p]
        zt_sx = blk.P[:, :p] - (sq_d * counts[:, None] * zX[:-1]
                                + sq_c * np.outer(counts, zX[-1]))
        ot_sx = blk.s[:p] - (sq_d * (counts @ zX[:-1]) + sq_c * blk.n * zX[-1])
        Fd += zt_sx.T @ zt_sx
        Fc += np.outer(ot_sx, ot_sx)

    coef = (N - p) / S
    g_c = -coef * quad_c + tr_c - float((Bsig * Fc).sum())
    g_d = -coef * quad_d + tr_d - float((Bsig * Fd).sum())
    return f, np.array([g_c, g_d])


def _initial_gamma(struct: _Structure) -> np.ndarray:
    """Moment-based starting ratios from OLS residual decomposition."""
    X, y = struct.X, struct.y
    beta0, *_ = np.linalg.lstsq(X, y, rcond=None)
    e = y - X @ beta0
    codes = np.unique(struct.individual, return_inverse=True)[1]
    m_tot = codes.max() + 1
    ind_sum = np.bincount(codes, weights=e, minlength=m_tot)
    ind_cnt = np.bincount(codes, minlength=m_tot).astype(np.float64)
    ind_mean = ind_sum / ind_cnt
    within_ss = float(e @ e - ind_mean @ ind_sum)
    dof = max(struct.N - m_tot, 1)
    v_w = max(within_ss / dof, 1e-12)

    cl_mean = np.array([blk.y.mean() - blk.X.mean(axis=0) @ beta0
                        for blk in struct.blocks])
    ind_cluster = np.bincount(codes, weights=struct.cluster, minlength=m_tot)
    ind_cluster = (ind_cluster / ind_cnt).astype(np.int64)
    centered = ind_mean - cl_mean[ind_cluster]
    nbar = float(ind_cnt.mean())
    var_d = max(float(centered @ centered) / max(m_tot - 1, 1) - v_w / nbar, 0.0)
    var_c = 0.0
    if len(cl_mean) > 1:
        var_c = max(float(np.var(cl_mean)) - var_d / max(m_tot / len(cl_mean), 1.0), 0.0)
    g0 = np.array([var_c / v_w, var_d / v_w])
    return np.clip(g0, 1e-2, 1e6)


# ---------------------------------------------------------------------------
# Public fitting API
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FitOptions:
    """Optimizer tolerances; ``boundary_tol`` on the variance ratios
    defines a singular fit."""

    max_iter: int = 500
    ftol: float = 1e-8
    gtol: float = 1e-5
    boundary_tol: float = 1e-6


@dataclass
class FitResult:
    """A fitted model: estimates, flags, and cached per-cluster pieces.

    ``varcomps`` is (s2_cluster, s2_individual, s2_error); ``vcov_model``
    is the model-based covariance (X'V^-1 X)^-1 of the fixed effects.
    """

    beta: np.ndarray
    varcomps: np.ndarray
    vcov_model: np.ndarray
    reml_loglik: float
    converged: bool
    singular: bool
    n_iterations: int
    gamma: np.ndarray
    mats: ModelMatrices
    options: FitOptions
    _factors: list = field(repr=False, default_factory=list)
    _residuals: np.ndarray | None = field(repr=False, default=None)
    _wx: list | None = field(repr=False, default=None)

    @property
    def structure(self) -> _Structure:
        return self.mats.structure

    @property
    def n_clusters(self) -> int:
        return self.structure.n_clusters

    @property
    def theta_hat(self) -> float:
        return float(self.beta @ self.mats.contrast_theta)

    @property
    def theta_se_model(self) -> float:
        c = self.mats.contrast_theta
        return float(np.sqrt(c @ self.vcov_model @ c))

    @property
    def residuals(self) -> np.ndarray:
        """GLS residuals in cluster-sorted row order."""
        if self._residuals is None:
            st = self.structure
            self._residuals = st.y - st.X @ self.beta
        return self._residuals

    def cluster_residual(self, i: int) -> np.ndarray:
        return self.residuals[self.structure.blocks[i].rows]

    def apply_vinv(self, i: int, arr: np.ndarray) -> np.ndarray:
        """V_i^-1 @ arr for cluster i (arr has n_i rows)."""
        blk = self.structure.blocks[i]
        l, w, s = self._factors[i]
        gc, gd = self.gamma
        sq_d, sq_c = math.sqrt(gd), math.sqrt(gc)
        two_d = arr.ndim == 2
        a = arr if two_d else arr[:, None]
        q = a.shape[1]
        at = np.empty((blk.m + 1, q))
        for col in range(q):
            at[:-1, col] = np.bincount(blk.codes, weights=a[:, col], minlength=blk.m)
        at[-1] = a.sum(axis=0)
        at[:-1] *= sq_d
        at[-1] *= sq_c
        z = _arrow_solve(l, w, s, at)
        out = (a - (sq_d * z[:-1][blk.codes] + sq_c * z[-1][None, :])) / self.varcomps[2]
        return out if two_d else out[:, 0]

    def apply_v(self, i: int, arr: np.ndarray) -> np.ndarray:
        """V_i @ arr for cluster i."""
        blk = self.structure.blocks[i]
        gc, gd = self.gamma
        two_d = arr.ndim == 2
        a = arr if two_d else arr[:, None]
        q = a.shape[1]
        zt = np.empty((blk.m, q))
        for col in range(q):
            zt[:, col] = np.bincount(blk.codes, weights=a[:, col], minlength=blk.m)
        out = self.varcomps[2] * (a + gd * zt[blk.codes] + gc * a.sum(axis=0)[None, :])
        return out if two_d else out[:, 0]

    def wx(self, i: int) -> np.ndarray:
        """W_i X_i = V_i^-1 X_i, cached per cluster."""
        if self._wx is None:
            self._wx = [None] * self.n_clusters
        if self._wx[i] is None:
            self._wx[i] = self.apply_vinv(i, self.structure.blocks[i].X)
        return self._wx[i]

    def xtwx(self, i: int) -> np.ndarray:
        blk = self.structure.blocks[i]
        return blk.X.T @ self.wx(i)

    def gls_gradient_norm(self) -> float:
        """max | X' V^-1 (y - X beta) | relative to |X' V^-1 y|; ~0 at the fit."""
        st = self.structure
        score = np.zeros(st.p)
        scale = np.zeros(st.p)
        for i, blk in enumerate(st.blocks):
            wxi = self.wx(i)
            score += wxi.T @ self.residuals[blk.rows]
            scale += np.abs(wxi.T @ blk.y)
        return float(np.max(np.abs(score) / np.maximum(np.abs(scale), 1e-12)))


def reml_objective(varcomps, mats: ModelMatrices) -> float:
    """REML log-likelihood -(1/2)[log|V| + log|X'V^-1 X| + r'V^-1 r].

    Constants not depending on the variance components are dropped.
    Raises ``ValueError`` on invalid variances or a non-finite result.
    """
    vc, vd, ve = (float(v) for v in varcomps)
    if vc < 0 or vd < 0 or ve <= 0:
        raise ValueError(f"invalid variance components ({vc}, {vd}, {ve})")
    struct = mats.structure
    M, logdet_sigma, _ = _cluster_pass(struct, vc / ve, vd / ve)
    beta, S, _, logdet_xsx = _gls_from_m(M, struct.N, struct.p)
    value = -0.5 * (
        (struct.N - struct.p) * math.log(ve)
        + logdet_sigma
        + logdet_xsx
        + S / ve
    )
    if not np.isfinite(value):
        raise ValueError(
            f"non-finite REML objective at varcomps ({vc}, {vd}, {ve})"
        )
    return float(value)


def evaluate_fit(mats: ModelMatrices, varcomps,
                 opts: FitOptions = FitOptions()) -> FitResult:
    """GLS fit at fixed variance components (no optimization).

    Useful for evaluating the model at known or externally estimated
    variances; the result carries the same caches as a REML fit.
    """
    vc, vd, ve = (float(v) for v in varcomps)
    if vc < 0 or vd < 0 or ve <= 0:
        raise ValueError(f"invalid variance components ({vc}, {vd}, {ve})")
    struct = mats.structure
    gc, gd = vc / ve, vd / ve
    M, logdet_sigma, saved = _cluster_pass(struct, gc, gd, keep=True)
    beta, S, L, logdet_xsx = _gls_from_m(M, struct.N, struct.p)
    vcov = ve * cho_solve((L, True), np.eye(struct.p))
    loglik = -0.5 * (
        (struct.N - struct.p) * math.log(ve) + logdet_sigma + logdet_xsx + S / ve
    )
    return FitResult(
        beta=beta,
        varcomps=np.array([vc, vd, ve]),
        vcov_model=0.5 * (vcov + vcov.T),
        reml_loglik=float(loglik),
        converged=True,
        singular=bool(gc < opts.boundary_tol or gd < opts.boundary_tol),
        n_iterations=0,
        gamma=np.array([gc, gd]),
        mats=mats,
        options=opts,
        _factors=[(l, w, s) for (l, w, s, _) in saved],
    )


def fit_reml(mats: ModelMatrices, opts: FitOptions = FitOptions(),
             start: np.ndarray | None = None) -> FitResult:
    """Maximize the REML criterion over the nonnegative variance ratios.

    Non-convergence is reported through ``converged``, never raised; the
    partial fit is still returned.  ``start`` optionally warm-starts the
    ratio search (e.g. from a fit of a nested model on the same data).
    """
    struct = mats.structure
    x0 = np.asarray(start, dtype=np.float64) if start is not None else _initial_gamma(struct)
    x0 = np.clip(x0, 0.0, 1e8)

    res = minimize(
        lambda g: _profiled(struct, g, True),
        x0,
        jac=True,
        method="L-BFGS-B",
        bounds=[(0.0, None), (0.0, None)],
        options={"maxiter": opts.max_iter, "ftol": opts.ftol, "gtol": opts.gtol},
    )
    gamma = np.maximum(res.x, 0.0)
    gc, gd = gamma

    M, logdet_sigma, saved = _cluster_pass(struct, gc, gd, keep=True)
    beta, S, L, logdet_xsx = _gls_from_m(M, struct.N, struct.p)
    dof = struct.N - struct.p
    s2_e = S / dof
    varcomps = np.array([gc * s2_e, gd * s2_e, s2_e])
    vcov = s2_e * cho_solve((L, True), np.eye(struct.p))
    vcov = 0.5 * (vcov + vcov.T)
    loglik = -0.5 * (dof * math.log(s2_e) + logdet_sigma + logdet_xsx + dof)

    return FitResult(
        beta=beta,
        varcomps=varcomps,
        vcov_model=vcov,
        reml_loglik=float(loglik),
        converged=bool(res.success),
        singular=bool(gc < opts.boundary_tol or gd < opts.boundary_tol),
        n_iterations=int(res.nit),
        gamma=gamma,
        mats=mats,
        options=opts,
        _factors=[(l, w, s) for (l, w, s, _) in saved],
    )


# ---------------------------------------------------------------------------
# Satterthwaite degrees of freedom for the model-based covariance
# ---------------------------------------------------------------------------


def _contrast_variance(struct: _Structure, varcomps, contrast) -> float:
    """c' (X'V^-1 X)^-1 c at the given variance components."""
    vc, vd, ve = varcomps
    M, _, _ = _cluster_pass(struct, vc / ve, vd / ve)
    L = np.linalg.cholesky(M[:struct.p, :struct.p])
    t = solve_triangular(L, contrast, lower=True)
    return float(ve * (t @ t))


def _fd_gradient(fun, x, steps):
    """Per-component finite differences; one-sided next to the zero bound."""
    g = np.zeros(len(x))
    for m, h in enumerate(steps):
        if x[m] - h >= 0.0:
            xp, xm = x.copy(), x.copy()
            xp[m] += h
            xm[m] -= h
            g[m] = (fun(xp) - fun(xm)) / (2.0 * h)
        else:
            x1, x2 = x.copy(), x.copy()
            x1[m] += h
            x2[m] += 2.0 * h
            g[m] = (-3.0 * fun(x) + 4.0 * fun(x1) - fun(x2)) / (2.0 * h)
    return g


def satterthwaite_df_model(fit: FitResult, contrast: np.ndarray) -> float:
    """Satterthwaite df for c'beta under the model-based covariance.

    df = 2 f^2 / (g' A g) with f = c' vcov c, g its gradient in the
    variance components, and A the inverse observed information of the
    REML log-likelihood.  Components estimated at the zero boundary are
    held fixed.  Raises ``DfUnavailableError`` when the information
    matrix is not positive definite or the result is not a positive
    finite number.
    """
    struct = fit.structure
    contrast = np.asarray(contrast, dtype=np.float64)
    v = fit.varcomps.copy()
    scale = max(v[2], 1e-8)
    free = [m for m in range(3) if v[m] > fit.options.boundary_tol * scale]
    if not free:
        raise DfUnavailableError("all variance components at the boundary")

    rel = 1e-4

    def f_of(sub):
        w = v.copy()
        w[free] = np.maximum(sub, 0.0)
        return _contrast_variance(struct, w, contrast)

    def l_of(sub):
        w = v.copy()
        w[free] = np.maximum(sub, 0.0)
        return reml_objective(w, fit.mats)

    x = v[free]
    steps = rel * np.maximum(x, 0.1 * scale)
    f0 = _contrast_variance(struct, v, contrast)
    grad_f = _fd_gradient(f_of, x, steps)

    k = len(free)
    hess = np.zeros((k, k))
    g_base = _fd_gradient(l_of, x, steps)
    for m in range(k):
        xs = x.copy()
        xs[m] += steps[m]
        hess[:, m] = (_fd_gradient(l_of, xs, steps) - g_base) / steps[m]
    hess = 0.5 * (hess + hess.T)

    info = -hess
    eigvals = np.linalg.eigvalsh(info)
    if eigvals[0] <= 0.0:
        raise DfUnavailableError("REML information matrix not positive definite")
    quad = float(grad_f @ np.linalg.solve(info, grad_f))
    if quad <= 0.0 or not np.isfinite(quad):
        raise DfUnavailableError("non-positive Satterthwaite denominator")
    df = 2.0 * f0 * f0 / quad
    if not np.isfinite(df) or df <= 0.0:
        raise DfUnavailableError(f"degenerate Satterthwaite df {df}")
    return df
