"""Dense brute-force reference implementations used only by the tests.

Nothing here shares numerical code with the structured paths in swcrt:
covariance matrices, projections, residual makers, and adjustment
criteria are assembled explicitly and handled with dense solves and
eigendecompositions.  Sizes are guarded so these stay test-scale.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from swcrt.lmm import ModelMatrices, build_matrices, fit_reml

MAX_DENSE_N = 500


def _check_size(n: int) -> None:
    if n > MAX_DENSE_N:
        raise ValueError(f"dense oracle limited to N <= {MAX_DENSE_N}, got {n}")


def indicator(codes) -> np.ndarray:
    codes = np.asarray(codes)
    levels = np.unique(codes)
    return (codes[:, None] == levels[None, :]).astype(float)


def dense_covariance(cluster, individual, varcomps) -> np.ndarray:
    """V = s2_c Zc Zc' + s2_d Zd Zd' + s2_e I, assembled explicitly."""
    n = len(np.asarray(cluster))
    _check_size(n)
    vc, vd, ve = varcomps
    zc = indicator(cluster)
    zd = indicator(individual)
    return vc * zc @ zc.T + vd * zd @ zd.T + ve * np.eye(n)


def dense_reml(X, y, V):
    """(loglik, beta, vcov) from explicit determinants and solves."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    _check_size(len(y))
    vinv = np.linalg.inv(V)
    xtvx = X.T @ vinv @ X
    beta = np.linalg.solve(xtvx, X.T @ vinv @ y)
    r = y - X @ beta
    sign_v, logdet_v = np.linalg.slogdet(V)
    sign_x, logdet_x = np.linalg.slogdet(xtvx)
    if sign_v <= 0 or sign_x <= 0:
        raise np.linalg.LinAlgError("singular covariance in dense REML")
    loglik = -0.5 * (logdet_v + logdet_x + r @ vinv @ r)
    return float(loglik), beta, np.linalg.inv(xtvx)


def dense_reml_from_mats(mats: ModelMatrices, varcomps):
    st = mats.structure
    V = dense_covariance(st.cluster, st.individual, varcomps)
    return dense_reml(st.X, st.y, V)


def dense_fit_reml(mats: ModelMatrices, x0=(1.0, 1.0, 1.0)):
    """Independent optimizer: Nelder-Mead on log variance components."""

    def neg(logv):
        v = np.exp(logv)
        try:
            return -dense_reml_from_mats(mats, v)[0]
        except np.linalg.LinAlgError:
            return 1e30

    res = minimize(neg, np.log(np.asarray(x0, dtype=float)),
                   method="Nelder-Mead",
                   options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 5000,
                            "maxfev": 5000})
    return np.exp(res.x), -res.fun


def grid_refine_reml(mats: ModelMatrices, lo, hi, rounds=9, points=7):
    """Zooming grid search over (s2_c, s2_d, s2_e); independent oracle."""
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    best = None
    best_v = None
    for _ in range(rounds):
        axes = [np.linspace(lo[m], hi[m], points) for m in range(3)]
        for a in axes[0]:
            for b in axes[1]:
                for c in axes[2]:
                    if c <= 1e-9:
                        continue
                    try:
                        ll = dense_reml_from_mats(mats, (a, b, c))[0]
                    except np.linalg.LinAlgError:
                        continue
                    if best is None or ll > best:
                        best = ll
                        best_v = np.array([a, b, c])
        span = (hi - lo) / (points - 1)
        lo = np.maximum(best_v - span, 0.0)
        lo[2] = max(lo[2], 1e-8)
        hi = best_v + span
    return best_v, best


def jackknife_theta_var(dataset, spec) -> float:
    """Delete-one-cluster jackknife variance of the exposure estimate.

    Refits with the production fitter on each leave-one-out subset (the
    jackknife resamples the estimator itself); a non-converged refit
    invalidates the oracle run.
    """
    mats = build_matrices(dataset, spec)
    clusters = np.unique(mats.cluster_index)
    n_cl = len(clusters)
    if n_cl < 3:
        raise ValueError("jackknife oracle needs at least 3 clusters")
    estimates = []
    for drop in clusters:
        keep = mats.cluster_index != drop
        sub = ModelMatrices(
            mats.X[keep], mats.y[keep], mats.cluster_index[keep],
            mats.individual_index[keep], mats.variant, mats.column_names,
        )
        fit = fit_reml(sub)
        if not fit.converged:
            raise RuntimeError(f"leave-out refit failed for cluster {drop}")
        estimates.append(fit.theta_hat)
    estimates = np.asarray(estimates)
    center = estimates.mean()
    return float((n_cl - 1) / n_cl * ((estimates - center) ** 2).sum())


def eigen_df(eigvals) -> float:
    """(sum lambda)^2 / sum lambda^2, the chi-square moment match."""
    s1 = float(np.sum(eigvals))
    s2 = float(np.sum(np.square(eigvals)))
    return s1 * s1 / s2


def dense_satterthwaite_eigen(fit, robust, contrast) -> float:
    """Eigenvalue form of the cluster-robust Satterthwaite df.

    Builds the length-N score vectors q_s = M' p_s with the dense GLS
    residual maker M = I - X B X' W, then takes eigenvalues of
    Phi^(1/2) (sum_s q_s q_s') Phi^(1/2) with Phi = V.
    """
    st = fit.structure
    n = st.N
    _check_size(n)
    V = dense_covariance(st.cluster, st.individual, fit.varcomps)
    W = np.linalg.inv(V)
    X = st.X
    B = np.linalg.inv(X.T @ W @ X)
    M = np.eye(n) - X @ B @ X.T @ W
    G = np.zeros((n, n))
    c = np.asarray(contrast, dtype=float)
    for i, blk in enumerate(st.blocks):
        p_s = robust.n_ops[i] @ c
        padded = np.zeros(n)
        padded[blk.rows] = p_s
        q = M.T @ padded
        G += np.outer(q, q)
    vals, vecs = np.linalg.eigh(V)
    phi_half = (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T
    lam = np.linalg.eigvalsh(phi_half @ G @ phi_half)
    return eigen_df(lam)


def dense_residual_psi(fit, i: int) -> np.ndarray:
    """Psi_ii = sum_j M_ij Phi_jj M_ij' via the dense residual maker."""
    st = fit.structure
    n = st.N
    _check_size(n)
    V = dense_covariance(st.cluster, st.individual, fit.varcomps)
    W = np.linalg.inv(V)
    X = st.X
    B = np.linalg.inv(X.T @ W @ X)
    M = np.eye(n) - X @ B @ X.T @ W
    rows = st.blocks[i].rows
    psi = np.zeros((len(rows), len(rows)))
    for blk in st.blocks:
        cols = blk.rows
        m_ij = M[np.ix_(rows, cols)]
        psi += m_ij @ V[np.ix_(cols, cols)] @ m_ij.T
    return psi


def dense_cluster_v(fit, i: int) -> np.ndarray:
    blk = fit.structure.blocks[i]
    return dense_covariance(
        np.zeros(blk.n), blk.codes, fit.varcomps
    )


def dense_satterthwaite_model(fit, contrast, rel=1e-4) -> float:
    """Model-based Satterthwaite df computed with dense matrices.

    Same finite-difference recipe as the production code (central steps,
    one-sided next to the zero bound, boundary components held fixed) but
    every evaluation uses explicit dense REML quantities.
    """
    st = fit.structure
    _check_size(st.N)
    c = np.asarray(contrast, dtype=float)
    v = fit.varcomps.copy()
    scale = max(v[2], 1e-8)
    free = [m for m in range(3) if v[m] > fit.options.boundary_tol * scale]

    def f_of(sub):
        w = v.copy()
        w[free] = np.maximum(sub, 0.0)
        V = dense_covariance(st.cluster, st.individual, w)
        _, _, vcov = dense_reml(st.X, st.y, V)
        return float(c @ vcov @ c)

    def l_of(sub):
        w = v.copy()
        w[free] = np.maximum(sub, 0.0)
        return dense_reml_from_mats(fit.mats, w)[0]

    x = v[free]
    steps = rel * np.maximum(x, 0.1 * scale)

    def fd_grad(fun, x0):
        g = np.zeros(len(x0))
        for m, h in enumerate(steps):
            if x0[m] - h >= 0.0:
                xp, xm = x0.copy(), x0.copy()
                xp[m] += h
                xm[m] -= h
                g[m] = (fun(xp) - fun(xm)) / (2 * h)
            else:
                x1, x2 = x0.copy(), x0.copy()
                x1[m] += h
                x2[m] += 2 * h
                g[m] = (-3 * fun(x0) + 4 * fun(x1) - fun(x2)) / (2 * h)
        return g

    f0 = f_of(x)
    grad_f = fd_grad(f_of, x)
    g_base = fd_grad(l_of, x)
    k = len(free)
    hess = np.zeros((k, k))
    for m in range(k):
        xs = x.copy()
        xs[m] += steps[m]
        hess[:, m] = (fd_grad(l_of, xs) - g_base) / steps[m]
    hess = 0.5 * (hess + hess.T)
    info = -hess
    quad = float(grad_f @ np.linalg.solve(info, grad_f))
    return 2.0 * f0 * f0 / quad
