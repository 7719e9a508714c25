"""Cluster-robust sandwich covariance for the fixed effects of a fitted LMM.

All three estimators share the form

    vcov = B [ sum_i X_i' W_i A_i e_i e_i' A_i' W_i X_i ] B

with working weights W_i = V_i^-1 from the REML fit and bread
B = (X'WX)^-1 (the model-based covariance).  They differ in the
per-cluster residual adjustment A_i:

    CR0: A_i = I
    CR2: the symmetric A_i with A_i Psi_ii A_i = V_i, where Psi_ii is the
         model-implied covariance of the GLS residuals e_i.  With W = V^-1
         the full cross-cluster residual maker collapses exactly to
         Psi_ii = V_i - X_i B X_i'.
    CR3: A_i = (I - H_ii)^-1 with H_ii = X_i B X_i' W_i, approximating
         the leave-one-cluster-out jackknife.

Adjustments are applied through low-rank factorizations (never dense
n_i x n_i products on the hot path); matrix square roots use symmetric
eigendecompositions with an eigenvalue floor below which a pseudo-inverse
is taken.

Satterthwaite degrees of freedom write the estimator as a quadratic form
in the data under the working model and moment-match a chi-square:
df = tr(Omega)^2 / sum(Omega^2) with Omega_st the working covariance of
the per-cluster score contributions.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy import stats

from swcrt.lmm import DfUnavailableError, FitResult, satterthwaite_df_model

EIG_FLOOR = 1e-10
_COND_LIMIT = 1e12


class VarianceEstimator(str, Enum):
    MODEL_BASED = "standard"
    CR0 = "cr0"
    CR2 = "cr2"
    CR3 = "cr3"


class EstimatorFailure(RuntimeError):
    """A cluster adjustment could not be formed for this replicate."""

    def __init__(self, estimator: VarianceEstimator, cluster: int, reason: str):
        super().__init__(f"{estimator.value} failed on cluster {cluster}: {reason}")
        self.estimator = estimator
        self.cluster = cluster
        self.reason = reason


@dataclass
class RobustVcov:
    """Sandwich covariance with cached per-cluster pieces.

    ``n_ops[i]`` holds A_i' W_i X_i B (n_i x p), enough to rebuild the
    per-cluster score vectors for any contrast.  ``adjustments`` carries
    the dense A_i matrices only when materialization was requested.
    """

    estimator: VarianceEstimator
    vcov: np.ndarray
    satterthwaite_df_theta: float
    n_ops: list = field(repr=False, default_factory=list)
    adjustments: list | None = field(repr=False, default=None)
    _fit: FitResult | None = field(repr=False, default=None)


@dataclass(frozen=True)
class TestResult:
    """Wald test of a single fixed-effect contrast."""

    estimate: float
    se: float
    df: float
    t_stat: float
    p_value: float
    estimator_label: VarianceEstimator


def _cr3_pieces(fit: FitResult, i: int):
    """Small-matrix pieces of A_i = (I - H_ii)^-1 = I + X B (I - G B)^-1 X' W.

    Returns (C, bmod) with C = I - G_i B and bmod = B + B C^-1 G_i B, the
    matrix satisfying A_i' W_i X_i B = W_i X_i bmod.
    """
    B = fit.vcov_model
    G = fit.xtwx(i)
    C = np.eye(B.shape[0]) - G @ B
    if np.linalg.cond(C) > _COND_LIMIT:
        raise EstimatorFailure(
            VarianceEstimator.CR3, i, "leverage adjustment (I - H_ii) is singular"
        )
    bmod = B + B @ np.linalg.solve(C, G) @ B
    return C, bmod


class _CR2Operator:
    """Symmetric CR2 adjustment A = S (S Psi S)^(-1/2) S for one cluster.

    S = V^(1/2); all factors are kept as identity-plus-low-rank so that
    applying A to a handful of vectors costs O(n (m + p)) per vector.
    """

    def __init__(self, fit: FitResult, i: int, exact: bool):
        blk = fit.structure.blocks[i]
        s2c, s2d, s2e = fit.varcomps
        n, m = blk.n, blk.m
        se = np.sqrt(s2e)

        # Thin eigenbasis of the random-effects part F F' via its Gram matrix.
        gram = np.zeros((m + 1, m + 1))
        gram[np.arange(m), np.arange(m)] = s2d * blk.counts
        gram[:m, m] = gram[m, :m] = np.sqrt(s2d * s2c) * blk.counts
        gram[m, m] = s2c * blk.n
        omega, vecs = np.linalg.eigh(gram)
        keep = omega > 1e-12 * max(omega[-1], 1.0)
        omega = omega[keep]
        F = np.zeros((n, m + 1))
        F[np.arange(n), blk.codes] = np.sqrt(s2d)
        F[:, m] = np.sqrt(s2c)
        self.Q = F @ (vecs[:, keep] / np.sqrt(omega))
        self.g_sqrt = np.sqrt(s2e + omega) - se
        self.se = se

        Y = self._apply_sqrt(blk.X)
        B = fit.vcov_model
        if exact:
            pblk = -B
        else:
            G = fit.xtwx(i)
            pblk = -2.0 * B + B @ G @ B
        g2 = (s2e + omega) ** 2 - s2e**2
        J = np.concatenate([self.Q, Y], axis=1)
        qhat, rhat = np.linalg.qr(J)
        nb = np.zeros((J.shape[1], J.shape[1]))
        nb[: len(g2), : len(g2)] = np.diag(g2)
        nb[len(g2):, len(g2):] = pblk
        core = rhat @ nb @ rhat.T
        theta, evecs = np.linalg.eigh(0.5 * (core + core.T))
        vals = s2e**2 + theta
        scale = max(float(np.abs(vals).max()), 1.0)
        if vals.min() < -1e-6 * scale:
            raise EstimatorFailure(
                VarianceEstimator.CR2, i,
                f"working residual covariance indefinite (min eig {vals.min():.3e})",
            )
        self.Qt = qhat @ evecs
        inv_sqrt = np.where(vals >= EIG_FLOOR, 1.0 / np.sqrt(np.abs(vals)), 0.0)
        self.base_inv = 1.0 / s2e if s2e**2 >= EIG_FLOOR else 0.0
        self.phi_delta = inv_sqrt - self.base_inv

    def _apply_sqrt(self, M: np.ndarray) -> np.ndarray:
        return self.se * M + self.Q @ (self.g_sqrt[:, None] * (self.Q.T @ M))

    def apply(self, M: np.ndarray) -> np.ndarray:
        two_d = M.ndim == 2
        a = M if two_d else M[:, None]
        t = self._apply_sqrt(a)
        t = self.base_inv * t + self.Qt @ (self.phi_delta[:, None] * (self.Qt.T @ t))
        out = self._apply_sqrt(t)
        return out if two_d else out[:, 0]


def cr_vcov(
    fit: FitResult,
    estimator: VarianceEstimator,
    *,
    cr2_exact: bool = True,
    materialize_adjustments: bool = False,
) -> RobustVcov:
    """Cluster-robust covariance of the fixed effects.

    ``cr2_exact`` selects the full cross-cluster working covariance for
    the CR2 criterion (the default) versus the faster within-cluster
    approximation.  ``materialize_adjustments`` additionally stores the
    dense per-cluster A_i matrices.  Raises ``EstimatorFailure`` when a
    cluster adjustment is numerically singular.
    """
    estimator = VarianceEstimator(estimator)
    if estimator is VarianceEstimator.MODEL_BASED:
        raise ValueError("cr_vcov computes CR0/CR2/CR3; use fit.vcov_model instead")
    B = fit.vcov_model
    p = B.shape[0]
    meat = np.zeros((p, p))
    n_ops: list[np.ndarray] = []
    adjustments: list[np.ndarray] | None = [] if materialize_adjustments else None

    for i, blk in enumerate(fit.structure.blocks):
        e = fit.cluster_residual(i)
        wx = fit.wx(i)
        if estimator is VarianceEstimator.CR0:
            ae = e
            n_op = wx @ B
            if adjustments is not None:
                adjustments.append(np.eye(blk.n))
        elif estimator is VarianceEstimator.CR3:
            C, bmod = _cr3_pieces(fit, i)
            # A_i e_i = e_i + X_i B (I - G_i B)^-1 X_i' W_i e_i
            ae = e + blk.X @ (B @ np.linalg.solve(C, wx.T @ e))
            n_op = wx @ bmod
            if adjustments is not None:
                adjustments.append(
                    np.eye(blk.n) + blk.X @ B @ np.linalg.solve(C, wx.T)
                )
        else:  # CR2
            op = _CR2Operator(fit, i, cr2_exact)
            ae = op.apply(e)
            n_op = op.apply(wx @ B)
            if adjustments is not None:
                adjustments.append(op.apply(np.eye(blk.n)))
        g = wx.T @ ae
        meat += np.outer(g, g)
        n_ops.append(n_op)

    vcov = B @ meat @ B
    vcov = 0.5 * (vcov + vcov.T)
    out = RobustVcov(
        estimator=estimator,
        vcov=vcov,
        satterthwaite_df_theta=np.nan,
        n_ops=n_ops,
        adjustments=adjustments,
        _fit=fit,
    )
    out.satterthwaite_df_theta = satterthwaite_df_cr(
        fit, out, fit.mats.contrast_theta
    )
    return out


def satterthwaite_df_cr(fit: FitResult, robust: RobustVcov, contrast) -> float:
    """Satterthwaite df for c'beta under a cluster-robust estimator.

    The estimator is sum_s (p_s' e_s)^2 with p_s = A_s' W_s X_s B c; under
    the working model the covariance of the per-cluster terms is
    Omega_st = delta_st p_s' V_s p_s - u_s' B u_t with u_s = X_s' p_s,
    and df = tr(Omega)^2 / sum_st Omega_st^2.
    """
    c = np.asarray(contrast, dtype=np.float64)
    B = fit.vcov_model
    blocks = fit.structure.blocks
    n_cl = len(blocks)
    d = np.zeros(n_cl)
    U = np.zeros((n_cl, B.shape[0]))
    for i, blk in enumerate(blocks):
        p_s = robust.n_ops[i] @ c
        d[i] = p_s @ fit.apply_v(i, p_s)
        U[i] = blk.X.T @ p_s
    omega = np.diag(d) - U @ B @ U.T
    tr = float(np.trace(omega))
    if tr <= 0.0 or not np.isfinite(tr):
        raise ValueError("degenerate contrast: zero-trace Satterthwaite form")
    return tr * tr / float((omega * omega).sum())


def wald_test(
    fit: FitResult,
    vcov_source: RobustVcov | None,
    contrast,
    *,
    df: float | None = None,
) -> TestResult:
    """Two-sided Wald test of c'beta = 0 with Satterthwaite df.

    ``vcov_source=None`` uses the model-based covariance and its df
    approximation (``DfUnavailableError`` propagates); a ``RobustVcov``
    uses the sandwich covariance and the cluster-robust df.  ``df``
    overrides the df computation (e.g. ``math.inf`` for a large-sample
    normal test).
    """
    c = np.asarray(contrast, dtype=np.float64)
    estimate = float(fit.beta @ c)
    if vcov_source is None:
        vcov = fit.vcov_model
        label = VarianceEstimator.MODEL_BASED
        if df is None:
            df = satterthwaite_df_model(fit, c)
    else:
        vcov = vcov_source.vcov
        label = vcov_source.estimator
        if df is None:
            df = satterthwaite_df_cr(fit, vcov_source, c)
    se = float(np.sqrt(c @ vcov @ c))
    if se == 0.0:
        raise DfUnavailableError("zero standard error for contrast")
    t = estimate / se
    p = 2.0 * float(stats.t.sf(abs(t), df))
    return TestResult(
        estimate=estimate, se=se, df=float(df), t_stat=t, p_value=p,
        estimator_label=label,
    )
