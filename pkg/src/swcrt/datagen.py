"""Closed- and open-cohort outcome data for stepped-wedge trials.

Outcomes follow a linear predictor with a grand intercept, a cluster
random intercept, an individual random intercept, an intervention effect
on exposed cluster-periods, and a continuous time-varying covariate
(entering linearly or through a fourth power), plus Gaussian noise:

    y = mu + c_i + d_ik + theta * x_ij + beta_con * a_ijk**p + eps

Covariates start from a per-individual uniform baseline draw and increase
by one unit per period.  Open cohorts replace a random 15% (by default)
of each cluster's members at every step one-for-one, so each
cluster-period cell always holds exactly ``cluster_size`` members.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np

from swcrt.design import TrialDesign

CSV_HEADER = "cluster,period,individual,exposed,covariate,outcome"


def nonlinear_coefficient() -> float:
    """Covariate coefficient for the fourth-power case, -2/32**4.

    Scaled so the covariate term spans roughly the same outcome range as
    the linear term -2*a does over baseline values in [18, 102]:
    -2*(102/32)**4 is about -206 versus -2*102 = -204.
    """
    return -2.0 / 32.0**4


@dataclass(frozen=True)
class SimParams:
    """Data-generating parameters for one scenario.

    ``exponent`` is the covariate power (1 linear, 4 nonlinear) and
    ``attrition`` the per-step probability that a member leaves (0 for a
    closed cohort).  Joiner baselines use the ``joiner_cov_*`` bounds.
    """

    cluster_size: int
    theta: float = 0.0
    mu: float = 100.0
    beta_con: float = -2.0
    exponent: int = 1
    var_cluster: float = 10.0
    var_individual: float = 10.0
    var_error: float = 20.0
    baseline_cov_low: float = 18.0
    baseline_cov_high: float = 102.0
    joiner_cov_low: float = 18.0
    joiner_cov_high: float = 96.0
    attrition: float = 0.0

    def __post_init__(self) -> None:
        if self.cluster_size < 1:
            raise ValueError("cluster_size must be a positive integer")
        if self.var_cluster < 0 or self.var_individual < 0:
            raise ValueError("random-intercept variances must be nonnegative")
        if self.var_error <= 0:
            raise ValueError("error variance must be positive")
        if not self.baseline_cov_low < self.baseline_cov_high:
            raise ValueError("baseline covariate bounds must satisfy low < high")
        if not 0.0 <= self.attrition < 1.0:
            raise ValueError("attrition must lie in [0, 1)")

    @property
    def within_individual_icc(self) -> float:
        tot = self.var_cluster + self.var_individual + self.var_error
        return (self.var_cluster + self.var_individual) / tot


def scenario_params(
    cluster_size: int,
    theta: float = 0.0,
    nonlinear: bool = False,
    open_cohort: bool = False,
) -> SimParams:
    """Default parameterization for the four cohort/covariate scenarios."""
    params = SimParams(cluster_size=cluster_size, theta=theta)
    if nonlinear:
        params = replace(params, beta_con=nonlinear_coefficient(), exponent=4)
    if open_cohort:
        params = replace(params, attrition=0.15)
    return params


@dataclass(frozen=True)
class Dataset:
    """Long-format observations plus per-individual entry/exit metadata.

    Row arrays all have length ``n_obs``; metadata arrays are indexed by
    the (globally unique) integer individual id.  ``period`` is 1-based.
    """

    cluster: np.ndarray
    period: np.ndarray
    individual: np.ndarray
    exposed: np.ndarray
    covariate: np.ndarray
    outcome: np.ndarray
    entry_period: np.ndarray
    exit_period: np.ndarray
    baseline_covariate: np.ndarray
    design: TrialDesign
    params: SimParams

    @property
    def n_obs(self) -> int:
        return self.outcome.shape[0]

    @property
    def n_individuals(self) -> int:
        return self.entry_period.shape[0]

    def to_csv(self, path) -> None:
        """Write observations as CSV: cluster,period,individual,exposed,covariate,outcome."""
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for row in zip(
            self.cluster, self.period, self.individual, self.exposed,
            self.covariate, self.outcome,
        ):
            buf.write(f"{row[0]},{row[1]},{row[2]},{row[3]},{row[4]!r},{row[5]!r}\n")
        with open(path, "w") as fh:
            fh.write(buf.getvalue())


def generate_closed(
    design: TrialDesign, params: SimParams, rng: np.random.Generator
) -> Dataset:
    """Closed cohort: every individual is observed in all periods.

    Draw order per cluster: cluster intercept, individual intercepts,
    baseline covariates, then outcome noise period by period.
    """
    if params.attrition != 0.0:
        raise ValueError("closed cohort requires attrition = 0")
    return _generate(design, params, rng)


def generate_open(
    design: TrialDesign, params: SimParams, rng: np.random.Generator
) -> Dataset:
    """Open cohort: members leave with the attrition probability at each
    step and are replaced one-for-one, keeping every cell at ``cluster_size``.

    Joiners draw a fresh individual intercept and a covariate at entry
    from the joiner bounds; leavers contribute no rows after exit.
    """
    if not 0.0 < params.attrition < 1.0:
        raise ValueError("open cohort requires attrition in (0, 1)")
    return _generate(design, params, rng)


def _generate(
    design: TrialDesign, params: SimParams, rng: np.random.Generator
) -> Dataset:
    n_periods = design.n_periods
    k = params.cluster_size
    sd_c = np.sqrt(params.var_cluster)
    sd_d = np.sqrt(params.var_individual)
    sd_e = np.sqrt(params.var_error)

    cluster_col: list[np.ndarray] = []
    period_col: list[np.ndarray] = []
    individual_col: list[np.ndarray] = []
    exposed_col: list[np.ndarray] = []
    covariate_col: list[np.ndarray] = []
    outcome_col: list[np.ndarray] = []
    entry_list: list[int] = []  # indexed by individual id
    exit_list: list[int] = []
    baseline_list: list[float] = []

    for i in range(design.n_clusters):
        c_i = rng.normal(0.0, sd_c)
        member_d = rng.normal(0.0, sd_d, size=k)
        member_cov0 = rng.uniform(
            params.baseline_cov_low, params.baseline_cov_high, size=k
        )
        member_ids = np.arange(len(entry_list), len(entry_list) + k)
        member_entry = np.ones(k, dtype=np.int64)
        entry_list.extend([1] * k)
        # Assume everyone stays; leavers get their exit overwritten below.
        exit_list.extend([n_periods] * k)
        baseline_list.extend(member_cov0.tolist())

        for j in range(1, n_periods + 1):
            cov_j = member_cov0 + (j - member_entry)
            mean = (
                params.mu
                + c_i
                + member_d
                + params.theta * float(design.exposure[i, j - 1])
                + params.beta_con * cov_j**params.exponent
            )
            y = mean + rng.normal(0.0, sd_e, size=k)

            cluster_col.append(np.full(k, i, dtype=np.int64))
            period_col.append(np.full(k, j, dtype=np.int64))
            individual_col.append(member_ids.copy())
            exposed_col.append(np.full(k, design.exposure[i, j - 1], dtype=np.int8))
            covariate_col.append(cov_j)
            outcome_col.append(y)

            if params.attrition > 0.0 and j < n_periods:
                leaves = rng.random(k) < params.attrition
                n_new = int(leaves.sum())
                if n_new == 0:
                    continue
                new_d = rng.normal(0.0, sd_d, size=n_new)
                new_cov = rng.uniform(
                    params.joiner_cov_low, params.joiner_cov_high, size=n_new
                )
                for mid in member_ids[leaves]:
                    exit_list[mid] = j
                new_ids = np.arange(len(entry_list), len(entry_list) + n_new)
                entry_list.extend([j + 1] * n_new)
                exit_list.extend([n_periods] * n_new)
                baseline_list.extend(new_cov.tolist())
                member_d[leaves] = new_d
                member_cov0[leaves] = new_cov
                member_entry[leaves] = j + 1
                member_ids[leaves] = new_ids

    return Dataset(
        cluster=np.concatenate(cluster_col),
        period=np.concatenate(period_col),
        individual=np.concatenate(individual_col),
        exposed=np.concatenate(exposed_col),
        covariate=np.concatenate(covariate_col),
        outcome=np.concatenate(outcome_col),
        entry_period=np.asarray(entry_list, dtype=np.int64),
        exit_period=np.asarray(exit_list, dtype=np.int64),
        baseline_covariate=np.asarray(baseline_list, dtype=np.float64),
        design=design,
        params=params,
    )
