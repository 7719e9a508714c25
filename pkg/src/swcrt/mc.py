"""Monte Carlo harness: scenario grids, replicate execution, aggregation.

Each replicate draws its own counter-based random stream from
(master seed, scenario fingerprint, replicate index), so results do not
depend on execution order, worker count, or which other scenarios run.
Per-replicate records are always kept (and persisted as CSV) so that
summaries can be re-derived without refitting.

Performance measures per (model, estimator):

    bias            mean(theta_hat) - theta
    empirical SE    sqrt(mean((theta_hat - mean)^2))          (1/n form)
    avg model SE    mean of the estimated SEs
    pct SE error    100 * (avg model SE / empirical SE - 1)
    rejection rate  fraction of replicates with p <= alpha

Non-converged fits are excluded from the metrics by default (switchable);
per-estimator failures are excluded from that estimator's SE/test metrics
and counted.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy import stats
from threadpoolctl import threadpool_limits

from swcrt.datagen import generate_closed, generate_open, scenario_params
from swcrt.design import build_design, randomize_arms
from swcrt.lmm import DfUnavailableError, ModelVariant, build_matrices, fit_reml
from swcrt.robust import EstimatorFailure, VarianceEstimator, cr_vcov, wald_test

logger = logging.getLogger(__name__)

COHORTS = ("closed", "open")
EFFECTS = ("linear", "nonlinear")

REPLICATE_COLUMNS = (
    "scenario_id", "replicate", "model", "estimator", "theta_hat",
    "se", "df", "p", "converged", "singular",
)
SUMMARY_COLUMNS = (
    "scenario_id", "cohort", "effect", "I", "J", "K", "theta", "n_sim",
    "alpha", "model", "estimator", "n_used", "n_nonconverged", "n_singular",
    "n_estimator_failed", "bias", "mc_se_of_bias", "empirical_se",
    "avg_model_se", "pct_se_error", "rejection_rate",
)

# Process-wide BLAS limit applied inside workers; single-threaded kernels
# keep results bit-identical across worker counts.
_BLAS_LIMIT = None


def _limit_blas_threads() -> None:
    global _BLAS_LIMIT
    if _BLAS_LIMIT is None:
        _BLAS_LIMIT = threadpool_limits(limits=1)


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation grid."""

    n_clusters: int
    n_steps: int
    cluster_size: int
    cohort: str
    effect: str
    theta: float
    models: tuple = ()
    estimators: tuple = ()
    n_sim: int = 1000
    alpha: float = 0.05
    master_seed: int = 0
    exclude_nonconverged: bool = True

    def __post_init__(self) -> None:
        if self.cohort not in COHORTS:
            raise ValueError(f"cohort must be one of {COHORTS}, got {self.cohort!r}")
        if self.effect not in EFFECTS:
            raise ValueError(f"effect must be one of {EFFECTS}, got {self.effect!r}")
        if self.n_sim < 1:
            raise ValueError("n_sim must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if self.n_clusters % self.n_steps != 0:
            raise ValueError(
                f"{self.n_clusters} clusters cannot be split over {self.n_steps} arms"
            )
        if self.master_seed < 0:
            raise ValueError("master_seed must be a nonnegative integer")
        object.__setattr__(self, "models",
                           tuple(ModelVariant(m) for m in self.models))
        object.__setattr__(self, "estimators",
                           tuple(VarianceEstimator(e) for e in self.estimators))

    @property
    def scenario_id(self) -> str:
        return (
            f"{self.cohort}_{self.effect}_I{self.n_clusters}"
            f"_J{self.n_steps}_K{self.cluster_size}_t{self.theta:g}"
        )

    @property
    def fingerprint(self) -> int:
        """64-bit hash of the data-determining fields (not n_sim, models, ...)."""
        key = (
            f"{self.cohort}|{self.effect}|I={self.n_clusters}|J={self.n_steps}"
            f"|K={self.cluster_size}|theta={self.theta!r}"
        )
        return int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "big")


@dataclass(frozen=True)
class ReplicateRow:
    """One (replicate, model, estimator) record; estimator may be ''."""

    replicate: int
    model: str
    estimator: str
    theta_hat: float
    se: float
    df: float
    p: float
    converged: bool
    singular: bool


@dataclass(frozen=True)
class MetricRow:
    """Aggregated measures for one (model, estimator) pair."""

    model: str
    estimator: str
    n_used: int
    n_nonconverged: int
    n_singular: int
    n_estimator_failed: int
    bias: float
    mc_se_of_bias: float
    empirical_se: float
    avg_model_se: float
    pct_se_error: float
    rejection_rate: float


@dataclass(frozen=True)
class ScenarioSummary:
    config: ScenarioConfig
    rows: tuple

    def row(self, model, estimator="") -> MetricRow:
        model = ModelVariant(model).value if model else ""
        estimator = VarianceEstimator(estimator).value if estimator else ""
        for r in self.rows:
            if r.model == model and r.estimator == estimator:
                return r
        raise KeyError(f"no metrics for model={model!r} estimator={estimator!r}")


def replicate_rng(cfg: ScenarioConfig, replicate: int) -> np.random.Generator:
    """Counter-based stream for one replicate; independent of run order."""
    seq = np.random.SeedSequence([cfg.master_seed, cfg.fingerprint, replicate])
    return np.random.Generator(np.random.Philox(seq))


def run_replicate(cfg: ScenarioConfig, replicate: int) -> list:
    """Generate, fit, and test one replicate; failures become NaN records."""
    rng = replicate_rng(cfg, replicate)
    try:
        arms = randomize_arms(cfg.n_clusters, cfg.n_steps, rng)
        design = build_design(cfg.n_clusters, cfg.n_steps, arms)
        params = scenario_params(
            cfg.cluster_size,
            theta=cfg.theta,
            nonlinear=(cfg.effect == "nonlinear"),
            open_cohort=(cfg.cohort == "open"),
        )
        if cfg.cohort == "open":
            data = generate_open(design, params, rng)
        else:
            data = generate_closed(design, params, rng)
    except Exception:  # noqa: BLE001 - a bad replicate must not kill the scenario
        logger.exception("data generation failed (scenario %s, replicate %d)",
                         cfg.scenario_id, replicate)
        return [
            ReplicateRow(replicate, m.value, e.value if e else "", math.nan,
                         math.nan, math.nan, math.nan, False, False)
            for m in cfg.models
            for e in (cfg.estimators or (None,))
        ]

    rows: list[ReplicateRow] = []
    for model in cfg.models:
        try:
            mats = build_matrices(data, model)
            fit = fit_reml(mats)
            contrast = mats.contrast_theta
            theta_hat = fit.theta_hat
            converged, singular = fit.converged, fit.singular
        except Exception:  # noqa: BLE001
            logger.exception("fit failed (scenario %s, replicate %d, model %s)",
                             cfg.scenario_id, replicate, model.value)
            for est in cfg.estimators or (None,):
                rows.append(ReplicateRow(
                    replicate, model.value, est.value if est else "", math.nan,
                    math.nan, math.nan, math.nan, False, False))
            continue

        if not cfg.estimators:
            rows.append(ReplicateRow(replicate, model.value, "", theta_hat,
                                     math.nan, math.nan, math.nan,
                                     converged, singular))
            continue
        for est in cfg.estimators:
            se = df = p = math.nan
            try:
                if est is VarianceEstimator.MODEL_BASED:
                    try:
                        t = wald_test(fit, None, contrast)
                    except DfUnavailableError:
                        # large-sample fallback; recorded as infinite df
                        t = wald_test(fit, None, contrast, df=math.inf)
                else:
                    rv = cr_vcov(fit, est)
                    t = wald_test(fit, rv, contrast,
                                  df=rv.satterthwaite_df_theta)
                se, df, p = t.se, t.df, t.p_value
            except (EstimatorFailure, DfUnavailableError, ValueError):
                logger.warning(
                    "estimator %s failed (scenario %s, replicate %d, model %s)",
                    est.value, cfg.scenario_id, replicate, model.value)
            rows.append(ReplicateRow(replicate, model.value, est.value,
                                     theta_hat, se, df, p, converged, singular))
    return rows


def _worker(args) -> list:
    _limit_blas_threads()
    cfg, replicate = args
    return run_replicate(cfg, replicate)


def run_scenario(cfg: ScenarioConfig, workers: int = 1):
    """Run all replicates and aggregate; returns (summary, records).

    Records come back ordered by replicate index regardless of worker
    scheduling, so downstream output is reproducible for any parallelism.
    """
    records: list[ReplicateRow] = []
    if workers <= 1:
        with threadpool_limits(limits=1):
            for rep in range(cfg.n_sim):
                records.extend(run_replicate(cfg, rep))
    else:
        tasks = [(cfg, rep) for rep in range(cfg.n_sim)]
        chunk = max(1, cfg.n_sim // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers,
                                 initializer=_limit_blas_threads) as pool:
            for rows in pool.map(_worker, tasks, chunksize=chunk):
                records.extend(rows)
    return aggregate(records, cfg), records


def aggregate(records: Sequence, cfg: ScenarioConfig) -> ScenarioSummary:
    """Fold replicate records into the performance measures."""
    out: list[MetricRow] = []
    estimators = [e.value for e in cfg.estimators] or [""]
    for model in cfg.models:
        m_rows = [r for r in records if r.model == model.value]
        by_est = {e: [r for r in m_rows if r.estimator == e] for e in estimators}
        base = by_est[estimators[0]]
        theta = np.array([r.theta_hat for r in base])
        conv = np.array([r.converged for r in base], dtype=bool)
        sing = np.array([r.singular for r in base], dtype=bool)
        used = (conv if cfg.exclude_nonconverged else np.ones_like(conv)) \
            & np.isfinite(theta)
        n_used = int(used.sum())
        n_nonconv = int((~conv).sum())
        n_sing = int(sing[used].sum())

        bias = emp_se = mc_se = math.nan
        th = theta[used]
        if n_used >= 1:
            bias = float(th.mean()) - cfg.theta
        if n_used >= 2:
            emp_se = float(np.sqrt(np.mean((th - th.mean()) ** 2)))
            mc_se = emp_se / math.sqrt(n_used)

        for est in estimators:
            rows_e = by_est[est]
            avg_se = pct = rej = math.nan
            n_failed = 0
            if est and rows_e:
                se = np.array([r.se for r in rows_e])
                p = np.array([r.p for r in rows_e])
                ok = used & np.isfinite(se)
                n_failed = int((used & ~np.isfinite(se)).sum())
                if ok.sum() >= 2:
                    avg_se = float(se[ok].mean())
                    if emp_se and np.isfinite(emp_se) and emp_se > 0:
                        pct = 100.0 * (avg_se / emp_se - 1.0)
                if ok.sum() >= 1:
                    rej = float((p[ok] <= cfg.alpha).mean())
            out.append(MetricRow(
                model=model.value, estimator=est, n_used=n_used,
                n_nonconverged=n_nonconv, n_singular=n_sing,
                n_estimator_failed=n_failed, bias=bias, mc_se_of_bias=mc_se,
                empirical_se=emp_se, avg_model_se=avg_se, pct_se_error=pct,
                rejection_rate=rej,
            ))
    return ScenarioSummary(config=cfg, rows=tuple(out))


def binomial_band(n_sim: int, alpha: float) -> tuple:
    """Central 95% range of Binomial(n_sim, alpha)/n_sim rejection rates."""
    if n_sim < 1:
        raise ValueError("n_sim must be >= 1")
    lo = float(stats.binom.ppf(0.025, n_sim, alpha)) / n_sim
    hi = float(stats.binom.ppf(0.975, n_sim, alpha)) / n_sim
    return lo, hi


# ---------------------------------------------------------------------------
# CSV persistence (schemas documented in the module docstring / README)
# ---------------------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return "" if math.isnan(value) else repr(value)
    if isinstance(value, bool):
        return "1" if value else "0"
    return str(value)


def write_replicates_csv(path, scenario_id: str, records: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPLICATE_COLUMNS)
        for r in records:
            writer.writerow([
                scenario_id, r.replicate, r.model, r.estimator,
                _fmt(r.theta_hat), _fmt(r.se), _fmt(r.df), _fmt(r.p),
                _fmt(r.converged), _fmt(r.singular),
            ])


def read_replicates_csv(path) -> list:
    rows: list[tuple[str, ReplicateRow]] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            rows.append((rec["scenario_id"], ReplicateRow(
                replicate=int(rec["replicate"]),
                model=rec["model"],
                estimator=rec["estimator"],
                theta_hat=float(rec["theta_hat"] or "nan"),
                se=float(rec["se"] or "nan"),
                df=float(rec["df"] or "nan"),
                p=float(rec["p"] or "nan"),
                converged=rec["converged"] == "1",
                singular=rec["singular"] == "1",
            )))
    return rows


def summary_csv_rows(summary: ScenarioSummary) -> list:
    cfg = summary.config
    rows = []
    for r in summary.rows:
        rows.append([
            cfg.scenario_id, cfg.cohort, cfg.effect, cfg.n_clusters,
            cfg.n_steps, cfg.cluster_size, _fmt(float(cfg.theta)), cfg.n_sim,
            _fmt(float(cfg.alpha)), r.model, r.estimator, r.n_used,
            r.n_nonconverged, r.n_singular, r.n_estimator_failed,
            _fmt(r.bias), _fmt(r.mc_se_of_bias), _fmt(r.empirical_se),
            _fmt(r.avg_model_se), _fmt(r.pct_se_error), _fmt(r.rejection_rate),
        ])
    return rows


def write_summary_csv(path, summaries: Iterable) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for summary in summaries:
            writer.writerows(summary_csv_rows(summary))


def read_summary_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
