"""Standard stepped-wedge layouts: arms, steps, and exposure indicators.

A design with I clusters and J steps spans J+1 periods (period 1 is the
pre-rollout baseline).  Clusters in arm a cross over to the intervention
at step a, i.e. they are exposed from period a+1 onward, so every cluster
starts under control and ends under intervention.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrialDesign:
    """Cluster-to-arm assignment and binary exposure matrix.

    ``exposure[i, j-1]`` is the exposure indicator of cluster ``i`` in
    (1-based) period ``j``.
    """

    n_clusters: int
    n_steps: int
    arm_of_cluster: np.ndarray  # (I,) arms in 1..J
    exposure: np.ndarray  # (I, J+1) int8, monotone along periods

    @property
    def n_periods(self) -> int:
        return self.n_steps + 1

    @property
    def clusters_per_arm(self) -> int:
        return self.n_clusters // self.n_steps


def build_design(n_clusters: int, n_steps: int, arm_assignment) -> TrialDesign:
    """Construct a balanced stepped-wedge design from an arm assignment.

    ``arm_assignment`` maps cluster index (0-based) to arm label in
    ``1..n_steps``; each arm must hold exactly ``n_clusters / n_steps``
    clusters.  Raises ``ValueError`` for non-divisible cluster counts or
    malformed assignments.
    """
    if n_clusters <= 0 or n_steps <= 0:
        raise ValueError("cluster and step counts must be positive")
    if n_clusters % n_steps != 0:
        raise ValueError(
            f"{n_clusters} clusters cannot be split evenly over {n_steps} arms"
        )
    arms = np.asarray(arm_assignment, dtype=np.int64)
    if arms.shape != (n_clusters,):
        raise ValueError(f"arm assignment must have length {n_clusters}")
    per_arm = n_clusters // n_steps
    counts = np.bincount(arms, minlength=n_steps + 1)
    if counts[0] != 0 or np.any(counts[1 : n_steps + 1] != per_arm) or arms.max() > n_steps:
        raise ValueError(f"each arm in 1..{n_steps} must hold exactly {per_arm} clusters")

    periods = np.arange(1, n_steps + 2)
    exposure = (periods[np.newaxis, :] >= arms[:, np.newaxis] + 1).astype(np.int8)
    return TrialDesign(
        n_clusters=n_clusters,
        n_steps=n_steps,
        arm_of_cluster=arms,
        exposure=exposure,
    )


def randomize_arms(n_clusters: int, n_steps: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random balanced arm assignment; deterministic given the rng state."""
    if n_clusters % n_steps != 0:
        raise ValueError(
            f"{n_clusters} clusters cannot be split evenly over {n_steps} arms"
        )
    slots = np.repeat(np.arange(1, n_steps + 1), n_clusters // n_steps)
    return rng.permutation(slots)
