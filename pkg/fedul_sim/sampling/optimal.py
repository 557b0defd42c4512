from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from fedul_sim._errors import DimensionError, SamplingError
from fedul_sim.params import ParamVector

P_FLOOR = 1e-6
"""Lower bound on every inclusion probability; zero-norm clients get exactly this."""


@dataclass(frozen=True)
class SamplingPlan:
    """Per-client inclusion probabilities for one round."""

    probabilities: tuple[float, ...]
    """p_i per participating client, aligned with `client_ids`."""
    client_ids: tuple[int, ...]
    """Ids of the participating clients."""
    threshold_index: int
    """l: the l smallest norms get p < 1 (or the formula), the rest p = 1."""
    expected_size: float
    """m, the target expected sample size."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "probabilities", tuple(float(p) for p in self.probabilities))
        object.__setattr__(self, "client_ids", tuple(int(c) for c in self.client_ids))
        if len(self.probabilities) != len(self.client_ids):
            raise SamplingError(
                f"{len(self.probabilities)} probabilities for {len(self.client_ids)} clients."
            )

    def __len__(self) -> int:
        return len(self.probabilities)

    def probability_of(self, client_id: int) -> float:
        return self.probabilities[self.client_ids.index(client_id)]


def _ids(n: int, client_ids: Optional[Sequence[int]]) -> tuple[int, ...]:
    ids = tuple(range(n)) if client_ids is None else tuple(client_ids)
    if len(ids) != n:
        raise SamplingError(f"Got {n} norms but {len(ids)} client ids.")
    return ids


def compute_probabilities(
    norms: Sequence[float],
    m: int,
    client_ids: Optional[Sequence[int]] = None,
    p_floor: float = P_FLOOR,
) -> SamplingPlan:
    """Variance-optimal independent sampling probabilities for update norms.

    With norms sorted ascending as n_(1) <= ... <= n_(N), l is the largest
    index with 0 < m + l - N <= sum_{j<=l} n_(j) / n_(l). The l smallest get
    p = (m + l - N) * n / sum_{j<=l} n_(j); the N - l largest get p = 1.
    Every probability is then clamped to [p_floor, 1].
    """
    values = np.asarray(norms, dtype=np.float64)
    n = values.shape[0]
    ids = _ids(n, client_ids)
    if not 1 <= m <= n:
        raise SamplingError(f"Sample size m={m} must be in [1, {n}].")
    if np.any(values < 0) or not np.all(np.isfinite(values)):
        raise SamplingError("Update norms must be finite and non-negative.")
    if not np.any(values > 0):
        raise SamplingError("All update norms are zero; no sampling distribution exists.")

    order = np.argsort(values, kind="stable")
    ascending = values[order]
    prefix = np.cumsum(ascending)

    threshold = int(np.count_nonzero(ascending == 0))
    for l in range(n, 0, -1):
        top = ascending[l - 1]
        if top == 0:
            break
        budget = m + l - n
        if 0 < budget <= prefix[l - 1] / top:
            threshold = l
            break

    sorted_p = np.ones(n)
    budget = m + threshold - n
    if threshold > 0 and prefix[threshold - 1] > 0:
        sorted_p[:threshold] = budget * ascending[:threshold] / prefix[threshold - 1]
    sorted_p = np.clip(sorted_p, p_floor, 1.0)
    sorted_p[ascending == 0] = p_floor

    p = np.empty(n)
    p[order] = sorted_p
    return SamplingPlan(tuple(p), ids, threshold, float(m))


def uniform_probabilities(
    n: int, m: int, client_ids: Optional[Sequence[int]] = None
) -> SamplingPlan:
    """p_i = m / N for every client (random-sampling ablation)."""
    ids = _ids(n, client_ids)
    if not 1 <= m <= n:
        raise SamplingError(f"Sample size m={m} must be in [1, {n}].")
    return SamplingPlan(tuple([m / n] * n), ids, n, float(m))


def draw_sample(plan: SamplingPlan, seed: int | np.random.Generator) -> frozenset[int]:
    """Include each client independently with its probability."""
    if len(plan) == 0:
        return frozenset()
    rng = np.random.default_rng(seed)
    u = rng.random(len(plan))
    p = np.asarray(plan.probabilities)
    return frozenset(cid for cid, hit in zip(plan.client_ids, u < p) if hit)


def ip_aggregate(
    sampled: Sequence[tuple[float, ParamVector]], dim: Optional[int] = None
) -> ParamVector:
    """Inverse-probability estimator sum_j ΔM_j / p_j, summed in the given order."""
    if not sampled:
        if dim is None:
            raise DimensionError("ip_aggregate of an empty sample needs an explicit dim.")
        return ParamVector.zeros(dim)
    dim = sampled[0][1].dim if dim is None else dim
    acc = np.zeros(dim)
    for p, update in sampled:
        if not p > 0:
            raise SamplingError(f"Inverse-probability weight needs p > 0, got {p}.")
        if update.dim != dim:
            raise DimensionError(f"Dimension mismatch: {update.dim} != {dim}.")
        acc += update.values / p
    return ParamVector(acc)


def variance_bound(norms: Sequence[float], plan: SamplingPlan) -> float:
    """sum_i (1 - p_i) / p_i * ||ΔM_i||^2."""
    values = np.asarray(norms, dtype=np.float64)
    p = np.asarray(plan.probabilities)
    if values.shape != p.shape:
        raise SamplingError(f"{values.shape[0]} norms for a plan of {p.shape[0]} clients.")
    return float(np.sum((1.0 - p) / p * values**2))
