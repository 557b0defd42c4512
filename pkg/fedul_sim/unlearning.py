import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from fedul_sim._errors import DimensionError, UnlearningError
from fedul_sim._rng import client_rng
from fedul_sim.data import BackdoorConfig, FederatedDataset
from fedul_sim.federation import (
    FedConfig,
    aggregate_plain,
    local_train,
    prepare_federation,
)
from fedul_sim.model import MlpModel, MlpSpec, init_model
from fedul_sim.params import ParamVector, quantize_f32, vec_norm, vec_sub
from fedul_sim.update_store import UpdateStore


class UnlearnMode(str, Enum):
    FAST_FEDUL = "fast_fedul"
    """Skew-compensated recursion with factor (1 + α) every round."""
    NAIVE = "naive"
    """Subtract the target's stored updates only (no skew, no cross-client term)."""
    RANDOM_SAMPLE_ABLATION = "random_sample_ablation"
    """Skew-compensated recursion over a store trained with uniform sampling."""
    PARTIAL_SKEW = "partial_skew"
    """Skew factor (1 + α) for the first half of the rounds only."""


@dataclass
class UnlearnConfig:
    target_client: int
    """u, the client whose contribution is removed."""
    alpha: float = 0.05
    """Lipschitz coefficient α; 0.05-0.1 works well in practice."""
    mode: UnlearnMode = UnlearnMode.FAST_FEDUL

    def __post_init__(self) -> None:
        try:
            self.mode = UnlearnMode(self.mode)
        except ValueError:
            modes = ", ".join(m.value for m in UnlearnMode)
            raise UnlearningError(f"Unknown unlearning mode '{self.mode}' (choose from {modes}).")
        if not math.isfinite(self.alpha):
            raise UnlearningError(f"alpha must be finite, got {self.alpha}.")


@dataclass
class UnlearnReport:
    unlearned_model: MlpModel
    """M'_T = M_T + Δ'_T."""
    delta_T: ParamVector
    """Δ'_T, the estimated difference between retrained and original models."""
    gamma_norms: List[float]
    """‖γ_j‖ for every stored round j."""
    wall_time: float
    """Seconds spent in the recursion."""
    mode: UnlearnMode = UnlearnMode.FAST_FEDUL
    target_client: int = 0
    alpha: float = 0.0
    bound: Optional[float] = None
    """Error bound on ‖M'_T - M*_T‖, when a Lipschitz estimate was available."""

    def to_dict(self, include_delta: bool = False) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "mode": self.mode.value,
            "target_client": self.target_client,
            "alpha": self.alpha,
            "rounds": len(self.gamma_norms),
            "delta_norm": vec_norm(self.delta_T),
            "gamma_norms": list(self.gamma_norms),
            "bound": self.bound,
            "wall_time": self.wall_time,
        }
        if include_delta:
            out["delta_T"] = self.delta_T.tolist()
        return out


@dataclass(frozen=True)
class BoundInputs:
    K: float
    """Lipschitz constant estimate, >= 0."""
    alpha: float
    gamma_norms: tuple[float, ...]
    """‖γ_j‖ for j = 0..T-1; only 0..T-2 enter the bound."""
    T: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "gamma_norms", tuple(float(g) for g in self.gamma_norms))
        if self.K < 0:
            raise UnlearningError(f"Lipschitz constant must be >= 0, got {self.K}.")
        if len(self.gamma_norms) != self.T:
            raise UnlearningError(
                f"Expected {self.T} gamma norms, got {len(self.gamma_norms)}."
            )


def _check(model: MlpModel, store: UpdateStore, target: int) -> None:
    if store.dim != model.params.dim:
        raise DimensionError(
            f"Store updates have dim {store.dim}, model has {model.params.dim} parameters."
        )
    if not 0 <= target < store.num_clients:
        raise UnlearningError(
            f"Target client {target} out of range [0, {store.num_clients})."
        )
    if store.num_clients < 2:
        raise UnlearningError("Unlearning needs a federation of at least 2 clients.")


def gamma_vectors(store: UpdateStore, target: int) -> List[np.ndarray]:
    """γ_j = (1/(N(N-1))) Σ_{i∈C_F^j} ΔM^i_j - (1/N) ΔM^u_j for every stored round."""
    n = store.num_clients
    out = []
    for record in store.records:
        others = np.zeros(store.dim)
        own = np.zeros(store.dim)
        for e in record.entries:
            if e.client_id == target:
                own = e.update.values
            else:
                others += e.update.values
        out.append(others / (n * (n - 1)) - own / n)
    return out


def gamma_norms(store: UpdateStore, target: int) -> List[float]:
    return [float(np.linalg.norm(g)) for g in gamma_vectors(store, target)]


def _recursion(
    model: MlpModel, store: UpdateStore, target: int, factors: Sequence[float]
) -> tuple[np.ndarray, List[float]]:
    """Δ'_t = factors[t-1] · Δ'_{t-1} + γ_{t-1}, folded over the stored rounds."""
    _check(model, store, target)
    delta = np.zeros(store.dim)
    norms = []
    for factor, gamma in zip(factors, gamma_vectors(store, target)):
        delta = factor * delta + gamma
        norms.append(float(np.linalg.norm(gamma)))
    return delta, norms


def _report(
    model: MlpModel,
    delta: np.ndarray,
    norms: List[float],
    cfg: UnlearnConfig,
    started: float,
) -> UnlearnReport:
    delta_vec = ParamVector(delta)
    unlearned = model.with_params(ParamVector(model.params.values + delta))
    elapsed = time.perf_counter() - started
    logging.info(
        f"Unlearned client {cfg.target_client} ({cfg.mode.value}, alpha={cfg.alpha}): "
        f"|Δ'_T|={vec_norm(delta_vec):.6g} over {len(norms)} rounds in {elapsed:.4f}s"
    )
    return UnlearnReport(
        unlearned_model=unlearned,
        delta_T=delta_vec,
        gamma_norms=norms,
        wall_time=elapsed,
        mode=cfg.mode,
        target_client=cfg.target_client,
        alpha=cfg.alpha,
    )


def fast_fedul(model: MlpModel, store: UpdateStore, cfg: UnlearnConfig) -> UnlearnReport:
    """Remove the target's influence from M_T using only the stored history.

    Δ'_0 = 0; Δ'_t = (1 + α) Δ'_{t-1} + γ_{t-1}; returns M_T + Δ'_T. No client
    data is touched and no training step is taken.
    """
    started = time.perf_counter()
    factors = [1.0 + cfg.alpha] * store.rounds
    delta, norms = _recursion(model, store, cfg.target_client, factors)
    return _report(model, delta, norms, cfg, started)


def ablation_partial_skew(
    model: MlpModel, store: UpdateStore, cfg: UnlearnConfig
) -> UnlearnReport:
    """Skew factor (1 + α) for rounds t <= T/2, factor 1 afterwards."""
    started = time.perf_counter()
    t_total = store.rounds
    factors = [1.0 + cfg.alpha if t <= t_total / 2 else 1.0 for t in range(1, t_total + 1)]
    delta, norms = _recursion(model, store, cfg.target_client, factors)
    return _report(model, delta, norms, cfg, started)


def naive_unlearn(model: MlpModel, store: UpdateStore, target: int) -> MlpModel:
    """M_T - (1/N) Σ_t ΔM^u_t over the rounds where u was sampled."""
    _check(model, store, target)
    acc = np.zeros(store.dim)
    for record in store.records:
        entry = record.get(target)
        if entry is not None:
            acc += entry.update.values
    return model.with_params(ParamVector(model.params.values - acc / store.num_clients))


def unlearn(model: MlpModel, store: UpdateStore, cfg: UnlearnConfig) -> UnlearnReport:
    """Dispatch on `cfg.mode`; every mode yields an UnlearnReport."""
    if cfg.mode is UnlearnMode.PARTIAL_SKEW:
        return ablation_partial_skew(model, store, cfg)
    if cfg.mode is UnlearnMode.NAIVE:
        started = time.perf_counter()
        unlearned = naive_unlearn(model, store, cfg.target_client)
        delta = unlearned.params.values - model.params.values
        return _report(model, delta, gamma_norms(store, cfg.target_client), cfg, started)
    if cfg.mode is UnlearnMode.RANDOM_SAMPLE_ABLATION and store.sampling != "uniform":
        logging.warning(
            "random_sample_ablation applied to a store recorded with "
            f"'{store.sampling}' sampling; train with sampling='uniform' for the ablation."
        )
    return fast_fedul(model, store, cfg)


# ---------------------------------------------------------------------
# Retrain oracle
# ---------------------------------------------------------------------


@dataclass
class RetrainTrace:
    final_model: MlpModel
    """M*_T."""
    retrained: List[ParamVector] = field(default_factory=list)
    """M*_0..M*_T."""
    original: List[ParamVector] = field(default_factory=list)
    """M_0..M_T rebuilt from the store."""
    skew_pairs: List[tuple[ParamVector, ParamVector]] = field(default_factory=list)
    """(Δ_t, ε_t) for t = 0..T-1."""
    wall_time: float = 0.0


def reconstruct_globals(m0: ParamVector, store: UpdateStore) -> List[ParamVector]:
    """M_0..M_T under plain aggregation with divisor N."""
    out = [m0]
    for record in store.records:
        step = aggregate_plain([e.update for e in record.entries], store.num_clients, store.dim)
        out.append(ParamVector(out[-1].values + step))
    return out


def replay_retrain(
    cfg: FedConfig,
    fed: FederatedDataset,
    spec: MlpSpec,
    store: UpdateStore,
    target: int,
    backdoor: Optional[tuple[int, BackdoorConfig]] = None,
) -> RetrainTrace:
    """Retrain without `target`, replaying the stored sampled sets minus the target.

    Aggregation divisor is N - 1. The skew of each round is
    ε_t = (1/(N-1)) Σ_{i∈C_F^t} (ΔM*^i_t - ΔM^i_t).
    """
    started = time.perf_counter()
    n = store.num_clients
    if not 0 <= target < n:
        raise UnlearningError(f"Target client {target} out of range [0, {n}).")
    if spec.num_params != store.dim:
        raise DimensionError(
            f"Store updates have dim {store.dim}, spec has {spec.num_params} parameters."
        )
    fed = prepare_federation(cfg, fed, backdoor)

    m0 = init_model(spec, cfg.seed)
    original = reconstruct_globals(m0.params, store)
    model = m0
    retrained = [m0.params]
    pairs = []
    for record in store.records:
        t = record.round
        kept = [e for e in record.entries if e.client_id != target]
        fresh = [
            quantize_f32(
                local_train(
                    model,
                    fed.clients[e.client_id],
                    cfg.local_epochs,
                    cfg.batch_size,
                    cfg.learning_rate,
                    client_rng(cfg.seed, t, e.client_id),
                )
            )
            for e in kept
        ]
        skew = np.zeros(store.dim)
        for e, f in zip(kept, fresh):
            skew += f.values - e.update.values
        pairs.append((vec_sub(model.params, original[t]), ParamVector(skew / (n - 1))))

        step = aggregate_plain(fresh, n - 1, store.dim)
        model = model.with_params(ParamVector(model.params.values + step))
        retrained.append(model.params)

    elapsed = time.perf_counter() - started
    logging.info(f"Retrained without client {target} over {store.rounds} rounds in {elapsed:.3f}s")
    return RetrainTrace(
        final_model=model,
        retrained=retrained,
        original=original,
        skew_pairs=pairs,
        wall_time=elapsed,
    )


def retrain_oracle(
    cfg: FedConfig,
    fed: FederatedDataset,
    spec: MlpSpec,
    store: UpdateStore,
    target: int,
    backdoor: Optional[tuple[int, BackdoorConfig]] = None,
) -> MlpModel:
    """M*_T: training replayed from scratch without the target client."""
    return replay_retrain(cfg, fed, spec, store, target, backdoor).final_model


# ---------------------------------------------------------------------
# Lipschitz estimate and error bound
# ---------------------------------------------------------------------


def estimate_lipschitz(pairs: Sequence[tuple[ParamVector, ParamVector]]) -> float:
    """K̂ = max_t ‖ε_t‖ / ‖Δ_t‖ over the rounds with ‖Δ_t‖ > 0."""
    ratios = [vec_norm(eps) / vec_norm(d) for d, eps in pairs if vec_norm(d) > 0]
    if not ratios:
        raise UnlearningError("No (Δ_t, ε_t) pair with nonzero Δ_t to estimate K from.")
    return max(ratios)


def _geometric_gap(a: float, b: float, n: int) -> float:
    """(a^n - b^n) / (a - b), or its limit n·a^(n-1) when a ≈ b."""
    if abs(a - b) < 1e-12:
        return n * a ** (n - 1)
    return (a**n - b**n) / (a - b)


def error_bound(b: BoundInputs) -> float:
    """Upper bound on ‖M'_T - M*_T‖ given K, α and the per-round ‖γ_j‖."""
    a, c = 1.0 + b.K, abs(1.0 + b.alpha)
    total = 0.0
    for j in range(b.T - 1):
        total += _geometric_gap(a, c, b.T - 1 - j) * b.gamma_norms[j]
    return (b.K + abs(b.alpha)) * total


@dataclass
class BoundReport:
    K: float
    alpha: float
    gamma_norms: List[float]
    bound: float
    observed: float
    """‖M'_T - M*_T‖."""
    unlearn_report: Optional[UnlearnReport] = field(default=None, repr=False)
    """The fast_fedul report the bound was checked on, with `bound` filled in."""

    @property
    def margin(self) -> float:
        return self.bound - self.observed

    @property
    def holds(self) -> bool:
        return self.observed <= self.bound * (1 + 1e-9) + 1e-12

    def to_dict(self) -> Dict[str, Any]:
        return {
            "K_hat": self.K,
            "alpha": self.alpha,
            "gamma_norms": list(self.gamma_norms),
            "bound": self.bound,
            "observed": self.observed,
            "margin": self.margin,
            "holds": self.holds,
        }


def check_bound(
    model: MlpModel,
    store: UpdateStore,
    retrain: RetrainTrace,
    cfg: UnlearnConfig,
) -> BoundReport:
    """Compare the observed unlearning error against its bound.

    A violation is logged with its margin, never raised: K̂ is an empirical
    estimate of the true Lipschitz constant.
    """
    report = fast_fedul(model, store, cfg)
    try:
        k_hat = estimate_lipschitz(retrain.skew_pairs)
    except UnlearningError:
        logging.info("No nonzero Δ_t in the retrain trace; using K̂ = 0.")
        k_hat = 0.0
    bound = error_bound(BoundInputs(k_hat, cfg.alpha, tuple(report.gamma_norms), store.rounds))
    report.bound = bound
    observed = vec_norm(vec_sub(report.unlearned_model.params, retrain.final_model.params))
    result = BoundReport(k_hat, cfg.alpha, report.gamma_norms, bound, observed, report)
    if not result.holds:
        logging.warning(
            f"Error bound violated: observed {observed:.6g} > bound {bound:.6g} "
            f"(margin {result.margin:.3g}, K̂={k_hat:.4g})"
        )
    return result
