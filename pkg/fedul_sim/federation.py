import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Any, Dict, List, Literal, Optional, Sequence

import numpy as np

from fedul_sim._errors import ConfigError, DatasetError, DimensionError
from fedul_sim._rng import client_rng, poison_seed, resolve_num_threads, round_rng
from fedul_sim.data import BackdoorConfig, FederatedDataset, LabeledDataset, apply_backdoor
from fedul_sim.model import MlpModel, MlpSpec, init_model, loss_and_grad
from fedul_sim.params import ParamVector, quantize_f32
from fedul_sim.sampling import (
    SamplingPlan,
    compute_probabilities,
    draw_sample,
    ip_aggregate,
    uniform_probabilities,
)
from fedul_sim.update_store import RoundRecord, StoreEntry, UpdateStore, serialized_size

if TYPE_CHECKING:
    from fedul_sim.unlearning import UnlearnReport


@dataclass
class FedConfig:
    """Hyperparameters of one simulated federated training run."""

    num_clients: int
    """N, number of enrolled clients."""
    sample_size: int
    """m, expected number of clients sampled per round."""
    rounds: int
    """T, number of communication rounds."""
    local_epochs: int = 1
    """R, local SGD epochs per round."""
    batch_size: int = 32
    """Minibatch size of local SGD."""
    learning_rate: float = 0.05
    """η, local SGD step size."""
    seed: int = 0
    """Root seed; every random stream of the run derives from it."""

    aggregation: Literal["plain", "ipw"] = "plain"
    """"plain": M += (1/N) Σ ΔM over sampled; "ipw": M += (1/N) Σ ΔM / p."""
    sampling: Literal["optimal", "uniform"] = "optimal"
    """"optimal": norm-proportional probabilities; "uniform": p = m / N."""
    num_threads: Optional[int] = None
    """Worker threads for local training; falls back to FFUL_THREADS, then 1."""
    keep_history: bool = False
    """Keep every round's global parameters in the trace."""

    def __post_init__(self) -> None:
        if self.num_clients < 2:
            raise ConfigError(f"num_clients must be >= 2, got {self.num_clients}.")
        if not 1 <= self.sample_size <= self.num_clients:
            raise ConfigError(
                f"sample_size must be in [1, {self.num_clients}], got {self.sample_size}."
            )
        if self.rounds < 1 or self.local_epochs < 1 or self.batch_size < 1:
            raise ConfigError(
                "rounds, local_epochs and batch_size must be >= 1, got "
                f"{self.rounds}, {self.local_epochs}, {self.batch_size}."
            )
        if not self.learning_rate >= 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}.")
        if self.aggregation not in ("plain", "ipw"):
            raise ConfigError(f"Unknown aggregation mode '{self.aggregation}'.")
        if self.sampling not in ("optimal", "uniform"):
            raise ConfigError(f"Unknown sampling scheme '{self.sampling}'.")


@dataclass
class TrainingTrace:
    """Outputs of a training run."""

    final_model: MlpModel
    """Global model M_T."""
    store: UpdateStore
    """Sampled client updates of every round."""
    per_round_global: Optional[List[ParamVector]] = None
    """M_0..M_T when `keep_history` is set."""
    wall_times: List[float] = field(default_factory=list)
    """Seconds spent per round."""
    stored_bytes: int = 0
    """Serialized size of `store`."""
    unlearned_at: Optional[int] = None
    """Round at which an unlearning request fired, if any."""
    unlearn_report: Optional["UnlearnReport"] = None

    def manifest(self) -> Dict[str, Any]:
        return {
            "rounds": self.store.rounds,
            "wall_times": list(self.wall_times),
            "stored_bytes": self.stored_bytes,
            "unlearned_at": self.unlearned_at,
            "store": self.store.report(),
        }


def local_train(
    global_model: MlpModel,
    ds: LabeledDataset,
    local_epochs: int,
    batch_size: int,
    learning_rate: float,
    seed: int | np.random.Generator,
) -> ParamVector:
    """Minibatch SGD from the global model; returns params_after - params_before."""
    n = len(ds)
    if n == 0:
        raise DatasetError("local_train needs a non-empty client dataset.")
    rng = np.random.default_rng(seed)
    spec = global_model.spec
    start = global_model.params.values
    params = start.copy()
    for _ in range(local_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            rows = order[lo : lo + batch_size]
            model = MlpModel(spec, ParamVector(params))
            _, grad = loss_and_grad(model, (ds.features[rows], ds.labels[rows]))
            params -= learning_rate * grad.values
    return ParamVector(params - start)


def aggregate_plain(updates: Sequence[ParamVector], divisor: int, dim: int) -> np.ndarray:
    """(1/divisor) · Σ updates, summed in the given order."""
    acc = np.zeros(dim)
    for u in updates:
        acc += u.values
    return acc / divisor


def plan_round(
    sampling: str, norms: Sequence[float], m: int, client_ids: Sequence[int]
) -> SamplingPlan:
    m = min(m, len(client_ids))
    if sampling == "uniform":
        return uniform_probabilities(len(client_ids), m, client_ids)
    if not any(n > 0 for n in norms):
        logging.warning("All client updates are zero this round; sampling uniformly.")
        return uniform_probabilities(len(client_ids), m, client_ids)
    return compute_probabilities(norms, m, client_ids)


def _check_inputs(cfg: FedConfig, fed: FederatedDataset, spec: MlpSpec) -> None:
    if fed.num_clients != cfg.num_clients:
        raise ConfigError(
            f"Config declares {cfg.num_clients} clients, dataset has {fed.num_clients}."
        )
    for cid, ds in enumerate(fed.clients):
        if len(ds) and ds.input_dim != spec.input_dim:
            raise DimensionError(
                f"Client {cid} features have dim {ds.input_dim}, model expects "
                f"{spec.input_dim}."
            )


def prepare_federation(
    cfg: FedConfig,
    fed: FederatedDataset,
    backdoor: Optional[tuple[int, BackdoorConfig]] = None,
) -> FederatedDataset:
    """Apply the configured backdoor to the malicious client's shard."""
    if backdoor is None:
        return fed
    client_id, bd = backdoor
    return apply_backdoor(fed, client_id, bd, poison_seed(cfg.seed, client_id))


class _ClientPool:
    """Runs the per-round local_train calls, serially or on a thread pool."""

    def __init__(self, num_threads: Optional[int]):
        self._num_threads = resolve_num_threads(num_threads)
        self._executor: Optional[ThreadPoolExecutor] = None
        if self._num_threads > 1:
            self._executor = ThreadPoolExecutor(
                max_workers=self._num_threads, thread_name_prefix="fedul-client"
            )

    def __enter__(self) -> "_ClientPool":
        return self

    def __exit__(self, *exc: Any) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)

    def updates(
        self,
        cfg: FedConfig,
        fed: FederatedDataset,
        model: MlpModel,
        round: int,
        client_ids: Sequence[int],
    ) -> Dict[int, ParamVector]:
        """Quantized client updates keyed by id; keys follow `client_ids` order."""

        def work(cid: int) -> ParamVector:
            logging.debug(f"Round {round}: local training on client {cid}.")
            delta = local_train(
                model,
                fed.clients[cid],
                cfg.local_epochs,
                cfg.batch_size,
                cfg.learning_rate,
                client_rng(cfg.seed, round, cid),
            )
            return quantize_f32(delta)

        if self._executor is None:
            results = [work(cid) for cid in client_ids]
        else:
            results = list(self._executor.map(work, client_ids))
        return dict(zip(client_ids, results))


def _train(
    cfg: FedConfig,
    fed: FederatedDataset,
    spec: MlpSpec,
    hook: Optional[tuple[int, int, float]] = None,
) -> TrainingTrace:
    """Shared loop; `hook` is (request_round, target, alpha)."""
    _check_inputs(cfg, fed, spec)
    n = cfg.num_clients
    model = init_model(spec, cfg.seed)
    store = UpdateStore(
        num_clients=n, dim=spec.num_params, layout=spec.layout(), sampling=cfg.sampling
    )
    history = [model.params] if cfg.keep_history else None
    active = list(range(n))
    divisor = n
    trace = TrainingTrace(final_model=model, store=store)

    def fire(current: MlpModel) -> MlpModel:
        from fedul_sim.unlearning import UnlearnConfig, fast_fedul

        request_round, target, alpha = hook
        report = fast_fedul(current, store, UnlearnConfig(target_client=target, alpha=alpha))
        trace.unlearned_at = request_round
        trace.unlearn_report = report
        active.remove(target)
        logging.info(
            f"Unlearning request for client {target} applied at round {request_round}; "
            "client excluded from later rounds."
        )
        return report.unlearned_model

    with _ClientPool(cfg.num_threads) as pool:
        for t in range(cfg.rounds):
            if hook is not None and hook[0] == t:
                model = fire(model)
                divisor = n - 1
            started = time.perf_counter()

            updates = pool.updates(cfg, fed, model, t, active)
            norms = [float(np.linalg.norm(updates[c].values)) for c in active]
            plan = plan_round(cfg.sampling, norms, cfg.sample_size, active)
            chosen = sorted(draw_sample(plan, round_rng(cfg.seed, t)))

            store.append(
                RoundRecord(
                    t, tuple(StoreEntry(c, plan.probability_of(c), updates[c]) for c in chosen)
                )
            )

            if cfg.aggregation == "ipw":
                step = ip_aggregate(
                    [(plan.probability_of(c), updates[c]) for c in chosen],
                    dim=spec.num_params,
                ).values / divisor
            else:
                step = aggregate_plain([updates[c] for c in chosen], divisor, spec.num_params)
            model = model.with_params(ParamVector(model.params.values + step))
            if history is not None:
                history.append(model.params)

            elapsed = time.perf_counter() - started
            trace.wall_times.append(elapsed)
            logging.info(
                f"Round {t}: sampled {len(chosen)}/{len(active)} clients "
                f"(expected {sum(plan.probabilities):.2f}), {elapsed:.3f}s"
            )

        if hook is not None and hook[0] == cfg.rounds:
            model = fire(model)

    trace.final_model = model
    trace.per_round_global = history
    trace.stored_bytes = serialized_size(store)
    return trace


def run_training(
    cfg: FedConfig,
    fed: FederatedDataset,
    spec: MlpSpec,
    backdoor: Optional[tuple[int, BackdoorConfig]] = None,
) -> TrainingTrace:
    """Simulate T rounds of sampled FedAvg, recording sampled updates in a store."""
    return _train(cfg, prepare_federation(cfg, fed, backdoor), spec)


def run_training_with_unlearn_hook(
    cfg: FedConfig,
    fed: FederatedDataset,
    spec: MlpSpec,
    target: int,
    alpha: float,
    request_round: Optional[int] = None,
    backdoor: Optional[tuple[int, BackdoorConfig]] = None,
) -> TrainingTrace:
    """Train, unlearn `target` at `request_round` (default T), then train without it.

    After the request the target no longer participates and the aggregation
    divisor becomes N - 1.
    """
    if not 0 <= target < cfg.num_clients:
        raise ConfigError(f"Target client {target} out of range [0, {cfg.num_clients}).")
    request_round = cfg.rounds if request_round is None else request_round
    if not 0 <= request_round <= cfg.rounds:
        raise ConfigError(
            f"Unlearning request round {request_round} outside [0, {cfg.rounds}]."
        )
    return _train(
        cfg, prepare_federation(cfg, fed, backdoor), spec, (request_round, target, alpha)
    )
