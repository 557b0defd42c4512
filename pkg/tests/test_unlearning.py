from dataclasses import replace

import numpy as np
import pytest

from fedul_sim._errors import DimensionError, UnlearningError
from fedul_sim.federation import FedConfig, run_training
from fedul_sim.model import MlpModel, MlpSpec, init_model
from fedul_sim.params import ParamVector
from fedul_sim.unlearning import (
    BoundInputs,
    RetrainTrace,
    UnlearnConfig,
    UnlearnMode,
    ablation_partial_skew,
    check_bound,
    error_bound,
    estimate_lipschitz,
    fast_fedul,
    gamma_norms,
    naive_unlearn,
    replay_retrain,
    retrain_oracle,
    unlearn,
)
from fedul_sim.update_store import RoundRecord, StoreEntry, UpdateStore

from .conftest import TARGET


class TestScalarFixture:
    """Two clients, two rounds, everyone sampled; values worked out by hand."""

    def test_fast_fedul(self, scalar_model, scalar_store):
        report = fast_fedul(scalar_model, scalar_store, UnlearnConfig(TARGET, alpha=0.1))
        assert report.delta_T.values[0] == pytest.approx(-0.64, abs=1e-8)
        assert report.unlearned_model.params.values[0] == pytest.approx(-0.64, abs=1e-8)
        np.testing.assert_array_equal(report.delta_T.values[1:], 0.0)
        assert report.gamma_norms == pytest.approx([0.4, 0.2])

    def test_naive(self, scalar_model, scalar_store):
        model = naive_unlearn(scalar_model, scalar_store, TARGET)
        assert model.params.values[0] == pytest.approx(-0.75, abs=1e-8)

    def test_partial_skew(self, scalar_model, scalar_store):
        cfg = UnlearnConfig(TARGET, alpha=0.1, mode=UnlearnMode.PARTIAL_SKEW)
        report = ablation_partial_skew(scalar_model, scalar_store, cfg)
        assert report.delta_T.values[0] == pytest.approx(-0.60, abs=1e-8)

    @pytest.mark.parametrize(
        "mode, expected",
        [
            ("fast_fedul", -0.64),
            ("naive", -0.75),
            ("partial_skew", -0.60),
            ("random_sample_ablation", -0.64),
        ],
    )
    def test_dispatch(self, scalar_model, scalar_store, mode, expected):
        report = unlearn(scalar_model, scalar_store, UnlearnConfig(TARGET, 0.1, mode))
        assert report.mode.value == mode
        assert report.delta_T.values[0] == pytest.approx(expected, abs=1e-8)

    def test_report_dict(self, scalar_model, scalar_store):
        report = fast_fedul(scalar_model, scalar_store, UnlearnConfig(TARGET, alpha=0.1))
        d = report.to_dict(include_delta=True)
        assert d["delta_T"][0] == pytest.approx(-0.64)
        assert d["rounds"] == 2
        assert "delta_T" not in report.to_dict()


def test_alpha_zero_sums_gammas(scalar_model, scalar_store):
    report = fast_fedul(scalar_model, scalar_store, UnlearnConfig(TARGET, alpha=0.0))
    assert report.delta_T.values[0] == pytest.approx(-0.6, abs=1e-8)


def test_target_never_sampled():
    # only the other client is ever stored: γ_j = ΔM_j / (N(N-1))
    v = ParamVector.of([0.6, 0.0, 0.0, 0.0])
    store = UpdateStore(
        num_clients=3,
        dim=4,
        records=[RoundRecord(0, (StoreEntry(1, 0.5, v),))],
    )
    model = MlpModel(MlpSpec(1), ParamVector.zeros(4))
    report = fast_fedul(model, store, UnlearnConfig(0, alpha=0.05))
    assert report.delta_T.values[0] == pytest.approx(0.1)


def test_empty_store_is_identity(scalar_model):
    store = UpdateStore(num_clients=2, dim=4)
    report = fast_fedul(scalar_model, store, UnlearnConfig(0))
    assert report.unlearned_model == scalar_model


def test_unknown_mode():
    with pytest.raises(UnlearningError):
        UnlearnConfig(0, mode="gradient_ascent")


def test_target_out_of_range(scalar_model, scalar_store):
    with pytest.raises(UnlearningError):
        fast_fedul(scalar_model, scalar_store, UnlearnConfig(5))


def test_dimension_mismatch(scalar_store):
    model = init_model(MlpSpec(2), 0)
    with pytest.raises(DimensionError):
        fast_fedul(model, scalar_store, UnlearnConfig(0))


def test_gamma_norms(scalar_store):
    assert gamma_norms(scalar_store, TARGET) == pytest.approx([0.4, 0.2])


class TestLipschitz:
    def test_max_ratio(self):
        pairs = [
            (ParamVector.of([1.0, 0.0]), ParamVector.of([0.5, 0.0])),
            (ParamVector.of([0.0, 2.0]), ParamVector.of([0.0, 3.0])),
        ]
        assert estimate_lipschitz(pairs) == pytest.approx(1.5)

    def test_skips_zero_delta(self):
        pairs = [
            (ParamVector.of([0.0]), ParamVector.of([1.0])),
            (ParamVector.of([2.0]), ParamVector.of([1.0])),
        ]
        assert estimate_lipschitz(pairs) == pytest.approx(0.5)

    def test_no_usable_pairs(self):
        with pytest.raises(UnlearningError):
            estimate_lipschitz([(ParamVector.of([0.0]), ParamVector.of([1.0]))])


class TestErrorBound:
    def test_single_round_is_zero(self):
        assert error_bound(BoundInputs(0.3, 0.05, (1.0,), 1)) == 0.0

    def test_degenerate_denominator_uses_limit(self):
        # K = α: (1+K)^n - |1+α|^n over their difference tends to n (1+K)^(n-1)
        b = BoundInputs(0.1, 0.1, (1.0, 1.0, 1.0), 3)
        expected = 0.2 * (2 * 1.1 + 1 * 1.0)
        assert error_bound(b) == pytest.approx(expected)

    def test_matches_closed_form(self):
        k, alpha, g = 0.5, 0.1, (0.2, 0.3, 0.4)
        a, c = 1 + k, 1 + alpha
        terms = [(a ** (2 - j) - c ** (2 - j)) / (a - c) * g[j] for j in range(2)]
        expected = (k + alpha) * sum(terms)
        assert error_bound(BoundInputs(k, alpha, g, 3)) == pytest.approx(expected)

    def test_two_rounds_by_hand(self):
        # (K + α) · ((1+K) - (1+α)) / (K - α) · ‖γ_0‖ = (K + α) · ‖γ_0‖
        assert error_bound(BoundInputs(0.3, 0.1, (0.4, 9.0), 2)) == pytest.approx(0.16)

    def test_zero_k_and_alpha(self):
        assert error_bound(BoundInputs(0.0, 0.0, (1.0, 2.0), 2)) == 0.0

    def test_validation(self):
        with pytest.raises(UnlearningError):
            BoundInputs(-1.0, 0.0, (1.0,), 1)
        with pytest.raises(UnlearningError):
            BoundInputs(0.0, 0.0, (1.0,), 2)


@pytest.fixture
def toy(blobs):
    from fedul_sim.data import make_federation

    train, test = blobs
    fed = make_federation(train, test, num_clients=5, non_iid_ratio=1.0, seed=7)
    cfg = FedConfig(num_clients=5, sample_size=3, rounds=6, batch_size=8, learning_rate=0.1, seed=7)
    spec = MlpSpec(8, (4,), 2)
    return cfg, fed, spec


def test_retrain_trace_shapes(toy):
    cfg, fed, spec = toy
    trace = run_training(cfg, fed, spec)
    retrain = replay_retrain(cfg, fed, spec, trace.store, target=2)
    assert len(retrain.retrained) == cfg.rounds + 1
    assert retrain.retrained[0] == retrain.original[0]
    assert retrain.original[-1] == trace.final_model.params
    assert len(retrain.skew_pairs) == cfg.rounds
    # Δ_0 = M*_0 - M_0 = 0
    assert not retrain.skew_pairs[0][0].values.any()
    assert retrain_oracle(cfg, fed, spec, trace.store, 2) == retrain.final_model


def test_retrain_rejects_bad_target(toy):
    cfg, fed, spec = toy
    trace = run_training(cfg, fed, spec)
    with pytest.raises(UnlearningError):
        replay_retrain(cfg, fed, spec, trace.store, target=9)


def test_check_bound_report(toy):
    cfg, fed, spec = toy
    trace = run_training(cfg, fed, spec)
    retrain = replay_retrain(cfg, fed, spec, trace.store, target=0)
    report = check_bound(trace.final_model, trace.store, retrain, UnlearnConfig(0, 0.05))
    d = report.to_dict()
    for key in ("K_hat", "alpha", "bound", "observed", "margin"):
        assert np.isfinite(d[key])
    assert len(d["gamma_norms"]) == cfg.rounds
    assert report.margin == pytest.approx(report.bound - report.observed)
    assert report.unlearn_report.bound == report.bound
    assert report.unlearn_report.to_dict()["bound"] == report.bound


def test_check_bound_single_round(toy):
    cfg, fed, spec = toy
    cfg = replace(cfg, rounds=1)
    trace = run_training(cfg, fed, spec)
    retrain = replay_retrain(cfg, fed, spec, trace.store, target=0)
    report = check_bound(trace.final_model, trace.store, retrain, UnlearnConfig(0, 0.05))
    assert report.bound == 0.0
    assert report.observed == pytest.approx(0.0, abs=1e-12)
    assert report.holds


def test_check_bound_without_skew(scalar_model, scalar_store):
    # a retrain trace with zero skew gives K̂ = 0 and a bound from γ alone
    zero = ParamVector.zeros(4)
    retrain = RetrainTrace(
        final_model=scalar_model.with_params(ParamVector.of([-0.6, 0.0, 0.0, 0.0])),
        skew_pairs=[(zero, zero), (ParamVector.of([1.0, 0, 0, 0]), zero)],
    )
    report = check_bound(scalar_model, scalar_store, retrain, UnlearnConfig(TARGET, 0.0))
    assert report.K == 0.0
    assert report.bound == 0.0
    assert report.observed == pytest.approx(0.0, abs=1e-8)
    assert report.holds


def test_violation_is_logged_not_raised(scalar_model, scalar_store, caplog):
    retrain = RetrainTrace(
        final_model=scalar_model.with_params(ParamVector.of([5.0, 0.0, 0.0, 0.0])),
        skew_pairs=[],
    )
    report = check_bound(scalar_model, scalar_store, retrain, UnlearnConfig(TARGET, 0.1))
    assert not report.holds
    assert "bound violated" in caplog.text


def _random_store(rng, n=4, dim=6, rounds=5, target_rate=0.7) -> UpdateStore:
    records = []
    for t in range(rounds):
        entries = tuple(
            StoreEntry(cid, 0.5, ParamVector(rng.normal(size=dim)))
            for cid in range(n)
            if rng.random() < (target_rate if cid == TARGET else 0.6)
        )
        records.append(RoundRecord(t, entries))
    return UpdateStore(num_clients=n, dim=dim, records=records)


def _scaled(store: UpdateStore, c: float) -> UpdateStore:
    records = [
        RoundRecord(
            r.round,
            tuple(
                StoreEntry(e.client_id, e.probability, ParamVector(c * e.update.values))
                for e in r.entries
            ),
        )
        for r in store.records
    ]
    return UpdateStore(num_clients=store.num_clients, dim=store.dim, records=records)


@pytest.mark.parametrize("c", [0.5, 2.0, -4.0])
def test_fast_fedul_is_linear_in_updates(rng, c):
    # powers of two survive float32 storage exactly
    for _ in range(10):
        store = _random_store(rng)
        model = MlpModel(MlpSpec(1, (1,), 2), ParamVector(rng.normal(size=store.dim)))
        cfg = UnlearnConfig(TARGET, alpha=0.07)
        base = fast_fedul(model, store, cfg).delta_T.values
        scaled = fast_fedul(model, _scaled(store, c), cfg).delta_T.values
        np.testing.assert_allclose(scaled, c * base, rtol=1e-9, atol=1e-12)


def test_naive_is_alpha_zero_recursion_without_cross_term(rng):
    for _ in range(10):
        store = _random_store(rng)
        own_only = UpdateStore(
            num_clients=store.num_clients,
            dim=store.dim,
            records=[
                RoundRecord(r.round, tuple(e for e in r.entries if e.client_id == TARGET))
                for r in store.records
            ],
        )
        model = MlpModel(MlpSpec(1, (1,), 2), ParamVector(rng.normal(size=store.dim)))
        naive = naive_unlearn(model, store, TARGET)
        recursion = fast_fedul(model, own_only, UnlearnConfig(TARGET, alpha=0.0))
        np.testing.assert_allclose(
            naive.params.values, recursion.unlearned_model.params.values, rtol=1e-12, atol=1e-12
        )
