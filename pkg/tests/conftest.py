import numpy as np
import pytest

from fedul_sim.data import BackdoorConfig, make_blobs, make_federation, train_test_split
from fedul_sim.federation import FedConfig
from fedul_sim.model import MlpModel, MlpSpec
from fedul_sim.params import ParamVector
from fedul_sim.update_store import RoundRecord, StoreEntry, UpdateStore

TARGET = 0
"""Client removed in the scalar fixture."""


def _scalar(v: float) -> ParamVector:
    # MlpSpec(1) has 4 parameters; only the first one moves.
    return ParamVector.of([v, 0.0, 0.0, 0.0])


@pytest.fixture
def scalar_spec() -> MlpSpec:
    return MlpSpec(input_dim=1)


@pytest.fixture
def scalar_model(scalar_spec) -> MlpModel:
    return MlpModel(scalar_spec, ParamVector.zeros(scalar_spec.num_params))


@pytest.fixture
def scalar_store() -> UpdateStore:
    """N=2, T=2; target updates 1.0 and 0.5, the other client 0.2 and 0.1, both sampled."""
    return UpdateStore(
        num_clients=2,
        dim=4,
        records=[
            RoundRecord(0, (StoreEntry(0, 1.0, _scalar(1.0)), StoreEntry(1, 1.0, _scalar(0.2)))),
            RoundRecord(1, (StoreEntry(0, 1.0, _scalar(0.5)), StoreEntry(1, 1.0, _scalar(0.1)))),
        ],
    )


@pytest.fixture
def tiny_spec() -> MlpSpec:
    return MlpSpec(input_dim=8, hidden_dims=(6,), num_classes=2)


@pytest.fixture
def blobs():
    full = make_blobs(2, 60, 8, 0.1, seed=3)
    return train_test_split(full, 0.25, seed=3)


@pytest.fixture
def tiny_fed(blobs):
    train, test = blobs
    return make_federation(train, test, num_clients=4, non_iid_ratio=1.0, seed=3)


@pytest.fixture
def backdoor_cfg() -> BackdoorConfig:
    return BackdoorConfig()


@pytest.fixture
def tiny_cfg() -> FedConfig:
    return FedConfig(
        num_clients=4,
        sample_size=2,
        rounds=4,
        local_epochs=1,
        batch_size=8,
        learning_rate=0.1,
        seed=11,
    )


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
