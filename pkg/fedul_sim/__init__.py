"""Public package exports for fedul_sim."""

from fedul_sim._errors import FedulError
from fedul_sim.config import ExperimentConfig, build_experiment
from fedul_sim.data import BackdoorConfig, FederatedDataset, LabeledDataset
from fedul_sim.evaluation import deviation_histogram, evaluate
from fedul_sim.federation import FedConfig, run_training, run_training_with_unlearn_hook
from fedul_sim.model import MlpModel, MlpSpec, init_model
from fedul_sim.params import ParamVector
from fedul_sim.unlearning import (
    UnlearnConfig,
    UnlearnMode,
    check_bound,
    fast_fedul,
    naive_unlearn,
    retrain_oracle,
    unlearn,
)
from fedul_sim.update_store import UpdateStore, store_read, store_write

__all__ = [
    "BackdoorConfig",
    "ExperimentConfig",
    "FedConfig",
    "FederatedDataset",
    "FedulError",
    "LabeledDataset",
    "MlpModel",
    "MlpSpec",
    "ParamVector",
    "UnlearnConfig",
    "UnlearnMode",
    "UpdateStore",
    "build_experiment",
    "check_bound",
    "deviation_histogram",
    "evaluate",
    "fast_fedul",
    "init_model",
    "naive_unlearn",
    "retrain_oracle",
    "run_training",
    "run_training_with_unlearn_hook",
    "store_read",
    "store_write",
    "unlearn",
]
