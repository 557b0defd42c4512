import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence

from fedul_sim._errors import ConfigError
from fedul_sim.data import (
    BackdoorConfig,
    FederatedDataset,
    LabeledDataset,
    load_idx,
    make_blobs,
    make_federation,
    train_test_split,
)
from fedul_sim.federation import FedConfig
from fedul_sim.model import MlpSpec
from fedul_sim.unlearning import UnlearnConfig, UnlearnMode

SECTIONS = ("dataset", "model", "fed", "non_iid_ratio", "backdoor", "unlearn", "output_dir")

DEFAULT_HIDDEN_DIMS = {"blobs": [16], "idx": [32]}
"""Hidden widths used when the config has no 'model' section, per dataset kind."""


@dataclass
class DatasetConfig:
    """Where client data comes from: synthetic blobs or an IDX file pair."""

    kind: Literal["blobs", "idx"] = "blobs"
    """"blobs" for synthetic Gaussian blobs, "idx" for MNIST-style files."""

    # blobs
    num_classes: int = 2
    samples_per_class: int = 500
    input_dim: int = 8
    spread: float = 0.1

    # idx
    train_images: Optional[str] = None
    train_labels: Optional[str] = None
    test_images: Optional[str] = None
    """Optional; without test files a split of the training data is held out."""
    test_labels: Optional[str] = None
    limit: Optional[int] = None
    """Use only the first `limit` training samples."""

    test_fraction: float = 0.2
    """Held-out share when no separate test files are given."""

    def __post_init__(self) -> None:
        if self.kind not in ("blobs", "idx"):
            raise ConfigError(f"Unknown dataset kind '{self.kind}'.")
        if self.kind == "idx" and not (self.train_images and self.train_labels):
            raise ConfigError("IDX datasets need 'train_images' and 'train_labels'.")
        if (self.test_images is None) != (self.test_labels is None):
            raise ConfigError("Give both 'test_images' and 'test_labels', or neither.")


@dataclass
class BackdoorSection:
    """A malicious client and its pixel trigger."""

    client_id: int = 0
    trigger_pixels: List[List[int]] = field(
        default_factory=lambda: [[0, 0], [0, 1], [1, 0], [1, 1]]
    )
    trigger_value: float = 1.0
    target_label: int = 0
    poison_fraction: float = 0.3

    def to_backdoor(self) -> tuple[int, BackdoorConfig]:
        return self.client_id, BackdoorConfig(
            trigger_pixels=tuple(tuple(p) for p in self.trigger_pixels),
            trigger_value=self.trigger_value,
            target_label=self.target_label,
            poison_fraction=self.poison_fraction,
        )


def _build(cls: type, section: str, values: Any) -> Any:
    if not isinstance(values, dict):
        raise ConfigError(f"Config section '{section}' must be an object.")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}.")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"Invalid '{section}' section: {e}") from e


@dataclass
class ExperimentConfig:
    """Everything one experiment needs, loaded from a single JSON document."""

    fed: FedConfig
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    hidden_dims: List[int] = field(default_factory=lambda: [16])
    """Hidden layer widths of the client model."""
    non_iid_ratio: float = 1.0
    """Most/least frequent class ratio per client; 1 means IID."""
    backdoor: Optional[BackdoorSection] = None
    unlearn: Optional[UnlearnConfig] = None
    output_dir: str = "runs/default"

    raw: Dict[str, Any] = field(default_factory=dict, repr=False, compare=False)
    """The document this config was built from, echoed into run manifests."""

    # ---------------------------------------------------------------------
    # Construction helpers
    # ---------------------------------------------------------------------

    @classmethod
    def from_config(cls, config: dict) -> "ExperimentConfig":
        """
        Construct from a JSON-style dict:

            {
              "dataset": {"kind": "blobs", "num_classes": 2, ...},
              "model": {"hidden_dims": [16]},
              "fed": {"num_clients": 10, "sample_size": 5, "rounds": 30, ...},
              "non_iid_ratio": 2.0,
              "backdoor": {"client_id": 0, "poison_fraction": 0.3, ...},
              "unlearn": {"target_client": 0, "alpha": 0.05, "mode": "fast_fedul"},
              "output_dir": "runs/blobs"
            }

        Only "fed" is required; "unlearn.target_client" defaults to the
        backdoor's malicious client, and a backdoor without an "unlearn"
        section unlearns that client with default settings.
        """
        unknown = sorted(set(config) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"Unknown config section(s): {', '.join(unknown)}.")
        if "fed" not in config:
            raise ConfigError("Config needs a 'fed' section.")

        fed = _build(FedConfig, "fed", config["fed"])
        dataset = _build(DatasetConfig, "dataset", config.get("dataset", {}))
        model = config.get("model", {})
        if set(model) - {"hidden_dims"}:
            raise ConfigError(
                f"Unknown key(s) in 'model': {', '.join(sorted(set(model) - {'hidden_dims'}))}."
            )

        backdoor = None
        if config.get("backdoor") is not None:
            backdoor = _build(BackdoorSection, "backdoor", config["backdoor"])
            if not 0 <= backdoor.client_id < fed.num_clients:
                raise ConfigError(
                    f"Backdoor client {backdoor.client_id} out of range "
                    f"[0, {fed.num_clients})."
                )

        unlearn = None
        if config.get("unlearn") is not None or backdoor is not None:
            section = dict(config.get("unlearn") or {})
            if "target_client" not in section:
                if backdoor is None:
                    raise ConfigError("'unlearn.target_client' is required without a backdoor.")
                section["target_client"] = backdoor.client_id
            unlearn = _build(UnlearnConfig, "unlearn", section)
            if not 0 <= unlearn.target_client < fed.num_clients:
                raise ConfigError(
                    f"Unlearning target {unlearn.target_client} out of range "
                    f"[0, {fed.num_clients})."
                )

        return cls(
            fed=fed,
            dataset=dataset,
            hidden_dims=list(model.get("hidden_dims", DEFAULT_HIDDEN_DIMS[dataset.kind])),
            non_iid_ratio=float(config.get("non_iid_ratio", 1.0)),
            backdoor=backdoor,
            unlearn=unlearn,
            output_dir=str(config.get("output_dir", "runs/default")),
            raw=copy.deepcopy(config),
        )

    @classmethod
    def from_config_file(
        cls, json_path: str | Path, overrides: Sequence[str] = ()
    ) -> "ExperimentConfig":
        """
        Construct from a JSON config file on disk, applying `key=value` overrides.
        """
        path = Path(json_path)
        if not path.exists():
            raise ConfigError(f"Config file not found: {path}")
        with open(path, "r", encoding="utf-8") as f:
            try:
                config = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
        return cls.from_config(apply_overrides(config, overrides))

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "dataset": asdict(self.dataset),
            "model": {"hidden_dims": list(self.hidden_dims)},
            "fed": asdict(self.fed),
            "non_iid_ratio": self.non_iid_ratio,
            "backdoor": asdict(self.backdoor) if self.backdoor else None,
            "unlearn": None,
            "output_dir": self.output_dir,
        }
        if self.unlearn is not None:
            out["unlearn"] = {
                "target_client": self.unlearn.target_client,
                "alpha": self.unlearn.alpha,
                "mode": self.unlearn.mode.value,
            }
        return out

    @property
    def target_client(self) -> int:
        if self.unlearn is None:
            raise ConfigError("This command needs an 'unlearn' section.")
        return self.unlearn.target_client

    def backdoor_spec(self) -> Optional[tuple[int, BackdoorConfig]]:
        return self.backdoor.to_backdoor() if self.backdoor else None

    def unlearn_config(self, mode: Optional[str] = None) -> UnlearnConfig:
        if self.unlearn is None:
            raise ConfigError("This command needs an 'unlearn' section.")
        base = self.unlearn
        return UnlearnConfig(
            target_client=base.target_client,
            alpha=base.alpha,
            mode=UnlearnMode(mode) if mode else base.mode,
        )


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(config: dict, overrides: Sequence[str]) -> dict:
    """Return a copy of `config` with dotted `key=value` overrides applied.

    Values are parsed as JSON when possible ("3", "0.5", "[8]", "null"),
    otherwise kept as strings.
    """
    out = copy.deepcopy(config)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"Override '{item}' is not of the form key=value.")
        parts = key.split(".")
        if parts[0] not in SECTIONS:
            raise ConfigError(f"Override '{item}' targets unknown section '{parts[0]}'.")
        node = out
        for part in parts[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(f"Override '{item}': '{part}' is not a section.")
            node = child
        node[parts[-1]] = _parse_value(value)
        logging.info(f"Config override {key} = {node[parts[-1]]!r}")
    return out


# ---------------------------------------------------------------------
# Dataset construction
# ---------------------------------------------------------------------


def _require(path: Optional[str]) -> str:
    if path is None or not Path(path).exists():
        raise FileNotFoundError(f"Dataset file not found: {path}")
    return path


def load_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    """(train, test) for the configured dataset."""
    ds = cfg.dataset
    seed = cfg.fed.seed
    if ds.kind == "blobs":
        full = make_blobs(ds.num_classes, ds.samples_per_class, ds.input_dim, ds.spread, seed)
        return train_test_split(full, ds.test_fraction, seed)

    train = load_idx(_require(ds.train_images), _require(ds.train_labels))
    if ds.limit is not None:
        train = train.subset(range(min(ds.limit, len(train))))
    if ds.test_images is not None:
        test = load_idx(_require(ds.test_images), _require(ds.test_labels))
        return train, test
    return train_test_split(train, ds.test_fraction, seed)


def build_experiment(cfg: ExperimentConfig) -> tuple[FederatedDataset, MlpSpec]:
    """Clean federation (backdoor test set included, shards not yet poisoned) and model spec."""
    train, test = load_datasets(cfg)
    num_classes = int(max(train.labels.max(), test.labels.max())) + 1
    if cfg.dataset.kind == "blobs":
        num_classes = max(num_classes, cfg.dataset.num_classes)
    bd = cfg.backdoor_spec()
    fed = make_federation(
        train,
        test,
        cfg.fed.num_clients,
        cfg.non_iid_ratio,
        cfg.fed.seed,
        backdoor=bd[1] if bd else None,
    )
    spec = MlpSpec(train.input_dim, tuple(cfg.hidden_dims), num_classes)
    return fed, spec
