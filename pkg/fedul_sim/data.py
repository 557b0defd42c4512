import logging
import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from fedul_sim._errors import (
    ConfigError,
    DatasetError,
    DimensionError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature matrix (samples x input_dim, values in [0, 1]) with integer labels."""

    features: np.ndarray
    labels: np.ndarray
    image_shape: Optional[tuple[int, int]] = None
    """(rows, cols) view of a feature vector, used to place backdoor triggers."""

    def __post_init__(self) -> None:
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim == 1:
            feats = feats[None, :] if feats.size else feats.reshape(0, 0)
        labs = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        if feats.shape[0] != labs.shape[0]:
            raise DimensionError(
                f"{feats.shape[0]} feature rows but {labs.shape[0]} labels."
            )
        if self.image_shape is not None:
            rows, cols = self.image_shape
            if feats.shape[0] and rows * cols != feats.shape[1]:
                raise DimensionError(
                    f"image_shape {self.image_shape} does not match input_dim "
                    f"{feats.shape[1]}."
                )
            object.__setattr__(self, "image_shape", (int(rows), int(cols)))
        feats.setflags(write=False)
        labs.setflags(write=False)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "labels", labs)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int] | np.ndarray) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.features[idx], self.labels[idx], self.image_shape)

    def class_counts(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.labels, minlength=num_classes)


@dataclass(frozen=True)
class FederatedDataset:
    """Per-client training data plus the main and backdoor test sets."""

    clients: tuple[LabeledDataset, ...]
    """Client datasets, indexed by client id 0..N-1."""
    test_main: LabeledDataset
    """Clean held-out test data."""
    test_backdoor: Optional[LabeledDataset] = None
    """Triggered test data relabeled to the attack target, if any."""
    backdoor_target: Optional[int] = None
    """Target label of the backdoor trigger."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "clients", tuple(self.clients))
        dims = {c.input_dim for c in self.clients if len(c)} | {self.test_main.input_dim}
        if len(dims) > 1:
            raise DimensionError(f"Clients and test set disagree on input_dim: {dims}.")

    @property
    def num_clients(self) -> int:
        return len(self.clients)


@dataclass(frozen=True)
class BackdoorConfig:
    """Pixel-pattern backdoor: stamp a trigger and relabel to the target class."""

    trigger_pixels: tuple[tuple[int, int], ...] = ((0, 0), (0, 1), (1, 0), (1, 1))
    """(row, col) coordinates of the trigger; default is a 2x2 top-left block."""
    trigger_value: float = 1.0
    """Value written to every trigger pixel."""
    target_label: int = 0
    """Label assigned to poisoned samples."""
    poison_fraction: float = 0.3
    """Fraction ξ of the client's clean data appended as poisoned copies."""

    def __post_init__(self) -> None:
        pixels = tuple((int(r), int(c)) for r, c in self.trigger_pixels)
        object.__setattr__(self, "trigger_pixels", pixels)
        if not pixels:
            raise ConfigError("Backdoor trigger needs at least one pixel.")
        if not 0.0 <= self.trigger_value <= 1.0:
            raise ConfigError(f"trigger_value must be in [0, 1], got {self.trigger_value}.")
        if not 0.0 < self.poison_fraction <= 1.0:
            raise ConfigError(
                f"poison_fraction must be in (0, 1], got {self.poison_fraction}."
            )
        if self.target_label < 0:
            raise ConfigError(f"target_label must be >= 0, got {self.target_label}.")

    def flat_indices(self, image_shape: Optional[tuple[int, int]], input_dim: int) -> list[int]:
        rows, cols = image_shape if image_shape is not None else (1, input_dim)
        out = []
        for r, c in self.trigger_pixels:
            if not (0 <= r < rows and 0 <= c < cols):
                raise ConfigError(
                    f"Trigger pixel ({r}, {c}) outside image bounds {rows}x{cols}."
                )
            out.append(r * cols + c)
        return out


def _stamp(ds: LabeledDataset, rows: np.ndarray, cfg: BackdoorConfig) -> np.ndarray:
    feats = ds.features[rows].copy()
    feats[:, cfg.flat_indices(ds.image_shape, ds.input_dim)] = cfg.trigger_value
    return feats


# ---------------------------------------------------------------------
# Ingestion
# ---------------------------------------------------------------------


def load_idx(images_path: str | Path, labels_path: str | Path) -> LabeledDataset:
    """Read an IDX image/label pair (big-endian headers); pixels scaled to [0, 1]."""
    img = Path(images_path).read_bytes()
    lab = Path(labels_path).read_bytes()

    if len(img) < 16:
        raise IdxTruncatedError(f"IDX image file {images_path} has no complete header.")
    magic, count, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != IDX_IMAGE_MAGIC:
        raise IdxMagicError(
            f"IDX image file {images_path} has magic {magic}, expected {IDX_IMAGE_MAGIC}."
        )
    if len(lab) < 8:
        raise IdxTruncatedError(f"IDX label file {labels_path} has no complete header.")
    lmagic, lcount = struct.unpack_from(">II", lab, 0)
    if lmagic != IDX_LABEL_MAGIC:
        raise IdxMagicError(
            f"IDX label file {labels_path} has magic {lmagic}, expected {IDX_LABEL_MAGIC}."
        )
    if count != lcount:
        raise IdxCountMismatchError(
            f"{images_path} holds {count} images but {labels_path} holds {lcount} labels."
        )
    pixels = count * rows * cols
    if len(img) - 16 < pixels:
        raise IdxTruncatedError(
            f"IDX image file {images_path} needs {pixels} pixel bytes, has {len(img) - 16}."
        )
    if len(lab) - 8 < count:
        raise IdxTruncatedError(
            f"IDX label file {labels_path} needs {count} label bytes, has {len(lab) - 8}."
        )

    images = np.frombuffer(img, dtype=np.uint8, count=pixels, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=count, offset=8)
    logging.info(f"Loaded {count} IDX samples ({rows}x{cols}) from {images_path}")
    return LabeledDataset(
        images.reshape(count, rows * cols).astype(np.float64) / 255.0,
        labels.astype(np.int64),
        image_shape=(rows, cols),
    )


def blank_mask(image_shape: tuple[int, int]) -> np.ndarray:
    """Flat mask of the blob canvas: the left half of every image row stays 0."""
    rows, cols = image_shape
    mask = np.zeros((rows, cols), dtype=bool)
    mask[:, : cols // 2] = True
    return mask.reshape(-1)


def _blob_centers(num_classes: int, image_shape: tuple[int, int]) -> np.ndarray:
    blank = blank_mask(image_shape)
    signal = np.flatnonzero(~blank)
    bits = max(1, math.ceil(math.log2(num_classes)))
    if signal.size < bits:
        raise ConfigError(
            f"input_dim {blank.size} leaves {signal.size} signal coordinate(s), "
            f"too few to separate {num_classes} blob classes."
        )
    k = np.arange(signal.size) % bits
    c = np.arange(num_classes)[:, None]
    centers = np.zeros((num_classes, blank.size))
    centers[:, signal] = 0.25 + 0.5 * ((c >> k[None, :]) & 1)
    return centers


def make_blobs(
    num_classes: int,
    samples_per_class: int,
    input_dim: int,
    spread: float,
    seed: int,
    image_shape: Optional[tuple[int, int]] = None,
) -> LabeledDataset:
    """Isotropic Gaussian blobs around hypercube vertices, clipped to [0, 1].

    Samples are laid out as small images. The left half of every row is
    blank canvas, exactly 0 for all classes, like the empty border of a
    digit scan; a trigger stamped there carries no class signal. On the
    other coordinates class c is centred at 0.25 + 0.5 * bit, the bits
    being c's binary digits cycled across them.
    """
    if num_classes < 2 or samples_per_class < 1 or input_dim < 1 or spread < 0:
        raise ConfigError(
            f"Invalid blob parameters: classes={num_classes}, "
            f"per_class={samples_per_class}, dim={input_dim}, spread={spread}."
        )
    if image_shape is None:
        image_shape = (2, input_dim // 2) if input_dim % 2 == 0 else (1, input_dim)
    if image_shape[0] * image_shape[1] != input_dim:
        raise ConfigError(f"Image shape {image_shape} does not hold {input_dim} features.")
    rng = np.random.default_rng(seed)
    centers = _blob_centers(num_classes, image_shape)
    labels = np.repeat(np.arange(num_classes), samples_per_class)
    noise = rng.normal(0.0, 1.0, size=(labels.shape[0], input_dim))
    noise[:, blank_mask(image_shape)] = 0.0
    feats = np.clip(centers[labels] + spread * noise, 0.0, 1.0)
    order = rng.permutation(labels.shape[0])
    return LabeledDataset(feats[order], labels[order], image_shape=image_shape)


def train_test_split(
    ds: LabeledDataset, test_fraction: float, seed: int
) -> tuple[LabeledDataset, LabeledDataset]:
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test_fraction must be in (0, 1), got {test_fraction}.")
    order = np.random.default_rng(seed).permutation(len(ds))
    n_test = max(1, int(round(test_fraction * len(ds))))
    return ds.subset(np.sort(order[n_test:])), ds.subset(np.sort(order[:n_test]))


# ---------------------------------------------------------------------
# Partitioning
# ---------------------------------------------------------------------


def _client_weights(
    num_clients: int,
    class_totals: np.ndarray,
    ratio: float,
    rng: np.random.Generator,
    concentration: float,
    sweeps: int = 4,
) -> np.ndarray:
    """Per-client class weights whose max/min equals `ratio` exactly.

    A client's share of class c is proportional to weight / (column sum of c),
    so levels are handed out to keep column sums proportional to the class
    totals; otherwise the realized count ratio drifts from the weight ratio.
    """
    num_classes = len(class_totals)
    if num_classes == 1 or ratio == 1.0:
        return np.ones((num_clients, num_classes))

    # Log-spaced levels 1..ratio, Dirichlet-perturbed, sorted, extremes pinned
    # back to 1 and `ratio`.
    levels = np.log(ratio) * np.arange(num_classes) / (num_classes - 1)
    noise = rng.dirichlet(np.full(num_classes, concentration), size=num_clients)
    logw = np.sort(levels[None, :] + np.log(noise * num_classes), axis=1)
    lo, hi = logw[:, :1], logw[:, -1:]
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    descending = np.exp((logw - lo) / span * np.log(ratio))[:, ::-1]

    totals = np.asarray(class_totals, dtype=np.float64)
    weights = np.zeros((num_clients, num_classes))
    order = rng.permutation(num_clients)
    for _ in range(sweeps):
        for i in order:
            weights[i] = 0.0
            load = weights.sum(axis=0) / totals
            weights[i, np.argsort(load, kind="stable")] = descending[i]
    return weights


def _apportion(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of `total` proportional to `weights` (largest remainder)."""
    quota = total * weights / weights.sum()
    counts = np.floor(quota).astype(np.int64)
    remainder = total - counts.sum()
    if remainder:
        order = np.argsort(-(quota - counts), kind="stable")
        counts[order[:remainder]] += 1
    return counts


def partition_dirichlet(
    ds: LabeledDataset,
    num_clients: int,
    non_iid_ratio: float,
    seed: int,
    concentration: float = 10.0,
) -> list[LabeledDataset]:
    """Split `ds` into disjoint client shards with a controlled class-imbalance ratio.

    Each client's most frequent class appears roughly `non_iid_ratio` times as
    often as its least frequent one; every sample goes to exactly one client.
    """
    if num_clients < 2:
        raise ConfigError(f"Need at least 2 clients, got {num_clients}.")
    if non_iid_ratio < 1.0:
        raise ConfigError(f"non_iid_ratio must be >= 1, got {non_iid_ratio}.")
    if num_clients > len(ds):
        raise DatasetError(
            f"Cannot split {len(ds)} samples across {num_clients} clients."
        )

    rng = np.random.default_rng(seed)
    classes, totals = np.unique(ds.labels, return_counts=True)
    weights = _client_weights(num_clients, totals, non_iid_ratio, rng, concentration)

    shards: list[list[np.ndarray]] = [[] for _ in range(num_clients)]
    realized = np.zeros((num_clients, len(classes)), dtype=np.int64)
    for col, c in enumerate(classes):
        idx = np.flatnonzero(ds.labels == c)
        rng.shuffle(idx)
        counts = _apportion(idx.shape[0], weights[:, col])
        if counts.min() == 0:
            raise DatasetError(
                f"Class {c} has {idx.shape[0]} samples, too few to reach all "
                f"{num_clients} clients."
            )
        realized[:, col] = counts
        bounds = np.concatenate([[0], np.cumsum(counts)])
        for i in range(num_clients):
            shards[i].append(idx[bounds[i] : bounds[i + 1]])

    ratios = realized.max(axis=1) / realized.min(axis=1)
    if np.any(np.abs(ratios / non_iid_ratio - 1.0) > 0.2):
        logging.warning(
            f"Realized class ratios {ratios.min():.2f}..{ratios.max():.2f} deviate more "
            f"than 20% from non_iid_ratio={non_iid_ratio}."
        )
    return [ds.subset(np.sort(np.concatenate(parts))) for parts in shards]


# ---------------------------------------------------------------------
# Backdoor
# ---------------------------------------------------------------------


def poison_client(ds: LabeledDataset, cfg: BackdoorConfig, seed: int) -> LabeledDataset:
    """Append floor(ξ·|ds|) triggered copies relabeled to the target class."""
    k = int(math.floor(cfg.poison_fraction * len(ds)))
    if k == 0:
        return ds
    rng = np.random.default_rng(seed)
    candidates = np.flatnonzero(ds.labels != cfg.target_label)
    if candidates.shape[0] == 0:
        candidates = np.arange(len(ds))
    rows = rng.choice(candidates, size=k, replace=k > candidates.shape[0])
    poisoned = _stamp(ds, np.sort(rows), cfg)
    return LabeledDataset(
        np.concatenate([ds.features, poisoned]),
        np.concatenate([ds.labels, np.full(k, cfg.target_label)]),
        ds.image_shape,
    )


def make_backdoor_testset(ds: LabeledDataset, cfg: BackdoorConfig) -> LabeledDataset:
    """Trigger every sample not already of the target label and relabel it."""
    if len(ds) == 0:
        raise DatasetError("Cannot build a backdoor test set from an empty dataset.")
    rows = np.flatnonzero(ds.labels != cfg.target_label)
    if rows.shape[0] == 0:
        raise DatasetError(
            f"Every sample already has target label {cfg.target_label}; "
            "backdoor test set would be empty."
        )
    return LabeledDataset(
        _stamp(ds, rows, cfg), np.full(rows.shape[0], cfg.target_label), ds.image_shape
    )


def make_federation(
    train: LabeledDataset,
    test: LabeledDataset,
    num_clients: int,
    non_iid_ratio: float,
    seed: int,
    backdoor: Optional[BackdoorConfig] = None,
) -> FederatedDataset:
    """Partition `train` across clients; builds the backdoor test set if configured."""
    clients = partition_dirichlet(train, num_clients, non_iid_ratio, seed)
    return FederatedDataset(
        clients=tuple(clients),
        test_main=test,
        test_backdoor=make_backdoor_testset(test, backdoor) if backdoor else None,
        backdoor_target=backdoor.target_label if backdoor else None,
    )


def apply_backdoor(
    fed: FederatedDataset, client_id: int, cfg: BackdoorConfig, seed: int
) -> FederatedDataset:
    """Federation with `client_id`'s shard poisoned; other shards are shared."""
    if not 0 <= client_id < fed.num_clients:
        raise ConfigError(
            f"Malicious client id {client_id} out of range [0, {fed.num_clients})."
        )
    clients = list(fed.clients)
    clients[client_id] = poison_client(clients[client_id], cfg, seed)
    logging.info(
        f"Poisoned client {client_id}: {len(fed.clients[client_id])} -> "
        f"{len(clients[client_id])} samples"
    )
    test_backdoor = fed.test_backdoor
    if test_backdoor is None:
        test_backdoor = make_backdoor_testset(fed.test_main, cfg)
    return replace(
        fed,
        clients=tuple(clients),
        test_backdoor=test_backdoor,
        backdoor_target=cfg.target_label,
    )
