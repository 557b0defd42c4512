import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Any, Literal

import numpy as np

from fedul_sim._errors import (
    ConfigError,
    DatasetError,
    DimensionError,
    StoreFormatError,
    StoreTruncatedError,
    StoreVersionError,
)
from fedul_sim.params import ParamVector

if TYPE_CHECKING:
    from fedul_sim.data import LabeledDataset

CHECKPOINT_MAGIC = b"FFCK"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of the feed-forward classifier every client trains."""

    input_dim: int
    """Length of a feature vector."""
    hidden_dims: tuple[int, ...] = ()
    """Widths of the ReLU hidden layers, input side first."""
    num_classes: int = 2
    """Number of output classes (softmax width)."""
    activation: Literal["relu"] = "relu"
    """Hidden activation; only ReLU is supported."""

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise ConfigError(f"All layer widths must be positive: {self}.")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}.")
        if self.activation != "relu":
            raise ConfigError(f"Unsupported activation '{self.activation}'.")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every linear layer."""
        widths = [self.input_dim, *self.hidden_dims, self.num_classes]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def num_params(self) -> int:
        return sum(i * o + o for i, o in self.layer_dims)

    def layout(self) -> list[dict[str, Any]]:
        """Flattened parameter layout: W_k as (out, in) row-major, then b_k."""
        entries = []
        offset = 0
        for k, (fan_in, fan_out) in enumerate(self.layer_dims):
            entries.append({"name": f"W{k}", "shape": [fan_out, fan_in], "offset": offset})
            offset += fan_in * fan_out
            entries.append({"name": f"b{k}", "shape": [fan_out], "offset": offset})
            offset += fan_out
        return entries


@dataclass(frozen=True)
class MlpModel:
    spec: MlpSpec
    params: ParamVector

    _layers: list[tuple[np.ndarray, np.ndarray]] = field(
        init=False, repr=False, compare=False
    )

    def __post_init__(self) -> None:
        if self.params.dim != self.spec.num_params:
            raise DimensionError(
                f"Model spec needs {self.spec.num_params} parameters, "
                f"got {self.params.dim}."
            )
        object.__setattr__(self, "_layers", unflatten(self.spec, self.params.values))

    @property
    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (W, b) views per linear layer."""
        return self._layers

    def with_params(self, params: ParamVector) -> "MlpModel":
        return MlpModel(self.spec, params)


def unflatten(spec: MlpSpec, flat: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    offset = 0
    for fan_in, fan_out in spec.layer_dims:
        w = flat[offset : offset + fan_in * fan_out].reshape(fan_out, fan_in)
        offset += fan_in * fan_out
        b = flat[offset : offset + fan_out]
        offset += fan_out
        layers.append((w, b))
    return layers


def init_model(spec: MlpSpec, seed: int) -> MlpModel:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero."""
    rng = np.random.default_rng(seed)
    parts = []
    for fan_in, fan_out in spec.layer_dims:
        bound = 1.0 / np.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=fan_in * fan_out))
        parts.append(np.zeros(fan_out))
    return MlpModel(spec, ParamVector(np.concatenate(parts)))


def _as_batch(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != model.spec.input_dim:
        raise DimensionError(
            f"Expected features of length {model.spec.input_dim}, got {x.shape[1]}."
        )
    return x


def logits(model: MlpModel, x: np.ndarray) -> np.ndarray:
    a = _as_batch(model, x)
    *hidden, (w_out, b_out) = model.layers
    for w, b in hidden:
        a = np.maximum(a @ w.T + b, 0.0)
    return a @ w_out.T + b_out


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Class probabilities; a 1-D input yields a 1-D output."""
    probs = softmax(logits(model, x))
    return probs[0] if np.ndim(x) == 1 else probs


def loss_and_grad(
    model: MlpModel, batch: tuple[np.ndarray, np.ndarray]
) -> tuple[float, ParamVector]:
    """Mean cross-entropy of the batch and its exact gradient w.r.t. the parameters."""
    features, labels = batch
    x = _as_batch(model, features)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n = x.shape[0]
    if n == 0 or y.shape[0] != n:
        raise DimensionError(f"Batch has {n} feature rows and {y.shape[0]} labels.")
    if y.min() < 0 or y.max() >= model.spec.num_classes:
        raise DatasetError(
            f"Labels must lie in [0, {model.spec.num_classes}), "
            f"got range [{y.min()}, {y.max()}]."
        )

    activations = [x]
    pre = []
    for w, b in model.layers[:-1]:
        z = activations[-1] @ w.T + b
        pre.append(z)
        activations.append(np.maximum(z, 0.0))
    w_out, b_out = model.layers[-1]
    z_out = activations[-1] @ w_out.T + b_out

    shifted = z_out - z_out.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), y].mean())

    delta = np.exp(log_probs)
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grads: list[np.ndarray] = []
    for k in range(len(model.layers) - 1, -1, -1):
        w, _ = model.layers[k]
        grads.append(delta.sum(axis=0))
        grads.append((delta.T @ activations[k]).reshape(-1))
        if k > 0:
            delta = (delta @ w) * (pre[k - 1] > 0)
    grads.reverse()
    return loss, ParamVector(np.concatenate(grads))


def predict(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Argmax class per row; ties go to the lowest class index."""
    return np.argmax(logits(model, x), axis=1)


def predict_accuracy(model: MlpModel, dataset: "LabeledDataset") -> float:
    if len(dataset) == 0:
        raise DatasetError("Cannot compute accuracy on an empty dataset.")
    return float(np.mean(predict(model, dataset.features) == dataset.labels))


# ---------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------


def save_checkpoint(model: MlpModel, path: str | Path) -> None:
    """Binary checkpoint (little-endian) plus a sibling JSON layout description."""
    path = Path(path)
    spec = model.spec
    header = struct.pack(
        f"<4sIIII{len(spec.hidden_dims)}II",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        spec.input_dim,
        spec.num_classes,
        len(spec.hidden_dims),
        *spec.hidden_dims,
        spec.num_params,
    )
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(header + model.params.values.astype("<f8").tobytes())
    path.with_suffix(".json").write_text(
        json.dumps(
            {
                "input_dim": spec.input_dim,
                "hidden_dims": list(spec.hidden_dims),
                "num_classes": spec.num_classes,
                "activation": spec.activation,
                "num_params": spec.num_params,
                "layout": spec.layout(),
            },
            indent=2,
        ),
        encoding="utf-8",
    )


def load_checkpoint(path: str | Path) -> MlpModel:
    buf = Path(path).read_bytes()
    fixed = struct.Struct("<4sIIII")
    if len(buf) < fixed.size:
        raise StoreTruncatedError(f"Checkpoint {path} is truncated.")
    magic, version, input_dim, num_classes, num_hidden = fixed.unpack_from(buf, 0)
    if magic != CHECKPOINT_MAGIC:
        raise StoreFormatError(f"Bad checkpoint magic {magic!r} in {path}.")
    if version != CHECKPOINT_VERSION:
        raise StoreVersionError(f"Unsupported checkpoint version {version} in {path}.")
    rest = struct.Struct(f"<{num_hidden}II")
    if len(buf) < fixed.size + rest.size:
        raise StoreTruncatedError(f"Checkpoint {path} is truncated.")
    *hidden, num_params = rest.unpack_from(buf, fixed.size)
    offset = fixed.size + rest.size
    if len(buf) != offset + 8 * num_params:
        raise StoreTruncatedError(
            f"Checkpoint {path} declares {num_params} parameters but holds "
            f"{(len(buf) - offset) // 8}."
        )
    spec = MlpSpec(input_dim, tuple(hidden), num_classes)
    params = np.frombuffer(buf, dtype="<f8", count=num_params, offset=offset)
    return MlpModel(spec, ParamVector(params.astype(np.float64)))
