import numpy as np
import pytest

from fedul_sim._errors import (
    ConfigError,
    DatasetError,
    DimensionError,
    StoreFormatError,
    StoreTruncatedError,
)
from fedul_sim.data import LabeledDataset
from fedul_sim.model import (
    MlpModel,
    MlpSpec,
    forward,
    init_model,
    load_checkpoint,
    loss_and_grad,
    predict_accuracy,
    save_checkpoint,
)
from fedul_sim.params import ParamVector


def test_num_params_and_layout():
    spec = MlpSpec(input_dim=3, hidden_dims=(4,), num_classes=2)
    assert spec.num_params == 3 * 4 + 4 + 4 * 2 + 2
    names = [e["name"] for e in spec.layout()]
    assert names == ["W0", "b0", "W1", "b1"]
    assert spec.layout()[2] == {"name": "W1", "shape": [2, 4], "offset": 16}


@pytest.mark.parametrize(
    "kwargs",
    [
        {"input_dim": 0},
        {"input_dim": 2, "hidden_dims": (0,)},
        {"input_dim": 2, "num_classes": 1},
        {"input_dim": 2, "activation": "tanh"},
    ],
)
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        MlpSpec(**kwargs)


def test_init_model_is_seeded():
    spec = MlpSpec(4, (3,), 2)
    assert init_model(spec, 7) == init_model(spec, 7)
    assert init_model(spec, 7) != init_model(spec, 8)


def test_init_model_biases_zero():
    spec = MlpSpec(4, (3,), 2)
    for w, b in init_model(spec, 0).layers:
        assert not b.any()
        assert np.abs(w).max() <= 1.0 / np.sqrt(w.shape[1])


def test_wrong_param_count():
    with pytest.raises(DimensionError):
        MlpModel(MlpSpec(2), ParamVector.zeros(5))


def test_forward_zero_params_is_uniform():
    spec = MlpSpec(3, (), 4)
    model = MlpModel(spec, ParamVector.zeros(spec.num_params))
    np.testing.assert_allclose(forward(model, np.array([0.3, 0.1, 0.9])), [0.25] * 4)


def test_forward_sums_to_one_for_large_logits():
    spec = MlpSpec(1, (), 2)
    model = MlpModel(spec, ParamVector.of([1000.0, -1000.0, 0.0, 0.0]))
    p = forward(model, np.array([[1.0], [2.0]]))
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert np.all(np.isfinite(p))


def test_forward_dimension_mismatch():
    model = init_model(MlpSpec(3, (), 2), 0)
    with pytest.raises(DimensionError):
        forward(model, np.zeros(4))


def test_loss_of_uniform_model_is_log_classes():
    spec = MlpSpec(2, (), 3)
    model = MlpModel(spec, ParamVector.zeros(spec.num_params))
    loss, _ = loss_and_grad(model, (np.ones((5, 2)), np.array([0, 1, 2, 0, 1])))
    assert loss == pytest.approx(np.log(3))


def _finite_difference(model, batch, h=1e-5):
    base = model.params.values
    grad = np.empty_like(base)
    for i in range(base.shape[0]):
        up, down = base.copy(), base.copy()
        up[i] += h
        down[i] -= h
        lu, _ = loss_and_grad(model.with_params(ParamVector(up)), batch)
        ld, _ = loss_and_grad(model.with_params(ParamVector(down)), batch)
        grad[i] = (lu - ld) / (2 * h)
    return grad


def _min_preactivation(model, x) -> float:
    """Smallest |z| over the hidden units; ReLU is only smooth away from z = 0."""
    a, smallest = x, np.inf
    for w, b in model.layers[:-1]:
        z = a @ w.T + b
        smallest = min(smallest, float(np.abs(z).min()))
        a = np.maximum(z, 0.0)
    return smallest


def test_gradient_matches_finite_differences(rng):
    for trial in range(20):
        spec = MlpSpec(
            input_dim=int(rng.integers(2, 5)),
            hidden_dims=tuple(int(h) for h in rng.integers(2, 5, size=trial % 3)),
            num_classes=int(rng.integers(2, 4)),
        )
        n = int(rng.integers(1, 6))
        batch = (rng.uniform(0, 1, size=(n, spec.input_dim)), rng.integers(0, spec.num_classes, n))
        # biases included, so no unit sits exactly on the kink
        model = MlpModel(spec, ParamVector(rng.normal(0, 0.5, size=spec.num_params)))
        while _min_preactivation(model, batch[0]) < 1e-3:
            model = MlpModel(spec, ParamVector(rng.normal(0, 0.5, size=spec.num_params)))
        _, grad = loss_and_grad(model, batch)
        numeric = _finite_difference(model, batch)
        rel = np.abs(numeric - grad.values) / np.maximum(
            np.abs(numeric) + np.abs(grad.values), 1e-5
        )
        assert rel.max() < 1e-4, (trial, int(rel.argmax()))


def test_duplicated_batch_has_same_loss_and_gradient(rng):
    spec = MlpSpec(4, (5,), 3)
    model = MlpModel(spec, ParamVector(rng.normal(0, 0.5, size=spec.num_params)))
    x, y = rng.uniform(0, 1, size=(6, 4)), rng.integers(0, 3, 6)
    loss, grad = loss_and_grad(model, (x, y))
    loss2, grad2 = loss_and_grad(model, (np.vstack([x, x]), np.concatenate([y, y])))
    assert loss2 == pytest.approx(loss, rel=1e-12)
    np.testing.assert_allclose(grad2.values, grad.values, rtol=1e-10, atol=1e-14)


def test_labels_out_of_range():
    model = init_model(MlpSpec(2), 0)
    with pytest.raises(DatasetError):
        loss_and_grad(model, (np.zeros((1, 2)), np.array([2])))


def test_predict_accuracy_bounds():
    spec = MlpSpec(1, (), 2)
    # logit_0 = x, logit_1 = -x: positive features predict class 0
    model = MlpModel(spec, ParamVector.of([1.0, -1.0, 0.0, 0.0]))
    ds = LabeledDataset(np.array([[1.0], [2.0]]), np.array([0, 0]))
    assert predict_accuracy(model, ds) == 1.0
    ds = LabeledDataset(np.array([[1.0], [2.0]]), np.array([1, 1]))
    assert predict_accuracy(model, ds) == 0.0


def test_predict_accuracy_empty():
    model = init_model(MlpSpec(2), 0)
    with pytest.raises(DatasetError):
        predict_accuracy(model, LabeledDataset(np.zeros((0, 2)), np.zeros(0)))


def test_checkpoint_round_trip(tmp_path):
    model = init_model(MlpSpec(5, (4, 3), 3), 2)
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.spec == model.spec
    assert loaded.params.values.tobytes() == model.params.values.tobytes()
    assert (tmp_path / "m.json").exists()


def test_checkpoint_errors(tmp_path):
    model = init_model(MlpSpec(2), 0)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    buf = path.read_bytes()
    path.write_bytes(buf[:-8])
    with pytest.raises(StoreTruncatedError):
        load_checkpoint(path)
    path.write_bytes(b"NOPE" + buf[4:])
    with pytest.raises(StoreFormatError):
        load_checkpoint(path)
