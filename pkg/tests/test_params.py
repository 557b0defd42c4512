import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fedul_sim._errors import DimensionError
from fedul_sim.params import (
    ParamVector,
    quantize_f32,
    vec_add,
    vec_norm,
    vec_scale,
    vec_sub,
    vec_sum,
)

finite = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)


def test_vec_add_examples():
    assert vec_add(ParamVector.of([1, 2]), ParamVector.of([0, 0])) == ParamVector.of([1, 2])
    assert vec_add(ParamVector.of([1, 2]), ParamVector.of([-1, -2])) == ParamVector.of([0, 0])
    assert vec_add(ParamVector.of([0.5, 0.25]), ParamVector.of([0.5, 0.75])) == ParamVector.of(
        [1, 1]
    )


def test_vec_add_dimension_mismatch():
    with pytest.raises(DimensionError):
        vec_add(ParamVector.of([1, 2]), ParamVector.of([1, 2, 3]))


def test_vec_scale_examples():
    v = ParamVector.of([3, 4])
    assert vec_scale(v, 0) == ParamVector.of([0, 0])
    assert vec_scale(v, 1) == v
    assert vec_scale(v, 0.5) == ParamVector.of([1.5, 2])


@pytest.mark.parametrize("c", [float("inf"), float("nan")])
def test_vec_scale_rejects_non_finite(c):
    with pytest.raises(FloatingPointError):
        vec_scale(ParamVector.of([1.0]), c)


def test_vec_norm_examples():
    assert vec_norm(ParamVector.of([0, 0, 0])) == 0
    assert vec_norm(ParamVector.of([3, 4])) == 5
    assert vec_norm(ParamVector.of([1])) == 1


def test_non_finite_entries_rejected():
    with pytest.raises(FloatingPointError):
        ParamVector.of([1.0, float("nan")])


def test_overflow_is_caught():
    with pytest.raises(FloatingPointError):
        vec_scale(ParamVector.of([1e308]), 10.0)


def test_values_are_read_only():
    v = ParamVector.of([1.0, 2.0])
    with pytest.raises(ValueError):
        v.values[0] = 5.0


def test_vec_sum_empty_is_zero():
    assert vec_sum([], 3) == ParamVector.zeros(3)


def test_quantize_f32_is_idempotent():
    v = ParamVector.of([0.1, 1 / 3, -2.5])
    q = quantize_f32(v)
    assert quantize_f32(q) == q
    np.testing.assert_allclose(q.values, v.values, rtol=1e-7)


@given(st.lists(finite, min_size=1, max_size=20), st.data())
def test_add_then_sub_recovers(xs, data):
    ys = data.draw(st.lists(finite, min_size=len(xs), max_size=len(xs)))
    a, b = ParamVector.of(xs), ParamVector.of(ys)
    np.testing.assert_allclose(vec_sub(vec_add(a, b), b).values, a.values, atol=1e-6)


@given(st.lists(finite, min_size=1, max_size=20), finite)
def test_norm_is_homogeneous(xs, c):
    a = ParamVector.of(xs)
    assert vec_norm(vec_scale(a, c)) == pytest.approx(abs(c) * vec_norm(a), rel=1e-9, abs=1e-6)
