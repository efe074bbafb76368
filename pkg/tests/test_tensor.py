import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gemfuse.tensor import (
    DimensionError,
    DomainError,
    Rng,
    StateError,
    count_macs,
    matmul,
    rng_normal,
    softmax_lastdim,
)

from oracles import loop_matmul


def test_matmul_identity():
    a = np.array([[3.0, 4.0], [5.0, 6.0]])
    assert np.array_equal(matmul(np.eye(2), a), a)
    assert np.array_equal(matmul(a, np.eye(2)), a)


def test_matmul_zero_annihilator():
    out = matmul(np.array([[1.0, 2.0]]), np.array([[0.0], [0.0]]))
    assert np.array_equal(out, np.array([[0.0]]))


def test_matmul_hand_enumeration():
    a = [[1.0, 2.0], [3.0, 4.0]]
    b = [[5.0, 6.0], [7.0, 8.0]]
    expected = loop_matmul(a, b)
    assert expected == [[19.0, 22.0], [43.0, 50.0]]
    assert np.allclose(matmul(np.array(a), np.array(b)), expected, rtol=0, atol=0)


def test_matmul_shape_error():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 2)))


def test_matmul_nonfinite_error():
    bad = np.array([[np.nan, 1.0]])
    with pytest.raises(DomainError):
        matmul(bad, np.ones((2, 1)))


def test_matmul_counts_macs():
    with count_macs() as c:
        matmul(np.ones((3, 4)), np.ones((4, 5)))
    assert c.total == 3 * 4 * 5


def test_count_macs_refuses_nesting():
    with count_macs():
        with pytest.raises(StateError):
            with count_macs():
                pass


def test_softmax_symmetry():
    assert np.array_equal(softmax_lastdim(np.array([0.0, 0.0])), [0.5, 0.5])


def test_softmax_single_entry_is_one():
    # a single-entry softmax is forced to exactly one
    for x in (-123.0, 0.0, 7.5):
        assert softmax_lastdim(np.array([x]))[0] == 1.0


def test_softmax_closed_form():
    out = softmax_lastdim(np.array([math.log(1.0), math.log(3.0)]))
    assert np.allclose(out, [0.25, 0.75], atol=1e-15)


def test_softmax_empty_lastdim_error():
    with pytest.raises(DimensionError):
        softmax_lastdim(np.empty((2, 0)))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (4, 7), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    out = softmax_lastdim(x)
    assert np.all(out >= 0)
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (8,), elements=st.floats(-30, 30)),
       st.floats(-40, 40))
def test_softmax_shift_invariance(x, c):
    assert np.max(np.abs(softmax_lastdim(x) - softmax_lastdim(x + c))) < 1e-12


def test_rng_zero_stddev_is_constant():
    out = rng_normal(Rng(7), [4], mean=0.0, stddev=0.0)
    assert np.array_equal(out, np.zeros(4))
    out = rng_normal(Rng(7), [3], mean=2.5, stddev=0.0)
    assert np.array_equal(out, np.full(3, 2.5))


def test_rng_determinism():
    a = rng_normal(Rng(7), [16], 0.0, 1.0)
    b = rng_normal(Rng(7), [16], 0.0, 1.0)
    assert np.array_equal(a, b)


def test_rng_seeds_differ():
    a = rng_normal(Rng(7), [16], 0.0, 1.0)
    b = rng_normal(Rng(8), [16], 0.0, 1.0)
    assert np.any(a != b)


def test_rng_negative_stddev_error():
    with pytest.raises(DomainError):
        rng_normal(Rng(1), [2], 0.0, -1.0)


def test_rng_long_streams_bit_identical():
    a = rng_normal(Rng(123), [1_000_000], 0.0, 1.0)
    b = rng_normal(Rng(123), [1_000_000], 0.0, 1.0)
    assert a.tobytes() == b.tobytes()
