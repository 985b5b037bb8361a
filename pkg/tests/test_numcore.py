import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fclsim.numcore import (
    DegenerateInputError,
    GradientCheckError,
    LayoutError,
    ParamVector,
    RngStream,
    axpy_params,
    cosine_sim,
    finite_diff_check,
    l2_norm,
    scale_params,
    sub_params,
)

LAYOUT = (("a", (2,)),)


def pv(*vals, layout=LAYOUT):
    return ParamVector(np.array(vals, dtype=float), layout)


@pytest.mark.parametrize("u,v,expected", [((1, 0), (1, 0), 1.0), ((1, 0), (0, 1), 0.0), ((1, 0), (-1, 0), -1.0)])
def test_cosine_examples(u, v, expected):
    assert cosine_sim(u, v) == expected


def test_cosine_zero_norm_is_an_error():
    with pytest.raises(DegenerateInputError):
        cosine_sim((0, 0), (1, 0))


def test_cosine_length_mismatch():
    with pytest.raises(ValueError):
        cosine_sim((1, 0), (1, 0, 0))


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20).filter(lambda v: np.linalg.norm(v) > 1e-3))
def test_cosine_self_is_one(u):
    assert abs(cosine_sim(u, u) - 1.0) <= 1e-12


@given(st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2), st.lists(st.floats(-1e6, 1e6), min_size=2, max_size=2))
def test_cosine_is_clamped(u, v):
    if np.linalg.norm(u) > 0 and np.linalg.norm(v) > 0:
        assert -1.0 <= cosine_sim(u, v) <= 1.0


def test_axpy_examples():
    assert axpy_params(0.0, pv(7, 9), pv(1, 2)) == pv(1, 2)
    assert axpy_params(1.0, pv(1, 1), pv(1, 2)) == pv(2, 3)
    x = pv(3.5, -2)
    assert axpy_params(-1.0, x, x) == pv(0, 0)


def test_axpy_layout_mismatch():
    other = ParamVector(np.zeros(2), (("b", (2,)),))
    with pytest.raises(LayoutError):
        axpy_params(1.0, pv(1, 1), other)


@settings(max_examples=50)
@given(st.integers(0, 2 ** 32 - 1))
def test_axpy_associative(seed):
    gen = np.random.default_rng(seed)
    layout = (("w", (4, 3)), ("b", (3,)))
    x, y, z = (ParamVector(gen.normal(size=15), layout) for _ in range(3))
    left = axpy_params(1.0, axpy_params(1.0, x, y), z)
    right = axpy_params(1.0, x, axpy_params(1.0, y, z))
    assert np.max(np.abs(left.values - right.values)) <= 1e-12


@pytest.mark.parametrize("vals,expected", [((3, 4), 5.0), ((0, 0), 0.0), ((1, 1, 1, 1), 2.0)])
def test_l2_norm(vals, expected):
    assert l2_norm(ParamVector(np.array(vals, float), (("x", (len(vals),)),))) == expected


def test_param_vector_layout_and_immutability():
    layout = (("w", (2, 3)), ("b", (3,)))
    p = ParamVector(np.arange(9.0), layout)
    assert p.tensor("w").shape == (2, 3)
    assert np.array_equal(p.tensor("b"), [6, 7, 8])
    with pytest.raises(ValueError):
        p.values[0] = 1.0
    with pytest.raises(LayoutError):
        ParamVector(np.arange(8.0), layout)
    assert scale_params(2.0, p).values[1] == 2.0
    assert sub_params(p, p) == ParamVector.zeros(layout)


def test_finite_diff_quadratic_is_exact():
    p = ParamVector(np.random.default_rng(0).normal(size=30), (("x", (30,)),))
    err = finite_diff_check(lambda q: float(q.values @ q.values), p, scale_params(2.0, p), rng=RngStream(1))
    assert err < 1e-6


def test_finite_diff_detects_wrong_gradient():
    p = ParamVector(np.random.default_rng(0).normal(size=30) + 3.0, (("x", (30,)),))
    err = finite_diff_check(lambda q: float(q.values @ q.values), p, scale_params(4.0, p), rng=RngStream(1))
    assert abs(err - 1.0) < 1e-6


def test_finite_diff_nonfinite_loss_names_coordinate():
    p = ParamVector(np.zeros(3), (("x", (3,)),))
    with pytest.raises(GradientCheckError, match="coordinate"):
        finite_diff_check(lambda q: float("nan"), p, p, n_probes=1, rng=RngStream(0))


def test_finite_diff_preconditions():
    p = ParamVector(np.zeros(3), (("x", (3,)),))
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, p, p, eps=0.0)
    with pytest.raises(ValueError):
        finite_diff_check(lambda q: 0.0, p, p, n_probes=0)


def test_rng_stream_determinism_and_independence():
    a = RngStream(42, 7).generator().random(5)
    b = RngStream(42, 7).generator().random(5)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, RngStream(42, 8).generator().random(5))
    assert not np.array_equal(a, RngStream(43, 7).generator().random(5))
    c1 = RngStream(42).child(2, 5, 3)
    assert c1 == RngStream(42).child(2, 5, 3)
    assert c1 != RngStream(42).child(2, 3, 5)


def test_rng_stream_identical_across_threads():
    out = {}

    def draw(i):
        out[i] = RngStream(9, 3).child(1, 2).generator().standard_normal(1000)

    threads = [threading.Thread(target=draw, args=(i,)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert all(np.array_equal(out[0], out[i]) for i in range(1, 4))
