import importlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ffheflow import pseries
from ffheflow.errors import InvalidGermError
from ffheflow.pseries import (cauchy_term, cauchy_term_truncated, evaluate, evaluate_columns, magnitude_coeff,
                              magnitude_series, reciprocal_coeff, reciprocal_series)


def _kernel_modules():
    mods = [pytest.param(importlib.import_module("ffheflow._pykernels"), id="python")]
    try:
        mods.append(pytest.param(importlib.import_module("ffheflow._ckernels"), id="cython"))
    except ImportError:  # pragma: no cover
        mods.append(pytest.param(None, id="cython", marks=pytest.mark.skip(reason="extension not built")))
    return mods


KERNELS = _kernel_modules()

_c = st.complex_numbers(max_magnitude=10, allow_nan=False, allow_infinity=False)
series = st.lists(_c, min_size=1, max_size=12).map(lambda v: np.array(v, dtype=complex))


def test_backend_reported():
    assert pseries.BACKEND in ("cython", "python")


def test_cauchy_example():
    assert cauchy_term([1, 2], [1, 3], 1) == 5
    assert cauchy_term([1, 2, 0], [1, 3, 0], 2) == 6
    assert cauchy_term([1j, 0], [1, 0], 0, conjugate_a=True) == -1j


def test_cauchy_needs_enough_terms():
    with pytest.raises(IndexError):
        cauchy_term([1, 2], [1, 2], 3)


@settings(max_examples=80, deadline=None)
@given(series, series)
def test_cauchy_matches_polynomial_product(a, b):
    full = np.convolve(a, b)
    for n in range(min(len(a), len(b))):
        assert cauchy_term(a, b, n) == pytest.approx(full[n], abs=1e-9)
        assert cauchy_term(a, b, n, conjugate_a=True) == pytest.approx(np.convolve(np.conj(a), b)[n], abs=1e-9)


@settings(max_examples=80, deadline=None)
@given(series, series)
def test_truncated_drops_end_terms(a, b):
    n = min(len(a), len(b)) - 1
    if n < 1:
        return
    expected = cauchy_term(a, b, n) - a[0] * b[n] - a[n] * b[0]
    assert cauchy_term_truncated(a, b, n) == pytest.approx(expected, abs=1e-9)


@pytest.mark.parametrize("mod", KERNELS)
def test_kernels_agree_with_reference(mod):
    rng = np.random.default_rng(3)
    A = rng.normal(size=(9, 5)) + 1j * rng.normal(size=(9, 5))
    B = rng.normal(size=(9, 5)) + 1j * rng.normal(size=(9, 5))
    for n in range(9):
        for conj in (False, True):
            Aa = np.conj(A) if conj else A
            ref = sum(Aa[d] * B[n - d] for d in range(1, n)) if n > 1 else np.zeros(5)
            np.testing.assert_allclose(mod.conv_columns(A, B, n, conj), ref, atol=1e-12)
            ref1 = sum(Aa[d, 0] * B[n - d, 0] for d in range(0, n + 1))
            assert mod.conv_sum(A[:, 0].copy(), B[:, 0].copy(), 0, n, n, conj) == pytest.approx(ref1, abs=1e-12)


@pytest.mark.parametrize("mod", KERNELS)
def test_kernel_recurrences_agree(mod):
    py = importlib.import_module("ffheflow._pykernels")
    rng = np.random.default_rng(5)
    I = rng.normal(size=8) + 1j * rng.normal(size=8)
    I[0] = 1.3 - 0.4j
    F = reciprocal_series(I)
    M = magnitude_series(I)
    for n in range(1, 8):
        assert mod.reciprocal_next(F, I, n) == pytest.approx(py.reciprocal_next(F, I, n), abs=1e-12)
        assert mod.magnitude_next(M, I, n) == pytest.approx(py.magnitude_next(M, I, n), abs=1e-12)


def test_reciprocal_geometric():
    F = reciprocal_series([1, -0.5, 0, 0, 0])
    np.testing.assert_allclose(F, [1, 0.5, 0.25, 0.125, 0.0625])


@settings(max_examples=80, deadline=None)
@given(series)
def test_reciprocal_identity(I):
    if abs(I[0]) < 0.5:
        I = I.copy()
        I[0] = 1.0
    F = reciprocal_series(I)
    prod = np.convolve(F, I)[: len(I)]
    expected = np.zeros(len(I), dtype=complex)
    expected[0] = 1
    scale = max(1.0, float(np.abs(F).max() * np.abs(I).max()))
    np.testing.assert_allclose(prod, expected, atol=1e-9 * scale)


@settings(max_examples=80, deadline=None)
@given(series)
def test_magnitude_identity(I):
    if abs(I[0]) < 0.5:
        I = I.copy()
        I[0] = 1.0 + 0.5j
    M = magnitude_series(I)
    lhs = np.convolve(M, M)[: len(I)]
    rhs = np.convolve(I, np.conj(I))[: len(I)].real
    scale = max(1.0, float(np.abs(M).max() ** 2))
    np.testing.assert_allclose(lhs, rhs, atol=1e-9 * scale)
    assert np.isrealobj(M)


def test_magnitude_of_constant():
    assert magnitude_coeff([0], [3 + 4j, 0], 0) == 5
    np.testing.assert_allclose(magnitude_series([3 + 4j, 0, 0]), [5, 0, 0])


def test_zero_germ_rejected():
    with pytest.raises(InvalidGermError):
        reciprocal_coeff([0], [0, 1], 1)
    with pytest.raises(InvalidGermError):
        magnitude_coeff([0], [0, 1], 1)
    assert issubclass(InvalidGermError, ZeroDivisionError)


def test_partial_sum():
    assert evaluate([1, 0.5, 0.25]) == 1.75
    assert evaluate([2j]) == 2j
    with pytest.raises(ValueError):
        evaluate([])
    with pytest.raises(ValueError):
        evaluate([1, 2], method="euler")


def test_pade_rational_oracle():
    c = 0.9 ** np.arange(10)
    assert evaluate(c, "pade") == pytest.approx(10.0, rel=1e-12)
    assert abs(evaluate(c) - 10.0) > 3


def test_pade_beyond_radius():
    # 1/(1 - 2a) has radius 1/2; the partial sum at a=1 diverges but the
    # rational continuation is -1
    c = 2.0 ** np.arange(12)
    assert evaluate(c, "pade") == pytest.approx(-1.0, rel=1e-9)


def test_pade_of_polynomial_is_exact():
    assert evaluate([1, 2, 3, 0, 0, 0], "pade") == pytest.approx(6.0, rel=1e-12)


def test_pade_falls_back_on_short_series():
    out = evaluate([1, 0.5], "pade", full_output=True)
    assert out.method == "partial_sum"
    assert out.value == 1.5
    assert out.last_coeff == 0.5


def test_evaluate_columns():
    C = np.array([[1, 2], [0.5, 0], [0.25, 0]], dtype=complex)
    np.testing.assert_allclose(evaluate_columns(C), [1.75, 2])
    np.testing.assert_allclose(evaluate_columns(C, "pade"), [evaluate(C[:, 0], "pade"), 2])


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 2, elements=st.floats(-1, 1, allow_subnormal=False)), arrays(np.float64, 2, elements=st.floats(-0.6, 0.6, allow_subnormal=False)))
def test_pade_recovers_random_rational(p, q):
    # [1/2] rational with poles outside |alpha| = 1.2 and q(1) away from zero
    qpoly = np.array([1.0, q[0], q[1]])
    poles = np.roots(np.trim_zeros(qpoly[::-1], "f"))
    if (poles.size and np.min(np.abs(poles)) < 1.2) or abs(qpoly.sum()) < 0.2:
        return
    c = reciprocal_series(np.pad(qpoly, (0, 9)).astype(complex), 12)
    c = np.convolve(c, p)[:12]
    assert evaluate(c, "pade") == pytest.approx(p.sum() / qpoly.sum(), abs=1e-8)
