"""Formal power series kernel.

A series is a 1-D array ``c`` with ``c[n]`` the coefficient of ``alpha**n``.
The inner loops live in a compiled extension when available; ``BACKEND``
tells which implementation was picked at import time.
"""
from __future__ import annotations

import os
from typing import NamedTuple

import numpy as np

from .errors import InvalidGermError

if os.environ.get("FFHEFLOW_PURE_PYTHON"):
    from . import _pykernels as _k

    BACKEND = "python"
else:
    try:
        from . import _ckernels as _k

        BACKEND = "cython"
    except ImportError:  # pragma: no cover - depends on build
        from . import _pykernels as _k

        BACKEND = "python"

conv_columns = _k.conv_columns


def _as_complex(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.complex128)


def _need(a, n, name):
    if len(a) <= n:
        raise IndexError(f"series {name} has {len(a)} coefficients, order {n} requested")


def cauchy_term(a, b, n: int, conjugate_a: bool = False) -> complex:
    """Coefficient of ``alpha**n`` in ``a(alpha) * b(alpha)``.

    With ``conjugate_a`` the coefficients of ``a`` are conjugated first.

    >>> cauchy_term([1, 2], [1, 3], 1)
    (5+0j)
    """
    a, b = _as_complex(a), _as_complex(b)
    _need(a, n, "a")
    _need(b, n, "b")
    return _k.conv_sum(a, b, 0, n, n, bool(conjugate_a))


def cauchy_term_truncated(a, b, n: int, conjugate_a: bool = False) -> complex:
    """Same as :func:`cauchy_term` restricted to ``d = 1 .. n-1``."""
    a, b = _as_complex(a), _as_complex(b)
    _need(a, n - 1, "a")
    _need(b, n - 1, "b")
    return _k.conv_sum(a, b, 1, n - 1, n, bool(conjugate_a))


def reciprocal_coeff(F, I, n: int) -> complex:
    """Order-``n`` coefficient of ``1/I`` given ``F[0..n-1]`` of that reciprocal."""
    I = _as_complex(I)
    if I[0] == 0:
        raise InvalidGermError("reciprocal of a series with zero constant term")
    if n == 0:
        return 1.0 / I[0]
    F = _as_complex(F)
    _need(F, n - 1, "F")
    _need(I, n, "I")
    return _k.reciprocal_next(F, I, n)


def magnitude_coeff(M, I, n: int) -> float:
    """Order-``n`` coefficient of the real series ``M`` with ``M*M = I * conj(I)``."""
    I = _as_complex(I)
    if I[0] == 0:
        raise InvalidGermError("magnitude series of a series with zero constant term")
    if n == 0:
        return float(abs(I[0]))
    M = np.ascontiguousarray(M, dtype=np.float64)
    _need(M, n - 1, "M")
    _need(I, n, "I")
    return float(_k.magnitude_next(M, I, n))


def reciprocal_series(I, terms: int | None = None) -> np.ndarray:
    I = _as_complex(I)
    terms = len(I) if terms is None else terms
    F = np.zeros(terms, dtype=np.complex128)
    for n in range(terms):
        F[n] = reciprocal_coeff(F, I, n)
    return F


def magnitude_series(I, terms: int | None = None) -> np.ndarray:
    I = _as_complex(I)
    terms = len(I) if terms is None else terms
    M = np.zeros(terms)
    for n in range(terms):
        M[n] = magnitude_coeff(M, I, n)
    return M


class Evaluation(NamedTuple):
    value: complex
    method: str
    last_coeff: float


def _pade_at_one(c: np.ndarray, rtol: float = 1e-13):
    """Near-diagonal Pade value at ``alpha = 1`` with SVD-based degree reduction.

    Returns ``None`` when the denominator vanishes at 1.
    """
    N = len(c) - 1
    m = N // 2
    l = N - m
    if not np.all(np.isfinite(c)):
        return None
    scale = np.max(np.abs(c))
    if scale == 0:
        return 0j
    while m > 0:
        Z = np.array([[c[l + 1 + i - j] if l + 1 + i - j >= 0 else 0 for j in range(m + 1)]
                      for i in range(m)], dtype=complex)
        s = np.linalg.svd(Z, compute_uv=False)
        rank = int(np.sum(s > rtol * scale))
        if rank == m:
            break
        m, l = rank, N - rank
    if m == 0:
        return complex(np.sum(c[: l + 1]))
    Z = np.array([[c[l + 1 + i - j] if l + 1 + i - j >= 0 else 0 for j in range(m + 1)]
                  for i in range(m)], dtype=complex)
    _, _, vh = np.linalg.svd(Z)
    q = np.conj(vh[-1])
    p = np.convolve(c[: l + 1], q)[: l + 1]
    qs = q.sum()
    if abs(qs) < 1e-14 * np.abs(q).max():
        return None
    return complex(p.sum() / qs)


def evaluate(S, method: str = "partial_sum", full_output: bool = False):
    """Value of the series at ``alpha = 1``.

    Parameters
    ----------
    S : array_like
        Coefficients ``c[0..n]``.
    method : {"partial_sum", "pade"}
        Pade needs at least three coefficients; shorter input falls back to
        the partial sum and ``Evaluation.method`` says so.
    full_output : bool
        Return an :class:`Evaluation` instead of the bare value.
    """
    c = _as_complex(S)
    if c.size == 0:
        raise ValueError("empty series")
    if method in ("sum", "partial_sum"):
        used, value = "partial_sum", complex(c.sum())
    elif method == "pade":
        value = _pade_at_one(c) if c.size >= 3 else None
        if value is None:
            used, value = "partial_sum", complex(c.sum())
        else:
            used = "pade"
    else:
        raise ValueError(f"unknown evaluation method {method!r}")
    if full_output:
        return Evaluation(value, used, float(abs(c[-1])))
    return value


def evaluate_columns(C: np.ndarray, method: str = "partial_sum") -> np.ndarray:
    """Evaluate each column of a ``(terms, m)`` coefficient array at ``alpha = 1``."""
    if method in ("sum", "partial_sum"):
        return C.sum(axis=0)
    return np.array([evaluate(C[:, j], method) for j in range(C.shape[1])])
