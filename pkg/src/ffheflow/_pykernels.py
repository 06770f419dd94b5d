"""NumPy implementations of the series kernels (fallback for ``_ckernels``)."""
import numpy as np


def conv_sum(a, b, lo, hi, n, conj_a):
    """sum_{d=lo..hi} a'[d] * b[n-d] for 1-D complex arrays."""
    if hi < lo:
        return 0j
    aa = a[lo:hi + 1]
    if conj_a:
        aa = np.conj(aa)
    return complex(np.dot(aa, b[n - hi:n - lo + 1][::-1]))


def conv_columns(A, B, n, conj_a):
    """Column-wise sum_{d=1..n-1} A'[d, :] * B[n-d, :] for 2-D complex arrays."""
    m = A.shape[1]
    if n < 2:
        return np.zeros(m, dtype=np.complex128)
    aa = A[1:n]
    if conj_a:
        aa = np.conj(aa)
    return np.einsum("ij,ij->j", aa, B[n - 1:0:-1])


def reciprocal_next(F, I, n):
    acc = 0j
    for d in range(n):
        acc += F[d] * I[n - d]
    return -acc / I[0]


def magnitude_next(M, I, n):
    sq = 0.0
    for d in range(n + 1):
        sq += (I[d] * np.conj(I[n - d])).real
    for d in range(1, n):
        sq -= M[d] * M[n - d]
    return sq / (2.0 * M[0])
