"""Closed-form squared 2-Wasserstein cost between Gaussians, batched.

The covariance part of the cost is the Bures term
``tr(Sa) + tr(Sb) - 2 tr((Sa^1/2 Sb Sa^1/2)^1/2)``. Its trace only needs the
eigenvalues of ``Sa^1/2 Sb Sa^1/2``, which equal those of the product
``Sa @ Sb`` (similar matrices). The batched path therefore computes the three
characteristic-polynomial invariants of the product with two GEMMs and
extracts eigenvalues in closed form, never materializing an (M, N, 3, 3)
tensor. ``trisqrt_coefficients`` additionally returns the coefficients that
express ``(Sa Sb)^{-1/2}`` in the basis {I, Sa Sb, (Sa Sb)^{-1}}; the
registration gradient builds on them.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import GaussianComponent, GaussianMixture
from .errors import DimensionMismatchError, NotSymmetricError

# eigenvalues of covariance products are clamped here before sqrt; covariance
# regularization (1e-6 I at ingestion) keeps real spectra far above this
_EIG_FLOOR = 1e-30


@dataclass(frozen=True)
class CostMatrix:
    """Pairwise squared-W2 costs between two mixtures."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.entries, dtype=np.float64)
        if e.ndim != 2:
            raise DimensionMismatchError(f"cost matrix must be 2-D, got {e.shape}")
        if not np.all(np.isfinite(e)):
            raise ValueError("cost matrix has non-finite entries")
        e = np.maximum(e, 0.0)
        e.flags.writeable = False
        object.__setattr__(self, "entries", e)

    @property
    def row_count(self) -> int:
        return self.entries.shape[0]

    @property
    def col_count(self) -> int:
        return self.entries.shape[1]

    def mean(self) -> float:
        return float(self.entries.mean())


def _check_symmetric(S: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.shape != (3, 3):
        raise DimensionMismatchError(f"expected 3x3 matrix, got {S.shape}")
    scale = max(float(np.abs(S).max()), 1e-30)
    asym = float(np.abs(S - S.T).max())
    if asym > tol * scale:
        raise NotSymmetricError(f"asymmetry {asym:.3e} exceeds {tol:.0e} * max|S|")
    return 0.5 * (S + S.T)


def spd_sqrt(S: np.ndarray) -> np.ndarray:
    """Symmetric PSD square root via eigendecomposition, eigenvalues clamped at 0."""
    S = _check_symmetric(S)
    w, V = np.linalg.eigh(S)
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def product_eigenvalues(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """Eigenvalues of Sa @ Sb for batches of symmetric PSD matrices.

    ``P`` is (M, 3, 3), ``Q`` is (N, 3, 3); returns (M, N, 3), ascending.
    Uses the characteristic polynomial: tr via <P, Q>_F, tr of the square via
    an (M, 81) x (81, N) GEMM, det as the product of determinants, then the
    trigonometric form of Cardano's formula (all roots are real and >= 0).
    """
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    M, N = P.shape[0], Q.shape[0]
    i1 = P.reshape(M, 9) @ Q.reshape(N, 9).T
    pp = np.einsum("iab,icd->iabcd", P, P).reshape(M, 81)
    qq = np.einsum("kbc,kda->kabcd", Q, Q).reshape(N, 81)
    i2 = 0.5 * (i1 * i1 - pp @ qq.T)
    i3 = np.linalg.det(P)[:, None] * np.linalg.det(Q)[None, :]
    return _cubic_roots(i1, i2, i3)


def _cubic_roots(i1, i2, i3) -> np.ndarray:
    """Real roots of x^3 - i1 x^2 + i2 x - i3 (ascending along the last axis).

    Written with in-place ops; this sits on the hot path of cost-matrix
    construction (one evaluation per optimization step).
    """
    i1 = np.asarray(i1, dtype=np.float64)
    m = i1 / 3.0
    # r = max(-(i2 - i1^2/3)/3, 0); negq = 2 m^3 - m i2 + i3
    r = m * i1
    np.subtract(r, i2, out=r)
    r /= 3.0
    np.maximum(r, 0.0, out=r)
    negq = m * m
    negq *= m
    negq *= 2.0
    negq -= m * i2
    negq += i3
    sr = np.sqrt(r)
    # the floor keeps r^1.5 away from underflow; when r is that small the
    # roots are a numerically exact triple root (sr = 0) and arg is unused
    denom = np.maximum(r, 1e-150, out=r)
    denom *= np.sqrt(denom)
    denom *= 2.0
    arg = np.divide(negq, denom, out=negq)
    np.clip(arg, -1.0, 1.0, out=arg)
    theta = np.arccos(arg, out=arg)
    theta /= 3.0
    sr *= 2.0
    # cos(theta -+ 2pi/3) = -cos(theta)/2 +- sin(theta) sqrt(3)/2
    ct = np.cos(theta)
    st = np.sin(theta, out=theta)
    st *= np.sqrt(3.0) / 2.0
    roots = np.empty(ct.shape + (3,))
    half = roots[..., 1]
    np.multiply(ct, -0.5, out=half)
    np.subtract(half, st, out=roots[..., 0])
    half += st
    roots[..., 2] = ct
    roots *= sr[..., None]
    roots += m[..., None]
    return roots


def bures_trace_batch(P: np.ndarray, Q: np.ndarray) -> np.ndarray:
    """tr((Sa^1/2 Sb Sa^1/2)^1/2) for all pairs; (M, N)."""
    lam = np.clip(product_eigenvalues(P, Q), 0.0, None)
    return np.sqrt(lam).sum(axis=-1)


def trisqrt_coefficients(lam: np.ndarray):
    """Coefficients (h0, h1, h2) with X^{-1/2} = h0 I + h1 X + h2 X^{-1}.

    ``lam`` holds the (positive) eigenvalues of X along the last axis. Uses
    Newton divided differences of f(x) = x^{-1/2} in the cancellation-free
    form written with square roots s_i = sqrt(lam_i), then folds the X^2 term
    through the Cayley-Hamilton identity X^2 = i1 X - i2 I + i3 X^{-1}.
    """
    lam = np.maximum(lam, _EIG_FLOOR)
    s = np.sqrt(lam)
    a, b, c = lam[..., 0], lam[..., 1], lam[..., 2]
    sa, sb, sc = s[..., 0], s[..., 1], s[..., 2]
    sab = sa + sb
    f0 = 1.0 / sa
    f01 = sa * sb
    f01 *= sab
    np.divide(-1.0, f01, out=f01)
    f012 = sa * sb
    f012 *= sc
    f012 *= sab
    f012 *= sb + sc
    f012 *= sc + sa
    np.divide(sa + sb + sc, f012, out=f012)
    # Newton form -> power basis {I, X, X^2}, then fold X^2 away through
    # X^2 = i1 X - i2 I + i3 X^{-1}
    g2 = f012
    g1 = f01 - g2 * (a + b)
    g0 = f0 - f01 * a
    g0 += g2 * (a * b)
    bc = b * c
    i1 = a + b + c
    i2 = a * b
    i2 += bc
    i2 += c * a
    i3 = bc
    i3 *= a
    h0 = g0
    h0 -= g2 * i2
    h1 = g1
    h1 += g2 * i1
    h2 = g2 * i3
    return h0, h1, h2


def gaussian_w2_sq(a: GaussianComponent, b: GaussianComponent) -> float:
    """Squared 2-Wasserstein distance between two Gaussian components."""
    Sa = _check_symmetric(a.covariance)
    Sb = _check_symmetric(b.covariance)
    d = a.mean - b.mean
    lam = np.clip(product_eigenvalues(Sa[None], Sb[None])[0, 0], 0.0, None)
    val = float(d @ d + np.trace(Sa) + np.trace(Sb) - 2.0 * np.sqrt(lam).sum())
    return max(val, 0.0)


def build_cost_matrix(
    A: GaussianMixture,
    B: GaussianMixture,
    regularization: float = 0.0,
    chunk: int = 256,
) -> CostMatrix:
    """Pairwise gaussian_w2_sq between components of A and B.

    ``regularization`` optionally adds eps * I to both sides first; mixtures
    ingested through the I/O or synthetic paths are already regularized, so
    the default leaves covariances untouched. Work is chunked over rows of A
    to bound temporary memory.
    """
    P = A.covariances
    Q = B.covariances
    if regularization > 0.0:
        eye = regularization * np.eye(3)
        P = P + eye
        Q = Q + eye
    M, N = A.count, B.count
    sq_a = (A.means**2).sum(axis=1)
    sq_b = (B.means**2).sum(axis=1)
    mean_part = sq_a[:, None] + sq_b[None, :] - 2.0 * A.means @ B.means.T
    tr_a = np.trace(P, axis1=1, axis2=2)
    tr_b = np.trace(Q, axis1=1, axis2=2)
    out = np.empty((M, N))
    for lo in range(0, M, chunk):
        hi = min(lo + chunk, M)
        out[lo:hi] = bures_trace_batch(P[lo:hi], Q)
    out = mean_part + tr_a[:, None] + tr_b[None, :] - 2.0 * out
    return CostMatrix(np.maximum(out, 0.0))
