"""Interpolative decompositions (IDs) with adaptive rank selection.

An ID approximates A ~ A[:, skel] @ P where the k retained columns are
actual columns of A and P carries a k x k identity on the skeleton.  The
deterministic path is column-pivoted Householder QR; the randomized path
sketches with a Gaussian test matrix first and falls back to deterministic
when its a-posteriori probe check fails.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidInput

# exact column norms are recomputed this often to curb downdating drift
_RENORM_EVERY = 32


@dataclass
class InterpDecomp:
    """skel: retained column indices (pivot order); proj: k x n matrix with
    proj[:, skel] == I exactly; achieved_error: estimated ||A - BP|| / ||A||."""

    skel: np.ndarray
    proj: np.ndarray
    rank: int
    achieved_error: float

    @property
    def k(self):
        return self.rank


def _check_matrix(A):
    A = np.asarray(A)
    if A.dtype.kind not in "fc":
        A = A.astype(np.float64)
    if A.ndim != 2:
        raise InvalidInput("expected a 2D matrix")
    if not np.all(np.isfinite(A)):
        raise InvalidInput("matrix has non-finite entries")
    return A


def pivoted_qr(A, eps, min_rank=0):
    """Column-pivoted Householder QR, stopped once the trailing pivot drops
    below eps times the leading one (but not before min_rank columns).

    Returns (piv, R, rank, trailing_ratio): R is rank x n upper-trapezoidal
    with columns in pivot order, trailing_ratio the first rejected pivot
    magnitude over the leading pivot.
    """
    m, n = A.shape
    W = np.array(A, order="F", copy=True)
    cplx = W.dtype.kind == "c"
    piv = np.arange(n)
    norms2 = np.real(np.einsum("ij,ij->j", W.conj(), W))
    # reference norms from the last exact evaluation; once a downdated value
    # falls far below its reference, cancellation has eaten it and the true
    # norm must be recomputed (same safeguard LAPACK applies per column)
    ref2 = norms2.copy()
    kmax = min(m, n)
    rank = 0
    p0 = 0.0
    trailing = 0.0

    for step in range(kmax):
        if step > 0 and step % _RENORM_EVERY == 0:
            sub = W[step:, step:]
            norms2[step:] = np.real(np.einsum("ij,ij->j", sub.conj(), sub))
            ref2[step:] = norms2[step:]
        stale = norms2[step:] < 1e-8 * ref2[step:]
        if np.any(stale):
            cols = step + np.nonzero(stale)[0]
            sub = W[step:, cols]
            fresh = np.real(np.einsum("ij,ij->j", sub.conj(), sub))
            norms2[cols] = fresh
            ref2[cols] = fresh
        j = step + int(np.argmax(norms2[step:]))
        pn = np.sqrt(max(norms2[j], 0.0))
        if step == 0:
            p0 = pn
            if p0 == 0.0:
                return piv, W[:0, :], 0, 0.0
        if step >= min_rank and pn <= eps * p0:
            trailing = pn
            break
        if pn == 0.0:
            # exactly rank-deficient; caller pads if it needs more columns
            break
        if j != step:
            W[:, [step, j]] = W[:, [j, step]]
            norms2[[step, j]] = norms2[[j, step]]
            piv[[step, j]] = piv[[j, step]]
        x = W[step:, step]
        normx = np.linalg.norm(x)
        x0 = x[0]
        phase = x0 / abs(x0) if x0 != 0 else 1.0
        alpha = -phase * normx
        v = x.copy()
        v[0] -= alpha
        vnorm2 = np.real(np.vdot(v, v))
        if vnorm2 > 0:
            w = (v.conj() @ W[step:, step + 1:]) * (2.0 / vnorm2)
            W[step:, step + 1:] -= np.outer(v, w)
        W[step, step] = alpha
        W[step + 1:, step] = 0
        row = W[step, step + 1:]
        norms2[step + 1:] -= (row * row.conj()).real if cplx else row * row
        np.clip(norms2[step + 1:], 0.0, None, out=norms2[step + 1:])
        norms2[step] = 0.0
        rank = step + 1

    R = W[:rank, :]
    ratio = trailing / p0 if p0 > 0 else 0.0
    return piv, R, rank, ratio


def _proj_from_qr(piv, R, rank, n, dtype):
    P = np.zeros((rank, n), dtype=dtype)
    if rank > 0:
        P[np.arange(rank), piv[:rank]] = 1.0
        if rank < n:
            P[:, piv[rank:]] = solve_triangular(R[:, :rank], R[:, rank:])
    big = np.abs(P).max(initial=0.0)
    if big > 2.0:
        warnings.warn(
            f"interpolation matrix entries reach {big:.3g} (> 2); "
            "pivoting quality degraded on this block", stacklevel=3)
    return P


def id_fixed_precision(A, eps, min_rank=0) -> InterpDecomp:
    """Column ID to relative precision eps via column-pivoted QR.

    The rank is the first k at which the next pivot magnitude falls below
    eps times the leading pivot.  A zero matrix yields rank 0.
    """
    if not 0 < eps < 1:
        raise InvalidInput("eps must lie in (0, 1)")
    A = _check_matrix(A)
    n = A.shape[1]
    piv, R, rank, ratio = pivoted_qr(A, eps, min_rank=min_rank)
    if rank < min_rank:
        # exact rank deficiency: pad with arbitrary unused columns; each
        # padded column is then reconstructed by itself (unit projection row)
        extra = min(min_rank, n) - rank
        P = _proj_from_qr(piv, R, rank, n, A.dtype)
        padded = piv[rank:rank + extra]
        P[:, padded] = 0.0
        pad = np.zeros((extra, n), dtype=A.dtype)
        pad[np.arange(extra), padded] = 1.0
        proj = np.vstack([P, pad])
        rank += extra
    else:
        proj = _proj_from_qr(piv, R, rank, n, A.dtype)
    return InterpDecomp(skel=piv[:rank].copy(), proj=proj, rank=rank,
                        achieved_error=ratio)


def id_rows(A, eps, min_rank=0) -> InterpDecomp:
    """Row-space ID: A ~ proj.T @ A[skel, :] (plain transpose, no conjugate)."""
    return id_fixed_precision(np.asarray(A).T, eps, min_rank=min_rank)


def _spectral_norm_estimate(A, rng, iters=8):
    v = rng.standard_normal(A.shape[1])
    if A.dtype.kind == "c":
        v = v + 1j * rng.standard_normal(A.shape[1])
    v /= np.linalg.norm(v)
    s = 0.0
    for _ in range(iters):
        w = A @ v
        v = A.conj().T @ w
        s = np.linalg.norm(v) ** 0.5
        nv = np.linalg.norm(v)
        if nv == 0:
            return 0.0
        v /= nv
    return float(s)


def id_randomized(A, eps, oversampling=10, seed=0) -> InterpDecomp:
    """Randomized column ID: Gaussian sketch with adaptive size doubling,
    verified a posteriori on 5 random probe vectors; falls back to the
    deterministic path if the probes see more than 3*eps*||A|| error."""
    if not 0 < eps < 1:
        raise InvalidInput("eps must lie in (0, 1)")
    if oversampling < 4:
        raise InvalidInput("oversampling must be >= 4")
    A = _check_matrix(A)
    m, n = A.shape
    rng = np.random.default_rng(seed)
    cplx = A.dtype.kind == "c"

    normA = _spectral_norm_estimate(A, rng)
    if normA == 0.0:
        return InterpDecomp(skel=np.empty(0, dtype=np.int64),
                            proj=np.zeros((0, n), dtype=A.dtype), rank=0,
                            achieved_error=0.0)

    ell = 2 * oversampling
    while True:
        if ell >= m:
            return id_fixed_precision(A, eps)
        Om = rng.standard_normal((ell, m))
        if cplx:
            Om = Om + 1j * rng.standard_normal((ell, m))
        Y = Om @ A
        piv, R, rank, ratio = pivoted_qr(Y, eps)
        if rank <= ell - oversampling:
            break
        ell *= 2

    proj = _proj_from_qr(piv, R, rank, n, A.dtype)
    skel = piv[:rank].copy()

    # a-posteriori check on random probes
    worst = 0.0
    for _ in range(5):
        v = rng.standard_normal(n)
        if cplx:
            v = v + 1j * rng.standard_normal(n)
        err = np.linalg.norm(A @ v - A[:, skel] @ (proj @ v))
        worst = max(worst, err / (normA * np.linalg.norm(v)))
    if worst > 3 * eps:
        return id_fixed_precision(A, eps)
    return InterpDecomp(skel=skel, proj=proj, rank=rank, achieved_error=worst)
