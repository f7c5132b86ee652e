"""Singular value decomposition and low-rank layer accounting.

The SVD is a one-sided Jacobi: rotate column pairs of W until all columns
are mutually orthogonal, so W V = U diag(sigma).  Accurate to near machine
precision at the matrix sizes used here, with no external solver.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ContractError, NumericError

WHITENING_EXPONENT = 0.5  # fixed exponent on the per-channel activation mean
DEFAULT_EPSILON_FLOOR = 1e-6


class ConvergenceError(RuntimeError):
    """Jacobi sweeps hit the iteration cap before the off-diagonal
    mass fell below threshold."""


@dataclass
class SvdFactors:
    """W = U @ diag(sigma) @ V.T with orthonormal columns in U and V.

    sigma is sorted descending; r = min(m, n), numerically zero singular
    values are kept as zeros rather than truncated.
    """

    U: np.ndarray  # (m, r)
    sigma: np.ndarray  # (r,)
    V: np.ndarray  # (n, r)
    m: int
    n: int
    r: int


@dataclass
class WhiteningScale:
    """Diagonal input-channel scale for activation-aware decomposition."""

    s: np.ndarray  # (n,), strictly positive
    alpha_exponent: float = WHITENING_EXPONENT
    epsilon_floor: float = DEFAULT_EPSILON_FLOOR


@dataclass
class LayerBudget:
    """Parameter/FLOP cost of one layer at a selected rank.

    A layer only counts as compressed when factorized storage actually
    beats dense storage, i.e. k*(m+n) < m*n; otherwise both ratios are 1.
    """

    m: int
    n: int
    selected_rank: int
    param_ratio: float
    flop_ratio: float
    compressed: bool


def _orthonormal_fill(U: np.ndarray, col: int) -> None:
    """Replace a zero column with a unit vector orthogonal to the rest."""
    m = U.shape[0]
    for basis in range(m):
        v = np.zeros(m)
        v[basis] = 1.0
        v -= U @ (U.T @ v)
        v -= U @ (U.T @ v)
        nrm = np.linalg.norm(v)
        if nrm > 0.5:
            U[:, col] = v / nrm
            return
    raise NumericError("svd: could not complete orthonormal basis")


def svd(W, tol: float = 1e-12, max_sweeps: int = 100) -> SvdFactors:
    """One-sided Jacobi SVD of an m-by-n matrix.

    Converges when the largest normalized column inner product drops
    below ``tol``.  Raises ConvergenceError (reporting the residual) if
    ``max_sweeps`` passes are not enough.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or min(W.shape) < 1:
        raise ContractError(f"svd: expected a 2-d matrix, got shape {W.shape}")
    if not np.all(np.isfinite(W)):
        raise NumericError("svd: non-finite entries in input")
    m, n = W.shape
    if m < n:
        f = svd(W.T, tol=tol, max_sweeps=max_sweeps)
        return SvdFactors(U=f.V, sigma=f.sigma, V=f.U, m=m, n=n, r=f.r)

    A = W.copy()
    V = np.eye(n)
    off = 0.0
    converged = n < 2
    for _ in range(max_sweeps):
        if converged:
            break
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                ap = A[:, p]
                aq = A[:, q]
                gamma = float(ap @ aq)
                alpha = float(ap @ ap)
                beta = float(aq @ aq)
                denom = np.sqrt(alpha * beta)
                rel = abs(gamma) / denom if denom > 0.0 else 0.0
                off = max(off, rel)
                if rel <= tol:
                    continue
                theta = 0.5 * np.arctan2(2.0 * gamma, alpha - beta)
                c = np.cos(theta)
                s = np.sin(theta)
                new_p = c * ap + s * aq
                new_q = -s * ap + c * aq
                A[:, p] = new_p
                A[:, q] = new_q
                vp = V[:, p].copy()
                V[:, p] = c * vp + s * V[:, q]
                V[:, q] = -s * vp + c * V[:, q]
        converged = off <= tol
    if not converged:
        raise ConvergenceError(
            f"svd: off-diagonal residual {off:.3e} above {tol:.0e} "
            f"after {max_sweeps} sweeps"
        )

    norms = np.linalg.norm(A, axis=0)
    order = np.argsort(-norms, kind="stable")
    sigma = norms[order]
    U = A[:, order]
    V = V[:, order]
    zero_cut = np.finfo(np.float64).tiny
    for j in range(n):
        if sigma[j] > zero_cut:
            U[:, j] /= sigma[j]
        else:
            sigma[j] = 0.0
            U[:, j] = 0.0
    for j in range(n):
        if sigma[j] == 0.0:
            _orthonormal_fill(U, j)
    # sign convention: largest-|entry| of each U column is non-negative
    for j in range(n):
        i = int(np.argmax(np.abs(U[:, j])))
        if U[i, j] < 0.0:
            U[:, j] = -U[:, j]
            V[:, j] = -V[:, j]
    return SvdFactors(U=U, sigma=sigma, V=V, m=m, n=n, r=n)


def _scale_from_mean_abs(mean_abs: np.ndarray, epsilon_floor: float) -> np.ndarray:
    # floor applies to the mean, before the exponent
    return np.maximum(mean_abs, epsilon_floor) ** WHITENING_EXPONENT


def compute_whitening(activations, epsilon_floor: float = DEFAULT_EPSILON_FLOOR) -> WhiteningScale:
    """Per-channel scale from a stream of input activations.

    ``activations`` is an iterable of (tokens, n) arrays or single length-n
    vectors.  s[i] = max(mean over tokens of |x_i|, floor) ** 0.5.
    """
    total = None
    count = 0
    for block in activations:
        block = np.atleast_2d(np.asarray(block, dtype=np.float64))
        if total is None:
            total = np.abs(block).sum(axis=0)
        else:
            if block.shape[1] != total.shape[0]:
                raise ContractError(
                    f"compute_whitening: channel count changed from "
                    f"{total.shape[0]} to {block.shape[1]}"
                )
            total += np.abs(block).sum(axis=0)
        count += block.shape[0]
    if total is None or count == 0:
        raise ContractError("compute_whitening: empty activation stream")
    return WhiteningScale(
        s=_scale_from_mean_abs(total / count, epsilon_floor),
        epsilon_floor=epsilon_floor,
    )


def decompose_weighted(W, whitening: WhiteningScale):
    """SVD of the channel-scaled matrix W @ diag(s).

    Returns (factors, whitening); reconstructing with the inverse scale
    recovers W itself at full rank.
    """
    W = np.asarray(W, dtype=np.float64)
    if whitening.s.shape != (W.shape[1],):
        raise ContractError(
            f"decompose_weighted: scale length {whitening.s.shape[0]} does not "
            f"match {W.shape[1]} input channels"
        )
    return svd(W * whitening.s[None, :]), whitening


def reconstruct(f: SvdFactors, mask, whitening: WhiteningScale | None = None) -> np.ndarray:
    """U @ diag(sigma * mask) @ V.T, divided by the channel scale if present."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (f.r,):
        raise ContractError(
            f"reconstruct: mask length {mask.shape} does not match rank {f.r}"
        )
    W = (f.U * (f.sigma * mask)[None, :]) @ f.V.T
    if whitening is not None:
        W = W / whitening.s[None, :]
    return W


def param_ratio(m: int, n: int, r: int) -> float:
    """Stored parameters of a rank-r factorization relative to dense."""
    return r * (m + n) / (m * n)


def flop_ratio(m: int, n: int, r: int) -> float:
    """Forward FLOPs of the two-matmul factored layer relative to dense."""
    return r * (m + n) / (m * n)


def layer_budget(m: int, n: int, selected_rank: int) -> LayerBudget:
    compressed = selected_rank * (m + n) < m * n
    return LayerBudget(
        m=m,
        n=n,
        selected_rank=selected_rank,
        param_ratio=param_ratio(m, n, selected_rank) if compressed else 1.0,
        flop_ratio=flop_ratio(m, n, selected_rank) if compressed else 1.0,
        compressed=compressed,
    )
