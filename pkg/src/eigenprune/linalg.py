"""Dense matrix helpers and a one-sided Jacobi SVD.

Matrices are plain 2-D ``float64`` numpy arrays. The SVD splits a matrix into
rank-one terms ``sigma_i * u_i v_i^T`` whose sum is the original matrix.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

JACOBI_TOL = 1e-12
MAX_SWEEPS = 60


class ShapeError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and convert ``a`` to a finite 2-D float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ShapeError(f"{name}: expected a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name}: matrix has non-finite entries")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = as_matrix(a, "a"), as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def frobenius(a: np.ndarray) -> float:
    return float(np.sqrt(np.sum(as_matrix(a) ** 2)))


@dataclass(frozen=True)
class SVDFactors:
    """``a = u @ diag(sigma) @ v.T`` with ``r = min(m, n)`` columns in u and v."""

    u: np.ndarray
    sigma: np.ndarray
    v: np.ndarray

    @property
    def rank_bound(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.v.T


@dataclass(frozen=True)
class RankOneTerm:
    index: int
    sigma: float
    u: np.ndarray
    v: np.ndarray

    def materialize(self) -> np.ndarray:
        return self.sigma * np.outer(self.u, self.v)


@lru_cache(maxsize=None)
def _round_robin(n: int) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    # Circle-method schedule: every column pair meets exactly once per sweep and
    # pairs within a round are disjoint, so a round can be rotated in one shot.
    size = n + (n % 2)
    players = list(range(size))
    rounds = []
    for _ in range(size - 1):
        half = size // 2
        p = np.array(players[:half])
        q = np.array(players[half:][::-1])
        keep = (p < n) & (q < n)
        rounds.append((p[keep], q[keep]))
        players = [players[0], players[-1]] + players[1:-1]
    return tuple(rounds)


def _orthonormal_complete(u: np.ndarray, good: np.ndarray) -> np.ndarray:
    """Replace the columns of ``u`` not flagged ``good`` with an orthonormal completion."""
    m, r = u.shape
    basis = [u[:, k] for k in range(r) if good[k]]
    fill = []
    for e in np.eye(m):
        if len(basis) + len(fill) == r:
            break
        w = e.copy()
        for _ in range(2):
            for b in basis + fill:
                w -= (b @ w) * b
        nrm = np.linalg.norm(w)
        if nrm > 0.5:
            fill.append(w / nrm)
    out = u.copy()
    out[:, ~good] = np.array(fill).T.reshape(m, -1)
    return out


def _jacobi(a: np.ndarray, name: str) -> SVDFactors:
    m, n = a.shape  # m >= n
    # Stack W over V so each rotation touches both with one indexing op.
    wv = np.vstack([a, np.eye(n)])
    rounds = _round_robin(n)
    off = 0.0
    for _ in range(MAX_SWEEPS):
        off = 0.0
        for p, q in rounds:
            if len(p) == 0:
                continue
            wp, wq = wv[:m, p], wv[:m, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            scale = np.sqrt(alpha * beta)
            rotate = (gamma != 0) & (np.abs(gamma) > JACOBI_TOL * scale)
            if not rotate.any():
                continue
            off = max(off, float(np.max(np.abs(gamma[rotate]) / scale[rotate])))
            p, q = p[rotate], q[rotate]
            alpha, beta, gamma = alpha[rotate], beta[rotate], gamma[rotate]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            cp, cq = wv[:, p], wv[:, q]
            wv[:, p] = c * cp - s * cq
            wv[:, q] = s * cp + c * cq
        if off <= JACOBI_TOL:
            break
    else:
        raise ConvergenceError(
            f"{name}: Jacobi SVD did not converge in {MAX_SWEEPS} sweeps "
            f"(residual off-diagonal {off:.3e})"
        )
    w, v = wv[:m], wv[m:]
    sigma = np.sqrt(np.einsum("ij,ij->j", w, w))
    order = np.argsort(-sigma, kind="stable")
    sigma, w, v = sigma[order], w[:, order], v[:, order]
    smax = sigma[0] if n else 0.0
    good = sigma > max(smax * n * np.finfo(np.float64).eps, np.finfo(np.float64).tiny)
    u = np.zeros_like(w)
    u[:, good] = w[:, good] / sigma[good]
    if not good.all():
        u = _orthonormal_complete(u, good)
    return SVDFactors(u=u, sigma=sigma, v=v)


def svd(a, name: str = "matrix") -> SVDFactors:
    """Thin SVD by one-sided Jacobi rotations, singular values non-increasing."""
    a = as_matrix(a, name)
    if a.shape[0] >= a.shape[1]:
        return _jacobi(a.copy(), name)
    f = _jacobi(np.ascontiguousarray(a.T), name)
    return SVDFactors(u=f.v, sigma=f.sigma, v=f.u)


def rank_one_terms(f: SVDFactors) -> list[RankOneTerm]:
    return [
        RankOneTerm(index=i, sigma=float(f.sigma[i]), u=f.u[:, i].copy(), v=f.v[:, i].copy())
        for i in range(f.rank_bound)
    ]


def apply_term(t: RankOneTerm, x) -> np.ndarray:
    """``E_i @ x`` computed as ``sigma * (v . x) * u`` without forming ``E_i``.

    ``x`` may carry leading batch/token axes; the last axis must match ``v``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.v.shape[0]:
        raise ShapeError(f"term expects inputs of size {t.v.shape[0]}, got {x.shape[-1]}")
    return (t.sigma * (x @ t.v))[..., None] * t.u
