"""Singular value decomposition by one-sided (Hestenes) Jacobi rotations."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class SvdResult:
    U: np.ndarray
    sigma: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = len(self.sigma) if rank is None else rank
        return (self.U[:, :r] * self.sigma[:r]) @ self.V[:, :r].T


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Brent-Luk tournament: n-1 rounds of disjoint column pairs covering every pair once."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        p, q = [], []
        for k in range(m // 2):
            i, j = players[k], players[m - 1 - k]
            if i < n and j < n:
                p.append(min(i, j))
                q.append(max(i, j))
        rounds.append((np.array(p, dtype=np.intp), np.array(q, dtype=np.intp)))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def _complete_basis(U: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Replace the columns of U not flagged in ``keep`` with an orthonormal completion."""
    m, n = U.shape
    basis = [U[:, j] for j in range(n) if keep[j]]
    out = U.copy()
    candidate = 0
    for j in range(n):
        if keep[j]:
            continue
        while True:
            v = np.zeros(m)
            v[candidate % m] = 1.0
            candidate += 1
            for _ in range(2):
                for b in basis:
                    v -= (b @ v) * b
            norm = np.linalg.norm(v)
            if norm > 1e-8:
                v /= norm
                break
        basis.append(v)
        out[:, j] = v
    return out


def svd(a, tol: float = 1e-15, max_sweeps: int = 60) -> SvdResult:
    """Thin SVD ``a = U diag(sigma) V^T`` with sigma sorted descending.

    Computed in double precision regardless of the input dtype.
    """
    A = np.array(a.data if isinstance(a, Tensor) else a, dtype=np.float64)
    if A.ndim != 2:
        raise ValueError(f"svd expects a matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise FloatingPointError("svd input contains non-finite values")
    m, n = A.shape
    if m < n:
        res = svd(A.T, tol=tol, max_sweeps=max_sweeps)
        return SvdResult(U=res.V, sigma=res.sigma, V=res.U)

    W = A.copy()
    V = np.eye(n)
    rounds = _round_robin(n) if n > 1 else []
    for _ in range(max_sweeps):
        rotated = False
        for p, q in rounds:
            wp, wq = W[:, p], W[:, q]
            alpha = np.einsum("ij,ij->j", wp, wp)
            beta = np.einsum("ij,ij->j", wq, wq)
            gamma = np.einsum("ij,ij->j", wp, wq)
            active = np.abs(gamma) > tol * np.sqrt(alpha * beta)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            wp, wq = W[:, p], W[:, q]
            W[:, p] = c * wp - s * wq
            W[:, q] = s * wp + c * wq
            vp, vq = V[:, p], V[:, q]
            V[:, p] = c * vp - s * vq
            V[:, q] = s * vp + c * vq
        if not rotated:
            break

    sigma = np.linalg.norm(W, axis=0)
    order = np.argsort(-sigma, kind="stable")
    sigma, W, V = sigma[order], W[:, order], V[:, order]
    scale = sigma[0] if n and sigma[0] > 0 else 1.0
    keep = sigma > scale * 1e-13 * max(m, n)
    U = np.zeros_like(W)
    U[:, keep] = W[:, keep] / sigma[keep]
    if not np.all(keep):
        U = _complete_basis(U, keep)
        sigma = np.where(keep, sigma, 0.0)
    return SvdResult(U=U, sigma=sigma, V=V)
