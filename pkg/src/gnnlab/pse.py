"""Positional/structural encodings: random-walk diagonals and Laplacian eigenpairs.

The eigensolver is an in-house cyclic Jacobi iteration; molecules are small
(tens of nodes) so the O(N^3)-per-sweep cost is irrelevant. Random-walk
features accumulate matrix products in a value-canonical order so that
relabeling nodes permutes the features bitwise-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .molgraph import MolGraph


class EigenError(RuntimeError):
    pass


@dataclass(frozen=True)
class PSEConfig:
    rw_steps: int = 4
    n_eigvecs: int = 4
    include_eigenvalues: bool = True

    def __post_init__(self):
        if self.rw_steps < 1:
            raise ValueError("rw_steps must be >= 1")
        if self.n_eigvecs < 1:
            raise ValueError("n_eigvecs must be >= 1")

    @property
    def width(self) -> int:
        return self.rw_steps + self.n_eigvecs * (2 if self.include_eigenvalues else 1)


@dataclass(frozen=True)
class SpectralData:
    """Ascending eigenvalues with unit-norm, sign-canonicalized eigenvectors."""

    eigenvalues: np.ndarray  # (k,)
    eigenvectors: np.ndarray  # (N, k), column j pairs with eigenvalues[j]


def laplacian(g: MolGraph) -> np.ndarray:
    """Combinatorial Laplacian L = D - A."""
    a = g.adjacency()
    return np.diag(g.degrees().astype(np.float64)) - a


def _canonical_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product whose per-element accumulation order depends only on the
    summand values, so PAP^T-style relabelings reproduce bitwise."""
    prod = a[:, :, None] * b[None, :, :]
    return np.sum(np.sort(prod, axis=1), axis=1)


def rwse(g: MolGraph, n_steps: int) -> np.ndarray:
    """Columns diag((D^-1 A)^k) for k = 1..n_steps.

    Degree-0 nodes get an identity transition row (lazy convention). Entries
    are return probabilities, so they lie in [0, 1].
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    n = g.n_nodes
    a = g.adjacency()
    deg = g.degrees().astype(np.float64)
    t = np.where(deg[:, None] > 0, a / np.where(deg[:, None] > 0, deg[:, None], 1.0),
                 np.eye(n))
    out = np.zeros((n, n_steps), dtype=np.float64)
    power = t
    out[:, 0] = np.diag(power)
    for k in range(1, n_steps):
        power = _canonical_matmul(power, t)
        out[:, k] = np.diag(power)
    return out


def jacobi_eigh(matrix: np.ndarray, max_sweeps: int = 100):
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Returns (eigenvalues ascending, eigenvectors as columns). Raises
    EigenError with the residual off-diagonal norm if ``max_sweeps`` cyclic
    sweeps do not reach convergence.
    """
    a = np.array(matrix, dtype=np.float64, copy=True)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError("matrix must be square")
    if not np.allclose(a, a.T, atol=1e-12, rtol=0.0):
        raise ValueError("matrix must be symmetric")
    v = np.eye(n)
    if n == 1:
        return a.reshape(1).copy(), v
    scale = max(1.0, float(np.abs(a).max()))
    tol = 1e-13 * scale

    def off_norm():
        o = a.copy()
        np.fill_diagonal(o, 0.0)
        return float(np.sqrt(np.sum(o * o)))

    for _ in range(max_sweeps):
        if off_norm() <= tol:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= tol / (n * n):
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rot_p = c * a[:, p] - s * a[:, q]
                rot_q = s * a[:, p] + c * a[:, q]
                a[:, p], a[:, q] = rot_p, rot_q
                rot_p = c * a[p, :] - s * a[q, :]
                rot_q = s * a[p, :] + c * a[q, :]
                a[p, :], a[q, :] = rot_p, rot_q
                vec_p = c * v[:, p] - s * v[:, q]
                vec_q = s * v[:, p] + c * v[:, q]
                v[:, p], v[:, q] = vec_p, vec_q
    else:
        raise EigenError(f"Jacobi failed to converge within {max_sweeps} sweeps; "
                         f"off-diagonal norm {off_norm():.3e}")

    eigvals = np.diag(a).copy()
    order = np.argsort(eigvals, kind="stable")
    return eigvals[order], v[:, order]


def _canonicalize_signs(vectors: np.ndarray, threshold: float = 1e-8) -> np.ndarray:
    out = vectors.copy()
    for j in range(out.shape[1]):
        col = out[:, j]
        sig = np.flatnonzero(np.abs(col) > threshold)
        if sig.size and col[sig[0]] < 0:
            out[:, j] = -col
    return out


def laplacian_eigs(g: MolGraph, k: int) -> SpectralData:
    """The k smallest Laplacian eigenpairs of g."""
    n = g.n_nodes
    if not (1 <= k <= n):
        raise ValueError(f"need 1 <= k <= N={n}, got {k}")
    lap = laplacian(g)
    eigvals, eigvecs = jacobi_eigh(lap)
    eigvals = eigvals[:k]
    eigvecs = _canonicalize_signs(eigvecs[:, :k])
    for j in range(k):
        residual = float(np.linalg.norm(lap @ eigvecs[:, j] - eigvals[j] * eigvecs[:, j]))
        if residual >= 1e-8:
            raise EigenError(f"eigenpair {j} residual {residual:.3e} exceeds 1e-8")
    return SpectralData(eigenvalues=eigvals, eigenvectors=eigvecs)


def build_pse_features(g: MolGraph, cfg: PSEConfig) -> np.ndarray:
    """Node feature block: RWSE columns ++ eigenvector columns ++ optional
    per-node eigenvalue broadcast. Eigen blocks zero-pad columns beyond N."""
    n = g.n_nodes
    k = cfg.n_eigvecs
    rw = rwse(g, cfg.rw_steps)
    k_avail = min(k, n)
    spectral = laplacian_eigs(g, k_avail)
    vec_block = np.zeros((n, k), dtype=np.float64)
    vec_block[:, :k_avail] = spectral.eigenvectors
    blocks = [rw, vec_block]
    if cfg.include_eigenvalues:
        val_block = np.zeros((n, k), dtype=np.float64)
        val_block[:, :k_avail] = np.broadcast_to(spectral.eigenvalues, (n, k_avail))
        blocks.append(val_block)
    return np.concatenate(blocks, axis=1)
