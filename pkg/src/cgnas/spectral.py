"""Normalized Laplacian spectra and the spectral pseudo-distance between graphs."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .graph import ComputationGraph

SIGNATURE_SIZE = 11
EPS = 1e-9


def adjacency(g: ComputationGraph) -> np.ndarray:
    """0/1 adjacency of the simple undirected skeleton (directions dropped, parallel edges merged)."""
    n = len(g.nodes)
    a = np.zeros((n, n))
    for i, j in g.undirected_edges():
        a[i, j] = a[j, i] = 1.0
    return a


def laplacian_from_adjacency(a: np.ndarray) -> np.ndarray:
    """``I - D^-1/2 A D^-1/2``; isolated vertices get a zero row and column."""
    a = np.asarray(a, dtype=float)
    deg = a.sum(axis=1)
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    lap = -(inv_sqrt[:, None] * a * inv_sqrt[None, :])
    lap[np.diag_indices_from(lap)] += nz.astype(float)
    return (lap + lap.T) / 2


def normalized_laplacian(g: ComputationGraph) -> np.ndarray:
    return laplacian_from_adjacency(adjacency(g))


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Rounds of disjoint index pairs covering every pair once (circle method)."""
    m = n + (n % 2)
    players = list(range(m))
    rounds = []
    for _ in range(m - 1):
        pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p < n and q < n]
        if pairs:
            p, q = np.array(pairs).T
            rounds.append((p, q))
        players = [players[0]] + [players[-1]] + players[1:-1]
    return rounds


def eig_sym(m: np.ndarray, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Ascending eigenvalues of a symmetric matrix by Jacobi rotations.

    Sweeps use the parallel (round-robin) ordering so each round rotates
    ``n/2`` disjoint pivot pairs at once.  Iterates until the Frobenius norm
    of the off-diagonal part drops below ``tol``.
    """
    a = np.array(m, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"eig_sym needs a square matrix, got shape {a.shape}")
    if not np.allclose(a, a.T, rtol=0, atol=1e-12):
        raise ValueError("eig_sym needs a symmetric matrix")
    n = len(a)
    if n <= 1:
        return np.diag(a).copy()
    a = (a + a.T) / 2
    rounds = _round_robin(n)

    def off(x):
        # direct sum: subtracting the diagonal from the full norm cancels catastrophically
        return float(np.linalg.norm(x[~np.eye(len(x), dtype=bool)]))

    for _ in range(max_sweeps):
        if off(a) < tol:
            break
        for p, q in rounds:
            apq = a[p, q]
            active = np.abs(apq) > 1e-300
            if not active.any():
                continue
            p, q, apq = p[active], q[active], apq[active]
            theta = (a[q, q] - a[p, p]) / (2.0 * apq)
            t = np.sign(theta) / (np.abs(theta) + np.hypot(theta, 1.0))
            t[theta == 0] = 1.0
            c = 1.0 / np.sqrt(t * t + 1.0)
            s = t * c
            rp, rq = a[p, :].copy(), a[q, :].copy()
            a[p, :] = c[:, None] * rp - s[:, None] * rq
            a[q, :] = s[:, None] * rp + c[:, None] * rq
            cp, cq = a[:, p].copy(), a[:, q].copy()
            a[:, p] = cp * c - cq * s
            a[:, q] = cp * s + cq * c
            a[p, q] = a[q, p] = 0.0
    else:
        if off(a) >= tol:
            raise RuntimeError(f"Jacobi did not converge in {max_sweeps} sweeps")
    return np.sort(np.diag(a))


def lapack_eigvalsh(m: np.ndarray) -> np.ndarray:
    return np.linalg.eigvalsh(m)


@dataclass(frozen=True)
class SpectralSignature:
    values: np.ndarray
    node_count: int

    @property
    def padded(self) -> bool:
        return self.node_count < len(self.values)

    def __eq__(self, other):
        return (isinstance(other, SpectralSignature) and self.node_count == other.node_count
                and np.array_equal(self.values, other.values))

    def __hash__(self):
        return hash((self.node_count, self.values.tobytes()))


def signature(g: ComputationGraph, k: int = SIGNATURE_SIZE,
              solver: Callable[[np.ndarray], np.ndarray] = lapack_eigvalsh) -> SpectralSignature:
    """The ``k`` smallest normalized-Laplacian eigenvalues, zero padded for tiny graphs."""
    lam = np.sort(solver(normalized_laplacian(g)))[:k]
    values = np.zeros(k)
    values[:len(lam)] = lam
    values.setflags(write=False)
    return SpectralSignature(values, len(g.nodes))


def spectral_distance(a: SpectralSignature | np.ndarray, b: SpectralSignature | np.ndarray) -> float:
    va = a.values if isinstance(a, SpectralSignature) else np.asarray(a)
    vb = b.values if isinstance(b, SpectralSignature) else np.asarray(b)
    return float(np.linalg.norm(va - vb))


def signature_matrix(sigs: Sequence[SpectralSignature]) -> np.ndarray:
    return np.stack([s.values for s in sigs]) if sigs else np.zeros((0, SIGNATURE_SIZE))


def distance_matrix(values: np.ndarray, other: np.ndarray | None = None) -> np.ndarray:
    """Pairwise Euclidean distances between signature rows."""
    x = np.asarray(values, dtype=float)
    y = x if other is None else np.asarray(other, dtype=float)
    d = np.sqrt(np.maximum(((x[:, None, :] - y[None, :, :]) ** 2).sum(-1), 0.0))
    if other is None:
        d = (d + d.T) / 2
        np.fill_diagonal(d, 0.0)
    return d


@dataclass
class DistanceCache:
    """Symmetric spectral distance matrix of one dataset, keyed by its digest."""
    digest: str
    matrix: np.ndarray

    @property
    def n(self) -> int:
        return len(self.matrix)

    @classmethod
    def build(cls, digest: str, values: np.ndarray) -> "DistanceCache":
        return cls(digest, distance_matrix(values))

    def save(self, path: str | Path, k: int = SIGNATURE_SIZE) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, digest=np.array(self.digest), n=np.array(self.n), k=np.array(k),
                     matrix=self.matrix)

    @classmethod
    def load(cls, path: str | Path, digest: str | None = None) -> "DistanceCache":
        with np.load(path) as data:
            found = str(data["digest"])
            if digest is not None and found != digest:
                raise ValueError(f"distance cache {path} is for dataset {found}, not {digest}")
            matrix = data["matrix"]
            if matrix.shape != (int(data["n"]),) * 2:
                raise ValueError(f"distance cache {path} header does not match its payload")
            return cls(found, matrix)

    @classmethod
    def load_or_build(cls, directory: str | Path, digest: str, values: np.ndarray) -> "DistanceCache":
        path = Path(directory) / f"spectral-{digest}.npz"
        if path.exists():
            return cls.load(path, digest)
        cache = cls.build(digest, values)
        path.parent.mkdir(parents=True, exist_ok=True)
        cache.save(path, values.shape[1])
        return cache
