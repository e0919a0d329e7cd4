"""Domain identification: K-Means summaries at train time, L1 K-NN lookup at test time."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class RouterError(ValueError):
    pass


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float]
    iterations: int


def _sq_dists(x: np.ndarray, centers: np.ndarray) -> np.ndarray:
    # direct differences, not the |x|^2 - 2xc + |c|^2 expansion, for exact zeros
    return ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=-1)


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = _sq_dists(x, x[chosen]).min(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen center
            remaining = [i for i in range(n) if i not in chosen]
            nxt = remaining[0]
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        chosen.append(nxt)
        d2 = np.minimum(d2, _sq_dists(x, x[[nxt]])[:, 0])
    return x[chosen].copy()


def kmeans_fit(features, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-6) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeds, computed in float64.

    Stops when the relative objective change drops below ``tol`` or after
    ``max_iter`` iterations. A cluster that empties is re-seeded at the point
    farthest from its assigned center (lowest index on ties).
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise RouterError(f"features must be 2-D, got shape {x.shape}")
    n = len(x)
    if k < 1 or n < k:
        raise RouterError(f"need N >= K >= 1, got N={n}, K={k}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(x, centers)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(n), labels].sum()))
        new = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                far = int(d2[np.arange(n), labels].argmax())
                new[j] = x[far]
                labels[far] = j
        centers = new
        if len(history) >= 2:
            prev, cur = history[-2], history[-1]
            if prev == cur or abs(prev - cur) <= tol * max(abs(prev), 1e-300):
                break
    d2 = _sq_dists(x, centers)
    labels = d2.argmin(axis=1)
    objective = float(d2[np.arange(n), labels].sum())
    return KMeansResult(centers, labels, objective, history, it)


@dataclass
class CentroidStore:
    """Flat list of centroids, each tagged with its 1-based domain index."""

    dim: int
    centroids: list[np.ndarray] = field(default_factory=list)
    domains: list[int] = field(default_factory=list)

    def add_domain(self, domain: int, centers: np.ndarray) -> None:
        centers = np.asarray(centers, dtype=np.float32)
        if centers.ndim != 2 or centers.shape[1] != self.dim:
            raise RouterError(f"centroids must be (K, {self.dim}), got {centers.shape}")
        if domain < 1:
            raise RouterError("domain labels start at 1")
        for c in centers:
            self.centroids.append(c.copy())
            self.domains.append(int(domain))

    def __len__(self) -> int:
        return len(self.centroids)

    @property
    def num_domains(self) -> int:
        return len(set(self.domains))

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for d in self.domains:
            out[d] = out.get(d, 0) + 1
        return out

    def matrix(self) -> np.ndarray:
        if not self.centroids:
            return np.zeros((0, self.dim), np.float32)
        return np.stack(self.centroids)

    def for_domain(self, domain: int) -> np.ndarray:
        return np.stack([c for c, d in zip(self.centroids, self.domains) if d == domain])

    def truncated(self, n_domains: int) -> "CentroidStore":
        """Copy holding only domains 1..n_domains."""
        keep = [(c.copy(), d) for c, d in zip(self.centroids, self.domains) if d <= n_domains]
        return CentroidStore(self.dim, [c for c, _ in keep], [d for _, d in keep])

    def copy(self) -> "CentroidStore":
        return CentroidStore(self.dim, [c.copy() for c in self.centroids], list(self.domains))


def l1_distances(features: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(N, D) x (M, D) -> (N, M) L1 distances, accumulated in float64."""
    f = np.asarray(features, dtype=np.float64)
    c = np.asarray(centroids, dtype=np.float64)
    return np.abs(f[:, None, :] - c[None, :, :]).sum(axis=-1)


def _vote(dist_row: np.ndarray, domains: np.ndarray, k: int) -> int:
    order = np.lexsort((domains, dist_row))[:k]  # distance, then lower domain
    picked, picked_d = domains[order], dist_row[order]
    best = None
    for dom in np.unique(picked):
        sel = picked == dom
        key = (-int(sel.sum()), float(picked_d[sel].sum()), int(dom))
        if best is None or key < best[0]:
            best = (key, int(dom))
    return best[1]


def identify_domains(features, store: CentroidStore, knn_k: int = 1) -> np.ndarray:
    """Route each feature row to a domain by majority over its ``knn_k`` nearest centroids.

    Ties in the vote go to the smaller summed distance, then the lower domain.
    """
    if len(store) == 0:
        raise RouterError("centroid store is empty")
    if not 1 <= knn_k <= len(store):
        raise RouterError(f"knn_k must lie in [1, {len(store)}], got {knn_k}")
    f = np.atleast_2d(np.asarray(features))
    dist = l1_distances(f, store.matrix())
    doms = np.asarray(store.domains, dtype=np.int64)
    return np.array([_vote(row, doms, knn_k) for row in dist], dtype=np.int64)


def identify_domain(feature, store: CentroidStore, knn_k: int = 1) -> int:
    return int(identify_domains(np.asarray(feature)[None, :], store, knn_k)[0])
