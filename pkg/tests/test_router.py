import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sprompts.router import CentroidStore, RouterError, identify_domain, identify_domains, kmeans_fit


def _store(points, domains):
    s = CentroidStore(len(points[0]))
    for p, d in zip(points, domains):
        s.add_domain(d, np.array([p], float))
    return s


def test_kmeans_one_center_is_mean(rng):
    x = rng.normal(size=(30, 4))
    np.testing.assert_allclose(kmeans_fit(x, 1).centers[0], x.mean(0), atol=1e-12)


def test_kmeans_k_equals_n(rng):
    x = rng.normal(size=(6, 3))
    res = kmeans_fit(x, 6)
    assert res.objective == 0.0
    assert sorted(map(tuple, res.centers)) == sorted(map(tuple, x))


def test_kmeans_two_planted_clusters(rng):
    a = rng.uniform(-0.1, 0.1, (8, 2))
    b = 10 + rng.uniform(-0.1, 0.1, (8, 2))
    centers = kmeans_fit(np.concatenate([a, b]), 2, seed=3).centers
    centers = centers[np.argsort(centers[:, 0])]
    assert np.abs(centers[0] - a.mean(0)).max() < 0.2
    assert np.abs(centers[1] - b.mean(0)).max() < 0.2


def test_kmeans_deterministic_and_validates(rng):
    x = rng.normal(size=(40, 5))
    a, b = kmeans_fit(x, 4, seed=9), kmeans_fit(x, 4, seed=9)
    assert a.centers.tobytes() == b.centers.tobytes()
    with pytest.raises(RouterError):
        kmeans_fit(x[:3], 4)


def test_kmeans_objective_never_increases(rng):
    res = kmeans_fit(rng.normal(size=(200, 3)), 6, seed=1)
    assert all(b <= a + 1e-9 for a, b in zip(res.history, res.history[1:]))


def test_route_nearest():
    assert identify_domain(np.array([1.0, 1.0]), _store([(0, 0), (10, 10)], [1, 2])) == 1


def test_route_tie_goes_to_lower_domain():
    store = _store([(10, 10), (0, 0)], [2, 1])
    assert identify_domain(np.array([5.0, 5.0]), store) == 1


def test_route_k3_majority():
    # L1 distances 0.9, 0.1, 1.1 -> two votes for A
    store = _store([(0, 0), (0, 1), (0, 2)], [1, 1, 2])
    assert identify_domain(np.array([0.0, 0.9]), store, knn_k=3) == 1


def test_route_vote_tie_uses_summed_distance():
    store = _store([(0, 0), (0, 3), (0, 1), (0, 5)], [1, 1, 2, 2])
    # k=4 -> two votes each; domain 2 sums 0.5+4.5, domain 1 sums 0.5+2.5
    assert identify_domain(np.array([0.0, 0.5]), store, knn_k=4) == 1


def test_route_errors():
    with pytest.raises(RouterError):
        identify_domain(np.zeros(2), CentroidStore(2))
    with pytest.raises(RouterError):
        identify_domain(np.zeros(2), _store([(0, 0)], [1]), knn_k=2)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 64), st.integers(1, 6))
def test_route_matches_l1_scan(seed, m, d):
    r = np.random.default_rng(seed)
    # small integer grid so exact ties are common
    cents = r.integers(-3, 4, size=(m, d)).astype(float)
    doms = r.integers(1, 9, size=m)
    store = CentroidStore(d)
    for c, dom in zip(cents, doms):
        store.add_domain(int(dom), c[None])
    x = r.integers(-3, 4, size=d).astype(float)
    dist = [float(np.abs(x - c).sum()) for c in cents]
    best = min(dist)
    assert identify_domain(x, store) == min(int(dom) for dom, v in zip(doms, dist) if v == best)


def test_routes_always_in_learned_range(rng):
    store = CentroidStore(3)
    for s in (1, 2, 3):
        store.add_domain(s, rng.normal(size=(5, 3)))
    routes = identify_domains(rng.normal(size=(100, 3)) * 50, store, knn_k=3)
    assert routes.min() >= 1 and routes.max() <= 3


def brute_force_two_means(x):
    """Optimal 2-partition by enumeration; returns sorted cluster means."""
    n = len(x)
    best, best_means = np.inf, None
    for mask in itertools.product([0, 1], repeat=n - 1):
        lab = np.array((0,) + mask)
        if lab.sum() == 0:
            continue
        means = [x[lab == j].mean(0) for j in (0, 1)]
        cost = sum(((x[lab == j] - means[j]) ** 2).sum() for j in (0, 1))
        if cost < best:
            best, best_means = cost, means
    return sorted(map(tuple, best_means))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(4, 12))
def test_kmeans_two_clusters_match_enumeration(seed, n):
    r = np.random.default_rng(seed)
    half = n // 2
    x = np.concatenate([r.normal(0, 0.3, (half, 2)), r.normal(6, 0.3, (n - half, 2))])
    got = sorted(map(tuple, kmeans_fit(x, 2, seed=seed).centers))
    np.testing.assert_allclose(got, brute_force_two_means(x), atol=1e-6)
