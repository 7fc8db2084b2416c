import math

import numpy as np
import pytest

from sptransport import streams
from sptransport.manifolds import Circle, DomainError, Euclidean, FlatTorus, Sphere2
from sptransport.paths import (
    DyadicPath,
    PathEnsemble,
    max_step,
    refine,
    refine_ensemble,
    sample_bridge_ensemble,
    sample_bridge_path,
    sample_ensemble,
    sample_path,
)


def test_depth_zero_path_is_single_increment():
    e = Euclidean(1)
    x0 = e.point(0.5)
    p = sample_path(np.random.default_rng(1), x0, 0.7, 0)
    assert p.nodes.shape == (2, 1) and p.node(0) == x0
    z = np.random.default_rng(1).standard_normal((1, 1, 1))
    assert p.nodes[1, 0] == pytest.approx(0.5 + math.sqrt(1.4) * z[0, 0, 0])


def test_path_invariants_and_determinism():
    for m, x0 in ((Sphere2(1.0), (0, 0, 1)), (Circle(1.0), (1.0,)), (FlatTorus(1.0, 2.0), (0.5, 0.5))):
        a = sample_path(np.random.default_rng(7), m.point(*x0), 0.4, 5)
        b = sample_path(np.random.default_rng(7), m.point(*x0), 0.4, 5)
        assert np.array_equal(a.nodes, b.nodes)
        assert len(a.points) == 33 and a.node(0) == m.point(*x0)
        assert np.allclose(a.times, np.linspace(0, 0.4, 33))


def test_euclidean_endpoint_law_any_depth():
    e = Euclidean(1)
    for k in (0, 3, 6):
        ens = sample_ensemble(e, [0.0], 0.5, k, 20000, seed=k)
        end = ens.nodes[:, -1, 0]
        assert abs(end.mean()) < 4 * math.sqrt(1.0 / 20000)
        assert end.var() == pytest.approx(1.0, rel=0.04)


def test_euclidean_covariance_two_min():
    e = Euclidean(1)
    ens = sample_ensemble(e, [0.0], 1.0, 3, 100000, seed=3)
    t = ens.at_depth(3)[..., 0]
    times = np.linspace(0, 1, 9)
    for i in (2, 5):
        for j in (3, 8):
            prod = t[:, i] * t[:, j]
            se = prod.std() / math.sqrt(len(prod))
            assert abs(prod.mean() - 2 * min(times[i], times[j])) < 4 * se


def test_ensemble_matches_single_path_streams():
    for m, x0 in ((Sphere2(1.0), [0, 0, 1.0]), (Circle(2.0), [0.3])):
        ens = sample_ensemble(m, x0, 0.3, 4, 5, seed=9, experiment="e")
        for i in range(5):
            p = sample_path(streams.stream(9, "e", i), m.point(*x0), 0.3, 4)
            assert np.array_equal(p.nodes, ens.nodes[i])


def test_ensemble_independent_of_thread_count(monkeypatch):
    m = Circle(1.0)
    a = sample_ensemble(m, [0.0], 1.0, 3, 600, seed=5)
    monkeypatch.setenv("SPTRANSPORT_THREADS", "4")
    b = sample_ensemble(m, [0.0], 1.0, 3, 600, seed=5)
    assert np.array_equal(a.nodes, b.nodes)


def test_refine_preserves_nodes():
    for m, x0 in ((Euclidean(2), (0.0, 0.0)), (Circle(1.0), (0.0,)), (FlatTorus(1.0, 1.0), (0.2, 0.3))):
        p = sample_path(np.random.default_rng(2), m.point(*x0), 1.0, 3)
        q = refine(p, np.random.default_rng(3))
        assert q.depth == 4 and np.array_equal(q.nodes[::2], p.nodes)
        assert np.array_equal(q.at_depth(3).nodes, p.nodes)


def test_refine_euclidean_midpoint_variance():
    # bridge midpoint of an increment of length D has variance D/2 (variance-2t convention)
    e = Euclidean(1)
    ens = sample_ensemble(e, [0.0], 1.0, 1, 20000, seed=1)
    fine = refine_ensemble(ens)
    assert np.array_equal(fine.nodes[:, ::2], ens.nodes)
    resid = fine.nodes[:, 1, 0] - 0.5 * (ens.nodes[:, 0, 0] + ens.nodes[:, 1, 0])
    assert resid.mean() == pytest.approx(0.0, abs=4 * math.sqrt(0.25 / 20000))
    assert resid.var() == pytest.approx(0.25, rel=0.05)
    # endpoint marginal unchanged, and the refined law matches a fresh depth-2 sample
    fresh = sample_ensemble(e, [0.0], 1.0, 2, 20000, seed=2).nodes[..., 0]
    assert fine.nodes[:, 1, 0].var() == pytest.approx(fresh[:, 1].var(), rel=0.06)


def test_sphere_refine_requires_opt_in():
    s = Sphere2(1.0)
    p = sample_path(np.random.default_rng(2), s.point(0, 0, 1), 0.1, 2)
    with pytest.raises(DomainError):
        refine(p, np.random.default_rng(0))
    q = refine(p, np.random.default_rng(0), biased_ok=True)
    assert np.allclose(np.linalg.norm(q.nodes, axis=1), 1.0)


def test_bridge_endpoints_pinned_and_mean_line():
    e = Euclidean(2)
    rng = np.random.default_rng(4)
    x0, y = e.point(0, 0), e.point(2, -1)
    p = sample_bridge_path(rng, x0, y, 1.0, 4)
    assert p.node(0) == x0 and p.endpoint == y
    ens = sample_bridge_ensemble(e, [0, 0], [2, -1], 1.0, 3, 20000, seed=1)
    assert np.array_equal(ens.nodes[:, -1], np.broadcast_to([2.0, -1.0], (20000, 2)))
    line = np.linspace(0, 1, 9)[:, None] * np.array([2.0, -1.0])
    s = np.linspace(0, 1, 9)
    se = np.sqrt(2 * s * (1 - s) / 20000)[:, None]
    assert np.all(np.abs(ens.nodes.mean(0) - line) <= 4 * se + 1e-15)


def test_circle_bridge_loop_time_reversal():
    # x0 = y: node j and node 2^k - j have the same law
    c = Circle(1.0)
    ens = sample_bridge_ensemble(c, [1.0], [1.0], 2.0, 3, 20000, seed=6)
    th = ens.nodes[..., 0]
    for j in (1, 2, 3):
        a, b = np.cos(th[:, j]), np.cos(th[:, 8 - j])
        se = math.sqrt((a.var() + b.var()) / 20000)
        assert abs(a.mean() - b.mean()) < 4 * se
        a, b = np.sin(th[:, j]), np.sin(th[:, 8 - j])
        se = math.sqrt((a.var() + b.var()) / 20000)
        assert abs(a.mean() - b.mean()) < 4 * se


def test_circle_bridge_midpoint_symmetric_about_x():
    c = Circle(1.0)
    ens = sample_bridge_ensemble(c, [0.0], [0.0], 1.5, 1, 20000, seed=8)
    s = np.sin(ens.nodes[:, 1, 0])
    assert abs(s.mean()) < 4 * s.std() / math.sqrt(20000)


def test_max_step_examples():
    e = Euclidean(1)
    const = DyadicPath(e.point(0.0), 1.0, 2, np.zeros((5, 1)))
    assert max_step(const) == 0.0
    line = DyadicPath(e.point(0.0), 1.0, 2, 0.3 * np.arange(5.0)[:, None])
    assert max_step(line) == pytest.approx(0.3)


def test_sphere_cut_fraction_decreases_with_depth():
    s = Sphere2(1.0)
    ens = sample_ensemble(s, [0, 0, 1.0], 5.0, 5, 2000, seed=2)
    frac = [np.mean(ens.max_steps(k) >= s.cut_radius()) for k in range(6)]
    # more steps first give more chances to jump far; past the peak the fraction falls to 0
    peak = int(np.argmax(frac))
    assert frac[peak] > 0.01 and frac[-1] == 0.0
    assert all(b <= a for a, b in zip(frac[peak:], frac[peak + 1 :]))


def test_dyadic_path_validation():
    e = Euclidean(1)
    with pytest.raises(DomainError):
        DyadicPath(e.point(0.0), 1.0, 2, np.zeros((4, 1)))
    with pytest.raises(DomainError):
        DyadicPath(e.point(0.0), 1.0, 1, np.ones((3, 1)))
    with pytest.raises(DomainError):
        sample_path(np.random.default_rng(0), e.point(0.0), -1.0, 2)


def test_binary_and_csv_round_trip():
    s = Sphere2(2.0)
    ens = sample_ensemble(s, [0, 0, 2.0], 0.2, 3, 7, seed=2**63 + 5, experiment="rt")
    data = ens.to_bytes()
    assert data[:4] == b"DYAD"
    back = PathEnsemble.from_bytes(data)
    assert np.array_equal(back.nodes, ens.nodes) and back.manifold == s
    assert back.seed == ens.seed and back.metadata == ens.metadata
    lines = ens.to_csv(k=1).splitlines()
    assert lines[0] == "path_id,j,time,c0,c1,c2"
    assert len(lines) == 1 + 7 * 3
    with pytest.raises(DomainError):
        PathEnsemble.from_bytes(b"NOPE" + data[4:])


def test_sphere_ensemble_metadata():
    ens = sample_ensemble(Sphere2(1.0), [0, 0, 1.0], 0.2, 2, 3, seed=0)
    assert ens.metadata["guard_triggered"] and ens.metadata["substeps"] == 5
    flat = sample_ensemble(Euclidean(1), [0.0], 0.2, 2, 3, seed=0)
    assert not flat.metadata["guard_triggered"]
