import math

import numpy as np
import pytest

from sptransport.bundles import BundleSpec, CircleU1, LeviCivitaSphere, MatrixForm, TrivialFlat, dagger
from sptransport.feynman_kac import (
    EstimationError,
    Potential,
    circle_u1_bundle,
    diamagnetic_check,
    fk_estimate,
    heat_kernel_estimate,
    potential_from_spec,
    scalar_fk_estimate,
    scalar_weights,
    trotter_weight,
    trotter_weights,
)
from sptransport.heat_kernels import kernel
from sptransport.manifolds import Circle, DomainError, Euclidean, FlatTorus, Sphere2
from sptransport.paths import PathEnsemble, propagate, sample_ensemble, sample_path
from sptransport.reference import spectral_semigroup_circle, twisted_circle_kernel
from sptransport.transport import endpoint_operator, endpoint_operators


def mode(n):
    return lambda x: np.exp(1j * n * x[..., 0])


def test_zero_potential_weight_is_reverse_transport():
    s = Sphere2(1.0)
    spec = BundleSpec(s, LeviCivitaSphere())
    p = sample_path(np.random.default_rng(0), s.point(0, 0, 1), 0.3, 4)
    w = trotter_weight(p, potential_from_spec("zero"), spec)
    assert np.allclose(w.matrix, endpoint_operator(p, spec).adjoint().matrix, atol=1e-14)
    assert w.source_fiber == p.endpoint and w.target_fiber == p.base_point


def test_constant_potential_scales_weight():
    spec = BundleSpec(Euclidean(2), MatrixForm("su2_plane"))
    p = sample_path(np.random.default_rng(1), Euclidean(2).point(0, 0), 0.7, 5)
    w0 = trotter_weight(p, potential_from_spec("zero"), spec).matrix
    w = trotter_weight(p, potential_from_spec("const:1.5"), spec).matrix
    assert np.allclose(w, math.exp(-0.7 * 1.5) * w0, atol=1e-14)


def test_weight_norm_bounded_by_beta():
    t = FlatTorus(2 * math.pi, 2 * math.pi)
    spec = BundleSpec(t, MatrixForm("u2_torus"))
    pot = potential_from_spec("matrix_cos")
    ens = sample_ensemble(t, [0.3, 0.1], 1.2, 5, 200, seed=3)
    K, rej = trotter_weights(spec, pot, ens.nodes, 1.2)
    norms = np.linalg.norm(K, 2, axis=(-2, -1))
    assert np.all(norms <= math.exp(-1.2 * pot.beta) * (1 + 1e-12))


def test_scalar_and_trotter_weights_agree_per_path():
    spec = circle_u1_bundle(0.3)
    ens = sample_ensemble(spec.base, [0.4], 0.8, 6, 500, seed=4)
    pot = potential_from_spec("cos")
    a, ra = trotter_weights(spec, pot, ens.nodes, 0.8)
    b, rb = scalar_weights(spec, pot, ens.nodes, 0.8)
    assert np.array_equal(ra, rb)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_potential_validation():
    bad = Potential("bad", lambda x: np.broadcast_to(np.array([[0, 1], [0, 0]], complex), (*x.shape[:-1], 2, 2)), 0.0, "endomorphism", 2)
    with pytest.raises(DomainError):
        bad.values(np.zeros((3, 1)))
    pot = potential_from_spec("matrix_cos")
    assert pot.check_lower_bound(np.linspace(0, 7, 50)[:, None])
    assert potential_from_spec({"kind": "const", "value": 2}).beta == 2.0
    with pytest.raises(DomainError):
        potential_from_spec("nope")


@pytest.mark.parametrize("n", [0, 1, 2])
def test_fk_flat_circle_fourier_modes(n):
    c = Circle(1.0)
    spec = BundleSpec(c, TrivialFlat(1))
    t, x = 0.5, 0.7
    est = fk_estimate([x], t, mode(n), "zero", spec, k=4, n_paths=20000, seed=n)
    assert est.sigma_distance(math.exp(-n * n * t) * np.exp(1j * n * x)) <= 3.0


@pytest.mark.parametrize("n", [0, 1, -1])
def test_fk_circle_u1_spectrum(n):
    alpha, t, x = 0.3, 0.5, 0.2
    spec = circle_u1_bundle(alpha)
    est = scalar_fk_estimate([x], t, mode(n), "zero", spec, k=5, n_paths=20000, seed=10 + n)
    assert est.sigma_distance(math.exp(-((n + alpha) ** 2) * t) * np.exp(1j * n * x)) <= 3.0


def test_fk_constant_potential_exact_per_path():
    spec = circle_u1_bundle(0.2)
    ens = sample_ensemble(spec.base, [0.0], 0.5, 5, 1000, seed=2)
    a = fk_estimate([0.0], 0.5, mode(1), "zero", spec, k=5, ensemble=ens)
    b = fk_estimate([0.0], 0.5, mode(1), "const:0.8", spec, k=5, ensemble=ens)
    assert np.allclose(b.value, math.exp(-0.4) * a.value, rtol=1e-13)


def test_fk_cos_potential_matches_spectral_oracle():
    c = Circle(1.0)
    spec = BundleSpec(c, TrivialFlat(1))
    est = fk_estimate([0.0], 0.5, lambda x: np.ones(x.shape[:-1]), "cos", spec, k=8, n_paths=20000, seed=5)
    oracle = spectral_semigroup_circle(0.0, lambda th: np.cos(th[..., 0]), 0.5, lambda th: np.ones(th.shape[:-1]), x=0.0)
    assert est.sigma_distance(oracle.values) <= 3.0
    assert est.stderr[0] / abs(est.value[0]) < 0.01


def test_fk_matrix_potential_matches_spectral_oracle():
    # rank 2, non-commuting potential values along the path
    c = Circle(1.0)
    spec = BundleSpec(c, TrivialFlat(2))
    pot = potential_from_spec("matrix_cos")
    eta = lambda x: np.stack([np.ones(x.shape[:-1]), np.exp(1j * x[..., 0])], axis=-1)
    est = fk_estimate([0.5], 0.4, eta, pot, spec, k=8, n_paths=20000, seed=6)
    oracle = spectral_semigroup_circle(0.0, lambda th: pot.values(th), 0.4, eta, x=0.5, rank=2)
    assert est.sigma_distance(np.ravel(oracle.values)) <= 3.0


def test_fk_contraction_bound():
    # |FK value| <= exp(-t beta) * MC of (e^{-tH}|eta|)(x) + 3 sigma
    spec = circle_u1_bundle(0.4)
    ens = sample_ensemble(spec.base, [0.0], 0.6, 5, 5000, seed=7)
    eta = lambda x: (1 + 0.5 * np.cos(x[..., 0])) * np.exp(2j * x[..., 0])
    est = fk_estimate([0.0], 0.6, eta, "cos", spec, k=5, ensemble=ens)
    ref = fk_estimate([0.0], 0.6, lambda x: np.abs(eta(x)), "zero", BundleSpec(spec.base, TrivialFlat(1)), k=5, ensemble=ens)
    assert abs(est.value[0]) <= math.exp(0.6) * ref.value[0].real + 3 * (est.stderr[0] + math.exp(0.6) * ref.stderr[0])


def test_fk_semigroup_through_resampling():
    # one leg over [0, s+u] vs a leg to s followed by fresh legs from each endpoint
    c = Circle(1.0)
    spec = BundleSpec(c, TrivialFlat(1))
    pot = potential_from_spec("cos")
    s, u, n = 0.3, 0.5, 20000
    eta = lambda x: np.cos(x[..., 0]) + 0.5
    direct = fk_estimate([0.0], s + u, eta, pot, spec, k=4, n_paths=n, seed=1)
    # dt = (s+u)/16 = 0.05 in both constructions
    rng = np.random.default_rng(3)
    leg1 = propagate(c, [0.0], s, rng.standard_normal((n, 6, 1, 1)))
    leg2 = propagate(c, leg1[:, -1, :], u, rng.standard_normal((n, 10, 1, 1)))
    w = np.exp(-0.05 * (pot.values(leg1[:, 1:]).sum(-1) + pot.values(leg2[:, 1:]).sum(-1)))
    samples = w * eta(leg2[:, -1])
    se = math.hypot(samples.std() / math.sqrt(n), direct.stderr[0])
    assert abs(samples.mean() - direct.value[0]) <= 3 * se


def test_fk_all_rejected_raises():
    s = Sphere2(1.0)
    spec = BundleSpec(s, LeviCivitaSphere())
    nodes = np.broadcast_to(np.array([[0, 0, 1.0], [0, 0, -1.0]]), (4, 2, 3))
    ens = PathEnsemble(s, [0, 0, 1.0], 1.0, 0, nodes)
    with pytest.raises(EstimationError):
        fk_estimate([0, 0, 1.0], 1.0, lambda x: np.ones(x.shape[:-1]), "zero", spec, k=0, ensemble=ens)


def test_fk_json_report():
    spec = circle_u1_bundle(0.3)
    est = fk_estimate([0.0], 0.5, mode(0), "zero", spec, k=3, n_paths=100, seed=1)
    doc = est.to_json(oracle=[math.exp(-0.09 * 0.5)])
    assert doc["schema_version"] == 1 and doc["inputs"]["seed"] == 1
    assert set(doc["estimate"]) == {"re", "im"} and "sigma_distance" in doc


# -- heat kernel estimates -------------------------------------------------


def test_kernel_estimate_flat_equals_h_identity():
    e = Euclidean(2)
    spec = BundleSpec(e, TrivialFlat(2))
    est = heat_kernel_estimate(0.5, [0, 0], [0.5, 0.2], spec, k=4, n_paths=200, seed=0)
    h = kernel(e, 0.5, [0, 0], [0.5, 0.2])
    assert np.allclose(est.matrix, h * np.eye(2), rtol=1e-14)


def test_kernel_estimate_circle_u1_matches_fourier():
    alpha, t = 0.3, 1.0
    spec = circle_u1_bundle(alpha)
    for i, (x, y) in enumerate(((0.0, 1.5), (0.5, 3.5), (2.0, 1.0))):
        est = heat_kernel_estimate(t, [x], [y], spec, k=5, n_paths=20000, seed=i)
        exact = twisted_circle_kernel(alpha, t, x, y)
        assert abs(est.matrix[0, 0] - exact) <= 3 * est.entry_stderr()
        assert abs(exact) <= float(kernel(spec.base, t, [x], [y])) + 1e-15


def test_kernel_estimate_diagonal_needs_windings_sampled():
    # x = y at t = 1: a bridge winds with probability ~1e-4, so 1e4 paths often see
    # none and the sample stderr collapses; with 2e5 paths the classes are resolved
    spec = circle_u1_bundle(0.3)
    exact = twisted_circle_kernel(0.3, 1.0, 0.0, 0.0)
    est = heat_kernel_estimate(1.0, [0.0], [0.0], spec, k=3, n_paths=200000, seed=1)
    assert abs(est.matrix[0, 0] - exact) <= 3 * est.entry_stderr()
    assert est.entry_stderr() > 1e-7


def test_twisted_kernel_forms_agree():
    for t in (0.3, 0.9, 1.0, 2.0):
        for a in (0.0, 0.3, 0.5, -0.7):
            im = twisted_circle_kernel(a, t * (1 - 1e-12), 0.2, 2.9)
            fo = twisted_circle_kernel(a, t * (1 + 1e-12), 0.2, 2.9)
            assert im == pytest.approx(fo, abs=1e-10)
    assert twisted_circle_kernel(0.0, 0.4, 0.1, 1.0) == pytest.approx(kernel(Circle(1.0), 0.4, [0.1], [1.0]), rel=1e-12)


def test_gauge_covariance_integer_shift():
    t, x, y = 0.8, 0.3, 2.2
    a = heat_kernel_estimate(t, [x], [y], circle_u1_bundle(0.3), k=5, n_paths=2000, seed=9)
    b = heat_kernel_estimate(t, [x], [y], circle_u1_bundle(1.3), k=5, n_paths=2000, seed=9)
    # per path the extra factor is exp(i * lifted displacement) = exp(i (y - x))
    assert b.matrix[0, 0] == pytest.approx(np.exp(1j * (y - x)) * a.matrix[0, 0], abs=1e-10)
    assert abs(a.op_norm - b.op_norm) <= 1e-10


def test_diamagnetic_flat_and_u1():
    pairs = [([0.0], [0.0]), ([0.0], [1.0]), ([0.5], [3.0])]
    flat = diamagnetic_check(0.5, pairs, BundleSpec(Circle(1.0), TrivialFlat(1)), k=4, n_paths=500)
    assert all(r["ratio"] == pytest.approx(1.0, abs=1e-12) for r in flat.rows)
    rep = diamagnetic_check(0.5, pairs, circle_u1_bundle(0.5), k=4, n_paths=4000)
    assert rep.max_violation_sigma <= 3.0
    assert all(r["ratio"] <= 1 + 3 * r["stderr"] / r["scalar_kernel"] for r in rep.rows)


def test_diamagnetic_ratio_decreases_with_alpha():
    # closed-form probe: |h_alpha| / h falls as |alpha| goes from 0 to 1/2
    t, x, y = 1.0, 0.0, 0.0
    h = float(kernel(Circle(1.0), t, [x], [y]))
    ratios = [abs(twisted_circle_kernel(a, t, x, y)) / h for a in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)]
    assert ratios[0] == pytest.approx(1.0)
    assert all(b < a for a, b in zip(ratios, ratios[1:]))


def test_sphere_kernel_estimate_needs_opt_in():
    s = Sphere2(1.0)
    spec = BundleSpec(s, LeviCivitaSphere())
    with pytest.raises(DomainError):
        heat_kernel_estimate(0.2, [0, 0, 1.0], [1.0, 0, 0], spec, k=3, n_paths=10)
    est = heat_kernel_estimate(0.2, [0, 0, 1.0], [0.6, 0, 0.8], spec, k=3, n_paths=200, biased_ok=True)
    assert est.op_norm <= est.scalar_kernel * (1 + 1e-12)


def test_endpoint_operators_dagger_is_inverse():
    spec = circle_u1_bundle(0.7)
    ens = sample_ensemble(spec.base, [0.0], 0.5, 3, 10, seed=0)
    ops, _ = endpoint_operators(spec, ens.nodes)
    assert np.allclose(dagger(ops) @ ops, 1.0)
