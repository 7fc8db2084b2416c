import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sptransport.heat_kernels import kernel
from sptransport.manifolds import Circle, DomainError
from sptransport.reference import (
    GridOperator,
    chernoff_product_error,
    circle_chernoff_matrix,
    circle_chernoff_symbol,
    circle_grid_operator,
    exhaustion_convergence,
    interval_chernoff_error,
    interval_grid_operator,
    kappa,
    matexp_semigroup,
    spectral_semigroup_circle,
    trotter_rate,
    twisted_circle_kernel,
)

cos_v = lambda th: np.cos(th[..., 0])
one = lambda th: np.ones(th.shape[:-1])


def test_spectral_free_mode():
    res = spectral_semigroup_circle(0.0, None, 0.7, lambda th: np.exp(1j * th[..., 0]))
    th = 2 * math.pi * np.arange(256) / 256
    assert np.allclose(res.values, math.exp(-0.7) * np.exp(1j * th), atol=1e-14)
    assert res.dropped_mass < 1e-12


def test_spectral_lowest_decay_rate():
    # min_n (n + 0.3)^2 = 0.09: the constant mode decays slowest
    t = 3.0
    res = spectral_semigroup_circle(0.3, None, t, one, x=0.0)
    assert res.values[0] == pytest.approx(math.exp(-0.09 * t), rel=1e-13)
    rates = [-math.log(abs(spectral_semigroup_circle(0.3, None, t, lambda th, n=n: np.exp(1j * n * th[..., 0]), x=0.0).values[0])) / t for n in range(-3, 4)]
    assert min(rates) == pytest.approx(0.09)


def test_spectral_with_potential_self_convergence_and_grid_agreement():
    t = 0.5
    a = spectral_semigroup_circle(0.0, cos_v, t, one, x=np.array([0.0, 1.0, 2.0]))
    b = spectral_semigroup_circle(0.0, cos_v, t, one, x=np.array([0.0, 1.0, 2.0]), n_grid=512)
    assert np.max(np.abs(a.values - b.values)) < 1e-8
    for n in (32, 64):
        op = circle_grid_operator(n, 0.0, cos_v)
        th = op.nodes
        grid = matexp_semigroup(op, t, np.ones(n))
        spec = spectral_semigroup_circle(0.0, cos_v, t, one, x=th)
        assert np.max(np.abs(grid - spec.values)) < 1e-8


def test_twisted_grid_operator_matches_spectral():
    op = circle_grid_operator(48, 0.3, cos_v)
    eta = np.exp(2j * op.nodes)
    grid = matexp_semigroup(op, 0.4, eta)
    spec = spectral_semigroup_circle(0.3, cos_v, 0.4, lambda th: np.exp(2j * th[..., 0]), x=op.nodes)
    assert np.max(np.abs(grid - spec.values)) < 1e-8


def test_matexp_trivial_cases():
    zero = GridOperator({"nodes": np.arange(3)}, np.zeros((3, 3)))
    eta = np.array([1.0, -2.0, 3.0])
    assert np.allclose(matexp_semigroup(zero, 1.3, eta), eta)
    d = np.array([0.5, 1.0, 2.0])
    diag = GridOperator({"nodes": np.arange(3)}, np.diag(d))
    assert np.allclose(matexp_semigroup(diag, 0.7, eta), np.exp(-0.7 * d) * eta, rtol=1e-14)
    nonherm = GridOperator({"nodes": np.arange(2)}, np.array([[1.0, 1.0], [0.0, 1.0]]), hermitian=False)
    assert np.allclose(matexp_semigroup(nonherm, 1.0, np.array([0.0, 1.0])), [-math.exp(-1), math.exp(-1)])
    with pytest.raises(DomainError):
        GridOperator({}, np.array([[0.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(DomainError):
        GridOperator({}, np.array([[np.nan]]))


def test_interval_grid_operator_lowest_eigenvalue():
    op = interval_grid_operator(400, 0.0, math.pi)
    assert np.linalg.eigvalsh(op.matrix)[0] == pytest.approx(1.0, rel=1e-4)


def test_trotter_rate_non_commuting():
    op = interval_grid_operator(60, 0.0, math.pi)
    B = np.diag(5 * np.sin(3 * op.nodes))
    rep = trotter_rate(op.matrix, B, 0.5, np.sin(op.nodes))
    assert abs(rep.exponent - 1.0) <= 0.2
    assert all(b < a for a, b in zip(rep.errors, rep.errors[1:]))


def test_trotter_commuting_exact():
    A = np.diag([1.0, 2.0, 3.0])
    B = np.diag([0.5, -1.0, 0.2])
    rep = trotter_rate(A, B, 1.0, np.ones(3), ks=(2, 4, 8))
    assert max(rep.errors) < 1e-14


# -- Chernoff ----------------------------------------------------------------


def test_kappa_plateaus():
    s = np.linspace(0, 1, 1001)
    k = kappa(s)
    assert np.all(k[s <= 1 / 3] == 1.0) and np.all(k[s >= 0.5] == 0.0)
    assert np.all(np.diff(k) <= 0)


def test_chernoff_symbol_matches_dense_matrix():
    n = 64
    rng = np.random.default_rng(0)
    f = rng.standard_normal(n)
    for alpha in (None, 0.3):
        M = circle_chernoff_matrix(n, 0.1, alpha)
        _, eig = circle_chernoff_symbol(n, 0.1, alpha)
        assert np.allclose(M @ f, np.fft.ifft(np.fft.fft(f) * eig), atol=1e-13)


def test_chernoff_kernel_row_uses_twisted_kernel():
    # R_s kernel times conj(P) equals h_alpha * exp(-i alpha d); on the diagonal that is h_alpha(s, x, x)
    row, _ = circle_chernoff_symbol(128, 0.2, 0.4)
    assert row[0] == pytest.approx(2 * math.pi / 128 * twisted_circle_kernel(0.4, 0.2, 0.0, 0.0))
    srow, _ = circle_chernoff_symbol(128, 0.2, None)
    assert srow[0] == pytest.approx(2 * math.pi / 128 * float(kernel(Circle(1.0), 0.2, [0.0], [0.0])))


@pytest.mark.parametrize("alpha", [None, 0.3])
def test_chernoff_errors_decrease_and_contract(alpha):
    errs = []
    for t in (0.5, 1.0, 2.0):
        rep = chernoff_product_error(t, alpha=alpha)
        assert not rep.warnings
        assert rep.contraction <= 1 + 1e-12
        assert np.all(rep.errors >= 0)
        errs.append(rep.errors)
    avg = np.mean(errs, axis=0)
    assert np.all(np.diff(avg) < 0)
    assert avg[-1] < avg[1] / 4


def test_chernoff_small_t_slope_bounded():
    # k = 1: error / t stays bounded as t -> 0
    ratios = [chernoff_product_error(t, ks=(1,), n_nodes=4096).errors[0] / t for t in (0.04, 0.02, 0.01, 0.005)]
    assert max(ratios) < 2 * ratios[0] + 1e-12


def test_chernoff_contraction_on_random_functions():
    rng = np.random.default_rng(1)
    M = circle_chernoff_matrix(256, 0.3, 0.5)
    for _ in range(10):
        f = rng.uniform(-1, 1, 256) + 1j * rng.uniform(-1, 1, 256)
        assert np.max(np.abs(M @ f)) <= np.max(np.abs(f)) * (1 + 1e-12)


def test_chernoff_rejects_bad_radius():
    with pytest.raises(DomainError):
        circle_chernoff_symbol(64, 0.1, None, rad=3.5)


def test_interval_chernoff_decreases():
    errs, contraction = interval_chernoff_error(0.05, 0.0, 1.0, ks=(4, 8, 16, 32))
    assert np.all(np.diff(errs) < 0)
    assert contraction <= 1 + 1e-12


# -- exhaustion --------------------------------------------------------------


def test_exhaustion_example():
    tab = exhaustion_convergence(0.25, 0.0, 0.0, [(-j, j) for j in range(1, 7)])
    assert tab.free == pytest.approx((4 * math.pi * 0.25) ** -0.5)
    assert tab.monotonicity_violations() == 0
    assert tab.bounded()
    assert tab.values[-1] == pytest.approx(tab.free, rel=1e-15)
    assert 0 < tab.terminal_gap < 1e-50
    assert tab.to_json()["violations"] == 0


@given(st.floats(0.01, 2.0), st.floats(-0.9, 0.9), st.floats(-0.9, 0.9))
@settings(max_examples=50, deadline=None)
def test_exhaustion_monotone_property(t, x, y):
    tab = exhaustion_convergence(t, x, y, [(-j, j) for j in (1, 1.5, 2, 3)])
    assert np.all(np.diff(tab.values) >= -1e-15 * tab.free)
    assert np.all(tab.values <= tab.free * (1 + 1e-15))


def test_exhaustion_rejects_non_nested():
    with pytest.raises(DomainError):
        exhaustion_convergence(0.1, 0.0, 0.0, [(-2, 2), (-1, 1)])
