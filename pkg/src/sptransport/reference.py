"""Deterministic oracles: spectral semigroups, matrix exponentials, Chernoff
product experiments and Dirichlet exhaustion tables."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.linalg

from .bundles import dagger
from .heat_kernels import dirichlet_deficit, dirichlet_kernel_interval, gaussian_1d, wrapped_gaussian
from .manifolds import TWO_PI, DomainError, wrap_signed

MODE_TOL = 1e-12
HERMITIAN_TOL = 1e-10
CONTRACTION_TOL = 1e-12
QUADRATURE_TOL = 1e-10


# ---------------------------------------------------------------------------
# circle spectra
# ---------------------------------------------------------------------------


def twisted_circle_kernel(alpha: float, t: float, x, y):
    """Kernel of H_alpha on the unit circle.

    Equal to (1/2pi) sum_n exp(-(n + alpha)^2 t) exp(i n (x - y)) and to the
    image sum sum_w g(t, d + 2 pi w) exp(i alpha (d + 2 pi w)), d = y - x. The
    Fourier form is used for t >= 1, the image form below; both stop once
    terms fall under 1e-17 of the leading one.
    """
    if not t > 0:
        raise DomainError("t must be positive")
    d = wrap_signed(np.asarray(y, float) - np.asarray(x, float), TWO_PI)
    if t >= 1.0:
        n_max = int(math.ceil(abs(alpha) + math.sqrt(40.0 / t))) + 1
        total = np.zeros(np.shape(d), dtype=complex)
        for n in range(-n_max, n_max + 1):
            total = total + math.exp(-((n + alpha) ** 2) * t) * np.exp(-1j * n * d)
        return total / TWO_PI
    total = gaussian_1d(t, d) * np.exp(1j * alpha * d)
    lead = gaussian_1d(t, 0.0)
    w = 1
    while True:
        term = 0.0
        for s in (w, -w):
            lift = d + TWO_PI * s
            term = term + gaussian_1d(t, lift) * np.exp(1j * alpha * lift)
        total = total + term
        if gaussian_1d(t, TWO_PI * (w - 0.5)) < 1e-17 * lead:
            return total
        w += 1


def _circle_values(f, theta):
    return np.asarray(f(theta) if callable(f) else f, complex)


def _modes_needed(coeffs):
    """Smallest |n| cutoff keeping all but MODE_TOL of the coefficient mass."""
    n_grid = coeffs.shape[0]
    mass = np.sum(np.abs(coeffs) ** 2, axis=tuple(range(1, coeffs.ndim)))
    freqs = np.abs(np.fft.fftfreq(n_grid, 1.0 / n_grid)).astype(int)
    total = mass.sum()
    order = np.argsort(freqs, kind="stable")
    tail = total - np.cumsum(mass[order])
    ok = np.nonzero(tail <= MODE_TOL**2 * max(total, 1e-300))[0]
    return int(freqs[order][ok[0]]) if len(ok) else n_grid // 2


@dataclass
class SpectralResult:
    values: np.ndarray
    n_modes: int
    dropped_mass: float


def _fourier_hamiltonian(alpha, V, n_modes, rank):
    """H_alpha + V on modes -n_modes..n_modes (block size ``rank``)."""
    modes = np.arange(-n_modes, n_modes + 1)
    m = len(modes)
    H = np.zeros((m * rank, m * rank), dtype=complex)
    H[np.arange(m * rank), np.arange(m * rank)] = np.repeat((modes + alpha) ** 2, rank)
    if V is not None:
        n_grid = 8 * m
        th = TWO_PI * np.arange(n_grid) / n_grid
        vals = np.asarray(V(th[:, None]), complex)
        if vals.ndim == 1:
            vals = vals[:, None, None] * np.eye(rank)
        vhat = np.fft.fft(vals, axis=0) / n_grid  # vhat[q] = coefficient of e^{i q th}
        diff = (modes[:, None] - modes[None, :]) % n_grid
        blocks = vhat[diff]  # (m, m, r, r)
        H += blocks.transpose(0, 2, 1, 3).reshape(m * rank, m * rank)
    return modes, H


def spectral_semigroup_circle(alpha: float, V, t: float, eta, x=None, n_grid: int = 256, rank: int = 1) -> SpectralResult:
    """(exp(-t(H_alpha + V)) eta)(x) on the unit circle.

    ``eta`` and ``V`` are functions of the angle (arrays (N, 1) -> (N,) or
    (N, r) / (N, r, r)). Without ``V`` the answer is exact Fourier damping;
    with ``V`` the truncated Fourier matrix is exponentiated, doubling the
    mode count until the answer stops changing.
    """
    if not t > 0:
        raise DomainError("t must be positive")
    th = TWO_PI * np.arange(n_grid) / n_grid
    x = th if x is None else np.atleast_1d(np.asarray(x, float))
    ev = _circle_values(eta, th[:, None])
    if ev.ndim == 1:
        ev = ev[:, None]
    if ev.shape[1] != rank:
        raise DomainError(f"eta must have {rank} components")
    coef = np.fft.fft(ev, axis=0) / n_grid
    n_eta = _modes_needed(coef)
    freqs = np.fft.fftfreq(n_grid, 1.0 / n_grid).astype(int)
    keep = np.abs(freqs) <= n_eta
    dropped = float(np.sum(np.abs(coef[~keep]) ** 2))

    def evaluate(n_modes):
        modes = np.arange(-n_modes, n_modes + 1)
        c = np.zeros((len(modes), rank), dtype=complex)
        for f, row in zip(freqs[keep], coef[keep]):
            if abs(f) <= n_modes:
                c[f + n_modes] = row
        if V is None:
            c = c * np.exp(-((modes + alpha) ** 2) * t)[:, None]
        else:
            _, H = _fourier_hamiltonian(alpha, V, n_modes, rank)
            c = _expm_apply_hermitian(H, t, c.reshape(-1)).reshape(len(modes), rank)
        return np.einsum("mr,xm->xr", c, np.exp(1j * np.outer(x, modes)))

    n_modes = max(n_eta, 8)
    vals = evaluate(n_modes)
    if V is not None:
        while True:
            finer = evaluate(2 * n_modes)
            change = np.max(np.abs(finer - vals))
            vals, n_modes = finer, 2 * n_modes
            if change < MODE_TOL or n_modes > 4096:
                break
    if rank == 1:
        vals = vals[:, 0]
    return SpectralResult(vals, n_modes, dropped)


def _expm_apply_hermitian(H, t, v):
    w, u = np.linalg.eigh(H)
    return u @ (np.exp(-t * w) * (dagger(u) @ v))


# ---------------------------------------------------------------------------
# grid operators
# ---------------------------------------------------------------------------


@dataclass
class GridOperator:
    grid: dict
    matrix: np.ndarray
    hermitian: bool = True

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix)
        if not np.all(np.isfinite(self.matrix)):
            raise DomainError("grid operator has non-finite entries")
        if self.hermitian and np.max(np.abs(self.matrix - dagger(self.matrix)), initial=0.0) > HERMITIAN_TOL:
            raise DomainError("operator flagged Hermitian is not")

    @property
    def nodes(self) -> np.ndarray:
        return np.asarray(self.grid["nodes"])


def circle_grid_operator(n: int, alpha: float = 0.0, V: Optional[Callable] = None) -> GridOperator:
    """Fourier-collocation H_alpha + V on n equispaced nodes of the unit circle."""
    th = TWO_PI * np.arange(n) / n
    freqs = np.fft.fftfreq(n, 1.0 / n)
    F = np.fft.fft(np.eye(n), axis=0)
    A = (F.conj().T * ((freqs + alpha) ** 2)) @ F / n
    if V is not None:
        A = A + np.diag(np.asarray(V(th[:, None]), float))
    A = 0.5 * (A + dagger(A))
    if alpha == 0 and not np.iscomplexobj(V(th[:, None]) if V is not None else 0.0):
        A = A.real
    return GridOperator({"kind": "circle", "n": n, "alpha": alpha, "nodes": th}, A)


def interval_grid_operator(n: int, a: float, b: float, V: Optional[Callable] = None) -> GridOperator:
    """Second-order finite-difference Dirichlet -d^2/dx^2 + V on n interior nodes."""
    h = (b - a) / (n + 1)
    x = a + h * np.arange(1, n + 1)
    A = (np.diag(np.full(n, 2.0)) - np.diag(np.ones(n - 1), 1) - np.diag(np.ones(n - 1), -1)) / h**2
    if V is not None:
        A = A + np.diag(np.asarray(V(x[:, None]), float))
    return GridOperator({"kind": "interval", "n": n, "a": a, "b": b, "nodes": x}, A)


def matexp_semigroup(op: GridOperator, t: float, eta) -> np.ndarray:
    """exp(-t op) eta; eigendecomposition for Hermitian operators, scaling-and-squaring otherwise."""
    eta = np.asarray(eta)
    if not np.all(np.isfinite(eta)):
        raise DomainError("eta has non-finite entries")
    if op.hermitian:
        w, u = np.linalg.eigh(op.matrix)
        damp = np.exp(-t * w).reshape(-1, *([1] * (eta.ndim - 1)))
        return u @ (damp * (dagger(u) @ eta))
    return scipy.linalg.expm(-t * op.matrix) @ eta


def expm_hermitian_neg(A, t):
    w, u = np.linalg.eigh(A)
    return (u * np.exp(-t * w)) @ dagger(u)


@dataclass
class TrotterReport:
    ks: list
    errors: list
    exponent: float


def trotter_rate(A, B, t: float, eta, ks=(4, 8, 16, 32, 64, 128)) -> TrotterReport:
    """Error of (e^{-tA/k} e^{-tB/k})^k eta against e^{-t(A+B)} eta and its log-log slope."""
    exact = expm_hermitian_neg(A + B, t) @ eta
    errs = []
    for k in ks:
        step = expm_hermitian_neg(A, t / k) @ expm_hermitian_neg(B, t / k)
        v = np.array(eta, dtype=complex if np.iscomplexobj(step) else float)
        for _ in range(k):
            v = step @ v
        errs.append(float(np.max(np.abs(v - exact))))
    if min(errs) <= 0:
        # exact splitting (commuting parts): no rate to fit
        return TrotterReport(list(ks), errs, float("nan"))
    slope = np.polyfit(np.log(ks), np.log(errs), 1)[0]
    return TrotterReport(list(ks), errs, float(-slope))


# ---------------------------------------------------------------------------
# Chernoff products
# ---------------------------------------------------------------------------


def kappa(s):
    """Cut-off profile: 1 on [0, 1/3], 0 on [1/2, inf), quintic smoothstep between."""
    s = np.asarray(s, float)
    u = np.clip((s - 1.0 / 3.0) * 6.0, 0.0, 1.0)
    return 1.0 - u**3 * (10.0 - 15.0 * u + 6.0 * u**2)


def cutoff_weight(d, rad):
    """chi = kappa(d^2 / rad^2)."""
    return kappa(np.square(d) / np.square(rad))


@dataclass
class ChernoffRow:
    k: int
    sup_error: float


@dataclass
class ChernoffReport:
    family: str
    t: float
    test_function: str
    rows: list
    contraction: float
    n_nodes: int
    rad: float
    warnings: list = field(default_factory=list)

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.sup_error for r in self.rows])

    def to_json(self):
        return {
            "family": self.family,
            "t": self.t,
            "test_function": self.test_function,
            "rows": [{"k": r.k, "sup_error": r.sup_error} for r in self.rows],
            "contraction": self.contraction,
            "n_nodes": self.n_nodes,
            "rad": self.rad,
            "warnings": self.warnings,
        }


TEST_FUNCTIONS = {
    "exp_cos": lambda th: np.exp(np.cos(th)),
    "cos": lambda th: np.cos(th),
    "mixed": lambda th: 0.5 + np.cos(th) + 0.3 * np.sin(3 * th),
}


def circle_chernoff_symbol(n: int, s: float, alpha=None, rad: float = 2.5):
    """Kernel row and eigenvalues of the circulant quadrature matrix of S_s or R_s.

    On n equispaced nodes of the unit circle S_s has kernel h(s, x, y) chi(x, y)
    and R_s (for CircleU1(alpha)) has h_alpha(s, x, y) chi(x, y) conj(P(x, y)),
    P(x, y) = exp(-i alpha (x - y)) along the short arc. Both depend on y - x
    only, so the matrix is circulant: ``row[m]`` is the weight of node x + m h.
    """
    if not 0 < rad < math.pi:
        raise DomainError("cut-off radius must lie in (0, pi)")
    d = wrap_signed(TWO_PI * np.arange(n) / n, TWO_PI)  # y - x
    chi = cutoff_weight(d, rad)
    if alpha is None:
        K = wrapped_gaussian(s, d, TWO_PI).astype(complex)
    else:
        K = twisted_circle_kernel(alpha, s, 0.0, d) * np.exp(-1j * alpha * d)
    row = (TWO_PI / n) * K * chi
    # (M f)_i = sum_m row[m] f_{i+m}  ->  eigenvalue for mode q is sum_m row[m] e^{2 pi i q m / n}
    eig = n * np.fft.ifft(row)
    return row, eig


def circle_chernoff_matrix(n: int, s: float, alpha=None, rad: float = 2.5):
    """Dense form of the circulant matrix from :func:`circle_chernoff_symbol`."""
    row, _ = circle_chernoff_symbol(n, s, alpha, rad)
    idx = (np.arange(n)[None, :] - np.arange(n)[:, None]) % n
    return row[idx]


def exact_circle_semigroup(t, f_vals):
    """e^{-tL} f for the scalar Laplacian, by FFT on the grid."""
    n = len(f_vals)
    freqs = np.fft.fftfreq(n, 1.0 / n)
    return np.fft.ifft(np.fft.fft(f_vals) * np.exp(-(freqs**2) * t))


def _apply_power(M, f, k):
    v = np.asarray(f, complex)
    for _ in range(k):
        v = M @ v
    return v


CHERNOFF_RAD = 2.5
MAX_NODES = 2**20


def chernoff_product_error(t: float, ks=(4, 8, 16, 32, 64), alpha=None, f="exp_cos", rad: float = CHERNOFF_RAD, n_nodes=None) -> ChernoffReport:
    """Sup-norm error of (R_{t/k})^k f against e^{-tL} f on the unit circle.

    The node count doubles from 256 until no error changes by more than
    QUADRATURE_TOL; a warning is recorded if that does not happen by
    MAX_NODES. The cut-off profile is only C^2, so the trapezoid rule
    converges algebraically here and large grids are normal; the matrices
    are circulant, so each step costs one FFT.
    """
    func = TEST_FUNCTIONS[f] if isinstance(f, str) else f
    fname = f if isinstance(f, str) else getattr(f, "__name__", "custom")
    warn = []

    def run(n):
        th = TWO_PI * np.arange(n) / n
        fv = func(th)
        exact = exact_circle_semigroup(t, fv)
        errs, contraction = [], 0.0
        fhat = np.fft.fft(fv)
        for k in ks:
            row, eig = circle_chernoff_symbol(n, t / k, alpha, rad)
            contraction = max(contraction, float(np.sum(np.abs(row))))
            # k applications of the operator, done mode by mode
            approx = np.fft.ifft(fhat * eig**k)
            errs.append(float(np.max(np.abs(approx - exact))))
        return np.array(errs), contraction

    if n_nodes is None:
        n = 256
        errs, contraction = run(n)
        while True:
            errs2, c2 = run(2 * n)
            n *= 2
            change = np.max(np.abs(errs2 - errs))
            errs, contraction = errs2, max(contraction, c2)
            if change < QUADRATURE_TOL:
                break
            if n >= MAX_NODES:
                warn.append(f"quadrature not resolved at {n} nodes (change {change:.2e})")
                break
    else:
        n = n_nodes
        errs, contraction = run(n)
    family = "S" if alpha is None else f"R[circle_u1:{alpha!r}]"
    rows = [ChernoffRow(int(k), float(e)) for k, e in zip(ks, errs)]
    return ChernoffReport(family, t, fname, rows, contraction, n, rad, warn)


def interval_chernoff_error(t: float, a: float = 0.0, b: float = 1.0, ks=(4, 8, 16, 32, 64), rad: float = 0.5, panels: int = 64, order: int = 8):
    """Dirichlet S_t on (a, b): kernel h_D(s, x, y) chi_x(x, y) with rad(x) <= distance to the boundary.

    Quadrature is Gauss-Legendre on equal panels; the test function is the
    first Dirichlet eigenfunction, whose exact evolution is a pure decay.
    Returns (errors, max row sum).
    """
    L = b - a
    g, gw = np.polynomial.legendre.leggauss(order)
    edges = np.linspace(a, b, panels + 1)
    h = np.diff(edges)
    x = (0.5 * (edges[:-1, None] + edges[1:, None]) + 0.5 * h[:, None] * g[None, :]).reshape(-1)
    w = (0.5 * h[:, None] * gw[None, :]).reshape(-1)
    f = np.sin(math.pi * (x - a) / L)
    radx = np.minimum(rad, np.minimum(x - a, b - x))
    errs, contraction = [], 0.0
    for k in ks:
        s = t / k
        K = dirichlet_kernel_interval(s, x[:, None], x[None, :], a, b)
        chi = kappa(np.square(x[None, :] - x[:, None]) / np.square(radx[:, None]))
        M = K * chi * w[None, :]
        contraction = max(contraction, float(np.max(np.sum(np.abs(M), axis=1))))
        exact = math.exp(-((math.pi / L) ** 2) * t) * f
        errs.append(float(np.max(np.abs(_apply_power(M, f, k).real - exact))))
    return np.array(errs), contraction


# ---------------------------------------------------------------------------
# exhaustion
# ---------------------------------------------------------------------------


@dataclass
class ExhaustionRow:
    j: int
    a: float
    b: float
    value: float
    deficit: float


@dataclass
class ExhaustionTable:
    t: float
    x: float
    y: float
    free: float
    rows: list

    @property
    def values(self):
        return np.array([r.value for r in self.rows])

    @property
    def deficits(self):
        return np.array([r.deficit for r in self.rows])

    def monotonicity_violations(self) -> int:
        """Steps where the kernel fails to grow, judged on the separately summed deficit."""
        d = self.deficits
        v = self.values
        return int(np.sum(np.diff(d) >= 0) + np.sum(np.diff(v) < 0))

    def bounded(self) -> bool:
        return bool(np.all(self.values <= self.free) and np.all(self.deficits >= 0))

    @property
    def terminal_gap(self) -> float:
        return float(self.rows[-1].deficit)

    def to_json(self):
        return {
            "t": self.t,
            "x": self.x,
            "y": self.y,
            "free": self.free,
            "rows": [vars(r) for r in self.rows],
            "violations": self.monotonicity_violations(),
        }


def exhaustion_convergence(t: float, x: float, y: float, domains) -> ExhaustionTable:
    """Dirichlet kernels on nested intervals ``domains = [(a_1, b_1), ...]``."""
    prev = None
    rows = []
    for j, (a, b) in enumerate(domains, start=1):
        if prev is not None and not (a <= prev[0] and b >= prev[1]):
            raise DomainError("domains must be nested and increasing")
        prev = (a, b)
        val = float(dirichlet_kernel_interval(t, x, y, a, b))
        gap = float(dirichlet_deficit(t, x, y, a, b))
        rows.append(ExhaustionRow(j, a, b, val, gap))
    return ExhaustionTable(t, x, y, float(gaussian_1d(t, x - y)), rows)
