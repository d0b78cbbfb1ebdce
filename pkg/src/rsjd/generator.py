"""Numeric evaluation of the hybrid-process generator and drift certificates.

The generator of the pair (analog state, regime) splits into a local
differential part, a compensated jump integral over the mark measure, and a
regime-exchange sum with state-dependent rates:

    A f(x,k) = 1/2 tr(a D^2 f) + <b, D f>
               + int_U [f(x + c(x,k,u), k) - f(x,k) - <D f, c(x,k,u)>] nu(du)
               + sum_l q_kl(x) [f(x,l) - f(x,k)].

The mark integral is split at a small cutoff: the outer part is computed by
adaptive quadrature, the inner part is bounded by a second-order Taylor
estimate and reported as an interval half-width instead of being silently
absorbed.  The regime sum is truncated with the rate matrix's certified tail
bound; the residual also lands in the reported bracket.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
from scipy import integrate

from .errors import QuadratureError, TruncationError
from .model import HybridState, ModelSpec

__all__ = [
    "TestFunction",
    "as_test_function",
    "GeneratorValue",
    "apply_generator",
    "LyapunovCertificate",
    "DriftReport",
    "check_lyapunov",
    "DynkinResult",
    "dynkin_check",
]


# ---------------------------------------------------------------------------
# Test functions


@dataclass(frozen=True)
class TestFunction:
    """A scalar function of the hybrid state with optional analytic derivatives.

    ``fn(x, k)`` follows the usual broadcasting convention (x: (..., d),
    k: (...)).  When ``grad``/``hess`` are absent, central finite differences
    with step ``fd_scale * (1 + |x|)`` are used.  ``bounded``/``bound`` feed
    the estimators that require sup|f|; ``regime_tail(x, k, L)`` bounds
    sum_{l>L} q_kl(x) |f(x,l) - f(x,k)| for unbounded-in-k functions;
    ``k_independent`` declares that the regime-exchange term vanishes
    identically.
    """

    fn: Callable[..., np.ndarray]
    grad: Callable[..., np.ndarray] | None = None
    hess: Callable[..., np.ndarray] | None = None
    bounded: bool = False
    bound: float | None = None
    fd_scale: float = 1e-5
    regime_tail: Callable[..., float] | None = None
    k_independent: bool = False
    label: str = "f"

    __test__ = False  # keep pytest from collecting this as a test class

    def __post_init__(self):
        if self.bounded and self.bound is None:
            raise ValueError("bounded test functions must declare their sup-norm bound")

    def value(self, x, k):
        return self.fn(x, k)

    def _fd_step(self, x: np.ndarray) -> float:
        return self.fd_scale * (1.0 + float(np.linalg.norm(x)))

    def gradient(self, x, k) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.grad is not None:
            return np.asarray(self.grad(x, k), dtype=float)
        h = self._fd_step(x)
        g = np.empty_like(x)
        for i in range(x.shape[0]):
            e = np.zeros_like(x)
            e[i] = h
            g[i] = (float(self.fn(x + e, k)) - float(self.fn(x - e, k))) / (2.0 * h)
        return g

    def hessian(self, x, k) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.hess is not None:
            return np.asarray(self.hess(x, k), dtype=float)
        d = x.shape[0]
        h = self._fd_step(x)
        H = np.empty((d, d))
        f0 = float(self.fn(x, k))
        for i in range(d):
            ei = np.zeros(d)
            ei[i] = h
            H[i, i] = (float(self.fn(x + ei, k)) - 2.0 * f0 + float(self.fn(x - ei, k))) / h ** 2
            for j in range(i + 1, d):
                ej = np.zeros(d)
                ej[j] = h
                H[i, j] = H[j, i] = (
                    float(self.fn(x + ei + ej, k)) - float(self.fn(x + ei - ej, k))
                    - float(self.fn(x - ei + ej, k)) + float(self.fn(x - ei - ej, k))
                ) / (4.0 * h ** 2)
        return H

    def check_derivatives(self, points) -> float:
        """Worst relative mismatch between analytic derivatives and central
        finite differences over the probe points (0.0 when none declared)."""
        worst = 0.0
        for p in points:
            x, k = np.asarray(p.x, dtype=float), p.k
            if self.grad is not None:
                fd = TestFunction(self.fn, fd_scale=self.fd_scale).gradient(x, k)
                num = np.linalg.norm(np.asarray(self.grad(x, k), dtype=float) - fd)
                worst = max(worst, num / (1.0 + np.linalg.norm(fd)))
            if self.hess is not None:
                fd = TestFunction(self.fn, fd_scale=self.fd_scale).hessian(x, k)
                num = np.linalg.norm(np.asarray(self.hess(x, k), dtype=float) - fd)
                worst = max(worst, num / (1.0 + np.linalg.norm(fd)))
        return worst


def as_test_function(f, bound: float | None = None, **kw) -> TestFunction:
    if isinstance(f, TestFunction):
        return f
    return TestFunction(fn=f, bounded=bound is not None, bound=bound, **kw)


class GeneratorValue(NamedTuple):
    """A generator evaluation as [value +/- bracket]."""

    value: float
    bracket: float


# ---------------------------------------------------------------------------
# Quadrature helpers


def _quad(f, a, b, tol):
    out = integrate.quad(f, a, b, epsabs=tol, epsrel=max(tol, 1e-11),
                         limit=300, full_output=1)
    val, err = out[0], out[1]
    if err > max(100.0 * tol, 1e-6 * (1.0 + abs(val))):
        raise QuadratureError(
            f"quadrature on [{a}, {b}] did not converge: value={val}, abserr={err}")
    return val, err


def _jump_outer_integral(spec: ModelSpec, f: TestFunction, x: np.ndarray, k: int,
                         grad: np.ndarray, eps: float, quad_tol: float):
    """int_{|u|>eps} [f(x+c) - f(x) - <Df, c>] nu(du) by adaptive quadrature."""
    meas = spec.jump_measure
    f0 = float(f.fn(x, k))

    def increment(u_vec):
        c = np.asarray(spec.jump_coeff(x, k, u_vec), dtype=float)
        return float(f.fn(x + c, k)) - f0 - float(grad @ c)

    if meas.mark_dim == 1:
        def phi(u):
            uv = np.array([u])
            return increment(uv) * float(meas.density(uv))

        v1, e1 = _quad(phi, eps, meas.radius_max, quad_tol)
        v2, e2 = _quad(phi, -meas.radius_max, -eps, quad_tol)
        return v1 + v2, e1 + e2
    if meas.mark_dim == 2 and spec.jump_radial:
        if meas.radial_density is not None:
            rad = meas.radial_density
        else:
            def rad(r):
                return 2.0 * np.pi * r * float(meas.density(np.array([r, 0.0])))

        def phi(r):
            uv = np.array([r, 0.0])
            return increment(uv) * float(rad(r))

        return _quad(phi, eps, meas.radius_max, quad_tol)
    raise NotImplementedError(
        "jump integrals are implemented for 1-d marks and radially symmetric 2-d marks")


def _small_second_moment(spec: ModelSpec, x: np.ndarray, k: int, eps: float,
                         quad_tol: float) -> float:
    """int_{|u|<=eps} |c(x,k,u)|^2 nu(du), closed form when available."""
    if spec.small_jump_cov is not None:
        return float(np.trace(np.asarray(spec.small_jump_cov(x, k, eps), dtype=float)))
    meas = spec.jump_measure

    def c2(u_vec):
        c = np.asarray(spec.jump_coeff(x, k, u_vec), dtype=float)
        return float(c @ c)

    if meas.mark_dim == 1:
        def phi(u):
            uv = np.array([u])
            return c2(uv) * float(meas.density(uv))

        v1, _ = _quad(phi, 0.0, eps, quad_tol)
        v2, _ = _quad(phi, -eps, 0.0, quad_tol)
        return v1 + v2
    if meas.mark_dim == 2 and spec.jump_radial:
        if meas.radial_density is not None:
            rad = meas.radial_density
        else:
            def rad(r):
                return 2.0 * np.pi * r * float(meas.density(np.array([r, 0.0])))

        def phi(r):
            return c2(np.array([r, 0.0])) * float(rad(r))

        v, _ = _quad(phi, 0.0, eps, quad_tol)
        return v
    raise NotImplementedError(
        "jump integrals are implemented for 1-d marks and radially symmetric 2-d marks")


def _jump_second_moment_quadrature(spec: ModelSpec, x, k: int, quad_tol: float = 1e-10) -> float:
    """Quadrature value of the full int |c(x,k,u)|^2 nu(du) (validation cross-check)."""
    from dataclasses import replace

    x = np.asarray(x, dtype=float)
    meas = spec.jump_measure
    eps = 0.5 * meas.radius_max
    # force the quadrature route below eps so the cross-check stays independent
    # of any closed-form small-jump covariance the model declares
    small_spec = replace(spec, small_jump_cov=None) if spec.small_jump_cov is not None else spec
    below = _small_second_moment(small_spec, x, k, eps, quad_tol)

    def c2(u_vec):
        c = np.asarray(spec.jump_coeff(x, k, u_vec), dtype=float)
        return float(c @ c)

    if meas.mark_dim == 1:
        def phi(u):
            uv = np.array([u])
            return c2(uv) * float(meas.density(uv))

        above = _quad(phi, eps, meas.radius_max, quad_tol)[0] + \
            _quad(phi, -meas.radius_max, -eps, quad_tol)[0]
    else:
        if meas.radial_density is not None:
            rad = meas.radial_density
        else:
            def rad(r):
                return 2.0 * np.pi * r * float(meas.density(np.array([r, 0.0])))

        def phi(r):
            return c2(np.array([r, 0.0])) * float(rad(r))

        above = _quad(phi, eps, meas.radius_max, quad_tol)[0]
    return below + above


def _hessian_sup_estimate(spec: ModelSpec, f: TestFunction, x: np.ndarray, k: int,
                          eps: float) -> float:
    """Heuristic sup of ||D^2 f|| over the range reachable by small jumps.

    Probes the Hessian spectral norm at x and at axis displacements of size
    sup_{|u|=eps} |c(x,k,u)|; a bound estimate for the reported bracket, not
    a certified constant.
    """
    meas = spec.jump_measure
    if meas.mark_dim == 1:
        dirs = [np.array([eps]), np.array([-eps])]
    else:
        angles = np.linspace(0.0, 2.0 * np.pi, 8, endpoint=False)
        dirs = [eps * np.array([np.cos(a), np.sin(a)]) for a in angles]
    csup = max(float(np.linalg.norm(np.asarray(spec.jump_coeff(x, k, u), dtype=float)))
               for u in dirs)

    def hnorm(pt):
        return float(np.max(np.abs(np.linalg.eigvalsh(f.hessian(pt, k)))))

    sup = hnorm(x)
    for i in range(x.shape[0]):
        e = np.zeros_like(x)
        e[i] = csup
        sup = max(sup, hnorm(x + e), hnorm(x - e))
    return sup


# ---------------------------------------------------------------------------
# Generator evaluation


def apply_generator(spec: ModelSpec, f, x, k: int, quad_tol: float = 1e-9,
                    small_cutoff: float = 1e-5, tail_tol: float = 1e-10,
                    l_cap: int = 1 << 20) -> GeneratorValue:
    """Evaluate the generator at (x, k), returning [value +/- bracket].

    ``small_cutoff`` splits the mark integral (it is independent of any
    integrator cutoff); ``tail_tol`` is the absolute tolerance at which the
    regime sum's certified tail is accepted and folded into the bracket.
    """
    f = as_test_function(f)
    x = np.asarray(x, dtype=float)
    k = int(k)

    grad = f.gradient(x, k)
    hess = f.hessian(x, k)
    a = np.asarray(spec.sigma(x, k), dtype=float)
    a = a @ a.T
    b = np.asarray(spec.drift(x, k), dtype=float)
    value = 0.5 * float(np.trace(a @ hess)) + float(b @ grad)
    bracket = 0.0

    if spec.has_jumps:
        eps = min(small_cutoff, 0.5 * spec.jump_measure.radius_max)
        outer, quad_err = _jump_outer_integral(spec, f, x, k, grad, eps, quad_tol)
        small2 = _small_second_moment(spec, x, k, eps, quad_tol)
        sup_h = _hessian_sup_estimate(spec, f, x, k, eps)
        value += outer
        bracket += quad_err + 0.5 * sup_h * small2

    if not f.k_independent:
        rates = spec.rates
        if rates.tail_bound is None:
            raise TruncationError("rate matrix has no tail bound; cannot certify regime sum")
        L = 16
        while True:
            if f.regime_tail is not None:
                tail = float(f.regime_tail(x, k, L))
            elif f.bounded:
                tail = 2.0 * float(f.bound) * float(rates.tail_bound(k, L))
            else:
                raise ValueError(
                    "unbounded test function needs a regime_tail bound for the regime sum")
            if tail <= tail_tol:
                break
            if L >= l_cap:
                raise TruncationError(f"regime sum tail not below {tail_tol} within L={l_cap}")
            L *= 2
        ls = np.arange(1, L + 1)
        q = np.asarray(rates.rate(x, k, ls), dtype=float)
        q = np.where(ls == k, 0.0, np.maximum(q, 0.0))
        fvals = np.asarray(f.fn(np.broadcast_to(x, (L,) + x.shape), ls), dtype=float)
        f0 = float(f.fn(x, k))
        value += float(q @ (fvals - f0))
        bracket += tail

    return GeneratorValue(value, bracket)


# ---------------------------------------------------------------------------
# Lyapunov drift certificates


@dataclass(frozen=True)
class LyapunovCertificate:
    """Dissipation certificate A V <= -alpha * rate + beta * 1_{box x regimes}.

    ``box`` is an axis-aligned ((lo, hi)) pair or None for all of R^d;
    ``regimes`` an inclusive (kmin, kmax) pair or None for all regimes.
    ``rate_fn`` must be >= 1 on the probed grid (checked during evaluation);
    when omitted, V itself is used.
    """

    V: TestFunction
    alpha: float
    beta: float
    rate_fn: Callable[..., np.ndarray] | None = None
    box: tuple | None = None
    regimes: tuple | None = None

    def indicator(self, x, k: int) -> float:
        if self.box is not None:
            lo, hi = (np.asarray(v, dtype=float) for v in self.box)
            if not (np.all(x >= lo) and np.all(x <= hi)):
                return 0.0
        if self.regimes is not None:
            if not (self.regimes[0] <= k <= self.regimes[1]):
                return 0.0
        return 1.0


@dataclass(frozen=True)
class DriftReport:
    xs: np.ndarray
    ks: np.ndarray
    values: np.ndarray
    margins: np.ndarray
    brackets: np.ndarray
    tol: float
    failures: tuple = ()

    @property
    def max_margin(self) -> float:
        return float(np.max(self.margins))

    @property
    def max_bracket(self) -> float:
        return float(np.max(self.brackets))

    @property
    def ok(self) -> bool:
        return not self.failures and bool(np.all(self.margins <= self.tol + self.brackets))

    def summary(self) -> str:
        status = "holds on grid" if self.ok else "VIOLATED on grid"
        return (f"drift certificate {status}: max margin {self.max_margin:.3e} "
                f"(tol {self.tol:.1e} + bracket <= {self.max_bracket:.3e}) "
                f"over {len(self.margins)} points")

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "tol": self.tol,
            "max_margin": self.max_margin,
            "max_bracket": self.max_bracket,
            "n_points": int(len(self.margins)),
            "failures": list(self.failures),
            "points": [
                {"x": [float(v) for v in xr], "k": int(kk),
                 "generator": float(g), "margin": float(m), "bracket": float(br)}
                for xr, kk, g, m, br in zip(self.xs, self.ks, self.values,
                                            self.margins, self.brackets)
            ],
        }

    def to_csv(self, path):
        d = self.xs.shape[1]
        header = ",".join([f"x{i+1}" for i in range(d)] + ["k", "generator", "margin", "bracket"])
        rows = [header]
        for xr, kk, g, m, br in zip(self.xs, self.ks, self.values, self.margins, self.brackets):
            rows.append(",".join([repr(float(v)) for v in xr]
                                 + [str(int(kk)), repr(float(g)), repr(float(m)), repr(float(br))]))
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")


def check_lyapunov(spec: ModelSpec, cert: LyapunovCertificate, xs, ks,
                   tol: float = 1e-6, **gen_kwargs) -> DriftReport:
    """Evaluate the certificate margin A V + alpha*rate - beta*indicator on a grid.

    A nonpositive max margin (within tol plus the per-point generator bracket)
    means "certificate holds on grid" -- a numerical statement, never a proof.
    Evaluation failures are collected per point instead of aborting the sweep.
    """
    xs = np.atleast_2d(np.asarray(xs, dtype=float))
    ks = np.asarray(ks, dtype=int)
    if xs.shape[0] != ks.shape[0]:
        raise ValueError("xs and ks must have matching leading dimension")
    rate_fn = cert.rate_fn if cert.rate_fn is not None else cert.V.fn

    values = np.full(len(ks), np.nan)
    margins = np.full(len(ks), np.nan)
    brackets = np.zeros(len(ks))
    failures = []
    for i, (xr, kk) in enumerate(zip(xs, ks)):
        try:
            v0 = float(cert.V.fn(xr, int(kk)))
            r0 = float(rate_fn(xr, int(kk)))
            if not (np.isfinite(v0) and np.isfinite(r0)) or v0 < 0 or r0 < 1.0 - 1e-12:
                raise ValueError(f"certificate preconditions violated: V={v0}, rate={r0}")
            gv = apply_generator(spec, cert.V, xr, int(kk), **gen_kwargs)
            if not np.isfinite(gv.value):
                raise ValueError(f"generator value is not finite: {gv.value}")
            values[i] = gv.value
            brackets[i] = gv.bracket
            margins[i] = gv.value + cert.alpha * r0 - cert.beta * cert.indicator(xr, int(kk))
        except Exception as exc:  # reported per point
            failures.append(f"({xr.tolist()}, {int(kk)}): {exc}")
    return DriftReport(xs, ks, values, margins, brackets, tol, tuple(failures))


# ---------------------------------------------------------------------------
# Generator-integrator consistency


@dataclass(frozen=True)
class DynkinResult:
    lhs: float
    rhs: float
    stderr: float
    allowance: float
    z_score: float

    def to_dict(self) -> dict:
        return {"lhs": self.lhs, "rhs": self.rhs, "stderr": self.stderr,
                "allowance": self.allowance, "z_score": self.z_score}


def dynkin_check(spec: ModelSpec, f, x, k: int, t_small: float, n_paths: int,
                 cfg, seed: int, threads: int = 1, **gen_kwargs) -> DynkinResult:
    """Cross-validate integrator and generator through the short-time identity
    (E f(X_t, K_t) - f(x,k)) / t ~= A f(x,k).

    The z-score divides the discrepancy by Monte Carlo noise plus an explicit
    allowance: the generator bracket, a bound on the simulator's dropped
    small-jump bias, and a first-order-in-(t, h) Taylor term.
    """
    from dataclasses import replace

    from .simulate import simulate_ensemble

    f = as_test_function(f)
    x = np.asarray(x, dtype=float)
    gen = apply_generator(spec, f, x, k, **gen_kwargs)

    cfg_run = replace(cfg, horizon=t_small)
    ens = simulate_ensemble(spec, HybridState(x, k), cfg_run, n_paths, seed, threads=threads)
    vals = np.asarray(f.fn(ens.x, ens.k), dtype=float)
    f0 = float(f.fn(x, k))
    lhs = (float(np.mean(vals)) - f0) / t_small
    stderr = float(np.std(vals, ddof=1)) / np.sqrt(n_paths) / t_small

    sim_bias = 0.0
    if spec.has_jumps and cfg_run.small_jump_policy == "drop":
        eps_sim = cfg_run.epsilon if cfg_run.epsilon is not None else spec.jump_measure.epsilon
        small2 = _small_second_moment(spec, x, k, eps_sim, 1e-9)
        sup_h = _hessian_sup_estimate(spec, f, x, k, eps_sim)
        sim_bias = 0.5 * sup_h * small2
    h_eff = cfg_run.step
    allowance = gen.bracket + sim_bias + (1.0 + abs(gen.value)) * (t_small + h_eff)
    z = abs(lhs - gen.value) / (stderr + allowance)
    return DynkinResult(lhs, gen.value, stderr, allowance, z)
