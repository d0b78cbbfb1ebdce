"""Data model for regime-switching jump diffusions with countably many regimes.

A model couples a d-dimensional SDE with drift ``b(x,k)``, diffusion matrix
``sigma(x,k)`` and compensated jumps ``c(x,k,u)`` driven by a sigma-finite
mark measure ``nu``, to a regime chain on {1,2,...} with state-dependent
rates ``q_kl(x)``.  All coefficient callables follow a broadcasting
convention so that the same functions serve pointwise evaluation and
vectorized path ensembles:

* ``drift(x, k)``      -- x: (..., d), k: (...)          -> (..., d)
* ``sigma(x, k)``      -- x: (..., d), k: (...)          -> (..., d, d)
* ``jump_coeff(x,k,u)``-- u: (..., mark_dim)             -> (..., d)
* ``rates.rate(x,k,l)``-- x: (..., d), k/l broadcastable -> broadcast shape

The regime index set is infinite; every row of the rate matrix is handled
through truncation with a caller-certified tail bound, so truncation error
stays auditable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .errors import TruncationError

__all__ = [
    "HybridState",
    "JumpMeasureSpec",
    "RateMatrixSpec",
    "ModelSpec",
    "ValidationCheck",
    "ValidationReport",
    "validate_model",
    "q_row_truncated",
    "RowTruncator",
]


@dataclass(frozen=True)
class HybridState:
    """A point (x, k) of the hybrid state space R^d x {1,2,...}."""

    x: np.ndarray
    k: int

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        if x.ndim != 1:
            raise ValueError("state vector must be one-dimensional")
        if not np.all(np.isfinite(x)):
            raise ValueError("state vector must be finite")
        if int(self.k) < 1:
            raise ValueError("regime index must be >= 1")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "k", int(self.k))

    @property
    def d(self) -> int:
        return self.x.shape[0]


@dataclass(frozen=True)
class JumpMeasureSpec:
    """Description of the jump mark measure nu on an annulus 0 < |u| < radius_max.

    nu may have infinite total mass (it usually does); only the restriction to
    {|u| > eps} is sampled directly.  ``large_jump_rate`` and
    ``large_jump_sampler`` therefore take the cutoff as an argument, and the
    part below the cutoff is handled by the integrator's small-jump policy.

    ``c_second_moment(x, k)`` returns the full integral of |c(x,k,u)|^2 nu(du);
    built-in models supply it in closed form so that growth checks and
    neglected-variance reports do not need quadrature.
    """

    mark_dim: int
    domain: str
    density: Callable[[np.ndarray], np.ndarray]
    epsilon: float
    large_jump_rate: Callable[[float], float]
    large_jump_sampler: Callable[[float, int, np.random.Generator], np.ndarray]
    c_second_moment: Callable[..., np.ndarray] | None = None
    radial_density: Callable[[np.ndarray], np.ndarray] | None = None
    radius_max: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.epsilon < self.radius_max):
            raise ValueError("small-jump cutoff must lie inside the mark domain")


@dataclass(frozen=True)
class RateMatrixSpec:
    """State-dependent rate matrix q_kl(x) over the infinite regime set.

    ``rate(x, k, l)`` must be nonnegative for l != k; its value at l == k is
    never used (callers mask the diagonal).  ``tail_bound(k, L)`` must bound
    sum_{l>L, l!=k} q_kl(x) uniformly in x and tend to 0 as L grows; it is the
    certificate that makes row truncation sound.  ``row_sum`` is optional and,
    when absent, rows are summed through the truncation machinery.
    """

    rate: Callable[..., np.ndarray]
    tail_bound: Callable[[int, int], float] | None
    row_sum: Callable[..., np.ndarray] | None = None
    kappa0: float | None = None


@dataclass(frozen=True)
class ModelSpec:
    """Full coefficient bundle for one regime-switching jump diffusion.

    Optional closed-form helpers avoid per-step quadrature in the integrator:
    ``jump_compensator(x,k,eps)`` is the drift correction
    int_{|u|>eps} c(x,k,u) nu(du), and ``small_jump_cov(x,k,eps)`` is
    int_{|u|<=eps} c c^T nu(du) (used by the gaussian small-jump policy and by
    neglected-variance reports).  ``jump_radial`` declares that c depends on u
    only through |u|, enabling radial quadrature for 2-d mark spaces.
    """

    d: int
    drift: Callable[..., np.ndarray]
    sigma: Callable[..., np.ndarray]
    rates: RateMatrixSpec
    jump_coeff: Callable[..., np.ndarray] | None = None
    jump_measure: JumpMeasureSpec | None = None
    ellipticity_floor: float | None = None
    growth_constant: float | None = None
    jump_compensator: Callable[..., np.ndarray] | None = None
    small_jump_cov: Callable[..., np.ndarray] | None = None
    jump_radial: bool = False
    default_lyapunov: Any = None
    regime_tol: float = 1e-9   # default relative tolerance for rate-row truncation
    name: str = "custom"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")
        if (self.jump_coeff is None) != (self.jump_measure is None):
            raise ValueError("jump coefficient and jump measure must be supplied together")

    @property
    def has_jumps(self) -> bool:
        return self.jump_coeff is not None

    def check_state(self, state: HybridState) -> HybridState:
        if state.d != self.d:
            raise ValueError(f"state dimension {state.d} does not match model dimension {self.d}")
        return state


# ---------------------------------------------------------------------------
# Rate-row truncation


def q_row_truncated(rates: RateMatrixSpec, x, k: int, rel_tol: float,
                    l_start: int = 8, l_cap: int = 1 << 20):
    """Truncate the rate row q_k.(x) with a certified tail.

    Returns ``(partial, tail)`` where ``partial`` lists the nonzero
    ``(l, q_kl(x))`` for l <= L (l != k) and ``tail`` bounds the mass above L,
    certified to satisfy tail <= rel_tol * (sum(partial) + tail).
    """
    if rel_tol <= 0:
        raise ValueError("rel_tol must be positive")
    if rates.tail_bound is None:
        raise TruncationError("rate matrix has no tail bound; cannot certify truncation")
    x = np.asarray(x, dtype=float)
    L = l_start
    while True:
        ls = np.arange(1, L + 1)
        q = np.asarray(rates.rate(x, k, ls), dtype=float)
        q = np.where(ls == k, 0.0, q)
        s = float(q.sum())
        tail = float(rates.tail_bound(k, L))
        if tail < 0:
            raise TruncationError("tail bound returned a negative value")
        if tail <= rel_tol * (s + tail):
            partial = [(int(l), float(v)) for l, v in zip(ls, q) if v > 0.0]
            return partial, tail
        if L >= l_cap:
            raise TruncationError(
                f"row (k={k}) not summable to rel_tol={rel_tol} within L={l_cap}")
        L *= 2


class RowTruncator:
    """Batched rate-row evaluation with a cached, certified truncation level.

    Used by the integrators: rows are produced as an (n, L) array over the
    common regime grid 1..L, with L grown adaptively until the uniform tail
    bound is below ``rel_tol`` relative to every row sum in the batch.
    """

    def __init__(self, rates: RateMatrixSpec, rel_tol: float,
                 l_start: int = 16, l_cap: int = 1 << 20):
        self.rates = rates
        self.rel_tol = float(rel_tol)
        self.l_cap = int(l_cap)
        self._level = int(l_start)

    def rows(self, x: np.ndarray, k: np.ndarray):
        """Return ``(rows, ls)`` with rows[i, j] = q_{k_i, ls_j}(x_i), diagonal zeroed."""
        if self.rates.tail_bound is None:
            raise TruncationError("rate matrix has no tail bound; cannot certify truncation")
        k = np.asarray(k)
        uniq = np.unique(k)
        L = self._level
        while True:
            ls = np.arange(1, L + 1)
            # x gains a broadcast axis so (n, 1, d) states pair with (n, 1) regimes
            # and the (1, L) target grid to produce (n, L) rows
            q = np.asarray(self.rates.rate(x[..., None, :], k[..., None], ls[None, :]),
                           dtype=float)
            q = np.where(ls[None, :] == k[..., None], 0.0, q)
            np.maximum(q, 0.0, out=q)
            s = q.sum(axis=-1)
            tails = np.array([float(self.rates.tail_bound(int(kk), L)) for kk in uniq])
            tail_per_path = tails[np.searchsorted(uniq, k)]
            ok = tail_per_path <= self.rel_tol * (s + tail_per_path)
            if bool(np.all(ok)):
                self._level = L
                return q, ls
            if L >= self.l_cap:
                raise TruncationError(
                    f"rate rows not summable to rel_tol={self.rel_tol} within L={self.l_cap}")
            L *= 2


# ---------------------------------------------------------------------------
# Assumption spot checks


@dataclass(frozen=True)
class ValidationCheck:
    name: str
    margin: float
    worst_point: tuple
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple
    n_points: int

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def summary(self) -> str:
        lines = [f"{'OK ' if c.passed else 'BAD'} {c.name}: margin={c.margin:.6g} "
                 f"at {c.worst_point} {c.note}" for c in self.checks]
        verdict = (f"no violation found at {self.n_points} probe points"
                   if self.passed else "violation found (see checks)")
        return "\n".join(lines + [verdict])

    def to_dict(self) -> dict:
        return {
            "n_points": self.n_points,
            "passed": self.passed,
            "checks": [
                {"name": c.name, "margin": c.margin, "worst_point": list(map(str, c.worst_point)),
                 "passed": c.passed, "note": c.note}
                for c in self.checks
            ],
        }


def _hs_norm_sq(m: np.ndarray) -> float:
    return float(np.sum(m * m))


def validate_model(spec: ModelSpec, probe_points, directions=None,
                   quad_crosscheck: int = 0) -> ValidationReport:
    """Spot-check the model's structural assumptions at the given probe points.

    Sampling-based only: the report states the worst margin observed over the
    probes for each check, never a proof.  Checks cover finiteness and
    symmetry/PSD-ness of a = sigma sigma^T, the declared ellipticity floor and
    growth constant (when present), and finiteness of the c-weighted second
    moment of the jump measure.  ``quad_crosscheck`` > 0 additionally compares
    the closed-form second moment against quadrature at that many probes.
    """
    points = [spec.check_state(p) for p in probe_points]
    if not points:
        raise ValueError("probe_points must be nonempty")
    if directions is None:
        dirs = [np.eye(spec.d)[i] for i in range(spec.d)]
    else:
        dirs = [np.asarray(v, dtype=float) / np.linalg.norm(v) for v in directions]

    checks = []

    def run_check(name, values, points_used, tol=0.0, note="", larger_is_worse=True):
        values = np.asarray(values, dtype=float)
        if not np.all(np.isfinite(values)):
            i = int(np.argmax(~np.isfinite(values)))
            checks.append(ValidationCheck(name, float("nan"),
                                          (points_used[i].x, points_used[i].k),
                                          False, "non-finite value at probe"))
            return
        i = int(np.argmax(values)) if larger_is_worse else int(np.argmin(values))
        worst = float(values[i])
        passed = worst <= tol if larger_is_worse else worst >= -tol
        checks.append(ValidationCheck(name, worst, (points_used[i].x, points_used[i].k),
                                      passed, note))

    bs = np.stack([spec.drift(p.x, p.k) for p in points])
    sigs = np.stack([spec.sigma(p.x, p.k) for p in points])
    if not (np.all(np.isfinite(bs)) and np.all(np.isfinite(sigs))):
        checks.append(ValidationCheck("finite-coefficients", float("nan"),
                                      (points[0].x, points[0].k), False,
                                      "non-finite drift or diffusion value"))
        return ValidationReport(tuple(checks), len(points))
    a = np.einsum("nij,nkj->nik", sigs, sigs)

    run_check("a-symmetric", [np.abs(ai - ai.T).max() for ai in a], points,
              tol=1e-12, note="max |a - a^T|")
    run_check("a-psd", [-float(np.linalg.eigvalsh(ai)[0]) for ai in a], points,
              tol=1e-10, note="-(min eigenvalue of a)")

    if spec.ellipticity_floor is not None:
        lam = spec.ellipticity_floor
        vals, pts = [], []
        for p, ai in zip(points, a):
            for v in dirs:
                vals.append(lam - float(v @ ai @ v))
                pts.append(p)
        run_check("ellipticity-floor", vals, pts, tol=1e-10,
                  note=f"lambda - <xi, a xi> with lambda={lam}")

    c2 = None
    if spec.has_jumps and spec.jump_measure.c_second_moment is not None:
        c2 = np.array([float(spec.jump_measure.c_second_moment(p.x, p.k)) for p in points])
        run_check("jump-second-moment-finite", np.where(np.isfinite(c2), -1.0, np.inf),
                  points, tol=0.0, note="int |c|^2 nu finite at probes")

    if spec.growth_constant is not None:
        kap = spec.growth_constant
        vals = [2.0 * float(p.x @ b) - kap * (float(p.x @ p.x) + 1.0)
                for p, b in zip(points, bs)]
        run_check("growth-drift", vals, points, tol=1e-10,
                  note=f"2<x,b> - kappa(|x|^2+1), kappa={kap}")
        vals = []
        for i, p in enumerate(points):
            total = _hs_norm_sq(sigs[i]) + (float(c2[i]) if c2 is not None else 0.0)
            vals.append(total - kap * (float(p.x @ p.x) + 1.0))
        run_check("growth-diffusion-jump", vals, points, tol=1e-10,
                  note=f"|sigma|^2 + int|c|^2 nu - kappa(|x|^2+1), kappa={kap}")

    if spec.rates.kappa0 is not None:
        k0 = spec.rates.kappa0
        ls = np.arange(1, 65)
        cap = k0 * ls * 3.0 ** -ls
        vals, pts = [], []
        for p in points:
            q = np.asarray(spec.rates.rate(p.x, p.k, ls), dtype=float)
            q = np.where(ls == p.k, 0.0, q)
            vals.append(float(np.max(q - cap)))
            pts.append(p)
        run_check("rate-uniform-bound", vals, pts, tol=1e-12,
                  note=f"q_kl(x) - kappa0 l 3^-l with kappa0={k0}, l <= 64")

    if quad_crosscheck > 0 and c2 is not None:
        from .generator import _jump_second_moment_quadrature  # local import avoids a cycle
        errs, pts = [], []
        for p, closed in zip(points[:quad_crosscheck], c2[:quad_crosscheck]):
            numeric = _jump_second_moment_quadrature(spec, p.x, p.k)
            errs.append(abs(numeric - closed) - 1e-6 * (1.0 + abs(closed)))
            pts.append(p)
        run_check("jump-second-moment-quadrature", errs, pts, tol=0.0,
                  note="closed form vs quadrature (1e-6 relative)")

    return ValidationReport(tuple(checks), len(points))
