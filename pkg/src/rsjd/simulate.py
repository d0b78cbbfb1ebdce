"""Time stepping for the hybrid system: Euler-Maruyama with compensated jumps
plus per-step regime switching.

One step of size h from state (x, k):

1. Brownian increment through sigma(x,k).
2. Large jumps: a Poisson count with mean h * nu({|u| > eps}); each mark is
   drawn from the normalized restricted measure and displaces by c(x,k,u);
   the compensator drift h * int_{|u|>eps} c nu(du) is subtracted.
3. Jumps below the cutoff are dropped (their compensated mean is zero; the
   neglected variance rate is reported in path metadata) or replaced by a
   centered Gaussian with matching covariance, per policy.
4. Drift b(x,k) h.
5. Switching: with probability 1 - exp(-q_k(x) h) a switch fires; the target
   regime is drawn by inverse CDF over the truncated rate row.

Everything is deterministic given (model, start, config, seed).  Ensembles
are vectorized across paths and split into fixed-size chunks with one RNG
stream per chunk derived from (master seed, chunk index), so results are
bit-identical regardless of the worker count used to run the chunks.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ._linalg import sqrt_psd_batched
from .model import HybridState, ModelSpec, RowTruncator

__all__ = [
    "IntegratorConfig",
    "PathRecord",
    "simulate_path",
    "simulate_killed_path",
    "EnsembleResult",
    "simulate_ensemble",
    "CHUNK_SIZE",
    "derive_rng",
]

CHUNK_SIZE = 4096  # fixed chunk width; part of the determinism contract


@dataclass(frozen=True)
class IntegratorConfig:
    """Step size, horizon and jump/switching policies for the integrator."""

    step: float
    horizon: float
    small_jump_policy: str = "drop"    # or "gaussian"
    epsilon: float | None = None       # jump cutoff; None -> measure default
    regime_tol: float | None = None    # rate-row truncation rel. tolerance; None -> model default
    r_max: float = 1e6                 # state-explosion guard; exceeding paths are censored

    def __post_init__(self):
        if not (0.0 < self.step <= self.horizon):
            raise ValueError("need 0 < step <= horizon")
        if self.small_jump_policy not in ("drop", "gaussian"):
            raise ValueError("small_jump_policy must be 'drop' or 'gaussian'")
        if self.epsilon is not None and self.epsilon <= 0:
            raise ValueError("jump cutoff must be positive")
        if self.regime_tol is not None and self.regime_tol <= 0:
            raise ValueError("regime truncation tolerance must be positive")

    def grid(self):
        n = max(1, int(round(self.horizon / self.step)))
        return n, self.horizon / n


def derive_rng(seed: int, *spawn_key: int) -> np.random.Generator:
    """Deterministic child generator for (master seed, stream/chunk key)."""
    ss = np.random.SeedSequence(entropy=int(seed) & (2**63 - 1),
                                spawn_key=tuple(int(v) for v in spawn_key))
    return np.random.default_rng(ss)


@dataclass
class PathRecord:
    """One simulated trajectory on its time grid, with event logs.

    ``exited`` is the censoring time if |X| ever exceeded the guard radius
    (the path is frozen from there on), else None.
    ``small_jump_var_dropped`` integrates the neglected small-jump variance
    rate along the path under the drop policy (None when not applicable).
    """

    times: np.ndarray
    xs: np.ndarray
    ks: np.ndarray
    switch_events: list
    jump_events: list
    seed: int
    exited: float | None = None
    small_jump_var_dropped: float | None = None

    def state(self, i: int) -> HybridState:
        return HybridState(self.xs[i], int(self.ks[i]))

    def to_csv(self, path):
        d = self.xs.shape[1]
        header = ",".join(["t"] + [f"x{i+1}" for i in range(d)] + ["k"])
        rows = [header]
        for t, xr, kk in zip(self.times, self.xs, self.ks):
            rows.append(",".join([repr(float(t))] + [repr(float(v)) for v in xr]
                                 + [str(int(kk))]))
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")

    def to_npz(self, path):
        sw = np.array([(t, a, b) for t, a, b in self.switch_events], dtype=float).reshape(-1, 3)
        jp = np.array([np.concatenate(([t], np.atleast_1d(u), np.atleast_1d(c)))
                       for t, u, c in self.jump_events], dtype=float)
        if jp.size == 0:
            jp = jp.reshape(0, 1 + 1 + self.xs.shape[1])
        np.savez_compressed(path, times=self.times, xs=self.xs, ks=self.ks,
                            switch_events=sw, jump_events=jp,
                            seed=np.int64(self.seed),
                            exited=np.float64(self.exited if self.exited is not None else np.nan))


@dataclass
class EnsembleResult:
    """Terminal states of an ensemble run (no per-step storage)."""

    x: np.ndarray          # (n, d)
    k: np.ndarray          # (n,)
    exit_time: np.ndarray  # (n,), inf where never censored
    weight: np.ndarray | None = None  # killed-run survival weights
    hook_buffers: list = field(default_factory=list)

    @property
    def censored(self) -> np.ndarray:
        return np.isfinite(self.exit_time)

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(self.censored))


def _resolve_eps(spec: ModelSpec, cfg: IntegratorConfig) -> float | None:
    if not spec.has_jumps:
        return None
    eps = cfg.epsilon if cfg.epsilon is not None else spec.jump_measure.epsilon
    if not (0.0 < eps < spec.jump_measure.radius_max):
        raise ValueError("jump cutoff outside the mark domain")
    return eps


def _evolve(spec: ModelSpec, x0: np.ndarray, k0: np.ndarray, cfg: IntegratorConfig,
            rng: np.random.Generator, *, switching: bool = True, killed: bool = False,
            record: bool = False, step_hook: Callable | None = None, hook_buf=None):
    """Advance an (n, d) batch over the full grid.  Core of every simulator.

    The RNG consumption order per step is fixed (normals, Poisson counts,
    jump marks, gaussian-policy normals, switch uniforms) and every draw is
    sized by the full batch, so a given seed always yields the same stream
    layout.  Killed mode freezes the regime and accumulates the trapezoid
    rule for int q_k(X(s)) ds instead of switching.
    """
    n, d = x0.shape
    x = x0.astype(float).copy()
    k = k0.astype(np.int64).copy()
    nsteps, h = cfg.grid()
    sqh = np.sqrt(h)
    eps = _resolve_eps(spec, cfg)
    jumps = spec.has_jumps
    if jumps:
        lam_rate = float(spec.jump_measure.large_jump_rate(eps))
        if not np.isfinite(lam_rate) or lam_rate < 0:
            raise ValueError("large-jump rate must be finite and nonnegative")
    use_rows = switching or killed
    row_tol = cfg.regime_tol if cfg.regime_tol is not None else spec.regime_tol
    trunc = RowTruncator(spec.rates, row_tol) if use_rows else None

    alive = np.ones(n, dtype=bool)
    exit_time = np.full(n, np.inf)
    kill_int = np.zeros(n) if killed else None
    q_prev = trunc.rows(x, k)[0].sum(axis=1) if killed else None

    dropped_var = 0.0
    rec_times = rec_xs = rec_ks = None
    switch_events: list = []
    jump_events: list = []
    if record:
        rec_times = h * np.arange(nsteps + 1)
        rec_xs = np.empty((nsteps + 1, d))
        rec_ks = np.empty(nsteps + 1, dtype=np.int64)
        rec_xs[0] = x[0]
        rec_ks[0] = k[0]
    if step_hook is not None:
        step_hook(0, 0.0, x, k, alive, hook_buf)

    for i in range(nsteps):
        t_next = (i + 1) * h
        z = rng.standard_normal((n, d))

        b = np.asarray(spec.drift(x, k), dtype=float)
        sig = np.asarray(spec.sigma(x, k), dtype=float)
        dx = b * h + sqh * np.einsum("nij,nj->ni", sig, z)

        if jumps:
            counts = rng.poisson(lam_rate * h, n)
            comp = np.asarray(spec.jump_compensator(x, k, eps), dtype=float) \
                if spec.jump_compensator is not None else _compensator_quadrature(spec, x, k, eps)
            dx -= comp * h
            mmax = int(counts.max()) if n else 0
            for j in range(mmax):
                m = counts > j
                u = spec.jump_measure.large_jump_sampler(eps, int(m.sum()), rng)
                disp = np.asarray(spec.jump_coeff(x[m], k[m], u), dtype=float)
                dx[m] += disp
                if record and m[0]:
                    jump_events.append((t_next, u[0].copy(), disp[0].copy()))
            if cfg.small_jump_policy == "gaussian":
                if spec.small_jump_cov is None:
                    raise ValueError(
                        "gaussian small-jump policy needs a closed-form small_jump_cov")
                cov = np.asarray(spec.small_jump_cov(x, k, eps), dtype=float)
                root, _ = sqrt_psd_batched(cov)
                zg = rng.standard_normal((n, d))
                dx += sqh * np.einsum("nij,nj->ni", root, zg)
            elif record and spec.small_jump_cov is not None:
                cov0 = np.asarray(spec.small_jump_cov(x[:1], k[:1], eps), dtype=float)
                dropped_var += h * float(np.trace(cov0[0]))

        xn = np.where(alive[:, None], x + dx, x)

        kn = k
        if switching:
            rows, ls = trunc.rows(x, k)
            qk = rows.sum(axis=1)
            u1 = rng.random(n)
            psw = -np.expm1(-qk * h)
            u2 = rng.random(n)
            do = alive & (u1 < psw) & (qk > 0.0)
            if do.any():
                cum = np.cumsum(rows, axis=1)
                tgt = u2 * qk
                idx = np.minimum((cum < tgt[:, None]).sum(axis=1), rows.shape[1] - 1)
                kn = k.copy()
                kn[do] = ls[idx[do]]
                if record and do[0]:
                    switch_events.append((t_next, int(k[0]), int(kn[0])))
        elif killed:
            q_new = trunc.rows(xn, k)[0].sum(axis=1)
            kill_int += np.where(alive, 0.5 * h * (q_prev + q_new), 0.0)
            q_prev = q_new

        newly = alive & (np.linalg.norm(xn, axis=1) > cfg.r_max)
        if newly.any():
            exit_time[newly] = t_next
            alive &= ~newly

        x, k = xn, kn
        if record:
            rec_xs[i + 1] = x[0]
            rec_ks[i + 1] = k[0]
        if step_hook is not None:
            step_hook(i + 1, t_next, x, k, alive, hook_buf)

    out = {"x": x, "k": k, "exit_time": exit_time}
    if killed:
        out["weight"] = np.exp(-kill_int)
    if record:
        out["record"] = (rec_times, rec_xs, rec_ks, switch_events, jump_events, dropped_var)
    return out


_COMP_CACHE: dict = {}


def _compensator_quadrature(spec: ModelSpec, x: np.ndarray, k: np.ndarray,
                            eps: float) -> np.ndarray:
    """Fallback large-jump compensator int_{|u|>eps} c(x,k,u) nu(du) by adaptive
    quadrature, cached on a coarse (x, k) cell grid (resolution 1e-3)."""
    from scipy import integrate

    meas = spec.jump_measure
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        key = (spec.name, id(spec), tuple(np.round(x[i], 3)), int(k[i]), round(eps, 9))
        hit = _COMP_CACHE.get(key)
        if hit is None:
            comps = []
            for dim in range(spec.d):
                if meas.mark_dim == 1:
                    def phi(u, dim=dim, i=i):
                        c = np.asarray(spec.jump_coeff(x[i], int(k[i]), np.array([u])), dtype=float)
                        return c[dim] * float(meas.density(np.array([u])))
                    v = integrate.quad(phi, eps, meas.radius_max, epsrel=1e-8, limit=200)[0]
                    v += integrate.quad(phi, -meas.radius_max, -eps, epsrel=1e-8, limit=200)[0]
                elif meas.mark_dim == 2 and spec.jump_radial:
                    def phi(r, dim=dim, i=i):
                        c = np.asarray(spec.jump_coeff(x[i], int(k[i]), np.array([r, 0.0])), dtype=float)
                        rad = meas.radial_density(r) if meas.radial_density is not None \
                            else 2.0 * np.pi * r * float(meas.density(np.array([r, 0.0])))
                        return c[dim] * float(rad)
                    v = integrate.quad(phi, eps, meas.radius_max, epsrel=1e-8, limit=200)[0]
                else:
                    raise NotImplementedError(
                        "compensator quadrature needs 1-d or radially symmetric 2-d marks")
                comps.append(v)
            hit = np.array(comps)
            if len(_COMP_CACHE) < 1 << 16:
                _COMP_CACHE[key] = hit
        out[i] = hit
    return out


def simulate_path(spec: ModelSpec, start: HybridState, cfg: IntegratorConfig,
                  seed: int) -> PathRecord:
    """Simulate a single trajectory with full grid and event recording."""
    spec.check_state(start)
    rng = derive_rng(seed, 0, 0)
    out = _evolve(spec, start.x[None, :], np.array([start.k]), cfg, rng,
                  switching=True, record=True)
    times, xs, ks, sw, jp, dropped = out["record"]
    exited = out["exit_time"][0]
    return PathRecord(times, xs, ks, sw, jp, seed,
                      exited=None if not np.isfinite(exited) else float(exited),
                      small_jump_var_dropped=(dropped if cfg.small_jump_policy == "drop"
                                              and spec.has_jumps else None))


def simulate_killed_path(spec: ModelSpec, start: HybridState, cfg: IntegratorConfig,
                         seed: int):
    """Simulate the frozen-regime path and its survival weight
    exp(-int_0^T q_k(X(s)) ds), the sub-probability reweighting for the
    killed process.  Returns (PathRecord, weight)."""
    spec.check_state(start)
    rng = derive_rng(seed, 0, 0)
    out = _evolve(spec, start.x[None, :], np.array([start.k]), cfg, rng,
                  switching=False, killed=True, record=True)
    times, xs, ks, sw, jp, dropped = out["record"]
    exited = out["exit_time"][0]
    rec = PathRecord(times, xs, ks, sw, jp, seed,
                     exited=None if not np.isfinite(exited) else float(exited),
                     small_jump_var_dropped=(dropped if cfg.small_jump_policy == "drop"
                                             and spec.has_jumps else None))
    return rec, float(out["weight"][0])


def simulate_ensemble(spec: ModelSpec, start: HybridState, cfg: IntegratorConfig,
                      n_paths: int, seed: int, threads: int = 1, *,
                      switching: bool = True, killed: bool = False,
                      hook_factory: Callable | None = None,
                      step_hook: Callable | None = None,
                      stream: int = 0) -> EnsembleResult:
    """Run n_paths trajectories and return terminal data.

    Paths are partitioned into fixed chunks of CHUNK_SIZE; chunk c uses the
    RNG stream derived from (seed, stream, c).  Threads only distribute the
    chunks, so any thread count reproduces the same numbers.
    """
    spec.check_state(start)
    if n_paths < 1:
        raise ValueError("need at least one path")
    bounds = [(lo, min(lo + CHUNK_SIZE, n_paths)) for lo in range(0, n_paths, CHUNK_SIZE)]
    x_out = np.empty((n_paths, spec.d))
    k_out = np.empty(n_paths, dtype=np.int64)
    e_out = np.empty(n_paths)
    w_out = np.empty(n_paths) if killed else None
    bufs = [None] * len(bounds)

    def work(ci: int):
        lo, hi = bounds[ci]
        m = hi - lo
        rng = derive_rng(seed, stream, ci)
        buf = hook_factory() if hook_factory is not None else None
        out = _evolve(spec, np.tile(start.x, (m, 1)), np.full(m, start.k, dtype=np.int64),
                      cfg, rng, switching=switching, killed=killed,
                      step_hook=step_hook, hook_buf=buf)
        x_out[lo:hi] = out["x"]
        k_out[lo:hi] = out["k"]
        e_out[lo:hi] = out["exit_time"]
        if killed:
            w_out[lo:hi] = out["weight"]
        bufs[ci] = buf

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(bounds))))
    else:
        for ci in range(len(bounds)):
            work(ci)

    return EnsembleResult(x_out, k_out, e_out, weight=w_out,
                          hook_buffers=[b for b in bufs if b is not None])
