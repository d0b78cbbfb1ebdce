"""Coupled evolution of two hybrid paths sharing their driving noise.

Two couplings are provided.

*Basic (synchronous)*: both continuous parts see the same Brownian increments
and the same jump marks; the regime pair moves through the basic coupling of
the two rate rows -- for each target l the rates split into a joint part
min(q_il(x), q_jl(z)) and two one-sided residuals (q_il(x)-q_jl(z))^+ and
(q_jl(z)-q_il(x))^+, maximizing simultaneous switches.

*Reflection*: the diffusion parts are driven through the two-noise
decomposition

    dX  = b dt + s_lam(X) dW1 + sqrt(lam) dW2
    dX~ = b~dt + s_lam(X~) dW1 + sqrt(lam) (I - 2 u u^T) dW2,

with s_lam the symmetric PSD root of a - lam*I and u the unit vector along
X~ - X frozen at each step's start, so the one-step cross-covariance of the
increments matches lam*(I - 2uu^T) + s_lam(X) s_lam(X~)^T.  Jumps stay
synchronous and switching uses the basic rate coupling.  Once |X~ - X| drops
below the coalescence threshold with equal regimes the pair is declared
coalesced and continues as a single path.

Coalescence detection cannot wait for the discrete pair to land exactly on
the diagonal: the mirror walk crosses zero inside steps but essentially never
hits a fixed tiny window at grid times.  The engine therefore samples the
within-step crossing of the separation with the Brownian-bridge probability
exp(-2 r_n r_{n+1} / (A h)) (1 on a sign flip in one dimension), where A is
the separation's one-step variance rate |s_lam(x)u - s_lam(x~)u|^2 + 4 lam.
On acceptance the second path is set to the first -- by the reflection
principle the mirrored endpoint has the same conditional law as the direct
one, so the merge costs no first-order law error.  The threshold rule
(|X~ - X| below eta with equal regimes) is kept as a secondary detector and
still catches pairs that start identical.

Four stopping times are recorded as grid-time marks (inf when never hit):
exit of the ball of radius R (by either the states or the regime indices),
first |X~ - X| above delta0, first regime disagreement, and the meeting time.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from ._linalg import sqrt_psd_batched
from .model import HybridState, ModelSpec, RowTruncator
from .simulate import CHUNK_SIZE, IntegratorConfig, PathRecord, derive_rng

__all__ = [
    "CouplingConfig",
    "CoupledPathRecord",
    "CoupledEnsemble",
    "couple_basic",
    "couple_reflection",
    "couple_ensemble",
    "sqrt_psd",
    "pair_one_step",
]


@dataclass(frozen=True)
class CouplingConfig(IntegratorConfig):
    """Integrator settings plus the coupling-specific knobs.

    ``lambda_R`` (reflection only) defaults to the model's declared
    ellipticity floor and must not exceed it; ``eta`` is the coalescence
    threshold, defaulting to 1e-6 * (1 + |x|) at run time.
    """

    kind: str = "basic"
    lambda_R: float | None = None
    ball_radius: float = 1e6
    delta0: float = 1.0
    eta: float | None = None

    def __post_init__(self):
        super().__post_init__()
        if self.kind not in ("basic", "reflection"):
            raise ValueError("kind must be 'basic' or 'reflection'")
        if self.eta is not None and self.eta <= 0:
            raise ValueError("coalescence threshold must be positive")
        if self.delta0 <= 0:
            raise ValueError("delta0 must be positive")


def sqrt_psd(a_minus: np.ndarray, clamp_tol: float = 1e-6) -> np.ndarray:
    """Symmetric PSD square root of a symmetric matrix.

    Eigenvalues in [-clamp_tol, 0) are treated as roundoff and clamped to 0;
    smaller ones raise, as they indicate the input genuinely fails to be PSD.
    """
    a = np.asarray(a_minus, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError("expected a square matrix")
    if np.max(np.abs(a - a.T)) > 1e-8 * (1.0 + np.max(np.abs(a))):
        raise ValueError("input matrix is not symmetric")
    root, _ = sqrt_psd_batched(a[None], clamp_tol=clamp_tol)
    return root[0]


def _resolve_lambda(spec: ModelSpec, cfg: CouplingConfig) -> float:
    lam = cfg.lambda_R if cfg.lambda_R is not None else spec.ellipticity_floor
    if lam is None:
        raise ValueError("reflection coupling needs lambda_R (or a declared model floor)")
    if spec.ellipticity_floor is not None and lam > spec.ellipticity_floor + 1e-12:
        raise ValueError(
            f"lambda_R={lam} exceeds the model's declared ellipticity floor "
            f"{spec.ellipticity_floor}")
    return float(lam)


def _sigma_lambda(spec: ModelSpec, x: np.ndarray, k: np.ndarray, lam: float):
    sig = np.asarray(spec.sigma(x, k), dtype=float)
    a = np.einsum("nij,nkj->nik", sig, sig)
    a -= lam * np.eye(spec.d)
    return sqrt_psd_batched(a)


def _evolve_pair(spec: ModelSpec, x0, xt0, k0, kt0, cfg: CouplingConfig,
                 rng: np.random.Generator, *, record: bool = False,
                 step_hook: Callable | None = None, hook_buf=None):
    """Advance an (n, d) batch of coupled pairs over the full grid."""
    n, d = x0.shape
    reflect = cfg.kind == "reflection"
    lam = _resolve_lambda(spec, cfg) if reflect else None
    sqlam = np.sqrt(lam) if reflect else None
    nsteps, h = cfg.grid()
    sqh = np.sqrt(h)
    eta = cfg.eta if cfg.eta is not None else 1e-6 * (1.0 + float(np.linalg.norm(x0[0])))

    X = x0.astype(float).copy()
    Xt = xt0.astype(float).copy()
    K = k0.astype(np.int64).copy()
    Kt = kt0.astype(np.int64).copy()

    zeta = np.full(n, np.inf)
    s_delta0 = np.full(n, np.inf)
    tau_r = np.full(n, np.inf)
    t_meet = np.full(n, np.inf)
    merged = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    exit_time = np.full(n, np.inf)
    n_clamped = 0

    eps = None
    jumps = spec.has_jumps
    if jumps:
        eps = cfg.epsilon if cfg.epsilon is not None else spec.jump_measure.epsilon
        lam_rate = float(spec.jump_measure.large_jump_rate(eps))
    row_tol = cfg.regime_tol if cfg.regime_tol is not None else spec.regime_tol
    trunc = RowTruncator(spec.rates, row_tol)

    rec = None
    if record:
        rec = {
            "times": h * np.arange(nsteps + 1),
            "x1": np.empty((nsteps + 1, d)), "k1": np.empty(nsteps + 1, dtype=np.int64),
            "x2": np.empty((nsteps + 1, d)), "k2": np.empty(nsteps + 1, dtype=np.int64),
            "sw1": [], "sw2": [], "jp1": [], "jp2": [],
        }

    def scan_marks(t):
        delta = np.linalg.norm(Xt - X, axis=1)
        met = (delta < eta) & (K == Kt) & np.isinf(t_meet)
        if met.any():
            t_meet[met] = t
            if reflect:
                merged[met] = True
                Xt[met] = X[met]
        split = (K != Kt) & np.isinf(zeta)
        zeta[split] = t
        far = (delta > cfg.delta0) & np.isinf(s_delta0)
        s_delta0[far] = t
        big = np.maximum(np.linalg.norm(X, axis=1), np.linalg.norm(Xt, axis=1))
        big = np.maximum(big, np.maximum(K, Kt).astype(float))
        out = (big > cfg.ball_radius) & np.isinf(tau_r)
        tau_r[out] = t

    scan_marks(0.0)
    if record:
        rec["x1"][0], rec["k1"][0] = X[0], K[0]
        rec["x2"][0], rec["k2"][0] = Xt[0], Kt[0]
    if step_hook is not None:
        step_hook(0, 0.0, X, K, Xt, Kt, alive, hook_buf)

    for i in range(nsteps):
        t_next = (i + 1) * h

        b1 = np.asarray(spec.drift(X, K), dtype=float)
        b2 = np.asarray(spec.drift(Xt, Kt), dtype=float)
        if reflect:
            z1 = rng.standard_normal((n, d))
            z2 = rng.standard_normal((n, d))
            sl1, c1 = _sigma_lambda(spec, X, K, lam)
            sl2, c2 = _sigma_lambda(spec, Xt, Kt, lam)
            n_clamped += c1 + c2
            diff = Xt - X
            dn = np.linalg.norm(diff, axis=1)
            u = np.where(dn[:, None] > 0.0, diff / np.where(dn[:, None] > 0.0, dn[:, None], 1.0), 0.0)
            w2_ref = z2 - 2.0 * u * np.einsum("ni,ni->n", u, z2)[:, None]
            dX = b1 * h + sqh * (np.einsum("nij,nj->ni", sl1, z1) + sqlam * z2)
            dXt = b2 * h + sqh * (np.einsum("nij,nj->ni", sl2, z1) + sqlam * w2_ref)
        else:
            z = rng.standard_normal((n, d))
            sig1 = np.asarray(spec.sigma(X, K), dtype=float)
            sig2 = np.asarray(spec.sigma(Xt, Kt), dtype=float)
            dX = b1 * h + sqh * np.einsum("nij,nj->ni", sig1, z)
            dXt = b2 * h + sqh * np.einsum("nij,nj->ni", sig2, z)

        if jumps:
            counts = rng.poisson(lam_rate * h, n)
            if spec.jump_compensator is not None:
                dX -= np.asarray(spec.jump_compensator(X, K, eps), dtype=float) * h
                dXt -= np.asarray(spec.jump_compensator(Xt, Kt, eps), dtype=float) * h
            else:
                from .simulate import _compensator_quadrature
                dX -= _compensator_quadrature(spec, X, K, eps) * h
                dXt -= _compensator_quadrature(spec, Xt, Kt, eps) * h
            mmax = int(counts.max()) if n else 0
            for j in range(mmax):
                m = counts > j
                u_marks = spec.jump_measure.large_jump_sampler(eps, int(m.sum()), rng)
                d1 = np.asarray(spec.jump_coeff(X[m], K[m], u_marks), dtype=float)
                d2 = np.asarray(spec.jump_coeff(Xt[m], Kt[m], u_marks), dtype=float)
                dX[m] += d1
                dXt[m] += d2
                if record and m[0]:
                    rec["jp1"].append((t_next, u_marks[0].copy(), d1[0].copy()))
                    rec["jp2"].append((t_next, u_marks[0].copy(), d2[0].copy()))
            if cfg.small_jump_policy == "gaussian":
                if spec.small_jump_cov is None:
                    raise ValueError(
                        "gaussian small-jump policy needs a closed-form small_jump_cov")
                # shared draw keeps the substitute synchronous; per-side roots
                # preserve each marginal's covariance exactly
                zg = rng.standard_normal((n, d))
                rt1, _ = sqrt_psd_batched(np.asarray(spec.small_jump_cov(X, K, eps), dtype=float))
                rt2, _ = sqrt_psd_batched(np.asarray(spec.small_jump_cov(Xt, Kt, eps), dtype=float))
                dX += sqh * np.einsum("nij,nj->ni", rt1, zg)
                dXt += sqh * np.einsum("nij,nj->ni", rt2, zg)

        Xn = np.where(alive[:, None], X + dX, X)
        Xtn = np.where(alive[:, None], Xt + dXt, Xt)

        # regimes via the basic coupling of the two rate rows, one event per step
        rows_all, ls = trunc.rows(np.concatenate([X, Xt], axis=0),
                                  np.concatenate([K, Kt]))
        rows1, rows2 = rows_all[:n], rows_all[n:]
        ml = np.minimum(rows1, rows2)
        al = rows1 - ml
        bl = rows2 - ml
        stot = ml.sum(axis=1) + al.sum(axis=1) + bl.sum(axis=1)
        u1 = rng.random(n)
        u2 = rng.random(n)
        do = alive & (u1 < -np.expm1(-stot * h)) & (stot > 0.0)
        Kn, Ktn = K, Kt
        if do.any():
            L = rows1.shape[1]
            allr = np.concatenate([ml, al, bl], axis=1)
            cum = np.cumsum(allr, axis=1)
            tgt = u2 * stot
            idx = np.minimum((cum < tgt[:, None]).sum(axis=1), 3 * L - 1)
            which = idx // L
            l_new = ls[idx % L]
            Kn = K.copy()
            Ktn = Kt.copy()
            first = do & (which != 2)
            second = do & (which != 1)
            Kn[first] = l_new[first]
            Ktn[second] = l_new[second]
            if record and do[0]:
                if first[0]:
                    rec["sw1"].append((t_next, int(K[0]), int(Kn[0])))
                if second[0]:
                    rec["sw2"].append((t_next, int(Kt[0]), int(Ktn[0])))

        if reflect:
            # within-step meeting via the Brownian-bridge crossing probability
            uco = rng.random(n)
            r0 = np.linalg.norm(Xt - X, axis=1)
            r1 = np.linalg.norm(Xtn - Xn, axis=1)
            if d == 1:
                cross_num = (Xt - X)[:, 0] * (Xtn - Xn)[:, 0]
            else:
                cross_num = r0 * r1
            slu = np.einsum("nij,nj->ni", sl1 - sl2, u)
            abar = np.einsum("ni,ni->n", slu, slu) + 4.0 * lam
            with np.errstate(over="ignore"):
                p_cross = np.where(cross_num < 0.0, 1.0,
                                   np.exp(-2.0 * np.maximum(cross_num, 0.0) / (abar * h)))
            meet = alive & ~merged & (r0 > 0.0) & (Kn == Ktn) & (uco < p_cross)
            if meet.any():
                merged[meet] = True
                t_meet[meet] = np.minimum(t_meet[meet], t_next)
                Xtn[meet] = Xn[meet]

        newly = alive & ((np.linalg.norm(Xn, axis=1) > cfg.r_max)
                         | (np.linalg.norm(Xtn, axis=1) > cfg.r_max))
        if newly.any():
            exit_time[newly] = t_next
            alive &= ~newly

        X, Xt, K, Kt = Xn, Xtn, Kn, Ktn
        scan_marks(t_next)
        if record:
            rec["x1"][i + 1], rec["k1"][i + 1] = X[0], K[0]
            rec["x2"][i + 1], rec["k2"][i + 1] = Xt[0], Kt[0]
        if step_hook is not None:
            step_hook(i + 1, t_next, X, K, Xt, Kt, alive, hook_buf)

    out = {
        "x": X, "xt": Xt, "k": K, "kt": Kt,
        "zeta": zeta, "s_delta0": s_delta0, "tau_r": tau_r, "t_meet": t_meet,
        "coalesced": merged, "exit_time": exit_time, "eta": eta,
        "n_clamped": n_clamped,
    }
    if record:
        out["record"] = rec
    return out


@dataclass
class CoupledPathRecord:
    """A coupled pair of trajectories on a common grid with stopping-time marks.

    marks holds grid times (inf = not hit) for: 'tau_R' (ball exit),
    'S_delta0' (separation above delta0), 'zeta' (first regime disagreement),
    'T' (meeting: |delta| below threshold with equal regimes) and 'T_tilde'
    (full hybrid coupling; equals T under this discretization's coalescence
    rule, emitted separately for the record format).
    """

    times: np.ndarray
    first: PathRecord
    second: PathRecord
    delta: np.ndarray
    marks: dict
    coalesced: bool
    seed: int
    n_eig_clamped: int = 0  # a - lambda_R I eigenvalues clamped to 0 (roundoff warnings)

    def to_csv(self, path):
        d = self.first.xs.shape[1]
        cols = (["t"] + [f"x{i+1}" for i in range(d)] + [f"xt{i+1}" for i in range(d)]
                + ["k", "kt", "abs_delta"])
        rows = [",".join(cols)]
        for i, t in enumerate(self.times):
            rows.append(",".join(
                [repr(float(t))]
                + [repr(float(v)) for v in self.first.xs[i]]
                + [repr(float(v)) for v in self.second.xs[i]]
                + [str(int(self.first.ks[i])), str(int(self.second.ks[i])),
                   repr(float(self.delta[i]))]))
        with open(path, "w") as fh:
            fh.write("\n".join(rows) + "\n")

    def marks_dict(self) -> dict:
        out = {k: (None if np.isinf(v) else float(v)) for k, v in self.marks.items()}
        out["coalesced"] = self.coalesced
        out["seed"] = self.seed
        out["n_eig_clamped"] = self.n_eig_clamped
        return out


@dataclass
class CoupledEnsemble:
    """Terminal data and marks for an ensemble of coupled pairs."""

    x: np.ndarray
    xt: np.ndarray
    k: np.ndarray
    kt: np.ndarray
    zeta: np.ndarray
    s_delta0: np.ndarray
    tau_r: np.ndarray
    t_meet: np.ndarray
    coalesced: np.ndarray
    exit_time: np.ndarray
    hook_buffers: list = field(default_factory=list)

    @property
    def n_censored(self) -> int:
        return int(np.count_nonzero(np.isfinite(self.exit_time)))


def _couple_single(spec, start, start2, cfg, seed) -> CoupledPathRecord:
    spec.check_state(start)
    spec.check_state(start2)
    if start.k != start2.k:
        raise ValueError("coupled starts must share the initial regime")
    rng = derive_rng(seed, 0, 0)
    out = _evolve_pair(spec, start.x[None, :], start2.x[None, :],
                       np.array([start.k]), np.array([start2.k]), cfg, rng, record=True)
    rec = out["record"]
    exited = out["exit_time"][0]
    exited = None if not np.isfinite(exited) else float(exited)
    p1 = PathRecord(rec["times"], rec["x1"], rec["k1"], rec["sw1"], rec["jp1"], seed,
                    exited=exited)
    p2 = PathRecord(rec["times"], rec["x2"], rec["k2"], rec["sw2"], rec["jp2"], seed,
                    exited=exited)
    delta = np.linalg.norm(rec["x2"] - rec["x1"], axis=1)
    marks = {
        "tau_R": float(out["tau_r"][0]),
        "S_delta0": float(out["s_delta0"][0]),
        "zeta": float(out["zeta"][0]),
        "T": float(out["t_meet"][0]),
        "T_tilde": float(out["t_meet"][0]),
    }
    return CoupledPathRecord(rec["times"], p1, p2, delta, marks,
                             bool(out["coalesced"][0]), seed,
                             n_eig_clamped=int(out["n_clamped"]))


def couple_basic(spec: ModelSpec, start: HybridState, start2: HybridState,
                 cfg: CouplingConfig, seed: int) -> CoupledPathRecord:
    """Synchronous coupling of a single pair, with full recording."""
    if cfg.kind != "basic":
        cfg = replace(cfg, kind="basic")
    return _couple_single(spec, start, start2, cfg, seed)


def couple_reflection(spec: ModelSpec, start: HybridState, start2: HybridState,
                      cfg: CouplingConfig, seed: int) -> CoupledPathRecord:
    """Reflection coupling of a single pair, with full recording."""
    if cfg.kind != "reflection":
        cfg = replace(cfg, kind="reflection")
    return _couple_single(spec, start, start2, cfg, seed)


def couple_ensemble(spec: ModelSpec, start: HybridState, start2: HybridState,
                    cfg: CouplingConfig, n_pairs: int, seed: int, threads: int = 1,
                    stream: int = 0) -> CoupledEnsemble:
    """Run n_pairs coupled pairs; chunked like  simulate_ensemble, so results
    are independent of the thread count."""
    spec.check_state(start)
    spec.check_state(start2)
    if start.k != start2.k:
        raise ValueError("coupled starts must share the initial regime")
    bounds = [(lo, min(lo + CHUNK_SIZE, n_pairs)) for lo in range(0, n_pairs, CHUNK_SIZE)]
    d = spec.d
    arrays = {name: np.empty(n_pairs) for name in
              ("zeta", "s_delta0", "tau_r", "t_meet", "exit_time")}
    x_out = np.empty((n_pairs, d))
    xt_out = np.empty((n_pairs, d))
    k_out = np.empty(n_pairs, dtype=np.int64)
    kt_out = np.empty(n_pairs, dtype=np.int64)
    co_out = np.empty(n_pairs, dtype=bool)

    def work(ci: int):
        lo, hi = bounds[ci]
        m = hi - lo
        rng = derive_rng(seed, stream, ci)
        out = _evolve_pair(spec, np.tile(start.x, (m, 1)), np.tile(start2.x, (m, 1)),
                           np.full(m, start.k, dtype=np.int64),
                           np.full(m, start2.k, dtype=np.int64), cfg, rng)
        x_out[lo:hi], xt_out[lo:hi] = out["x"], out["xt"]
        k_out[lo:hi], kt_out[lo:hi] = out["k"], out["kt"]
        co_out[lo:hi] = out["coalesced"]
        for name in arrays:
            arrays[name][lo:hi] = out[name]

    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, range(len(bounds))))
    else:
        for ci in range(len(bounds)):
            work(ci)

    return CoupledEnsemble(x_out, xt_out, k_out, kt_out, arrays["zeta"],
                           arrays["s_delta0"], arrays["tau_r"], arrays["t_meet"],
                           co_out, arrays["exit_time"])


def pair_one_step(spec: ModelSpec, x, xt, k: int, h: float, n: int,
                  rng: np.random.Generator, lambda_R: float | None = None,
                  kind: str = "reflection", with_jumps: bool = True,
                  epsilon: float | None = None):
    """One coupled step of size h from a frozen pair state, n times.

    Returns raw increments (dX, dXt) with the regimes held fixed -- the
    moment tests for the coupled diffusion block and the short-time contraction
    of the pair distance both probe exactly this frozen-state transition.
    """
    x = np.asarray(x, dtype=float)
    xt = np.asarray(xt, dtype=float)
    d = spec.d
    X = np.tile(x, (n, 1))
    Xt = np.tile(xt, (n, 1))
    K = np.full(n, k, dtype=np.int64)
    sqh = np.sqrt(h)

    b1 = np.asarray(spec.drift(X, K), dtype=float)
    b2 = np.asarray(spec.drift(Xt, K), dtype=float)
    if kind == "reflection":
        lam = lambda_R if lambda_R is not None else spec.ellipticity_floor
        if lam is None:
            raise ValueError("reflection step needs lambda_R")
        z1 = rng.standard_normal((n, d))
        z2 = rng.standard_normal((n, d))
        sl1, _ = _sigma_lambda(spec, X, K, lam)
        sl2, _ = _sigma_lambda(spec, Xt, K, lam)
        diff = Xt - X
        dn = np.linalg.norm(diff, axis=1)
        u = np.where(dn[:, None] > 0.0, diff / np.where(dn[:, None] > 0.0, dn[:, None], 1.0), 0.0)
        w2_ref = z2 - 2.0 * u * np.einsum("ni,ni->n", u, z2)[:, None]
        dX = b1 * h + sqh * (np.einsum("nij,nj->ni", sl1, z1) + np.sqrt(lam) * z2)
        dXt = b2 * h + sqh * (np.einsum("nij,nj->ni", sl2, z1) + np.sqrt(lam) * w2_ref)
    else:
        z = rng.standard_normal((n, d))
        sig1 = np.asarray(spec.sigma(X, K), dtype=float)
        sig2 = np.asarray(spec.sigma(Xt, K), dtype=float)
        dX = b1 * h + sqh * np.einsum("nij,nj->ni", sig1, z)
        dXt = b2 * h + sqh * np.einsum("nij,nj->ni", sig2, z)

    if with_jumps and spec.has_jumps:
        eps = epsilon if epsilon is not None else spec.jump_measure.epsilon
        lam_rate = float(spec.jump_measure.large_jump_rate(eps))
        counts = rng.poisson(lam_rate * h, n)
        if spec.jump_compensator is not None:
            dX -= np.asarray(spec.jump_compensator(X, K, eps), dtype=float) * h
            dXt -= np.asarray(spec.jump_compensator(Xt, K, eps), dtype=float) * h
        mmax = int(counts.max()) if n else 0
        for j in range(mmax):
            m = counts > j
            u_marks = spec.jump_measure.large_jump_sampler(eps, int(m.sum()), rng)
            dX[m] += np.asarray(spec.jump_coeff(X[m], K[m], u_marks), dtype=float)
            dXt[m] += np.asarray(spec.jump_coeff(Xt[m], K[m], u_marks), dtype=float)

    return dX, dXt
