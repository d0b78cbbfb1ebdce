"""Model resolution: built-ins by name, or user models from structured config.

A model reference is either

* ``example51`` / ``example52`` / ``example52:<delta>`` -- built-ins, or
* a path to a YAML/JSON file with a ``model:`` mapping.

Config schema (see docs/cli.md for a worked example)::

    model:
      name: my-model            # optional label
      builtin: example52        # shortcut; exclusive with the fields below
      delta: 1.0                #   (builtin parameter)
      dimension: 1
      drift: "-x/(2*k**2)"      # numpy expression in x ((...,d) array), k
      sigma: "cbrt(x[..., 0])**2 + 1"   # scalar multiple of the identity
      jump:                     # optional; power-law family du/|u|^p on 0<|u|<1
        family: power_law
        exponent: 2.0
        coeff: "u[..., 0] * x / k"      # expression in x, k, u
        epsilon: 0.05
      rates:                    # optional; zero-rate model when omitted
        expr: "k*exp(-(l+k)*log(3.0))/(1+l*norm2(x))"
        tail_coeff: "0.5*k*3.0**(-k)"   # tail bound = tail_coeff(k) * ratio**L
        tail_ratio: 0.3333333333333333
      ellipticity_floor: 1.0    # optional declared constants
      growth_constant: 4.0
      regime_tol: 1.0e-9        # optional truncation tolerance default

Expressions are evaluated with numpy in a restricted namespace; they must
broadcast over a leading batch axis (the built-ins are the reference for the
conventions).  This is a research tool: configs are trusted input.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import yaml

from .examples import example51, example52
from .model import JumpMeasureSpec, ModelSpec, RateMatrixSpec

__all__ = ["resolve_model", "load_model_config", "BUILTINS"]

BUILTINS = ("example51", "example52")


def _namespace():
    ns = {name: getattr(np, name) for name in (
        "abs", "cos", "sin", "tan", "exp", "log", "sqrt", "cbrt", "tanh",
        "arctan", "sign", "minimum", "maximum", "pi", "e", "where")}
    ns["np"] = np
    ns["norm"] = lambda x: np.linalg.norm(x, axis=-1)
    ns["norm2"] = lambda x: np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)
    return ns


def _compile(expr: str, args: tuple):
    code = compile(expr, "<model-config>", "eval")
    base = _namespace()

    def fn(*vals):
        local = dict(base)
        local.update(zip(args, vals))
        return eval(code, {"__builtins__": {}}, local)

    return fn


def _power_law_measure(exponent: float, epsilon: float) -> JumpMeasureSpec:
    """1-d mark measure du/|u|^p on 0 < |u| < 1 (p > 1 so every eps-restriction
    has finite mass while the full measure may be infinite)."""
    p = float(exponent)
    if p <= 1.0:
        raise ValueError("power-law exponent must exceed 1")

    def density(u):
        return np.abs(np.asarray(u, dtype=float)[..., 0]) ** -p

    def rate(eps):
        if abs(p - 1.0) < 1e-12:
            return 2.0 * math.log(1.0 / eps)
        return 2.0 * (eps ** (1.0 - p) - 1.0) / (p - 1.0)

    def sampler(eps, n, rng):
        f = rng.random(n)
        # inverse CDF of the normalized |u|^-p tail on (eps, 1)
        a = eps ** (1.0 - p)
        mag = (a - f * (a - 1.0)) ** (1.0 / (1.0 - p))
        sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        return (sign * mag)[:, None]

    return JumpMeasureSpec(
        mark_dim=1,
        domain=f"0 < |u| < 1 in R, density |u|^-{p}",
        density=density,
        epsilon=float(epsilon),
        large_jump_rate=rate,
        large_jump_sampler=sampler,
    )


def load_model_config(path) -> ModelSpec:
    """Build a ModelSpec from a YAML/JSON config file."""
    text = Path(path).read_text()
    raw = yaml.safe_load(text) if not str(path).endswith(".json") else json.loads(text)
    if not isinstance(raw, dict) or "model" not in raw:
        raise ValueError("config must contain a top-level 'model' mapping")
    m = raw["model"]

    if "builtin" in m:
        name = m["builtin"]
        if name == "example51":
            return example51()
        if name == "example52":
            return example52(float(m.get("delta", 1.0)))
        raise ValueError(f"unknown builtin '{name}'; available: {', '.join(BUILTINS)}")

    d = int(m["dimension"])
    drift_fn = _compile(m["drift"], ("x", "k"))
    sigma_scalar = _compile(m["sigma"], ("x", "k"))

    def drift(x, k):
        x = np.asarray(x, dtype=float)
        k = np.asarray(k, dtype=float)
        return np.broadcast_to(np.asarray(drift_fn(x, k), dtype=float), x.shape).copy()

    def sigma(x, k):
        x = np.asarray(x, dtype=float)
        k = np.asarray(k, dtype=float)
        s = np.asarray(sigma_scalar(x, k), dtype=float)
        return s[..., None, None] * np.eye(d)

    jump_coeff = None
    measure = None
    if m.get("jump"):
        j = m["jump"]
        if j.get("family", "power_law") != "power_law":
            raise ValueError("only the power_law jump family is supported in configs")
        measure = _power_law_measure(j["exponent"], j.get("epsilon", 0.05))
        coeff_fn = _compile(j["coeff"], ("x", "k", "u"))

        def jump_coeff(x, k, u):
            x = np.asarray(x, dtype=float)
            k = np.asarray(k, dtype=float)
            u = np.asarray(u, dtype=float)
            return np.broadcast_to(np.asarray(coeff_fn(x, k, u), dtype=float), x.shape).copy()

    if m.get("rates"):
        r = m["rates"]
        rate_fn = _compile(r["expr"], ("x", "k", "l"))
        tail_coeff = _compile(r["tail_coeff"], ("k",))
        ratio = float(r["tail_ratio"])
        if not (0.0 < ratio < 1.0):
            raise ValueError("tail_ratio must lie in (0, 1)")

        def rate(x, k, l):
            return np.asarray(rate_fn(np.asarray(x, dtype=float),
                                      np.asarray(k, dtype=float),
                                      np.asarray(l, dtype=float)), dtype=float)

        def tail_bound(k, L):
            return float(tail_coeff(float(k))) * ratio ** L

        rates = RateMatrixSpec(rate=rate, tail_bound=tail_bound)
    else:
        def zero_rate(x, k, l):
            shape = np.broadcast(np.asarray(x)[..., 0], np.asarray(k), np.asarray(l)).shape
            return np.zeros(shape)

        rates = RateMatrixSpec(rate=zero_rate, tail_bound=lambda k, L: 0.0)

    return ModelSpec(
        d=d,
        drift=drift,
        sigma=sigma,
        rates=rates,
        jump_coeff=jump_coeff,
        jump_measure=measure,
        ellipticity_floor=m.get("ellipticity_floor"),
        growth_constant=m.get("growth_constant"),
        regime_tol=float(m.get("regime_tol", 1e-9)),
        name=m.get("name", "config-model"),
    )


def resolve_model(ref: str) -> ModelSpec:
    """Resolve 'example51', 'example52[:delta]' or a config file path."""
    if ref == "example51":
        return example51()
    if ref == "example52":
        return example52()
    if ref.startswith("example52:"):
        return example52(float(ref.split(":", 1)[1]))
    p = Path(ref)
    if p.exists():
        return load_model_config(p)
    raise ValueError(
        f"unknown model '{ref}'; built-ins: example51, example52[:delta], "
        "or pass a config file path")
