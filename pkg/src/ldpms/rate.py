"""Rate-function estimation by minimizing the discrete energy over paths.

``estimate_J(v)`` minimizes ``V_L(0, L v)`` for an increasing schedule of
horizons and extrapolates ``V_L / L`` to ``L -> infinity`` with an
``a + b / L`` least-squares fit.
"""
from __future__ import annotations

import csv
import itertools
import math
import warnings
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Optional

import numpy as np
from scipy.optimize import minimize

from .action import DRIFT_MINUS_KBAR, ActionValue, LatticePath, effective_drift, _spd_solve, v2_energy
from .errors import ConvergenceError, InputError
from .measure_change import JumpIntensityField


@dataclass
class RateOptions:
    tol: float = 1e-6
    max_iter: int = 20000
    steps_per_unit: int = 16
    L_schedule: tuple = (8, 16, 32, 64)
    drift_sign: str = DRIFT_MINUS_KBAR
    regime: object = None        # include (eps/delta) b when set
    fd_step: float = 1e-6
    extrapolation_tol: float = 1e-3


class ActionMinimum(NamedTuple):
    path: LatticePath
    phi: JumpIntensityField
    value: ActionValue
    diagnostics: dict


@dataclass
class RateEstimate:
    velocity: np.ndarray
    values: list                 # [(L, V_L / L), ...]
    J: float
    diagnostics: dict = dc_field(default_factory=dict)
    flagged: bool = False
    path: Optional[LatticePath] = None

    def to_row(self):
        return [*map(float, self.velocity), *[v for _, v in self.values], self.J]


class _Objective:
    """Energy over interior nodes and log-intensities, with its gradient."""

    def __init__(self, field, nu, template, n_steps, opts):
        self.field, self.nu, self.opts = field, nu, opts
        self.template = template
        self.n = n_steps
        self.d = template.dim
        self.M = nu.n_atoms
        self.h = template.h
        self.n_path = (self.n - 1) * self.d

    def split(self, theta):
        path = self.template.with_interior(theta[:self.n_path])
        u = theta[self.n_path:].reshape(self.n, self.M)
        return path, u

    def _drift(self, pts):
        return effective_drift(self.field, self.nu, pts, self.opts.drift_sign, self.opts.regime)

    def __call__(self, theta):
        path, u = self.split(theta)
        left = path.nodes[:-1]
        D = self._drift(left)
        a = self.field.a_at(left)
        r = path.velocity() - D
        m = _spd_solve(a, r)
        h = self.h
        f1 = 0.5 * h * float(np.sum(r * m))

        # d/d x_k of the drift and of a, by central differences at left nodes
        eps_fd = self.opts.fd_step
        jd = np.empty((self.n, self.d, self.d))      # [n, i, k] = dD_i/dx_k
        da = np.empty((self.n, self.d, self.d, self.d))  # [n, k, i, j]
        for k in range(self.d):
            e = np.zeros(self.d)
            e[k] = eps_fd
            jd[:, :, k] = (self._drift(left + e) - self._drift(left - e)) / (2 * eps_fd)
            da[:, k] = (self.field.a_at(left + e) - self.field.a_at(left - e)) / (2 * eps_fd)

        g_nodes = np.zeros_like(path.nodes)
        g_nodes[1:] += m
        g_nodes[:-1] -= m
        g_nodes[:-1] -= h * np.einsum("nik,ni->nk", jd, m)
        g_nodes[:-1] -= 0.5 * h * np.einsum("nkij,ni,nj->nk", da, m, m)

        g = np.exp(u)
        dt = self.h
        f2 = float(np.sum((g * u - g + 1.0) * self.nu.masses[None, :]) * dt) if self.M else 0.0
        g_u = (u * g * self.nu.masses[None, :] * dt).reshape(-1)
        grad = np.concatenate([g_nodes[1:-1].reshape(-1), g_u])
        return f1 + f2, grad


def minimize_action(field, nu, L, x, z, init=None, opts=None, n_steps=None):
    """Minimize the discrete energy over paths from ``x`` to ``z`` on ``[0, L]``.

    Jump intensities are parameterized as ``1 + phi = exp(u)``.  Returns an
    :class:`ActionMinimum`; raises :class:`ConvergenceError` (carrying the best
    iterate) when the gradient tolerance is not met within ``max_iter``.
    """
    opts = opts or RateOptions()
    if n_steps is None:
        n_steps = init.n_steps if init is not None else max(2, int(round(opts.steps_per_unit * L)))
    x = np.asarray(x, dtype=float).reshape(-1)
    z = np.asarray(z, dtype=float).reshape(-1)
    if init is None:
        init = LatticePath.straight(L, n_steps, x, z)
    if init.n_steps != n_steps or not (np.allclose(init.x, x) and np.allclose(init.z, z)):
        raise InputError("initial path does not match the grid or the endpoints")
    init = LatticePath(L, np.vstack([x, init.nodes[1:-1], z]))
    obj = _Objective(field, nu, init, n_steps, opts)
    theta0 = np.concatenate([init.nodes[1:-1].reshape(-1), np.zeros(n_steps * nu.n_atoms)])
    f0, _ = obj(theta0)

    history = [f0]

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))

    if theta0.size == 0:
        res_x, nit = theta0, 0
    else:
        res = minimize(obj, theta0, jac=True, method="L-BFGS-B", callback=record,
                       options={"maxiter": opts.max_iter, "gtol": opts.tol, "ftol": 1e-15,
                                "maxcor": 20})
        res_x, nit = res.x, res.nit
    f_final, grad = obj(res_x)
    if f_final > f0:
        res_x, f_final = theta0, f0
        grad = obj(theta0)[1]
    gnorm = float(np.max(np.abs(grad))) if grad.size else 0.0
    path, u = obj.split(res_x)
    phi = JumpIntensityField(np.expm1(u))
    value = ActionValue(float(f_final - v2_energy(phi, nu, L)), v2_energy(phi, nu, L))
    diag = {"iterations": int(nit), "grad_norm": gnorm, "history": history}
    best = ActionMinimum(path, phi, value, diag)
    if gnorm > opts.tol:
        raise ConvergenceError(
            f"action minimization stopped at gradient norm {gnorm:.3g} > tol {opts.tol:g} "
            f"after {nit} iterations", best=best)
    return best


def _path_energy(field, nu, path, opts):
    obj = _Objective(field, nu, path, path.n_steps, opts)
    theta = np.concatenate([path.nodes[1:-1].reshape(-1), np.zeros(path.n_steps * nu.n_atoms)])
    return obj(theta)[0]


def estimate_J(field, nu, v, L_schedule=None, opts=None):
    """Estimate the rate ``J(v)`` as the extrapolated limit of ``V_L(0, L v) / L``."""
    opts = opts or RateOptions()
    schedule = [float(L) for L in (L_schedule or opts.L_schedule)]
    if len(schedule) < 3:
        raise InputError("L_schedule needs at least three horizons")
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise InputError("L_schedule must be increasing")
    v = np.asarray(v, dtype=float).reshape(-1)
    origin = np.zeros_like(v)
    values, iters, gnorms = [], [], []
    prev = None
    for L in schedule:
        n = max(2, int(round(opts.steps_per_unit * L)))
        init = LatticePath.straight(L, n, origin, L * v)
        if prev is not None:
            warm = prev.resampled(n, scale=L / prev.L, L=L)
            warm = LatticePath(L, np.vstack([origin, warm.nodes[1:-1], L * v]))
            if _path_energy(field, nu, warm, opts) < _path_energy(field, nu, init, opts):
                init = warm
        result = minimize_action(field, nu, L, origin, L * v, init=init, opts=opts)
        values.append((L, result.value.total / L))
        iters.append(result.diagnostics["iterations"])
        gnorms.append(result.diagnostics["grad_norm"])
        prev = result.path

    Ls = np.array([L for L, _ in values])
    vals = np.array([val for _, val in values])
    b, a = np.polyfit(1.0 / Ls, vals, 1)
    diffs = np.diff(vals)
    scale = opts.extrapolation_tol * max(1.0, abs(a))
    big = diffs[np.abs(diffs) > scale]
    flagged = bool(len(big) >= 2 and np.any(np.sign(big[1:]) != np.sign(big[:-1])))
    if flagged:
        warnings.warn(f"V_L/L oscillates along the schedule for v = {v.tolist()}", RuntimeWarning)
    J = max(float(a), 0.0)
    diag = {"iterations": iters, "grad_norm": gnorms, "slope": float(b)}
    return RateEstimate(v, values, J, diag, flagged, prev)


def path_space_infimum(field, nu, T, x, z, opts=None, L_schedule=None):
    """``T * J((z - x) / T)``: the cost of reaching ``z`` from ``x`` in time ``T``."""
    if not T > 0:
        raise InputError("T must be positive")
    v = (np.asarray(z, dtype=float) - np.asarray(x, dtype=float)) / T
    return T * estimate_J(field, nu, v, L_schedule, opts).J


def rate_function(field, nu, opts=None, L_schedule=None):
    """Memoized ``v -> J(v)`` backed by :func:`estimate_J`."""
    cache = {}

    def J(v):
        key = tuple(np.round(np.asarray(v, dtype=float).reshape(-1), 12))
        if key not in cache:
            cache[key] = estimate_J(field, nu, np.array(key), L_schedule, opts).J
        return cache[key]

    J.cache = cache
    return J


@dataclass
class ConvexityReport:
    n_triples: int
    violations: list
    tol: float

    @property
    def passed(self):
        return not self.violations

    def to_dict(self):
        return {"n_triples": self.n_triples, "tol": self.tol, "pass": self.passed,
                "violations": self.violations}


def convexity_check(estimates, tol=1e-4):
    """Midpoint convexity over every grid triple ``(u, (u+w)/2, w)``."""
    pts = [np.asarray(e.velocity, dtype=float) for e in estimates]
    vals = [float(e.J) for e in estimates]
    n_triples = 0
    violations = []
    for i, j in itertools.combinations(range(len(pts)), 2):
        mid = 0.5 * (pts[i] + pts[j])
        for k, p in enumerate(pts):
            if k in (i, j) or not np.allclose(p, mid, atol=1e-9):
                continue
            n_triples += 1
            gap = vals[k] - 0.5 * (vals[i] + vals[j])
            if gap > tol:
                violations.append({"u": pts[i].tolist(), "w": pts[j].tolist(), "mid": p.tolist(),
                                   "excess": gap})
    return ConvexityReport(n_triples, violations, tol)


def write_rate_table(estimates, path):
    """CSV with velocity components, ``V_L / L`` per horizon and the extrapolated J."""
    if not estimates:
        raise InputError("no estimates to write")
    d = len(estimates[0].velocity)
    Ls = [L for L, _ in estimates[0].values]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"v{i + 1}" for i in range(d)] + [f"V_L/L@{L:g}" for L in Ls] + ["J"])
        for e in estimates:
            w.writerow([format(x, ".17g") for x in e.to_row()])
