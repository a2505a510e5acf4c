"""Monte Carlo checks of the large-deviation asymptotics.

Probabilities of terminal events are estimated either by plain sampling or
by importance sampling under a drift tilt aimed at the cheapest point of
the event, and ``eps log p`` is compared with ``-inf_A T J((z - x0)/T)``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field as dc_field
from typing import NamedTuple, Optional

import numpy as np

from .action import LatticePath
from .coeffs import check_h1
from .errors import InputError, LdpmsError
from .measure_change import tilt_from_target
from .sim import SimConfig, terminal_batch


@dataclass(frozen=True)
class EventSet:
    kind: str
    center: Optional[np.ndarray] = None
    radius: float = 0.0
    normal: Optional[np.ndarray] = None
    offset: float = 0.0
    lo: Optional[np.ndarray] = None
    hi: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "ball":
            if not self.radius > 0:
                raise InputError("ball radius must be positive")
            object.__setattr__(self, "center", np.asarray(self.center, dtype=float))
        elif self.kind == "halfspace":
            n = np.asarray(self.normal, dtype=float)
            if not np.linalg.norm(n) > 0:
                raise InputError("halfspace normal must be nonzero")
            object.__setattr__(self, "normal", n)
        elif self.kind == "box":
            lo, hi = np.asarray(self.lo, dtype=float), np.asarray(self.hi, dtype=float)
            if lo.shape != hi.shape or not np.all(lo < hi):
                raise InputError("box needs lo < hi componentwise")
            object.__setattr__(self, "lo", lo)
            object.__setattr__(self, "hi", hi)
        else:
            raise InputError(f"unknown event kind {self.kind!r}")

    @classmethod
    def ball(cls, center, radius):
        return cls("ball", center=center, radius=float(radius))

    @classmethod
    def halfspace(cls, normal, offset):
        """``{z : <normal, z> >= offset}``."""
        return cls("halfspace", normal=normal, offset=float(offset))

    @classmethod
    def box(cls, lo, hi):
        return cls("box", lo=lo, hi=hi)

    @classmethod
    def everything(cls, dim):
        return cls.box(np.full(dim, -np.inf), np.full(dim, np.inf))

    @property
    def dim(self):
        ref = {"ball": self.center, "halfspace": self.normal, "box": self.lo}[self.kind]
        return len(ref)

    def contains(self, z):
        z = np.atleast_2d(np.asarray(z, dtype=float))
        if self.kind == "ball":
            return np.linalg.norm(z - self.center, axis=1) <= self.radius
        if self.kind == "halfspace":
            return z @ self.normal >= self.offset
        return np.all((z >= self.lo) & (z <= self.hi), axis=1)

    def project_to_boundary(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "ball":
            u = z - self.center
            nrm = np.linalg.norm(u)
            if nrm == 0:
                u, nrm = np.eye(len(z))[0], 1.0
            return self.center + self.radius * u / nrm
        if self.kind == "halfspace":
            n = self.normal
            return z - (z @ n - self.offset) / (n @ n) * n
        lo, hi = self.lo, self.hi
        p = np.clip(z, lo, hi)
        gaps = np.minimum(np.abs(p - lo), np.abs(hi - p))
        i = int(np.argmin(gaps))
        p[i] = lo[i] if abs(p[i] - lo[i]) <= abs(hi[i] - p[i]) else hi[i]
        return p

    def boundary_grid(self, x0, resolution):
        d = self.dim
        if self.kind == "ball":
            return self.center + self.radius * _directions(d, resolution)
        if self.kind == "halfspace":
            p0 = self.project_to_boundary(x0)
            basis = _orthonormal_complement(self.normal)
            if basis.shape[0] == 0:
                return p0[None, :]
            span = max(1.0, 2.0 * np.linalg.norm(p0 - x0))
            ax = np.linspace(-span, span, resolution)
            mesh = np.meshgrid(*([ax] * basis.shape[0]), indexing="ij")
            coords = np.stack([m.reshape(-1) for m in mesh], axis=1)
            return p0 + coords @ basis
        lo = np.where(np.isfinite(self.lo), self.lo, -1e6)
        hi = np.where(np.isfinite(self.hi), self.hi, 1e6)
        axes = [np.linspace(l, h, resolution) for l, h in zip(lo, hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([m.reshape(-1) for m in mesh], axis=1)
        return np.array([self.project_to_boundary(p) for p in pts])

    def to_dict(self):
        out = {"kind": self.kind}
        if self.kind == "ball":
            out.update(center=self.center.tolist(), radius=self.radius)
        elif self.kind == "halfspace":
            out.update(normal=self.normal.tolist(), offset=self.offset)
        else:
            out.update(lo=self.lo.tolist(), hi=self.hi.tolist())
        return out


def _directions(d, n):
    if d == 1:
        return np.array([[1.0], [-1.0]])
    if d == 2:
        ang = 2 * math.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    i = np.arange(n * n) + 0.5
    if d == 3:
        phi = np.arccos(1 - 2 * i / (n * n))
        theta = math.pi * (1 + 5**0.5) * i
        return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    eye = np.eye(d)
    return np.concatenate([eye, -eye])


def _orthonormal_complement(n):
    n = n / np.linalg.norm(n)
    d = len(n)
    q, _ = np.linalg.qr(np.column_stack([n, np.eye(d)]))
    return q[:, 1:d].T


class ProbabilityEstimate(NamedTuple):
    p_hat: float
    standard_error: float
    zero_hit: bool
    n: int
    variance: float


def estimate_probability(field, nu, cfg, A, n, tilt=None, threads=1):
    """``P{X_T in A}`` by plain sampling, or by importance sampling under ``tilt``."""
    if n < 100:
        raise InputError("use at least 100 paths")
    final, logw = terminal_batch(field, nu, cfg, n, tilt, threads)
    hits = A.contains(final)
    contrib = np.where(hits, np.exp(np.where(hits, logw, 0.0)), 0.0)
    if tilt is None and not np.any(hits):
        return ProbabilityEstimate(0.0, 0.0, True, n, 0.0)
    var = float(np.var(contrib, ddof=1))
    return ProbabilityEstimate(float(np.mean(contrib)), math.sqrt(var / n), not np.any(hits), n, var)


def rate_event_infimum(rate, A, x0, T, grid_resolution=32, refine_steps=30):
    """Minimize ``T * rate((z - x0)/T)`` over the event; returns ``(z_star, value)``.

    ``rate`` is any callable ``v -> J(v)`` (for instance
    :func:`ldpms.rate.rate_function`).  A boundary grid is searched first and
    the best point is refined by a projected pattern search; the start point
    itself is a candidate when it lies in the event.
    """
    x0 = np.asarray(x0, dtype=float)
    cands = list(A.boundary_grid(x0, grid_resolution))
    if not cands:
        raise InputError("empty candidate grid")

    def cost(z):
        return T * rate((z - x0) / T)

    best_z, best = None, math.inf
    for z in cands:
        c = cost(z)
        if c < best:
            best_z, best = z, c
    d = len(x0)
    step = max(1e-3, np.max(np.ptp(np.array(cands), axis=0)) / grid_resolution) if len(cands) > 1 else 0.0
    moves = np.concatenate([np.eye(d), -np.eye(d)])
    for _ in range(refine_steps):
        if step < 1e-9:
            break
        improved = False
        for m in moves:
            z = A.project_to_boundary(best_z + step * m)
            c = cost(z)
            if c < best - 1e-15:
                best_z, best, improved = z, c, True
        if not improved:
            step *= 0.5
    if A.contains(x0)[0]:
        c = cost(x0)
        if c <= best:
            best_z, best = x0.copy(), c
    return best_z, float(best)


@dataclass
class LdpSweep:
    epsilons: list
    deltas: list
    p_hat: list
    standard_error: list
    eps_log_p: list
    target: float
    z_star: list
    law: dict
    gap_tol: float
    failures: list = dc_field(default_factory=list)

    @property
    def final_gap(self):
        last = self.eps_log_p[-1] if self.eps_log_p else float("nan")
        if not math.isfinite(last):
            return math.inf
        if self.target == 0:
            return abs(last)
        return abs(last - self.target) / abs(self.target)

    @property
    def passed(self):
        return not self.failures and self.final_gap <= self.gap_tol

    def to_dict(self):
        return {
            "epsilons": self.epsilons, "deltas": self.deltas, "p_hat": self.p_hat,
            "standard_error": self.standard_error,
            "eps_log_p": [v if math.isfinite(v) else None for v in self.eps_log_p],
            "target": self.target, "z_star": self.z_star, "regime_law": self.law,
            "gap": self.final_gap if math.isfinite(self.final_gap) else None,
            "gap_tol": self.gap_tol, "pass": self.passed, "failures": self.failures,
        }

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epsilon", "delta", "p_hat", "se", "eps_log_p", "target"])
            for row in zip(self.epsilons, self.deltas, self.p_hat, self.standard_error, self.eps_log_p):
                w.writerow([format(v, ".17g") for v in row] + [format(self.target, ".17g")])

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def ldp_sweep(field, nu, law, A, x0, T, eps_list, n, *, rate, dt=None, seed=0, threads=1,
              gap_tol=0.15, grid_resolution=32):
    """Importance-sampled ``eps log p`` along a decreasing epsilon sweep.

    The tilt follows the straight path from ``x0`` to the cheapest point of
    the event.  Points that fail are recorded in ``failures`` and skipped.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise InputError("eps_list must be decreasing")
    check_h1(law, eps_list)
    x0 = np.asarray(x0, dtype=float)
    z_star, value = rate_event_infimum(rate, A, x0, T, grid_resolution)
    target = -value
    sweep = LdpSweep([], [], [], [], [], target, z_star.tolist(),
                     {"coef": law.coef, "exponent": law.exponent}, gap_tol)
    for eps in eps_list:
        regime = law.regimes([eps])[0]
        try:
            cfg = SimConfig(T, dt or 1e-2 * T, x0, regime, seed)
            psi = LatticePath.straight(T, cfg.n_steps, x0, z_star)
            tilt = tilt_from_target(field, nu, regime, psi)
            est = estimate_probability(field, nu, cfg, A, n, tilt, threads)
        except LdpmsError as exc:
            sweep.failures.append({"epsilon": eps, "error": str(exc)})
            continue
        sweep.epsilons.append(eps)
        sweep.deltas.append(regime.delta)
        sweep.p_hat.append(est.p_hat)
        sweep.standard_error.append(est.standard_error)
        sweep.eps_log_p.append(eps * math.log(est.p_hat) if est.p_hat > 0 else -math.inf)
        if est.p_hat <= 0:
            sweep.failures.append({"epsilon": eps, "error": "no weighted hits"})
    return sweep
