"""Discrete energy functional and the two conjugate cost forms.

Paths live on a uniform grid over ``[0, L]``; velocities are forward
differences and coefficients are frozen at the left node of each interval.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import DomainError, EllipticityError, InputError

DRIFT_MINUS_KBAR = "c_minus_kbar"
DRIFT_PLUS_KBAR = "c_plus_kbar"


@dataclass(frozen=True)
class LatticePath:
    L: float
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        if nodes.ndim == 1:
            nodes = nodes[:, None]
        if nodes.shape[0] < 2:
            raise InputError("a lattice path needs at least two nodes")
        if not self.L > 0:
            raise InputError("horizon L must be positive")
        if not np.all(np.isfinite(nodes)):
            raise InputError("non-finite path node")
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def straight(cls, L, n_steps, x, z):
        x = np.asarray(x, dtype=float)
        z = np.asarray(z, dtype=float)
        s = np.linspace(0.0, 1.0, n_steps + 1)[:, None]
        nodes = x + s * (z - x)
        nodes[-1] = z
        return cls(L, nodes)

    @property
    def n_steps(self):
        return self.nodes.shape[0] - 1

    @property
    def dim(self):
        return self.nodes.shape[1]

    @property
    def h(self):
        return self.L / self.n_steps

    @property
    def x(self):
        return self.nodes[0]

    @property
    def z(self):
        return self.nodes[-1]

    @property
    def times(self):
        return np.linspace(0.0, self.L, self.n_steps + 1)

    def velocity(self):
        """Forward differences, shape ``(n_steps, d)``."""
        return np.diff(self.nodes, axis=0) / self.h

    def with_interior(self, interior):
        nodes = self.nodes.copy()
        nodes[1:-1] = np.asarray(interior).reshape(self.n_steps - 1, self.dim)
        return LatticePath(self.L, nodes)

    def resampled(self, n_steps, scale=1.0, L=None):
        """Linear resampling on a new grid, optionally scaled about the origin."""
        L = self.L if L is None else L
        s_old = np.linspace(0.0, 1.0, self.n_steps + 1)
        s_new = np.linspace(0.0, 1.0, n_steps + 1)
        nodes = np.stack([np.interp(s_new, s_old, self.nodes[:, j]) for j in range(self.dim)], axis=1)
        return LatticePath(L, scale * nodes)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("s," + ",".join(f"x{i + 1}" for i in range(self.dim)) + "\n")
            for t, row in zip(self.times, self.nodes):
                fh.write(",".join(format(v, ".17g") for v in (t, *row)) + "\n")


@dataclass(frozen=True)
class ActionValue:
    v1: float
    v2: float
    v1_density: Optional[np.ndarray] = None

    @property
    def total(self):
        return self.v1 + self.v2

    def to_dict(self):
        out = {"v1": self.v1, "v2": self.v2, "total": self.total}
        if self.v1_density is not None:
            out["v1_per_interval"] = [float(v) for v in self.v1_density]
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def effective_drift(field, nu, points, drift_sign=DRIFT_MINUS_KBAR, regime=None):
    """Drift the path velocity is measured against, at a batch of points.

    ``c_minus_kbar`` uses ``c - kbar``, ``c_plus_kbar`` uses ``c + kbar`` (the two
    sign conventions for the compensated jump mean).  Passing a regime adds
    the fast drift ``(eps/delta) b`` as a finite-scale diagnostic.
    """
    if drift_sign not in (DRIFT_MINUS_KBAR, DRIFT_PLUS_KBAR):
        raise InputError(f"unknown drift_sign {drift_sign!r}")
    D = field.c_at(points)
    if nu.n_atoms:
        kbar = nu.mean_jump(field, points)
        D = D - kbar if drift_sign == DRIFT_MINUS_KBAR else D + kbar
    if regime is not None:
        D = D + regime.ratio * field.b_at(points)
    return D


def _spd_solve(a, r):
    """Batched ``a^{-1} r`` through Cholesky factors; raises on non-SPD input."""
    try:
        chol = np.linalg.cholesky(a)
    except np.linalg.LinAlgError as exc:
        raise EllipticityError("diffusion matrix is not positive definite along the path") from exc
    y = np.linalg.solve(chol, r[..., None])
    return np.linalg.solve(np.swapaxes(chol, -1, -2), y)[..., 0]


def v1_density(field, nu, psi, drift_sign=DRIFT_MINUS_KBAR, regime=None):
    """Per-interval contributions ``0.5 * |r|^2_{a^-1} * h``."""
    left = psi.nodes[:-1]
    r = psi.velocity() - effective_drift(field, nu, left, drift_sign, regime)
    m = _spd_solve(field.a_at(left), r)
    return 0.5 * np.sum(r * m, axis=1) * psi.h


def v1_energy(field, nu, psi, drift_sign=DRIFT_MINUS_KBAR, regime=None):
    """Quadratic path cost of ``psi`` in the metric of ``a^{-1}``."""
    return float(np.sum(v1_density(field, nu, psi, drift_sign, regime)))


def _intensity(phi):
    values = getattr(phi, "values", phi)
    return 1.0 + np.asarray(values, dtype=float)


def xlogx_cost(g):
    """``g log g - g + 1`` elementwise, with ``0 log 0 = 0``."""
    g = np.asarray(g, dtype=float)
    safe = np.where(g > 0, g, 1.0)
    return np.where(g > 0, g * np.log(safe), 0.0) - g + 1.0


def v2_energy(phi, nu, L):
    """Jump cost of the intensity ``g = 1 + phi`` over a ``(n_steps, M)`` grid on [0, L].

    ``phi`` is a :class:`JumpIntensityField` or a raw table; ``g = 0`` is
    allowed and costs its boundary value 1 per unit mass and time.
    """
    g = _intensity(phi)
    if g.ndim != 2 or g.shape[1] != nu.n_atoms:
        raise InputError("intensity table must have one column per atom")
    if not np.all(np.isfinite(g)):
        raise DomainError("non-finite intensity")
    if np.any(g < 0):
        raise DomainError("intensity 1 + phi must be nonnegative")
    if g.size == 0:
        return 0.0
    dt = L / g.shape[0]
    return float(np.sum(xlogx_cost(g) * nu.masses[None, :]) * dt)


def action_value(field, nu, psi, phi, drift_sign=DRIFT_MINUS_KBAR, regime=None):
    dens = v1_density(field, nu, psi, drift_sign, regime)
    return ActionValue(float(np.sum(dens)), v2_energy(phi, nu, psi.L), dens)


def q1_conjugate(a_matrix, v):
    """``<v, a^{-1} v>`` for a symmetric positive definite ``a``."""
    a = np.atleast_2d(np.asarray(a_matrix, dtype=float))
    v = np.asarray(v, dtype=float)
    if not np.allclose(a, a.T):
        raise DomainError("matrix is not symmetric")
    try:
        factor = cho_factor(a)
    except np.linalg.LinAlgError as exc:
        raise DomainError("matrix is not positive definite") from exc
    return float(v @ cho_solve(factor, v))


def q2_conjugate(r):
    """``r log r - r + 1`` for ``r >= 0``."""
    if r < 0 or not math.isfinite(r):
        raise DomainError("q2_conjugate needs a finite r >= 0")
    return float(xlogx_cost(r))
