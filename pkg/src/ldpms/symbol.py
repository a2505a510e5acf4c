"""Generator symbols and the symbol-based transition-density bound.

The frozen-coefficient symbol is::

    q(x, xi) = 1/2 <xi, a(x) xi> - i <c(x) + kbar(x), xi>
               + sum_j w_j (1 - exp(i <k(x, y_j), xi>))

so that ``Re q`` is the diffusion quadratic form plus a nonnegative jump
part.  The density bound integrates ``exp(-t/16 * inf_z Re q(z, xi))`` over
``xi`` by tensor Gauss-Legendre quadrature on a truncated box.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .coeffs import ELLIPTICITY_FLOOR, ellipticity_kappa, torus_grid
from .errors import BoundDivergenceError, EllipticityError, InputError


@dataclass(frozen=True)
class SymbolEval:
    x: np.ndarray
    xi: np.ndarray
    quadratic: complex
    drift: complex
    jump: complex

    @property
    def value(self):
        return self.quadratic + self.drift + self.jump

    def to_dict(self):
        return {"x": self.x.tolist(), "xi": self.xi.tolist(),
                "value": [self.value.real, self.value.imag],
                "parts": {k: [complex(getattr(self, k)).real, complex(getattr(self, k)).imag]
                          for k in ("quadratic", "drift", "jump")}}


def _prep(field, x, xi):
    x = np.asarray(x, dtype=float).reshape(-1)
    xi = np.asarray(xi, dtype=float).reshape(-1)
    if x.shape != (field.dim,) or xi.shape != (field.dim,):
        raise InputError("x and xi must both have the model dimension")
    return x, xi


def eval_symbol(field, nu, x, xi):
    """Limit symbol ``q(x, xi)`` with its three parts reported separately."""
    x, xi = _prep(field, x, xi)
    pt = x[None, :]
    a = field.a_at(pt)[0]
    drift = field.c_at(pt)[0]
    jump = 0j
    if nu.n_atoms:
        K = nu.jumps(field, pt)[0]
        drift = drift + nu.masses @ K
        jump = complex(np.sum(nu.masses * (1.0 - np.exp(1j * (K @ xi)))))
    quad = complex(0.5 * xi @ a @ xi)
    return SymbolEval(x, xi, quad, complex(-1j * (drift @ xi)), jump)


def eval_prelimit_symbol(field, nu, regime, x, xi):
    """Finite-scale symbol at the fast point ``x / delta``.

    Derivatives acting on the test function are replaced by their Fourier
    multipliers ``d/dx_l -> i xi_l`` at the frozen point, giving with
    ``r = eps / delta``::

        q = (1 + r^2)/2 <xi,a xi> - i r <xi,a xi> - i (1 + r) <c, xi>
            - i (r + r^2) <b, xi> - i (1 + r) <kbar, xi> + sum_j w_j (1 - e^{i<k,xi>})

    which reduces to :func:`eval_symbol` as ``r -> 0``.
    """
    x, xi = _prep(field, x, xi)
    pt = (x / regime.delta)[None, :]
    r = regime.ratio
    a = field.a_at(pt)[0]
    b = field.b_at(pt)[0]
    c = field.c_at(pt)[0]
    qa = float(xi @ a @ xi)
    quad = complex(0.5 * (1 + r * r) * qa, -r * qa)
    drift = -1j * ((1 + r) * (c @ xi) + (r + r * r) * (b @ xi))
    jump = 0j
    if nu.n_atoms:
        K = nu.jumps(field, pt)[0]
        drift += -1j * (1 + r) * float(nu.masses @ (K @ xi))
        jump = complex(np.sum(nu.masses * (1.0 - np.exp(1j * (K @ xi)))))
    return SymbolEval(x, xi, quad, complex(drift), jump)


class _ReSymbol:
    """``Re q(z, xi)`` over a fixed torus sample of ``z``, vectorized in ``xi``."""

    def __init__(self, field, nu, resolution):
        self.z = torus_grid(field.dim, resolution)
        self.a = field.a_at(self.z)
        self.K = nu.jumps(field, self.z)
        self.w = nu.masses

    def inf_over_z(self, xis, chunk=256):
        out = np.empty(len(xis))
        for s in range(0, len(xis), chunk):
            X = xis[s:s + chunk]
            vals = 0.5 * np.einsum("zij,xi,xj->xz", self.a, X, X)
            if len(self.w):
                phase = np.einsum("zmd,xd->xzm", self.K, X)
                vals += np.einsum("m,xzm->xz", self.w, 1.0 - np.cos(phase))
            out[s:s + chunk] = vals.min(axis=1)
        return out


def _default_resolution(dim):
    return {1: 32, 2: 32, 3: 8}.get(dim, 4)


def _sphere_directions(dim, n):
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        ang = 2 * math.pi * np.arange(n) / n
        return np.stack([np.cos(ang), np.sin(ang)], axis=1)
    # Fibonacci lattice on the sphere, padded with random-free axes for d > 3
    if dim == 3:
        i = np.arange(n) + 0.5
        phi = np.arccos(1 - 2 * i / n)
        theta = math.pi * (1 + 5**0.5) * i
        return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    eye = np.eye(dim)
    return np.concatenate([eye, -eye])


@dataclass
class MarginReport:
    radii: list
    margins: list
    increasing: bool
    slope: float
    passed: object   # True / False / None when indeterminate

    def to_dict(self):
        return {"radii": self.radii, "margins": self.margins, "increasing": self.increasing,
                "slope": self.slope, "pass": self.passed}


def hartman_wintner_margin(field, nu, xi_radii, *, resolution=None, n_directions=64):
    """Sampled ``m(R) = inf_{z, |xi|=R} Re q(z, xi) / log(1 + R)``.

    Passes when the margin increases along the radii and its last value
    exceeds ten times the first; a single radius is indeterminate.
    """
    radii = [float(r) for r in xi_radii]
    if not radii or radii[0] <= 0 or any(b <= a for a, b in zip(radii, radii[1:])):
        raise InputError("radii must be positive and increasing")
    res = _ReSymbol(field, nu, resolution or _default_resolution(field.dim))
    dirs = _sphere_directions(field.dim, n_directions)
    margins = [float(res.inf_over_z(R * dirs).min() / math.log1p(R)) for R in radii]
    if len(radii) < 2:
        return MarginReport(radii, margins, True, float("nan"), None)
    increasing = all(b > a for a, b in zip(margins, margins[1:]))
    slope = float(np.polyfit(np.log(radii), margins, 1)[0])
    passed = bool(increasing and margins[-1] > 10 * max(margins[0], 0.0) and margins[-1] > 0)
    return MarginReport(radii, margins, increasing, slope, passed)


def _default_nodes(dim):
    return {1: 801, 2: 161, 3: 41}.get(dim, 15)


def density_upper_bound(field, nu, t, *, resolution=None, n_nodes=None, tail=1e-6,
                        floor=ELLIPTICITY_FLOOR):
    """Quadrature of ``int exp(-t/16 * inf_z Re q(z, xi)) dxi`` over R^d.

    The box ``[-R, R]^d`` is chosen from the sampled ellipticity constant so
    that ``exp(-t kappa R^2 / 32) < tail``; without a positive constant the
    integrand does not decay and :class:`BoundDivergenceError` is raised.
    """
    if not t > 0:
        raise InputError("t must be positive")
    res_z = resolution or _default_resolution(field.dim)
    try:
        kappa = ellipticity_kappa(field, resolution=res_z, floor=floor)
    except EllipticityError as exc:
        raise BoundDivergenceError(
            f"inf_z Re q does not dominate log(1 + |xi|): {exc}; the bound integral diverges") from exc
    R = math.sqrt(32.0 * math.log(1.0 / tail) / (t * kappa))
    n = n_nodes or _default_nodes(field.dim)
    nodes, weights = np.polynomial.legendre.leggauss(n)
    nodes, weights = R * nodes, R * weights
    mesh = np.meshgrid(*([nodes] * field.dim), indexing="ij")
    xis = np.stack([m.reshape(-1) for m in mesh], axis=1)
    wmesh = np.meshgrid(*([weights] * field.dim), indexing="ij")
    w = np.prod(np.stack([m.reshape(-1) for m in wmesh], axis=1), axis=1)
    sym = _ReSymbol(field, nu, res_z)
    integrand = np.exp(-t / 16.0 * sym.inf_over_z(xis))
    return float(np.sum(w * integrand))


def symbol_slice(field, nu, x, xis):
    """Rows ``(xi..., Re q, Im q)`` along a list of covectors, for export."""
    rows = []
    for xi in np.atleast_2d(xis):
        q = eval_symbol(field, nu, x, xi).value
        rows.append([*map(float, xi), q.real, q.imag])
    return rows
