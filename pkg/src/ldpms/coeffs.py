"""Periodic coefficient fields, atomic Levy measures and assumption checks.

Every coefficient map is stored as a vectorized callable that receives
points already reduced to the unit torus, an array of shape ``(N, d)``,
and returns ``(N, d)`` (drifts, jump amplitudes) or ``(N, d, d)``
(diffusion matrix).  Reduction modulo 1 is done by :class:`CoefficientField`
before a map is called, so user maps never see raw coordinates.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import AssumptionViolation, DomainError, EllipticityError, InputError

TWO_PI = 2.0 * math.pi
DEFAULT_RESOLUTION = 32
ELLIPTICITY_FLOOR = 1e-8

FieldMap = Callable[[np.ndarray], np.ndarray]
JumpMap = Callable[[np.ndarray, np.ndarray], np.ndarray]


def torus(x):
    """Reduce points modulo the unit torus."""
    return np.mod(np.asarray(x, dtype=float), 1.0)


# ---------------------------------------------------------------------------
# built-in maps
# ---------------------------------------------------------------------------

def constant(value) -> FieldMap:
    value = np.asarray(value, dtype=float)

    def f(x):
        return np.broadcast_to(value, (x.shape[0],) + value.shape).copy()

    return f


def trig(base, amplitude, wavevector, phase=0.0) -> FieldMap:
    """``base + amplitude * sin(2*pi*<m, x> + phase)`` entrywise."""
    base = np.asarray(base, dtype=float)
    amplitude = np.asarray(amplitude, dtype=float)
    m = np.asarray(wavevector, dtype=float)
    if base.shape != amplitude.shape:
        raise InputError("trig: base and amplitude shapes differ")

    def f(x):
        s = np.sin(TWO_PI * (x @ m) + phase)
        return base + amplitude * s.reshape((-1,) + (1,) * base.ndim)

    return f


def sawtooth(base, slope, axis=0) -> FieldMap:
    """``base + slope * x[axis]`` on [0, 1); jumps across the torus seam."""
    base = np.asarray(base, dtype=float)
    slope = np.asarray(slope, dtype=float)

    def f(x):
        s = x[:, axis]
        return base + slope * s.reshape((-1,) + (1,) * base.ndim)

    return f


class TabulatedField:
    """Multilinear interpolation of values tabulated on a periodic grid.

    ``values`` has shape ``(n_1, ..., n_d) + value_shape``; node ``i`` along
    axis ``j`` sits at coordinate ``i / n_j``.
    """

    def __init__(self, values, dim):
        self.values = np.asarray(values, dtype=float)
        self.dim = dim
        self.grid_shape = self.values.shape[:dim]
        self.value_shape = self.values.shape[dim:]

    def __call__(self, x):
        n = np.asarray(self.grid_shape)
        pos = x * n
        lo = np.floor(pos).astype(int)
        frac = pos - lo
        out = np.zeros((x.shape[0],) + self.value_shape)
        for corner in range(2 ** self.dim):
            bits = [(corner >> j) & 1 for j in range(self.dim)]
            weight = np.ones(x.shape[0])
            idx = []
            for j, bit in enumerate(bits):
                weight = weight * (frac[:, j] if bit else 1.0 - frac[:, j])
                idx.append((lo[:, j] + bit) % n[j])
            out += weight.reshape((-1,) + (1,) * len(self.value_shape)) * self.values[tuple(idx)]
        return out


def load_table_csv(path, dim, value_shape=()):
    """Read a tabulated field: one row per grid node, coordinates then values."""
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                continue  # header
    data = np.asarray(rows)
    n_vals = int(np.prod(value_shape)) if value_shape else 1
    if data.ndim != 2 or data.shape[1] != dim + n_vals:
        raise InputError(f"{path}: expected {dim} coordinates and {n_vals} values per row")
    coords = np.mod(data[:, :dim], 1.0)
    axes = [np.unique(np.round(coords[:, j], 12)) for j in range(dim)]
    shape = tuple(len(a) for a in axes)
    if int(np.prod(shape)) != data.shape[0]:
        raise InputError(f"{path}: rows do not form a full tensor grid")
    for j, a in enumerate(axes):
        if not np.allclose(a, np.arange(len(a)) / len(a)):
            raise InputError(f"{path}: axis {j} is not a uniform periodic grid")
    values = np.zeros(shape + tuple(value_shape))
    idx = tuple(np.rint(coords[:, j] * shape[j]).astype(int) % shape[j] for j in range(dim))
    values[idx] = data[:, dim:].reshape((-1,) + tuple(value_shape))
    return TabulatedField(values, dim)


def jump_zero(dim) -> JumpMap:
    def k(x, y):
        return np.zeros((x.shape[0], dim))

    return k


def jump_linear(scale=1.0) -> JumpMap:
    """State-independent jumps ``k(x, y) = scale * y``."""

    def k(x, y):
        return np.broadcast_to(scale * np.asarray(y, dtype=float), (x.shape[0], len(y))).copy()

    return k


def jump_modulated(amplitude, wavevector) -> JumpMap:
    """``k(x, y) = y * (1 + amplitude * sin(2*pi*<m, x>))``."""
    m = np.asarray(wavevector, dtype=float)

    def k(x, y):
        mod = 1.0 + amplitude * np.sin(TWO_PI * (x @ m))
        return mod[:, None] * np.asarray(y, dtype=float)[None, :]

    return k


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CoefficientField:
    """The periodic maps sigma, b, c and the jump kernel k on R^d."""

    dim: int
    sigma: FieldMap
    b: FieldMap
    c: FieldMap
    k: JumpMap
    name: str = "custom"

    def __post_init__(self):
        if int(self.dim) < 1:
            raise InputError("dimension must be a positive integer")

    def _points(self, x):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x[None, :]
        if x.shape[-1] != self.dim:
            raise InputError(f"expected points of dimension {self.dim}, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DomainError("non-finite evaluation point")
        return torus(x)

    def sigma_at(self, x):
        return np.asarray(self.sigma(self._points(x)), dtype=float)

    def a_at(self, x):
        s = self.sigma_at(x)
        return s @ np.swapaxes(s, -1, -2)

    def b_at(self, x):
        return np.asarray(self.b(self._points(x)), dtype=float)

    def c_at(self, x):
        return np.asarray(self.c(self._points(x)), dtype=float)

    def k_at(self, x, y):
        return np.asarray(self.k(self._points(x), np.asarray(y, dtype=float)), dtype=float)


@dataclass(frozen=True)
class LevyMeasure:
    """Finite-atom Levy measure: marks ``(M, d)`` with masses ``(M,)``."""

    marks: np.ndarray
    masses: np.ndarray
    dim: int = dc_field(default=0)

    def __post_init__(self):
        marks = np.asarray(self.marks, dtype=float)
        masses = np.asarray(self.masses, dtype=float).reshape(-1)
        dim = self.dim or (marks.shape[-1] if marks.size else 0)
        if marks.size == 0:
            marks = np.zeros((0, dim))
        marks = marks.reshape(-1, dim)
        if len(marks) != len(masses):
            raise InputError("marks and masses differ in length")
        if not (np.all(np.isfinite(marks)) and np.all(np.isfinite(masses))):
            raise InputError("non-finite atom")
        if np.any(masses <= 0):
            raise InputError("atom masses must be positive")
        if len(marks) and np.any(np.linalg.norm(marks, axis=1) == 0):
            raise InputError("Levy measure cannot charge the origin")
        integrability = float(np.sum(masses * np.minimum(1.0, np.sum(marks**2, axis=1))))
        if not math.isfinite(integrability):
            raise InputError("integrability sum diverges")
        object.__setattr__(self, "marks", marks)
        object.__setattr__(self, "masses", masses)
        object.__setattr__(self, "dim", dim)

    @classmethod
    def empty(cls, dim):
        return cls(np.zeros((0, dim)), np.zeros(0), dim)

    @classmethod
    def from_atoms(cls, atoms, dim):
        """Build from a list of ``(mark, mass)`` pairs."""
        atoms = list(atoms)
        if not atoms:
            return cls.empty(dim)
        marks = np.array([a[0] for a in atoms], dtype=float).reshape(-1, dim)
        masses = np.array([a[1] for a in atoms], dtype=float)
        return cls(marks, masses, dim)

    @property
    def n_atoms(self):
        return len(self.masses)

    @property
    def total_mass(self):
        return float(np.sum(self.masses))

    def jumps(self, field, x):
        """Jump amplitudes ``k(x, y_j)`` stacked as ``(N, M, d)``."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.n_atoms == 0:
            return np.zeros((x.shape[0], 0, field.dim))
        return np.stack([field.k_at(x, y) for y in self.marks], axis=1)

    def mean_jump(self, field, x):
        """``sum_j w_j k(x, y_j)`` for a batch of points, shape ``(N, d)``."""
        return np.einsum("j,njd->nd", self.masses, self.jumps(field, x))


@dataclass(frozen=True)
class RegimeLaw:
    """Power law ``delta = coef * epsilon ** exponent``."""

    coef: float = 1.0
    exponent: float = 0.5

    def __call__(self, epsilon):
        return self.coef * float(epsilon) ** self.exponent

    def regimes(self, eps_list):
        return [ScaleRegime(e, self(e), self) for e in eps_list]

    def separation_ratios(self, eps_list):
        """``delta/epsilon`` along the list (ordered as given)."""
        return [self(e) / e for e in eps_list]


@dataclass(frozen=True)
class ScaleRegime:
    epsilon: float
    delta: float
    law: Optional[RegimeLaw] = None

    def __post_init__(self):
        if not (self.epsilon > 0 and self.delta > 0):
            raise InputError("epsilon and delta must be positive")

    @classmethod
    def from_law(cls, epsilon, law):
        return cls(epsilon, law(epsilon), law)

    @property
    def ratio(self):
        """``epsilon / delta``, the weight of the fast drift."""
        return self.epsilon / self.delta


def check_h1(law, eps_list):
    """Scale-separation gate: delta/epsilon must grow strictly as epsilon shrinks.

    Returns the ratios ordered by decreasing epsilon; raises
    :class:`AssumptionViolation` when the sampled sweep is not strictly
    increasing.  A single point only checks positivity.
    """
    eps_sorted = sorted((float(e) for e in eps_list), reverse=True)
    if not eps_sorted or eps_sorted[-1] <= 0:
        raise InputError("epsilon list must be nonempty and positive")
    ratios = law.separation_ratios(eps_sorted)
    for (e0, r0), (e1, r1) in zip(zip(eps_sorted, ratios), zip(eps_sorted[1:], ratios[1:])):
        if not r1 > r0:
            raise AssumptionViolation(
                "H1-scale-separation",
                f"delta/epsilon does not increase from eps={e0:g} ({r0:g}) to eps={e1:g} ({r1:g})",
            )
    return ratios


# ---------------------------------------------------------------------------
# operations
# ---------------------------------------------------------------------------

_SELECTORS = ("sigma", "a", "b", "c", "k")


def eval_field(field, which, x, y=None):
    """Evaluate one coefficient map at a point (or a batch of points).

    The point is reduced to the unit torus before evaluation.  ``y`` must be
    given exactly when ``which == "k"``.
    """
    if which not in _SELECTORS:
        raise InputError(f"unknown field selector {which!r}")
    if (y is not None) != (which == "k"):
        raise InputError("a mark y is required for, and only for, the jump kernel")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if y is not None and not np.all(np.isfinite(np.asarray(y, dtype=float))):
        raise DomainError("non-finite mark")
    if which == "k":
        out = field.k_at(x, y)
    else:
        out = getattr(field, f"{which}_at")(x)
    return out[0] if single else out


def torus_grid(dim, resolution=DEFAULT_RESOLUTION):
    """Uniform grid ``{i / resolution}`` over the unit torus, ``(res**d, d)``."""
    axes = [np.arange(resolution) / resolution] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def ellipticity_kappa(field, sample_grid=None, *, resolution=DEFAULT_RESOLUTION,
                      floor=ELLIPTICITY_FLOOR):
    """Sampled uniform-ellipticity constant: min over the grid of lambda_min(sigma sigma^T)."""
    grid = torus_grid(field.dim, resolution) if sample_grid is None else np.atleast_2d(sample_grid)
    if grid.size == 0:
        raise InputError("empty sample grid")
    eig = np.linalg.eigvalsh(field.a_at(grid))[:, 0]
    i = int(np.argmin(eig))
    kappa = float(eig[i])
    if not kappa > floor:
        raise EllipticityError(
            f"lambda_min(a) = {kappa:.3g} <= floor {floor:g} at x = {grid[i].tolist()}",
            where=grid[i],
        )
    return kappa


@dataclass
class H2Report:
    C1_hat: float
    C2_hat: float
    passed: bool
    C1_by_scale: dict
    diverging: bool = False

    def to_dict(self):
        return {
            "C1_hat": self.C1_hat,
            "C2_hat": self.C2_hat,
            "pass": self.passed,
            "diverging": self.diverging,
            "C1_by_scale": {f"{k:.3g}": v for k, v in sorted(self.C1_by_scale.items())},
        }


def default_pairs(dim, resolution=DEFAULT_RESOLUTION, scales=(1e-2, 1e-3, 1e-4)):
    """Pairs straddling each grid node along every axis, at several separations."""
    res = max(2, min(resolution, int(4096 ** (1.0 / dim))))
    base = torus_grid(dim, res)
    pairs = []
    for h in scales:
        for i in range(dim):
            e = np.zeros(dim)
            e[i] = 0.5 * h
            pairs.append(np.stack([base - e, base + e], axis=1))
    return np.concatenate(pairs, axis=0)


def _zetas(field, x):
    s = field.sigma_at(x)
    cols = [s[:, :, i] for i in range(field.dim)]
    return cols + [field.b_at(x), field.c_at(x)]


def verify_h2(field, nu, sample_pairs=None, *, resolution=DEFAULT_RESOLUTION,
              divergence_ratio=10.0):
    """Sampled Lipschitz (C1) and linear-growth (C2) constants.

    Pairs are grouped by separation; if the Lipschitz ratio at the smallest
    separation exceeds ``divergence_ratio`` times the ratio at the largest,
    the coefficients are flagged as discontinuous and the report fails.
    """
    pairs = default_pairs(field.dim, resolution) if sample_pairs is None else np.asarray(sample_pairs, float)
    if pairs.ndim != 3 or pairs.shape[1] != 2 or pairs.shape[2] != field.dim:
        raise InputError("sample_pairs must have shape (n, 2, d)")
    x, xp = pairs[:, 0], pairs[:, 1]
    dist = np.linalg.norm(xp - x, axis=1)
    if np.any(dist == 0):
        raise InputError("sample pair with x' = x")

    zx, zxp = _zetas(field, x), _zetas(field, xp)
    kx, kxp = nu.jumps(field, x), nu.jumps(field, xp)
    jump_lip = np.einsum("j,nj->n", nu.masses, np.linalg.norm(kxp - kx, axis=2)) if nu.n_atoms else 0.0
    lip = np.max([np.linalg.norm(b - a, axis=1) for a, b in zip(zx, zxp)], axis=0) + jump_lip
    ratios = lip / dist

    pts = np.concatenate([x, xp])
    zs = _zetas(field, pts)
    kk = nu.jumps(field, pts)
    jump_growth = np.einsum("j,nj->n", nu.masses, np.sum(kk**2, axis=2)) if nu.n_atoms else 0.0
    growth = np.max([np.sum(z**2, axis=1) for z in zs], axis=0) + jump_growth
    c2 = float(np.max(growth / (1.0 + np.sum(pts**2, axis=1))))

    scale_key = np.round(np.log10(dist), 1)
    by_scale = {float(10**s): float(np.max(ratios[scale_key == s])) for s in np.unique(scale_key)}
    c1 = float(np.max(ratios))
    diverging = False
    if len(by_scale) >= 2:
        fine = by_scale[min(by_scale)]
        coarse = by_scale[max(by_scale)]
        diverging = fine > divergence_ratio * max(coarse, 1e-12) and fine > 1e-8
    passed = math.isfinite(c1) and math.isfinite(c2) and not diverging
    return H2Report(c1, c2, passed, by_scale, diverging)


def nu_total_and_mean_jump(nu, field, x):
    """Total mass of nu and the mean jump ``sum_j w_j k(x, y_j)`` at one point."""
    x = np.asarray(x, dtype=float)
    return nu.total_mass, nu.mean_jump(field, x[None, :])[0]


# ---------------------------------------------------------------------------
# named model suites
# ---------------------------------------------------------------------------

def gaussian_field(dim, scale=1.0):
    zero = np.zeros(dim)
    return CoefficientField(dim, constant(scale * np.eye(dim)), constant(zero), constant(zero),
                            jump_zero(dim), name="gaussian")


def builtin_suite(name, dim=2):
    """Return ``(field, nu)`` for one of the named demonstration models.

    ``gaussian``        sigma = I, no drift, no jumps
    ``periodic_drift``  sigma = I, c = (0.1 sin 2 pi x_1, 0, ...)
    ``jump``            sigma = I, one atom at 0.5 e_1 with mass 1, k = y
    ``homogenization``  oscillating sigma, b, c and a modulated jump kernel
    ``degenerate``      sigma with a vanishing first column
    ``seam``            c jumps across the torus seam in x_1
    """
    zero = np.zeros(dim)
    eye = np.eye(dim)
    e1 = np.eye(dim)[0]
    empty = LevyMeasure.empty(dim)
    if name == "gaussian":
        return gaussian_field(dim), empty
    if name == "periodic_drift":
        c = trig(zero, 0.1 * e1, e1)
        return CoefficientField(dim, constant(eye), constant(zero), c, jump_zero(dim), name=name), empty
    if name == "jump":
        nu = LevyMeasure.from_atoms([(0.5 * e1, 1.0)], dim)
        return CoefficientField(dim, constant(eye), constant(zero), constant(zero), jump_linear(),
                                name=name), nu
    if name == "homogenization":
        sig = trig(eye, 0.2 * eye, e1)
        b = trig(zero, 0.5 * np.ones(dim), np.ones(dim))
        c = trig(zero, 0.1 * e1, e1)
        nu = LevyMeasure.from_atoms([(0.3 * e1, 0.5), (-0.3 * e1, 0.5)], dim)
        return CoefficientField(dim, sig, b, c, jump_modulated(0.25, e1), name=name), nu
    if name == "degenerate":
        s = eye.copy()
        s[:, 0] = 0.0
        return CoefficientField(dim, constant(s), constant(zero), constant(zero), jump_zero(dim),
                                name=name), empty
    if name == "seam":
        c = sawtooth(zero, e1, axis=0)
        return CoefficientField(dim, constant(eye), constant(zero), c, jump_zero(dim), name=name), empty
    raise InputError(f"unknown suite {name!r}")


SUITES = ("gaussian", "periodic_drift", "jump", "homogenization", "degenerate", "seam")


def map_from_config(entry, dim, shape, base_dir=None):
    """Build a field map from a config mapping (see the README for kinds)."""
    kind = entry.get("kind")
    if kind == "constant":
        value = np.asarray(entry["value"], dtype=float)
        if value.shape != shape:
            raise InputError(f"constant value has shape {value.shape}, expected {shape}")
        return constant(value)
    if kind == "trig":
        return trig(np.broadcast_to(np.asarray(entry.get("base", 0.0), float), shape),
                    np.broadcast_to(np.asarray(entry["amplitude"], float), shape),
                    entry["wavevector"], entry.get("phase", 0.0))
    if kind == "sawtooth":
        return sawtooth(np.broadcast_to(np.asarray(entry.get("base", 0.0), float), shape),
                        np.broadcast_to(np.asarray(entry["slope"], float), shape), entry.get("axis", 0))
    if kind == "table":
        path = Path(entry["path"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return load_table_csv(path, dim, shape)
    raise InputError(f"unknown field kind {kind!r}")


def jump_from_config(entry, dim):
    kind = entry.get("kind", "zero")
    if kind == "zero":
        return jump_zero(dim)
    if kind == "linear":
        return jump_linear(entry.get("scale", 1.0))
    if kind == "modulated":
        return jump_modulated(entry["amplitude"], entry["wavevector"])
    raise InputError(f"unknown jump kernel kind {kind!r}")
