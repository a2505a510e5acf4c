"""Exponential change of measure for the Brownian and Poisson drivers.

A :class:`Tilt` shifts the driving Brownian motion by ``xi / sqrt(eps)``
per unit time and multiplies each atom's jump intensity by ``1 + phi``.
Under the tilted measure the state drift becomes ``B + sigma xi``, where
``B`` is the untilted drift; the simulator's Brownian term enters with a
minus sign, so the shift is applied to ``-W``.  Consequently::

    log dP_tilt/dP = -(1/2eps) int |xi|^2 ds - (1/sqrt eps) int xi . dW
                     - (1/eps) sum_j int (phi - log(1 + phi)) w_j ds
                     + (1/eps) sum_j int log(1 + phi) (eps dN_j - w_j ds)

with ``W`` the reference Brownian motion stored in the trajectory.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .action import LatticePath, xlogx_cost
from .errors import DomainError, EllipticityError, InputError

XI_CLAMP = 1e6


@dataclass(frozen=True)
class JumpIntensityField:
    """Tilt ``phi(t_n, atom)`` on the time grid x atoms; values > -1."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise InputError("phi must be a (n_steps, n_atoms) table")
        if not np.all(np.isfinite(v)):
            raise DomainError("phi must be finite")
        if np.any(v <= -1.0):
            raise DomainError("phi must exceed -1 so that log(1 + phi) exists")
        object.__setattr__(self, "values", v)

    @classmethod
    def zeros(cls, n_steps, n_atoms):
        return cls(np.zeros((n_steps, n_atoms)))

    @classmethod
    def constant(cls, value, n_steps, n_atoms):
        return cls(np.full((n_steps, n_atoms), float(value)))


@dataclass(frozen=True)
class Tilt:
    times: np.ndarray
    xi: np.ndarray
    phi: JumpIntensityField
    target_path: Optional[LatticePath] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 2 or xi.shape[0] != len(times) - 1:
            raise InputError("xi must have one row per grid interval")
        if self.phi.values.shape[0] != xi.shape[0]:
            raise InputError("phi and xi grids differ")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "xi", xi)

    @classmethod
    def zero(cls, T, n_steps, dim, n_atoms):
        return cls(np.linspace(0.0, T, n_steps + 1), np.zeros((n_steps, dim)),
                   JumpIntensityField.zeros(n_steps, n_atoms))

    @classmethod
    def constant_drift(cls, T, n_steps, xi, n_atoms=0):
        xi = np.asarray(xi, dtype=float)
        return cls(np.linspace(0.0, T, n_steps + 1), np.tile(xi, (n_steps, 1)),
                   JumpIntensityField.zeros(n_steps, n_atoms))

    @property
    def n_steps(self):
        return self.xi.shape[0]

    def to_dict(self):
        out = {"times": self.times.tolist(), "xi": self.xi.tolist(), "phi": self.phi.values.tolist()}
        if self.target_path is not None:
            out["target_path"] = {"L": self.target_path.L, "nodes": self.target_path.nodes.tolist()}
        return out

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def from_dict(cls, data):
        n = len(data["times"]) - 1
        phi = np.asarray(data["phi"], dtype=float).reshape(n, -1)
        target = None
        if "target_path" in data:
            target = LatticePath(data["target_path"]["L"], data["target_path"]["nodes"])
        return cls(data["times"], data["xi"], JumpIntensityField(phi), target)

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def tilt_from_target(field, nu, regime, psi, phi=None, clamp=XI_CLAMP):
    """Drift tilt that steers the mean of the process along ``psi``.

    ``xi_n = sigma^{-1}(psi_n/delta) [psi'_n - (eps/delta) b - c + kbar](psi_n/delta)``
    with forward-difference velocities, so that ``B + sigma xi = psi'``.
    """
    left = psi.nodes[:-1] / regime.delta
    drift = regime.ratio * field.b_at(left) + field.c_at(left)
    if nu.n_atoms:
        drift = drift - nu.mean_jump(field, left)
    resid = psi.velocity() - drift
    try:
        xi = np.linalg.solve(field.sigma_at(left), resid[..., None])[..., 0]
    except np.linalg.LinAlgError as exc:
        raise EllipticityError("sigma is singular along the target path") from exc
    if not np.all(np.isfinite(xi)):
        raise EllipticityError("sigma is numerically singular along the target path")
    big = np.abs(xi) > clamp
    if np.any(big):
        warnings.warn(f"drift tilt clamped to +-{clamp:g} at {int(big.sum())} entries", RuntimeWarning)
        xi = np.clip(xi, -clamp, clamp)
    if phi is None:
        phi = JumpIntensityField.zeros(psi.n_steps, nu.n_atoms)
    return Tilt(psi.times, xi, phi, psi)


def log_density(tilt, traj, field, nu, regime):
    """``log dP_tilt/dP`` along a stored trajectory (left-point lattice sums)."""
    if len(traj.times) != len(tilt.times) or not np.allclose(traj.times, tilt.times, rtol=0, atol=1e-12):
        raise InputError("trajectory and tilt live on different time grids")
    if traj.dW.shape != tilt.xi.shape:
        raise InputError("trajectory noise and tilt drift shapes differ")
    eps = regime.epsilon
    dt = np.diff(tilt.times)
    val = -0.5 / eps * float(np.sum(np.sum(tilt.xi**2, axis=1) * dt))
    val -= float(np.sum(tilt.xi * traj.dW)) / np.sqrt(eps)
    if nu.n_atoms:
        phi = tilt.phi.values
        if phi.shape != traj.jump_counts.shape:
            raise InputError("phi table and jump counts differ in shape")
        log1p = np.log1p(phi)
        comp = np.sum(phi * nu.masses[None, :] * dt[:, None]) / eps
        val += float(np.sum(log1p * traj.jump_counts)) - float(comp)
    return val


def jump_entropy(phi):
    """``(1 + phi) log(1 + phi) - phi`` elementwise."""
    return xlogx_cost(1.0 + np.asarray(phi, dtype=float))


def entropy_cost(phi, nu, horizon):
    """Lattice integral of the jump entropy against ``ds x nu(dy)``."""
    values = phi.values if isinstance(phi, JumpIntensityField) else JumpIntensityField(phi).values
    if values.shape[1] != nu.n_atoms:
        raise InputError("phi must have one column per atom")
    if values.size == 0:
        return 0.0
    dt = horizon / values.shape[0]
    return float(np.sum(jump_entropy(values) * nu.masses[None, :]) * dt)
