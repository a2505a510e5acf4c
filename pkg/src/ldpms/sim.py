"""Euler-Maruyama simulation of the two-scale jump diffusion.

Per step of length ``dt`` the state is advanced by::

    X += -sqrt(eps) sigma(X/delta) dW + (eps/delta) b(X/delta) dt + c(X/delta) dt
         - sum_j w_j k(X/delta, y_j) dt + eps * sum_j n_j k(X/delta, y_j)

with ``n_j ~ Poisson(w_j dt / eps)`` drawn independently per atom.  Every
path draws its noise from its own generator seeded with ``(seed, index)``,
and batches are integrated in fixed-size chunks, so results do not depend
on the number of worker threads.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .coeffs import ScaleRegime
from .errors import ConfigError, InputError, SimulationError

CHUNK = 2048
DEFAULT_JUMP_BUDGET = 16.0


@dataclass(frozen=True)
class SimConfig:
    T: float
    dt: float
    x0: np.ndarray
    regime: ScaleRegime
    seed: int = 0
    jump_budget: float = DEFAULT_JUMP_BUDGET

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float).reshape(-1))
        if not (self.T > 0 and self.dt > 0):
            raise ConfigError("T and dt must be positive")
        if self.dt > self.T * (1 + 1e-12):
            raise ConfigError("dt exceeds the horizon T")
        if not np.all(np.isfinite(self.x0)):
            raise ConfigError("x0 must be finite")

    @classmethod
    def default(cls, T, x0, regime, seed=0):
        return cls(T, 1e-3 * T, x0, regime, seed)

    @property
    def n_steps(self):
        return max(1, int(round(self.T / self.dt)))

    @property
    def step(self):
        """Actual step length (T divided evenly)."""
        return self.T / self.n_steps

    @property
    def times(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    dW: np.ndarray
    jump_counts: np.ndarray
    marks: np.ndarray
    jump_log: list = dc_field(default_factory=list)
    seed: int = 0
    index: int = 0

    @property
    def dim(self):
        return self.states.shape[1]

    def cumulative_jumps(self):
        total = self.jump_counts.sum(axis=1) if self.jump_counts.size else np.zeros(len(self.times) - 1, int)
        return np.concatenate([[0], np.cumsum(total)])

    def to_csv(self, path_or_buf=None):
        """Write ``time, x_1..x_d, jumps`` rows; returns the text when no target is given."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["time"] + [f"x{i + 1}" for i in range(self.dim)] + ["jumps"])
        cum = self.cumulative_jumps()
        for t, x, n in zip(self.times, self.states, cum):
            w.writerow([format(t, ".17g")] + [format(v, ".17g") for v in x] + [int(n)])
        text = buf.getvalue()
        if path_or_buf is None:
            return text
        if hasattr(path_or_buf, "write"):
            path_or_buf.write(text)
        else:
            with open(path_or_buf, "w", newline="") as fh:
                fh.write(text)
        return text


def path_rng(seed, index):
    return np.random.default_rng([int(seed), int(index)])


def _jump_rates(nu, cfg, tilt):
    """Per-step Poisson means, shape ``(n_steps, M)``."""
    base = nu.masses * cfg.step / cfg.regime.epsilon
    rates = np.broadcast_to(base, (cfg.n_steps, nu.n_atoms)).copy()
    if tilt is not None and nu.n_atoms:
        rates = rates * (1.0 + tilt.phi.values)
    per_step = rates.sum(axis=1).max() if nu.n_atoms else 0.0
    if per_step > cfg.jump_budget:
        raise ConfigError(
            f"expected {per_step:.3g} jumps per step exceeds the budget {cfg.jump_budget:g}; "
            f"reduce dt below {cfg.step * cfg.jump_budget / per_step:.3g}"
        )
    return rates


def _check_tilt_grid(tilt, cfg, nu, dim):
    if tilt is None:
        return
    if tilt.xi.shape != (cfg.n_steps, dim):
        raise InputError(f"tilt has drift grid {tilt.xi.shape}, simulation needs {(cfg.n_steps, dim)}")
    if tilt.phi.values.shape != (cfg.n_steps, nu.n_atoms):
        raise InputError("tilt jump-intensity table does not match the grid x atoms")
    if not np.allclose(tilt.times, cfg.times, rtol=0, atol=1e-12 * max(1.0, cfg.T)):
        raise InputError("tilt time grid differs from the simulation grid")


def _integrate_chunk(field, nu, cfg, indices, tilt, rates, keep):
    n, d, M = cfg.n_steps, field.dim, nu.n_atoms
    P = len(indices)
    eps, delta = cfg.regime.epsilon, cfg.regime.delta
    dt = cfg.step
    sq_eps = math.sqrt(eps)

    dZ = np.empty((P, n, d))
    counts = np.zeros((P, n, M), dtype=np.int64)
    for p, idx in enumerate(indices):
        rng = path_rng(cfg.seed, idx)
        dZ[p] = rng.standard_normal((n, d)) * math.sqrt(dt)
        if M:
            counts[p] = rng.poisson(rates)

    if tilt is not None:
        # noise of the reference measure seen along a path driven under the tilt
        dW = dZ - tilt.xi[None, :, :] * (dt / sq_eps)
    else:
        dW = dZ

    X = np.broadcast_to(cfg.x0, (P, d)).copy()
    states = np.empty((P, n + 1, d)) if keep else None
    if keep:
        states[:, 0] = X
    log_dens = np.zeros(P)
    if tilt is not None:
        xi2 = np.sum(tilt.xi**2, axis=1)
        log_dens -= 0.5 / eps * np.sum(xi2) * dt
        log_dens -= np.einsum("nd,pnd->p", tilt.xi, dW) / sq_eps
        if M:
            log1p = np.log1p(tilt.phi.values)
            log_dens += np.einsum("nm,pnm->p", log1p, counts)
            log_dens -= np.sum(tilt.phi.values * nu.masses[None, :]) * dt / eps

    for s in range(n):
        with np.errstate(over="ignore", invalid="ignore"):
            y = X / delta
        if not np.all(np.isfinite(y)):
            raise SimulationError(f"state too large to rescale at step {s} (t = {s * dt:g})", step=s)
        sig = field.sigma_at(y)
        drift = cfg.regime.ratio * field.b_at(y) + field.c_at(y)
        incr = -sq_eps * np.einsum("pij,pj->pi", sig, dW[:, s]) + drift * dt
        if M:
            K = nu.jumps(field, y)
            incr += -np.einsum("m,pmd->pd", nu.masses, K) * dt
            incr += eps * np.einsum("pm,pmd->pd", counts[:, s], K)
        with np.errstate(over="ignore", invalid="ignore"):
            X = X + incr
        if not np.all(np.isfinite(X)):
            raise SimulationError(f"non-finite state at step {s + 1} (t = {(s + 1) * dt:g})", step=s + 1)
        if keep:
            states[:, s + 1] = X
    return {"final": X, "states": states, "dW": dW if keep else None,
            "counts": counts if keep else None, "log_dens": log_dens}


def _run(field, nu, cfg, indices, tilt, keep, threads):
    if cfg.x0.shape != (field.dim,):
        raise ConfigError(f"x0 has dimension {cfg.x0.size}, model has {field.dim}")
    _check_tilt_grid(tilt, cfg, nu, field.dim)
    rates = _jump_rates(nu, cfg, tilt)
    chunks = [indices[i:i + CHUNK] for i in range(0, len(indices), CHUNK)]

    def work(ch):
        return _integrate_chunk(field, nu, cfg, ch, tilt, rates, keep)

    if threads and threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, chunks))
    else:
        parts = [work(ch) for ch in chunks]
    out = {"final": np.concatenate([p["final"] for p in parts]),
           "log_dens": np.concatenate([p["log_dens"] for p in parts])}
    if keep:
        for key in ("states", "dW", "counts"):
            out[key] = np.concatenate([p[key] for p in parts])
    return out


def _trajectory(field, nu, cfg, out, p):
    times = cfg.times
    counts = out["counts"][p]
    states = out["states"][p]
    log = []
    for s, m in zip(*np.nonzero(counts)):
        # pre-jump state drives the amplitude (predictable integrand)
        y = (states[s] / cfg.regime.delta)[None, :]
        inc = cfg.regime.epsilon * field.k_at(y, nu.marks[m])[0]
        log.extend((float(times[s + 1]), nu.marks[m].copy(), inc) for _ in range(int(counts[s, m])))
    return Trajectory(times, states, out["dW"][p], counts, nu.marks, log, cfg.seed, p)


def simulate_batch(field, nu, cfg, n_paths, tilt=None, threads=1):
    """Simulate ``n_paths`` trajectories; returns ``[(Trajectory, log dP/dP_tilt), ...]``.

    Without a tilt every log-weight is exactly 0.  With a tilt the paths are
    driven by the tilted drift and jump intensities and the log-weight is the
    log Radon-Nikodym derivative of the reference measure along the path.
    """
    if n_paths < 1:
        raise InputError("n_paths must be positive")
    out = _run(field, nu, cfg, list(range(n_paths)), tilt, True, threads)
    result = []
    for p in range(n_paths):
        traj = _trajectory(field, nu, cfg, out, p)
        logw = 0.0 if tilt is None else float(-out["log_dens"][p])
        result.append((traj, logw))
    return result


def simulate(field, nu, cfg):
    """Simulate one trajectory (the path with index 0 of the seed's stream family)."""
    return simulate_batch(field, nu, cfg, 1)[0][0]


def terminal_batch(field, nu, cfg, n_paths, tilt=None, threads=1):
    """Terminal states and log-weights only, without materializing trajectories.

    Uses the same per-path noise streams as :func:`simulate_batch`.
    """
    out = _run(field, nu, cfg, list(range(n_paths)), tilt, False, threads)
    logw = np.zeros(n_paths) if tilt is None else -out["log_dens"]
    return out["final"], logw


def batch_summary(batch):
    """JSON-ready moments of the terminal states and weight diagnostics."""
    finals = np.array([t.states[-1] for t, _ in batch])
    logw = np.array([w for _, w in batch])
    w = np.exp(logw - logw.max()) if len(logw) else logw
    ess = float(w.sum() ** 2 / np.sum(w**2)) if len(w) else 0.0
    return {
        "n_paths": len(batch),
        "terminal_mean": finals.mean(axis=0).tolist(),
        "terminal_variance": finals.var(axis=0, ddof=1).tolist() if len(batch) > 1 else [0.0] * finals.shape[1],
        "mean_jumps": float(np.mean([t.jump_counts.sum() for t, _ in batch])),
        "weights": {
            "mean": float(np.mean(np.exp(logw))),
            "max_log_weight": float(logw.max()),
            "effective_sample_size": ess,
        },
    }


def dump_summary(batch, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(batch_summary(batch), fh, indent=2, sort_keys=True)
