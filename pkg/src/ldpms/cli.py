"""Command-line front end: ``ldpms {check,simulate,rate,bound,ldp}``.

Runs are described by a TOML file with the sections ``model``, ``scheme``,
``regime``, ``task`` and ``output``.  The schema is closed: unknown keys are
errors.  Every run writes ``manifest.json`` holding the fully resolved
configuration, its hash and the seed; passing that manifest back through
``--config`` reproduces the run.

Exit codes: 0 ok, 2 config, 3 assumption, 4 convergence, 5 I/O,
6 simulation blow-up.
"""
from __future__ import annotations

import argparse
import hashlib
import io
import json
import os
import subprocess
import sys
from pathlib import Path
from typing import List, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import __version__
from .coeffs import (CoefficientField, LevyMeasure, RegimeLaw, builtin_suite, check_h1,
                     constant, ellipticity_kappa, jump_from_config, map_from_config, verify_h2,
                     SUITES)
from .errors import (AssumptionViolation, ConfigError, ConvergenceError, DomainError,
                     InputError, SimulationError)

EXIT_OK, EXIT_CONFIG, EXIT_ASSUMPTION, EXIT_CONVERGENCE, EXIT_IO, EXIT_SIMULATION = 0, 2, 3, 4, 5, 6


# ---------------------------------------------------------------------------
# configuration schema
# ---------------------------------------------------------------------------

class _Closed(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FieldEntry(_Closed):
    kind: Literal["constant", "trig", "sawtooth", "table"]
    value: Optional[object] = None
    base: Optional[object] = None
    amplitude: Optional[object] = None
    wavevector: Optional[List[float]] = None
    phase: float = 0.0
    slope: Optional[object] = None
    axis: int = 0
    path: Optional[str] = None


class JumpEntry(_Closed):
    kind: Literal["zero", "linear", "modulated"] = "zero"
    scale: float = 1.0
    amplitude: Optional[float] = None
    wavevector: Optional[List[float]] = None


class Atom(_Closed):
    mark: List[float]
    mass: float = Field(gt=0)


class ModelSection(_Closed):
    dim: int = Field(2, ge=1, le=3)
    suite: Optional[str] = "gaussian"
    sigma: Optional[FieldEntry] = None
    b: Optional[FieldEntry] = None
    c: Optional[FieldEntry] = None
    jump: Optional[JumpEntry] = None
    atoms: Optional[List[Atom]] = None

    @model_validator(mode="after")
    def _one_source(self):
        custom = any(v is not None for v in (self.sigma, self.b, self.c, self.jump, self.atoms))
        if custom and self.suite is not None:
            if "suite" in self.model_fields_set:
                raise ValueError("give either 'suite' or explicit coefficient fields, not both")
            self.suite = None
        if self.suite is None and self.sigma is None:
            raise ValueError("explicit models need at least 'sigma'")
        if self.suite is not None and self.suite not in SUITES:
            raise ValueError(f"unknown suite {self.suite!r}; choose from {', '.join(SUITES)}")
        return self


class SchemeSection(_Closed):
    T: float = Field(1.0, gt=0, description="horizon, model time units")
    dt: float = Field(0.01, gt=0, description="Euler step, model time units")
    seed: int = Field(0, ge=0)
    x0: Optional[List[float]] = None
    jump_budget: float = Field(16.0, gt=0)


class LawEntry(_Closed):
    coef: float = Field(1.0, gt=0)
    exponent: float = 0.5


class RegimeSection(_Closed):
    epsilons: List[float] = Field(default_factory=lambda: [0.2, 0.1, 0.05], min_length=1)
    law: LawEntry = Field(default_factory=LawEntry)

    @model_validator(mode="after")
    def _positive(self):
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("epsilons must be positive")
        return self


class CheckTask(_Closed):
    resolution: int = Field(32, ge=2)
    divergence_ratio: float = Field(10.0, gt=1)


class SimulateTask(_Closed):
    n_paths: int = Field(1, ge=1)
    epsilon: Optional[float] = Field(None, gt=0)


class RateTask(_Closed):
    velocities: List[List[float]] = Field(default_factory=lambda: [[0.0, 0.0]], min_length=1)
    L_schedule: List[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0, 64.0], min_length=3)
    steps_per_unit: int = Field(16, ge=1)
    tol: float = Field(1e-6, gt=0)
    max_iter: int = Field(20000, ge=1)
    drift_sign: Literal["c_minus_kbar", "c_plus_kbar"] = "c_minus_kbar"
    convexity_tol: float = Field(1e-4, gt=0)


class BoundTask(_Closed):
    times: List[float] = Field(default_factory=lambda: [1.0], min_length=1)
    radii: List[float] = Field(default_factory=lambda: [1.0, 10.0, 100.0], min_length=1)
    tail: float = Field(1e-6, gt=0, lt=1)
    n_nodes: Optional[int] = Field(None, ge=3)


class EventEntry(_Closed):
    kind: Literal["ball", "halfspace", "box"]
    center: Optional[List[float]] = None
    radius: Optional[float] = None
    normal: Optional[List[float]] = None
    offset: Optional[float] = None
    lo: Optional[List[float]] = None
    hi: Optional[List[float]] = None


class LdpTask(_Closed):
    event: EventEntry = Field(default_factory=lambda: EventEntry(kind="ball", center=[1.5, 0.0], radius=0.5))
    n_paths: int = Field(10000, ge=100)
    gap_tol: float = Field(0.15, gt=0)
    grid_resolution: int = Field(32, ge=2)
    L_schedule: List[float] = Field(default_factory=lambda: [8.0, 16.0, 32.0, 64.0], min_length=3)


class TaskSection(_Closed):
    check: CheckTask = Field(default_factory=CheckTask)
    simulate: SimulateTask = Field(default_factory=SimulateTask)
    rate: RateTask = Field(default_factory=RateTask)
    bound: BoundTask = Field(default_factory=BoundTask)
    ldp: LdpTask = Field(default_factory=LdpTask)


class OutputSection(_Closed):
    dir: str = "ldpms_out"
    formats: List[Literal["csv", "json"]] = Field(default_factory=lambda: ["csv", "json"])


class RunConfig(_Closed):
    model: ModelSection = Field(default_factory=ModelSection)
    scheme: SchemeSection = Field(default_factory=SchemeSection)
    regime: RegimeSection = Field(default_factory=RegimeSection)
    task: TaskSection = Field(default_factory=TaskSection)
    output: OutputSection = Field(default_factory=OutputSection)


def _format_validation(exc):
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(data):
    """Validate a mapping into a :class:`RunConfig`; raises :class:`ConfigError`."""
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {_format_validation(exc)}") from exc


def load_config(path):
    """Read a TOML config, or the ``config`` block of a previous run's manifest."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
        if isinstance(data, dict) and "config" in data and "config_hash" in data:
            data = data["config"]
    else:
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(data), path.parent


def config_hash(cfg):
    blob = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# model assembly
# ---------------------------------------------------------------------------

def build_model(model, base_dir=None):
    """``(field, nu)`` from the model section."""
    d = model.dim
    if model.suite is not None:
        return builtin_suite(model.suite, d)
    try:
        sigma = map_from_config(model.sigma.model_dump(exclude_none=True), d, (d, d), base_dir)
        b = (map_from_config(model.b.model_dump(exclude_none=True), d, (d,), base_dir)
             if model.b else constant(np.zeros(d)))
        c = (map_from_config(model.c.model_dump(exclude_none=True), d, (d,), base_dir)
             if model.c else constant(np.zeros(d)))
        k = jump_from_config(model.jump.model_dump(exclude_none=True) if model.jump else {}, d)
        atoms = [(a.mark, a.mass) for a in (model.atoms or [])]
        nu = LevyMeasure.from_atoms(atoms, d) if atoms else LevyMeasure.empty(d)
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"model: missing or malformed field parameter ({exc})") from exc
    except InputError as exc:
        raise ConfigError(f"model: {exc}") from exc
    return CoefficientField(d, sigma, b, c, k, name="custom"), nu


def regime_law(cfg):
    return RegimeLaw(cfg.regime.law.coef, cfg.regime.law.exponent)


def start_point(cfg):
    x0 = cfg.scheme.x0 if cfg.scheme.x0 is not None else [0.0] * cfg.model.dim
    if len(x0) != cfg.model.dim:
        raise ConfigError(f"scheme.x0: expected {cfg.model.dim} components, got {len(x0)}")
    return np.asarray(x0, dtype=float)


def _git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() or "unknown"


class Run:
    """Output directory, format switches and manifest writer for one command."""

    def __init__(self, command, cfg, threads):
        self.command, self.cfg, self.threads = command, cfg, threads
        self.dir = Path(cfg.output.dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.files = []

    def wants(self, fmt):
        return fmt in self.cfg.output.formats

    def path(self, name):
        self.files.append(name)
        return self.dir / name

    def write_json(self, name, payload):
        with open(self.path(name), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True, ensure_ascii=False)
            fh.write("\n")

    def manifest(self, extra=None):
        payload = {
            "command": self.command,
            "config": self.cfg.model_dump(mode="json"),
            "config_hash": config_hash(self.cfg),
            "seed": self.cfg.scheme.seed,
            "version": __version__,
            "git_describe": _git_describe(),
            "threads": self.threads,
            "files": sorted(self.files),
        }
        if extra:
            payload.update(extra)
        with open(self.dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def assumption_report(cfg, field, nu):
    """Run the three gates and collect their outcome without raising."""
    tc = cfg.task.check
    report = {"ellipticity": {}, "H2-lipschitz-growth": {}, "H1-scale-separation": {}}
    failures = []
    try:
        kappa = ellipticity_kappa(field, resolution=tc.resolution)
        report["ellipticity"] = {"pass": True, "kappa": kappa}
    except AssumptionViolation as exc:
        report["ellipticity"] = {"pass": False, "message": str(exc)}
        failures.append(("ellipticity", str(exc)))
    h2 = verify_h2(field, nu, resolution=tc.resolution, divergence_ratio=tc.divergence_ratio)
    report["H2-lipschitz-growth"] = h2.to_dict()
    if not h2.passed:
        msg = ("[H2-lipschitz-growth] Lipschitz ratio grows as the sample spacing shrinks "
               f"(C1 by spacing: {h2.to_dict()['C1_by_scale']}); coefficients look discontinuous")
        failures.append(("H2-lipschitz-growth", msg))
        report["H2-lipschitz-growth"]["message"] = msg
    law = regime_law(cfg)
    try:
        ratios = check_h1(law, cfg.regime.epsilons)
        report["H1-scale-separation"] = {"pass": True, "delta_over_epsilon": ratios}
    except AssumptionViolation as exc:
        report["H1-scale-separation"] = {"pass": False, "message": str(exc)}
        failures.append(("H1-scale-separation", str(exc)))
    report["pass"] = not failures
    return report, failures


def _gate(cfg, field, nu):
    report, failures = assumption_report(cfg, field, nu)
    if failures:
        name, msg = failures[0]
        raise AssumptionViolation(name, msg.split("] ", 1)[-1])
    return report


def cmd_check(cfg, run, field, nu):
    report, failures = assumption_report(cfg, field, nu)
    if run.wants("json"):
        run.write_json("check.json", report)
    run.manifest({"pass": report["pass"]})
    for name, msg in failures:
        print(f"FAIL {name}: {msg}", file=sys.stderr)
    if failures:
        return EXIT_ASSUMPTION
    print(f"PASS ellipticity (kappa = {report['ellipticity']['kappa']:.6g}), "
          f"H2-lipschitz-growth, H1-scale-separation")
    return EXIT_OK


def cmd_simulate(cfg, run, field, nu):
    from .sim import SimConfig, batch_summary, simulate_batch
    from .coeffs import ScaleRegime

    _gate(cfg, field, nu)
    eps = cfg.task.simulate.epsilon or cfg.regime.epsilons[0]
    regime = ScaleRegime.from_law(eps, regime_law(cfg))
    sc = cfg.scheme
    sim_cfg = SimConfig(sc.T, sc.dt, start_point(cfg), regime, sc.seed, sc.jump_budget)
    n = cfg.task.simulate.n_paths
    batch = simulate_batch(field, nu, sim_cfg, n, threads=run.threads)
    width = max(5, len(str(n - 1)))
    if run.wants("csv"):
        for traj, _ in batch:
            traj.to_csv(run.path(f"path_{traj.index:0{width}d}.csv"))
    if run.wants("json"):
        summary = batch_summary(batch)
        summary.update(epsilon=regime.epsilon, delta=regime.delta)
        run.write_json("summary.json", summary)
    run.manifest()
    print(f"simulated {n} path(s) at eps = {regime.epsilon:g}, delta = {regime.delta:g} -> {run.dir}")
    return EXIT_OK


def _rate_options(cfg, task):
    from .rate import RateOptions

    rt = cfg.task.rate
    return RateOptions(tol=rt.tol, max_iter=rt.max_iter, steps_per_unit=rt.steps_per_unit,
                       L_schedule=tuple(task.L_schedule), drift_sign=rt.drift_sign)


def cmd_rate(cfg, run, field, nu):
    from .rate import convexity_check, estimate_J, write_rate_table

    _gate(cfg, field, nu)
    rt = cfg.task.rate
    opts = _rate_options(cfg, rt)
    estimates = []
    for v in rt.velocities:
        if len(v) != cfg.model.dim:
            raise ConfigError(f"task.rate.velocities: {v} does not have {cfg.model.dim} components")
        est = estimate_J(field, nu, v, opts=opts)
        estimates.append(est)
        print(f"J({', '.join(f'{x:g}' for x in v)}) = {est.J:.10g}")
    convex = convexity_check(estimates, rt.convexity_tol)
    if run.wants("csv"):
        write_rate_table(estimates, run.path("rate.csv"))
    if run.wants("json"):
        run.write_json("rate.json", {
            "rows": [{"velocity": e.velocity.tolist(), "J": e.J,
                      "V_L_over_L": [[L, val] for L, val in e.values],
                      "flagged": e.flagged, "iterations": e.diagnostics["iterations"]}
                     for e in estimates],
            "convexity": convex.to_dict(),
        })
    run.manifest()
    return EXIT_OK


def cmd_bound(cfg, run, field, nu):
    from .symbol import density_upper_bound, hartman_wintner_margin

    _gate(cfg, field, nu)
    bt = cfg.task.bound
    margin = hartman_wintner_margin(field, nu, bt.radii)
    rows = []
    for t in bt.times:
        val = density_upper_bound(field, nu, t, tail=bt.tail, n_nodes=bt.n_nodes)
        rows.append((t, val))
        print(f"bound(t = {t:g}) = {val:.8g}")
    if run.wants("csv"):
        with open(run.path("bound.csv"), "w", newline="") as fh:
            fh.write("t,bound\n")
            for t, val in rows:
                fh.write(f"{format(t, '.17g')},{format(val, '.17g')}\n")
    if run.wants("json"):
        run.write_json("bound.json", {"bounds": [{"t": t, "bound": v} for t, v in rows],
                                      "margin": margin.to_dict()})
    run.manifest()
    return EXIT_OK


def _event(entry, dim):
    from .mc import EventSet

    try:
        if entry.kind == "ball":
            A = EventSet.ball(entry.center, entry.radius)
        elif entry.kind == "halfspace":
            A = EventSet.halfspace(entry.normal, entry.offset)
        else:
            A = EventSet.box(entry.lo, entry.hi)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"task.ldp.event: {exc}") from exc
    if A.dim != dim:
        raise ConfigError(f"task.ldp.event: dimension {A.dim} differs from model dimension {dim}")
    return A


def cmd_ldp(cfg, run, field, nu):
    from .mc import ldp_sweep
    from .rate import rate_function

    _gate(cfg, field, nu)
    lt = cfg.task.ldp
    A = _event(lt.event, cfg.model.dim)
    J = rate_function(field, nu, _rate_options(cfg, lt))
    sc = cfg.scheme
    sweep = ldp_sweep(field, nu, regime_law(cfg), A, start_point(cfg), sc.T,
                      sorted(cfg.regime.epsilons, reverse=True), lt.n_paths, rate=J, dt=sc.dt,
                      seed=sc.seed, threads=run.threads, gap_tol=lt.gap_tol,
                      grid_resolution=lt.grid_resolution)
    if run.wants("csv"):
        sweep.to_csv(run.path("ldp.csv"))
    if run.wants("json"):
        payload = sweep.to_dict()
        payload["event"] = A.to_dict()
        run.write_json("ldp.json", payload)
    run.manifest({"pass": sweep.passed})
    for e, v in zip(sweep.epsilons, sweep.eps_log_p):
        print(f"eps = {e:g}: eps log p = {v:.6g}")
    print(f"target = {sweep.target:.6g}, gap = {sweep.final_gap:.4g}, "
          f"verdict {'pass' if sweep.passed else 'fail'} at {lt.gap_tol:g}")
    return EXIT_OK


COMMANDS = {"check": cmd_check, "simulate": cmd_simulate, "rate": cmd_rate,
            "bound": cmd_bound, "ldp": cmd_ldp}


def _threads(arg):
    if arg is not None:
        return arg
    env = os.environ.get("LDPMS_THREADS")
    if env:
        try:
            n = int(env)
        except ValueError as exc:
            raise ConfigError(f"LDPMS_THREADS must be an integer, got {env!r}") from exc
        if n < 1:
            raise ConfigError("LDPMS_THREADS must be positive")
        return n
    return 1


def _read_list(stream):
    text = stream.read().replace(",", " ").split()
    try:
        return [float(t) for t in text]
    except ValueError as exc:
        raise ConfigError(f"epsilon list on stdin: {exc}") from exc


def build_parser():
    p = argparse.ArgumentParser(prog="ldpms", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"ldpms {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="TOML config, or manifest.json of an earlier run")
        s.add_argument("--seed", type=int, help="override scheme.seed")
        s.add_argument("--out", help="override output.dir")
        s.add_argument("--threads", type=int, help="worker threads (default: $LDPMS_THREADS or 1)")
        s.add_argument("--epsilons", help="comma-separated epsilon list, or '-' to read it from stdin")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.config:
            cfg, base_dir = load_config(args.config)
        else:
            cfg, base_dir = parse_config({}), Path.cwd()
        updates = {}
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be nonnegative")
            updates["scheme"] = cfg.scheme.model_copy(update={"seed": args.seed})
        if args.out is not None:
            updates["output"] = cfg.output.model_copy(update={"dir": args.out})
        if args.epsilons is not None:
            src = sys.stdin if args.epsilons == "-" else io.StringIO(args.epsilons)
            eps = _read_list(src)
            updates["regime"] = cfg.regime.model_copy(update={"epsilons": eps})
        if updates:
            cfg = parse_config({**cfg.model_dump(mode="json"),
                                **{k: v.model_dump(mode="json") for k, v in updates.items()}})
        threads = _threads(args.threads)
        if threads < 1:
            raise ConfigError("--threads must be positive")
        field, nu = build_model(cfg.model, base_dir)
        run = Run(args.command, cfg, threads)
        return COMMANDS[args.command](cfg, run, field, nu)
    except (ConfigError, InputError, DomainError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionViolation as exc:
        print(f"assumption violated: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except ConvergenceError as exc:
        print(f"convergence failure: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except SimulationError as exc:
        print(f"simulation failure: {exc}", file=sys.stderr)
        return EXIT_SIMULATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
