"""Command-line front end: ``tilt``, ``condition``, ``sweep`` and ``verify``.

Exit codes: 0 success, 1 configuration error, 2 numerical or solver error,
3 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .conditional import (
    SolverError,
    build_conditioning_set,
    check_infimum_consistency,
    conditional_free_energy,
    conditional_marginal_rate,
    conditional_rate,
    inf_rate_on_set,
    solve_tilt,
    verify_duality,
)
from .convex_core import Grid, conjugate
from .empirics import EventSet, canonical_expectation, convergence_sweep
from .models import MODELS, JointModel, make_model

log = logging.getLogger("condldp")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3
DUALITY_TOL = 5e-3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    model: dict
    x0: list
    grid: dict
    ns: list
    replicas: int
    seed: int
    event: dict = field(default_factory=lambda: {"kind": "all"})
    delta: Optional[float] = None
    lambda_grid: Optional[dict] = None
    method: str = "tilted"
    epsilon: float = 0.1
    radius: float = 0.2
    concentration_level: float = 0.95
    sandwich_min_n: int = 0
    outputs: dict = field(default_factory=dict)

    REQUIRED = ("model", "x0", "grid", "ns", "replicas", "seed")

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        missing = [k for k in cls.REQUIRED if k not in raw]
        if missing:
            raise ConfigError(f"config is missing required field(s): {', '.join(missing)}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config field(s): {', '.join(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if not isinstance(self.model, dict) or "name" not in self.model:
            raise ConfigError("model must be an object with a 'name' field")
        if self.model["name"] not in MODELS:
            raise ConfigError(f"unknown model {self.model['name']!r}; known: {sorted(MODELS)}")
        if not isinstance(self.ns, list) or not self.ns:
            raise ConfigError("ns must be a nonempty list")
        if any(not isinstance(n, int) or n < 1 for n in self.ns):
            raise ConfigError("ns entries must be positive integers")
        if any(b <= a for a, b in zip(self.ns, self.ns[1:])):
            raise ConfigError("ns must be strictly increasing")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if not isinstance(self.replicas, int) or self.replicas < 100:
            raise ConfigError("replicas must be an integer >= 100")
        if self.method not in ("direct", "tilted"):
            raise ConfigError("method must be 'direct' or 'tilted'")
        if self.delta is not None and not self.delta > 0:
            raise ConfigError("delta must be positive when given")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        for key in ("lower", "upper", "points"):
            if key not in self.grid:
                raise ConfigError(f"grid needs '{key}'")

    def build_model(self) -> JointModel:
        params = {k: v for k, v in self.model.items() if k != "name"}
        try:
            return make_model(self.model["name"], **params)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad model parameters: {exc}") from exc

    def build_grid(self, spec=None) -> Grid:
        spec = self.grid if spec is None else spec
        try:
            return Grid.uniform(spec["lower"], spec["upper"], spec["points"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad grid spec: {exc}") from exc

    def build_event(self) -> EventSet:
        try:
            return EventSet.from_dict(self.event)
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"bad event spec: {exc}") from exc

    def digest(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def parse_config(text: str) -> RunConfig:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(raw)


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)


def default_config_text() -> str:
    return resources.files("condldp").joinpath("data/default_config.json").read_text()


def _clean(obj):
    """JSON-ready copy with inf/neg_inf/nan sentinels and plain Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return fmt_float(float(obj)) if not math.isfinite(obj) else float(obj)
    return obj


def canonical_json(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, separators=(",", ":"))


def fmt_float(v: float) -> str:
    if v == math.inf:
        return "inf"
    if v == -math.inf:
        return "neg_inf"
    if math.isnan(v):
        return "nan"
    return format(v, ".17g")


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(float(v)) for v in row])


def _tilt_table(model: JointModel, tilt) -> str:
    lines = [
        f"model      {model.name}",
        f"x0         {', '.join(fmt_float(v) for v in tilt.x0)}",
        f"lambda0    {', '.join(fmt_float(v) for v in tilt.lambda0)}",
        f"y0         {', '.join(fmt_float(v) for v in tilt.y0) or '-'}",
        f"inf I(B)   {fmt_float(tilt.min_rate)}",
        f"residual   {tilt.residual:.3e}",
        f"iterations {tilt.iterations}",
    ]
    return "\n".join(lines)


def _conditioning(model: JointModel, cfg: RunConfig, tilt):
    domain = model.rate.in_domain if model.rate is not None else None
    return build_conditioning_set(tilt.lambda0, tilt.x0, cfg.delta, domain)


def cmd_tilt(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    try:
        tilt = solve_tilt(model.psi, cfg.x0)
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(_tilt_table(model, tilt))
    (out / "tilt.json").write_text(json.dumps(_clean(tilt.to_dict()), indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_condition(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    grid = cfg.build_grid()
    if grid.dim != model.dim:
        raise ConfigError(f"grid has dimension {grid.dim}, model needs {model.dim}")
    tilt = solve_tilt(model.psi, cfg.x0)
    B = _conditioning(model, cfg, tilt)
    if model.rate is None:
        raise ConfigError("condition needs a model with a closed-form rate")
    i_b = conditional_rate(model.rate, B, tilt.min_rate)
    pts = grid.points()
    vals = i_b(pts)
    names = ["x"] if model.d == 1 else [f"x{i + 1}" for i in range(model.d)]
    names += ["y"] if model.d_prime == 1 else [f"y{i + 1}" for i in range(model.d_prime)]
    write_csv(out / "conditional_rate.csv", names + ["I_B"], np.column_stack([pts, vals]))
    written = ["conditional_rate.csv"]
    if model.d_prime:
        y_grid = Grid(grid.lower[model.d:], grid.upper[model.d:], grid.counts[model.d:])
        i_x0 = conditional_marginal_rate(model.psi, tilt, model.rate)
        ys = y_grid.points()
        write_csv(out / "conditional_marginal_rate.csv", names[model.d:] + ["I_x0"], np.column_stack([ys, i_x0(ys)]))
        lam_grid = _lambda_y_grid(cfg, model)
        psi_x0 = conditional_free_energy(model.psi, tilt.lambda0)
        lams = lam_grid.points()
        header = ["lambda"] if model.d_prime == 1 else [f"lambda{i + 1}" for i in range(model.d_prime)]
        write_csv(out / "conditional_free_energy.csv", header + ["Psi_x0"], np.column_stack([lams, psi_x0(lams)]))
        written += ["conditional_marginal_rate.csv", "conditional_free_energy.csv"]
    for name in written:
        print(out / name)
    return EXIT_OK


def _lambda_grid(cfg: RunConfig, model: JointModel) -> Grid:
    if cfg.lambda_grid is None:
        lower = [-5.0] * model.dim
        upper = [5.0] * model.dim
        if model.name == "gaussian_pair":
            upper[model.d:] = [0.45] * model.d_prime
        return Grid.uniform(lower, upper, 512 if model.dim == 1 else 128)
    return cfg.build_grid(cfg.lambda_grid)


def _lambda_y_grid(cfg: RunConfig, model: JointModel) -> Grid:
    lam = _lambda_grid(cfg, model)
    return Grid(lam.lower[model.d:], lam.upper[model.d:], lam.counts[model.d:])


def run_sweep(cfg: RunConfig, model: JointModel, tilt):
    B = _conditioning(model, cfg, tilt)
    A = cfg.build_event()
    center = np.concatenate([tilt.x0, tilt.y0])
    return convergence_sweep(model, cfg.ns, A, B, cfg.method, cfg.seed, cfg.replicas, cfg.epsilon,
                             grid=cfg.build_grid(), center=center, radius=cfg.radius)


def cmd_sweep(cfg: RunConfig, out: Path) -> int:
    model = cfg.build_model()
    tilt = solve_tilt(model.psi, cfg.x0)
    sweep = run_sweep(cfg, model, tilt)
    rows = [(n, e.estimate, e.stderr, sweep.target) for n, e in zip(sweep.ns, sweep.estimates)]
    write_csv(out / "sweep.csv", ["n", "estimate", "stderr", "target"], rows)
    print(out / "sweep.csv")
    return EXIT_OK


def _marginal_duality(model: JointModel, lam_grid: Grid, grid: Grid):
    """Grid conjugate of Psi(., 0) against the tilt-based rate of X on the x axis."""
    psi_x = model.psi_x()
    lam_x = Grid(lam_grid.lower[: model.d], lam_grid.upper[: model.d], lam_grid.counts[: model.d])
    x_grid = Grid(grid.lower[: model.d], grid.upper[: model.d], grid.counts[: model.d])
    g = conjugate(psi_x, lam_x, x_grid)
    keep = (x_grid.boundary_distance() >= 2) & ~g.metadata["boundary_argmax"]
    worst, skipped = 0.0, 0
    for idx in zip(*np.nonzero(keep)):
        x = np.array([x_grid.axes[k][i] for k, i in enumerate(idx)])
        try:
            exact = solve_tilt(model.psi, x).min_rate
        except SolverError:
            skipped += 1
            continue
        worst = max(worst, abs(float(g.values[idx]) - exact))
    fv = psi_x.on_grid(lam_x)
    curv = 0.0
    for ax in range(lam_x.dim):
        d2 = np.diff(np.moveaxis(fv, ax, 0), 2, axis=0) / lam_x.steps[ax] ** 2
        d2 = d2[np.isfinite(d2)]
        if d2.size:
            curv = max(curv, float(d2.max()))
    tol = 2 * lam_x.step**2 * curv + 1e-12
    return {"defect": worst, "tolerance": tol, "passed": worst <= tol, "skipped_points": skipped}


def build_report(cfg: RunConfig) -> dict:
    model = cfg.build_model()
    grid = cfg.build_grid()
    if grid.dim != model.dim:
        raise ConfigError(f"grid has dimension {grid.dim}, model needs {model.dim}")
    lam_grid = _lambda_grid(cfg, model)
    tilt = solve_tilt(model.psi, cfg.x0)
    B = _conditioning(model, cfg, tilt)
    A = cfg.build_event()
    checks = {}

    set_inf = inf_rate_on_set(model.rate, B, grid, tilt)
    checks["tilt_infimum"] = {"grid_value": set_inf.value, "argmin": set_inf.argmin, "analytic": set_inf.analytic,
                              "gap": set_inf.gap, "tolerance": set_inf.tolerance, "passed": set_inf.agrees}

    consistency = check_infimum_consistency(model.rate, A, B, grid)
    checks["infimum_consistency"] = consistency.to_dict()

    duality = {"rate_of_x": _marginal_duality(model, lam_grid, grid)}
    if model.d_prime:
        y_grid = Grid(grid.lower[model.d:], grid.upper[model.d:], grid.counts[model.d:])
        lam_y = Grid(lam_grid.lower[model.d:], lam_grid.upper[model.d:], lam_grid.counts[model.d:])
        defect = verify_duality(conditional_free_energy(model.psi, tilt.lambda0),
                                conditional_marginal_rate(model.psi, tilt, model.rate), lam_y, y_grid)
    else:
        defect = 0.0
    duality["conditional"] = {"defect": defect, "tolerance": DUALITY_TOL, "passed": defect <= DUALITY_TOL}
    checks["duality"] = duality

    sweep = run_sweep(cfg, model, tilt)
    sweep_ok = all(v.passed for n, v in zip(sweep.ns, sweep.verdicts) if n >= cfg.sandwich_min_n)
    checks["sweep"] = {**{k: v for k, v in sweep.to_dict().items() if k != "concentration"}, "passed": sweep_ok}
    conc = sweep.concentration
    checks["concentration"] = {**conc, "level": cfg.concentration_level, "passed": conc["fraction"] >= cfg.concentration_level}

    if model.d_prime:
        est, se = canonical_expectation(model, cfg.ns[-1], tilt.lambda0, cfg.seed, cfg.replicas)
        ok = bool(np.all(np.abs(est - tilt.y0) <= 4 * se))
        checks["canonical_expectation"] = {"n": cfg.ns[-1], "estimate": est, "stderr": se, "y0": tilt.y0, "passed": ok}
    else:
        checks["canonical_expectation"] = {"applicable": False, "passed": True}

    verdicts = {
        "tilt_infimum": bool(set_inf.agrees),
        "infimum_consistency": consistency.passed,
        "duality_rate_of_x": bool(duality["rate_of_x"]["passed"]),
        "duality_conditional": bool(duality["conditional"]["passed"]),
        "sweep": sweep_ok,
        "concentration": bool(checks["concentration"]["passed"]),
        "canonical_expectation": bool(checks["canonical_expectation"]["passed"]),
    }
    return {
        "meta": {"artifact_version": __version__, "config_hash": cfg.digest(), "model": model.name},
        "tilt": tilt.to_dict(),
        "checks": checks,
        "verdicts": verdicts,
        "passed": all(verdicts.values()),
    }


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    report = build_report(cfg)
    (out / "report.json").write_text(json.dumps(_clean(report), indent=2, sort_keys=True) + "\n")
    for name, ok in report["verdicts"].items():
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


COMMANDS = {"tilt": cmd_tilt, "condition": cmd_condition, "verify": cmd_verify, "sweep": cmd_sweep}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condldp", description="Conditional large-deviation toolkit")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON run configuration (default: bundled config)")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--method", choices=("direct", "tilted"), help="override the estimation method")
    return parser


def load_config(args) -> RunConfig:
    if args.config is None:
        text = default_config_text()
    else:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.method is not None:
        raw["method"] = args.method
    return RunConfig.from_dict(raw)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args)
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
