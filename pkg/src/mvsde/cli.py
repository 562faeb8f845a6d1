"""Batch entry point.

    mvsde poc --model mean_field_ou --N-list 32,64,128 --reps 16 --outdir runs
    mvsde --config study.json cross-decay --threads 4

Exit status: 0 success, 1 a study ran but failed its checks, 2 runtime or
configuration error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DivergenceError, InvalidInputError
from .experiments import (
    DEFAULT_WINDOW,
    StudyConfig,
    derivative_sweep,
    reference_flow,
    run_cross_decay_study,
    run_diagonal_convergence_study,
    run_mean_field_psi_study,
    run_moment_bound_study,
    run_poc_study,
    versions,
)
from .grid import TimeGrid
from .malliavin import directional_derivative, finite_difference_oracle, frozen_flow_system, malliavin_limit
from .model import BUILTIN_MODELS, make_model
from .particle import simulate_ips
from .rng import substream
from .sde import InitSampler, Scheme, sample_noise, simulate_frozen_flow

log = logging.getLogger("mvsde")

COMMANDS = ("simulate", "picard", "poc", "malliavin-check", "cross-decay", "psi", "diagonal", "moments")

EXIT_OK, EXIT_SCIENCE, EXIT_RUNTIME = 0, 1, 2


class ConfigError(InvalidInputError):
    def __init__(self, key: Optional[str], message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass
class CliConfig:
    command: str = "poc"
    model: dict = field(default_factory=lambda: {"name": "mean_field_ou", "params": {}})
    T: float = 1.0
    dt: Optional[float] = None
    steps: Optional[int] = None
    N: int = 64
    N_list: list = field(default_factory=lambda: [32, 64, 128, 256, 512])
    M: Optional[int] = None
    reps: int = 16
    seed: int = 42
    scheme: Optional[str] = None
    tol: Optional[float] = None
    max_iter: int = 25
    s_nodes: int = 4
    init: dict = field(default_factory=lambda: {"kind": "gaussian", "loc": 1.0, "scale": 0.5})
    epsilon: float = 1e-4
    paths: int = 100
    oracle_tol: float = 1e-3
    variance_factors: list = field(default_factory=lambda: [1.0, 2.0, 4.0])
    moment_paths: int = 1000
    window: list = field(default_factory=lambda: list(DEFAULT_WINDOW))
    outdir: str = "runs"
    threads: int = 1

    def grid(self) -> TimeGrid:
        if self.steps is not None:
            return TimeGrid(self.T, self.steps)
        return TimeGrid.from_dt(self.T, self.dt if self.dt is not None else 1e-3)

    def init_sampler(self) -> InitSampler:
        return InitSampler(dim=1, **self.init)

    def study_config(self) -> StudyConfig:
        return StudyConfig(
            model=make_model(self.model["name"], self.model.get("params")),
            N_list=self.N_list,
            reps=self.reps,
            grid=self.grid(),
            s_nodes=self.s_nodes,
            seed=self.seed,
            scheme=self.scheme,
            init=self.init_sampler(),
            M_ref=self.M,
            picard_tol=self.tol,
            picard_max_iter=self.max_iter,
            window=tuple(self.window),
            threads=self.threads,
            variance_factors=self.variance_factors,
            moment_paths=self.moment_paths,
        )

    def echo(self) -> dict:
        """Effective configuration; ``threads`` is omitted because it never changes results."""
        out = asdict(self)
        out.pop("threads")
        out.pop("outdir")
        return out


_FIELD_TYPES = {f.name: f for f in fields(CliConfig)}


def _positive(cfg: CliConfig, key: str, integer: bool = False, allow_none: bool = False) -> None:
    v = getattr(cfg, key)
    if v is None and allow_none:
        return
    if isinstance(v, bool) or not isinstance(v, (int, float)) or (integer and int(v) != v):
        raise ConfigError(key, f"must be a positive {'integer' if integer else 'number'}, got {v!r}")
    if not np.isfinite(v) or v <= 0:
        raise ConfigError(key, f"must be positive, got {v!r}")
    if integer:
        setattr(cfg, key, int(v))


def validate(cfg: CliConfig) -> CliConfig:
    if cfg.command not in COMMANDS:
        raise ConfigError("command", f"unknown command {cfg.command!r}; choose from {', '.join(COMMANDS)}")
    if not isinstance(cfg.model, dict) or "name" not in cfg.model:
        raise ConfigError("model", "expected an object with 'name' and optional 'params'")
    extra = set(cfg.model) - {"name", "params"}
    if extra:
        raise ConfigError("model", f"unknown key(s) {sorted(extra)}")
    try:
        make_model(cfg.model["name"], cfg.model.get("params"))
    except InvalidInputError as exc:
        raise ConfigError("model", str(exc)) from None
    _positive(cfg, "T")
    _positive(cfg, "dt", allow_none=True)
    _positive(cfg, "steps", integer=True, allow_none=True)
    if cfg.dt is not None and cfg.steps is not None:
        raise ConfigError("steps", "give either dt or steps, not both")
    try:
        cfg.grid()
    except InvalidInputError as exc:
        raise ConfigError("dt", str(exc)) from None
    for key in ("N", "reps", "max_iter", "s_nodes", "paths", "moment_paths", "threads"):
        _positive(cfg, key, integer=True)
    for key in ("M",):
        _positive(cfg, key, integer=True, allow_none=True)
    for key in ("epsilon", "oracle_tol"):
        _positive(cfg, key)
    _positive(cfg, "tol", allow_none=True)
    if isinstance(cfg.seed, bool) or not isinstance(cfg.seed, int) or not (0 <= cfg.seed < 2**64):
        raise ConfigError("seed", f"must be an unsigned 64-bit integer, got {cfg.seed!r}")
    if cfg.reps < 4:
        raise ConfigError("reps", f"must be >= 4, got {cfg.reps}")
    if not isinstance(cfg.N_list, list) or not cfg.N_list:
        raise ConfigError("N_list", "must be a nonempty list of integers")
    if any(isinstance(n, bool) or not isinstance(n, int) or n < 2 for n in cfg.N_list):
        raise ConfigError("N_list", f"entries must be integers >= 2, got {cfg.N_list}")
    if any(b <= a for a, b in zip(cfg.N_list, cfg.N_list[1:])):
        raise ConfigError("N_list", f"must be strictly increasing, got {cfg.N_list}")
    if cfg.scheme is not None:
        try:
            cfg.scheme = Scheme.parse(cfg.scheme).value
        except InvalidInputError as exc:
            raise ConfigError("scheme", str(exc)) from None
    if not isinstance(cfg.init, dict):
        raise ConfigError("init", "expected an object with kind/loc/scale")
    try:
        cfg.init_sampler()
    except (TypeError, InvalidInputError) as exc:
        raise ConfigError("init", str(exc)) from None
    if len(cfg.window) != 2 or cfg.window[0] >= cfg.window[1]:
        raise ConfigError("window", f"must be an increasing pair, got {cfg.window}")
    if not cfg.variance_factors or any(f <= 0 for f in cfg.variance_factors):
        raise ConfigError("variance_factors", "must be a nonempty list of positive factors")
    return cfg


def load_config(path=None, overrides: Optional[dict] = None) -> CliConfig:
    """Read a JSON config (if given), apply overrides, fill defaults and validate."""
    data = {}
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text()
        except OSError as exc:
            raise ConfigError(None, f"cannot read config {p}: {exc.strerror}") from None
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(None, f"{p}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
        if not isinstance(data, dict):
            raise ConfigError(None, f"{p}: top level must be a JSON object")
    data.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(data) - set(_FIELD_TYPES))
    if unknown:
        raise ConfigError(unknown[0], f"unknown key(s) {unknown}")
    return validate(CliConfig(**data))


# command runners -------------------------------------------------------------


def _run_dir(cfg: CliConfig) -> Path:
    root = Path(cfg.outdir)
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    out = root / f"{cfg.command}-{stamp}"
    n = 1
    while out.exists():
        out = root / f"{cfg.command}-{stamp}-{n}"
        n += 1
    out.mkdir(parents=True)
    return out


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _meta(cfg: CliConfig, passed: bool, **extra) -> dict:
    return {"command": cfg.command, "seed": cfg.seed, "passed": passed, "config": cfg.echo(),
            "versions": versions(), **extra}


def _cmd_simulate(cfg: CliConfig, out: Path) -> bool:
    model = make_model(cfg.model["name"], cfg.model.get("params"))
    grid = cfg.grid()
    noise = sample_noise(grid, cfg.N, model.dim_noise, cfg.seed, stream=("simulate",), threads=cfg.threads)
    init = cfg.init_sampler()(substream(cfg.seed, "init", "simulate"), cfg.N)
    paths = simulate_ips(model, noise, init, cfg.scheme)
    paths.to_csv(out / "results.csv")
    _write_json(out / "meta.json", _meta(cfg, True, particles=cfg.N, steps=grid.steps))
    return True


def _cmd_picard(cfg: CliConfig, out: Path) -> bool:
    scfg = cfg.study_config()
    res = reference_flow(scfg, M=cfg.M or 8 * cfg.N)
    res.residuals_to_csv(out / "results.csv")
    res.flow.to_csv(out / "flow.csv")
    _write_json(out / "meta.json", _meta(cfg, res.converged, iterations=res.iterations, tol=res.tol,
                                         residuals=[float(r) for r in res.residuals]))
    return res.converged


def _cmd_malliavin_check(cfg: CliConfig, out: Path) -> bool:
    scfg = cfg.study_config()
    model, grid = scfg.model, scfg.grid
    flow = reference_flow(scfg, M=cfg.M or 2000).flow
    P = cfg.paths
    noise = sample_noise(grid, P, model.dim_noise, cfg.seed, stream=("malliavin-check",), threads=cfg.threads)
    init = scfg.init(substream(cfg.seed, "init", "malliavin-check"), P)
    z = simulate_frozen_flow(model, flow, init, noise, cfg.scheme)
    field_T = malliavin_limit(model, z, flow, np.arange(grid.steps), noise, cfg.scheme, t_indices=[grid.steps])
    h = 1.0 + 0.5 * np.sin(2 * np.pi * grid.times[:-1] / grid.T)
    variational = np.array([directional_derivative(field_T.slice_for(p), h)[0] for p in range(P)])
    oracle = finite_difference_oracle(frozen_flow_system(model, flow, init, cfg.scheme), noise, h,
                                      cfg.epsilon, stream=None)[:, -1]
    rel = np.abs(variational - oracle) / np.maximum(np.abs(variational), np.finfo(float).tiny)
    with open(out / "results.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "variational", "oracle", "rel_error"])
        for p in range(P):
            w.writerow([p, repr(float(variational[p])), repr(float(oracle[p])), repr(float(rel[p]))])
    passed = bool(rel.max() <= cfg.oracle_tol)
    _write_json(out / "meta.json", _meta(cfg, passed, max_rel_error=float(rel.max()), tolerance=cfg.oracle_tol))
    return passed


def _study(fn):
    def run(cfg: CliConfig, out: Path) -> bool:
        scfg = cfg.study_config()
        res = fn(scfg)
        res.write(out, config=cfg.echo())
        print(res.summary())
        return res.passed

    return run


def _derivative(fn):
    return _study(lambda scfg: fn(scfg, derivative_sweep(scfg)))


_RUNNERS = {
    "simulate": _cmd_simulate,
    "picard": _cmd_picard,
    "malliavin-check": _cmd_malliavin_check,
    "poc": _study(run_poc_study),
    "cross-decay": _derivative(run_cross_decay_study),
    "psi": _derivative(run_mean_field_psi_study),
    "diagonal": _derivative(run_diagonal_convergence_study),
    "moments": _study(run_moment_bound_study),
}


def run_command(cfg: CliConfig) -> int:
    """Run one validated command; artifacts are written before returning the exit status."""
    try:
        out = _run_dir(cfg)
        _write_json(out / "config.json", cfg.echo())
        passed = _RUNNERS[cfg.command](cfg, out)
    except DivergenceError as exc:
        print(f"error: divergence: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (InvalidInputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"artifacts written to {out}")
    return EXIT_OK if passed else EXIT_SCIENCE


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvsde", description=__doc__.split("\n\n")[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file; flags override its keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--outdir")
    p.add_argument("--threads", type=int)
    p.add_argument("--N-list", dest="N_list", type=_int_list)
    p.add_argument("--N", dest="N", type=int)
    p.add_argument("--M", dest="M", type=int)
    p.add_argument("--dt", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--T", dest="T", type=float)
    p.add_argument("--reps", type=int)
    p.add_argument("--model", help=f"built-in model: {', '.join(sorted(BUILTIN_MODELS))}")
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE", help="model parameter override")
    p.add_argument("--scheme", choices=[s.value for s in Scheme])
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    overrides = {k: getattr(args, k) for k in ("command", "seed", "outdir", "threads", "N_list", "N", "M", "dt",
                                               "steps", "T", "reps", "scheme")}
    try:
        if args.model or args.param:
            base = load_config(args.config, {"command": args.command}).model
            model = {"name": args.model or base["name"], "params": {} if args.model else dict(base.get("params", {}))}
            for item in args.param:
                key, sep, value = item.partition("=")
                if not sep:
                    raise ConfigError("param", f"expected KEY=VALUE, got {item!r}")
                try:
                    model["params"][key] = float(value)
                except ValueError:
                    raise ConfigError("param", f"{key} must be numeric, got {value!r}") from None
            overrides["model"] = model
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return run_command(cfg)


if __name__ == "__main__":
    sys.exit(main())
