"""Command line entry point: ``jumpfilter {simulate,filter,validate,estimates,mollify-demo}``.

Configuration is flat ``key = value`` text with dotted namespaces::

    model.family = bounded_benchmark
    model.rho = 0.5
    sim.T = 1.0
    grid.h = 0.02
    run.seeds = 0,1,2

Keys under ``model.`` other than ``model.family`` are passed to the family
factory. Every run writes ``config.resolved`` (all keys, defaults filled in)
next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import inspect
import logging
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimates import EPS_LADDER, builtin_triples, mollified_norm_ladder, run_harness, write_reports
from .families import FAMILIES, make_family
from .model import CoefficientSet, validate_assumptions
from .mollify import check_kernel_identities
from .pipeline import InitialLaw, draw_x0, filter_experiment, required_radius
from .sde_sim import BlowUpError, gamma_path, simulate_joint
from .zakai import CFLError, MassCollapseError, SupportViolation

log = logging.getLogger("jumpfilter")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_CFL = 3
EXIT_NUMERICAL = 4


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or "." not in key:
            raise ConfigError(f"line {n}: keys must be dotted (namespace.name), got {key!r}")
        out[key] = value
    return out


def _parse_floats(value: str) -> tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


def _parse_bool(value: str) -> bool:
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {value!r}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(_format(v) for v in value)
    return "auto" if value is None else str(value)


@dataclass
class ExperimentConfig:
    """Resolved settings; field ``ns_name`` corresponds to config key ``ns.name``."""

    model_family: str = "bounded_benchmark"
    model_params: dict[str, object] = field(default_factory=dict)
    sim_T: float = 1.0
    sim_dt: float = 2.5e-4
    sim_y0: float = 0.0
    sim_paths: int = 1
    pi0_mean: float = 0.0
    pi0_var: float = 0.5
    grid_h: float = 0.02
    grid_radius: float | None = None
    filter_method: str = "both"
    filter_particles: int = 10_000
    filter_output_dt: float = 0.1
    filter_kde_eps: float = 0.01
    filter_resample_threshold: float = 0.5
    filter_batches: int = 1
    filter_check_refinement: bool = True
    estimates_eps: tuple[float, ...] = EPS_LADDER
    estimates_h: float = 0.005
    mollify_eps_r: float = 0.3
    mollify_eps_s: float = 0.2
    mollify_p: int = 3
    mollify_q: int = 1
    run_seeds: tuple[int, ...] = (0,)
    run_threads: int = 1
    run_out: str = "out"

    @classmethod
    def from_mapping(cls, raw: dict[str, str]) -> "ExperimentConfig":
        cfg = cls()
        known = {f.name: f for f in fields(cls) if f.name != "model_params"}
        params: dict[str, object] = {}
        for key, value in raw.items():
            if key.startswith("model.") and key != "model.family":
                params[key[len("model."):]] = _model_value(value)
                continue
            name = key.replace(".", "_").replace("-", "_")
            if name not in known:
                raise ConfigError(f"unknown config key {key!r}")
            setattr(cfg, name, _coerce(getattr(cls(), name), name, value))
        cfg.model_params = params
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.model_family not in FAMILIES:
            raise ConfigError(f"model.family: unknown family {self.model_family!r}")
        if not self.run_seeds:
            raise ConfigError("run.seeds must not be empty")
        if self.sim_T <= 0 or self.sim_dt <= 0:
            raise ConfigError("sim.T and sim.dt must be positive")
        if self.filter_method not in ("particle", "zakai", "both"):
            raise ConfigError("filter.method must be particle, zakai or both")
        if self.pi0_var <= 0:
            raise ConfigError("pi0.var must be positive")

    def coefficients(self) -> CoefficientSet:
        try:
            return make_family(self.model_family, **self.model_params)
        except TypeError as exc:
            raise ConfigError(f"model parameters: {exc}") from None

    @property
    def law(self) -> InitialLaw:
        return InitialLaw(self.pi0_mean, self.pi0_var)

    def resolved(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            if f.name == "model_params":
                continue
            ns, _, name = f.name.partition("_")
            out[f"{ns}.{name}"] = _format(getattr(self, f.name))
        sig = inspect.signature(FAMILIES[self.model_family])
        for pname, par in sig.parameters.items():
            value = self.model_params.get(pname, par.default)
            out[f"model.{pname}"] = _format(value)
        return dict(sorted(out.items()))

    def write_resolved(self, path: Path) -> None:
        path.write_text("".join(f"{k} = {v}\n" for k, v in self.resolved().items()))


def _model_value(value: str):
    if "," in value:
        return _parse_floats(value)
    try:
        return float(value)
    except ValueError:
        return value


def _coerce(default, name: str, value: str):
    try:
        if name == "grid_radius":
            return None if value.lower() == "auto" else float(value)
        if isinstance(default, bool):
            return _parse_bool(value)
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = _parse_floats(value)
            return tuple(int(v) for v in items) if name == "run_seeds" else items
        return value
    except ValueError as exc:
        raise ConfigError(f"{name.replace('_', '.', 1)}: {exc}") from None


def load_config(path: str | Path | None) -> ExperimentConfig:
    raw = parse_config_text(Path(path).read_text()) if path else {}
    return ExperimentConfig.from_mapping(raw)


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> int:
    c = cfg.coefficients()
    law = cfg.law
    for seed in cfg.run_seeds:
        for p in range(cfg.sim_paths):
            path = simulate_joint(c, [draw_x0(law, seed, p), cfg.sim_y0], cfg.sim_T, cfg.sim_dt,
                                  seed=seed, path_index=p)
            tag = f"seed{seed}_path{p}"
            path.to_csv(out / f"path_{tag}.csv", gamma=gamma_path(path, c))
            path.noise.write_binary(out / f"noise_{tag}.bin")
            _write_ledger(path.noise, out / f"jumps_{tag}.csv")
    return EXIT_OK


def _write_ledger(noise, target: Path) -> None:
    with open(target, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["source", "time", "atom", "mark"])
        for source, led in (("N0", noise.jumps0), ("N1", noise.jumps1)):
            for t, a, z in zip(led.times, led.atoms, led.marks):
                w.writerow([source, f"{t:.17g}", int(a), ",".join(f"{v:.17g}" for v in np.atleast_1d(z))])


def cmd_filter(cfg: ExperimentConfig, out: Path) -> int:
    c = cfg.coefficients()
    law = cfg.law
    need = required_radius(c, law, cfg.sim_T)
    radius = need if cfg.grid_radius is None else cfg.grid_radius
    if radius < need:
        raise ConfigError(f"grid.radius = {radius} does not cover the support propagation radius {need:.4g}")
    lines = []
    for seed in cfg.run_seeds:
        run = filter_experiment(c, law, cfg.sim_T, cfg.sim_dt, cfg.grid_h, seed, cfg.filter_particles,
                                cfg.filter_output_dt, radius, cfg.filter_method, cfg.filter_check_refinement,
                                cfg.filter_kde_eps, cfg.filter_resample_threshold, cfg.filter_batches)
        if run.zakai is not None:
            run.zakai.to_csv(out / f"zakai_seed{seed}.csv")
        if run.particles is not None:
            run.particles.to_csv(out / f"particle_seed{seed}.csv")
        if run.report is not None:
            run.report.to_csv(out / f"comparison_seed{seed}.csv")
            rep = run.report
            status = "pass" if rep.passed else "FAIL"
            lines.append(f"seed {seed}: max |gap|/se = {np.max(rep.z):.3f}, "
                         f"max L1 = {np.nanmax(rep.l1_gap):.4f} [{status}]")
    if lines:
        (out / "comparison_summary.txt").write_text("\n".join(lines) + "\n")
        print("\n".join(lines))
    return EXIT_OK


def cmd_validate(cfg: ExperimentConfig, out: Path) -> int:
    report = validate_assumptions(cfg.coefficients())
    text = report.to_text()
    (out / "assumptions.txt").write_text(text)
    print(text, end="")
    if not report.passed:
        names = ", ".join(chk.name for chk in report.failures())
        print(f"assumption check failed: {names}", file=sys.stderr)
        return EXIT_VALIDATION
    return EXIT_OK


def cmd_estimates(cfg: ExperimentConfig, out: Path) -> int:
    triples = builtin_triples(cfg.estimates_h)
    reports = run_harness(triples, cfg.estimates_eps, threads=cfg.run_threads)
    write_reports(reports, out / "estimates.csv")
    with open(out / "norm_ladder.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["triple", "m", "p", "eps", "norm", "reference"])
        for tt in triples:
            lad = mollified_norm_ladder(tt.u, cfg.estimates_eps, tt.alpha, tt.p)
            for e, v in zip(lad.eps, lad.norms):
                w.writerow([tt.name, tt.alpha, tt.p, f"{e:.17g}", f"{v:.17g}", f"{lad.reference:.17g}"])
    bad = [r.name for r in reports if not r.bounded]
    for r in reports:
        print(f"{r.name}: N_hat = {r.n_hat:.4g} [{'bounded' if r.bounded else 'GROWS'}]")
    return EXIT_VALIDATION if bad else EXIT_OK


def cmd_mollify_demo(cfg: ExperimentConfig, out: Path) -> int:
    rep = check_kernel_identities(cfg.mollify_eps_r, cfg.mollify_eps_s, cfg.mollify_p, cfg.mollify_q,
                                  seed=cfg.run_seeds[0])
    text = rep.to_text()
    (out / "kernel_identities.txt").write_text(text)
    print(text, end="")
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "filter": cmd_filter,
    "validate": cmd_validate,
    "estimates": cmd_estimates,
    "mollify-demo": cmd_mollify_demo,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="jumpfilter", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("method", nargs="?", choices=("particle", "zakai", "both"),
                    help="filter method (filter command only)")
    ap.add_argument("--config", help="flat key = value configuration file")
    ap.add_argument("--seed", type=int, help="run a single seed, overriding run.seeds")
    ap.add_argument("--out", help="output directory, overriding run.out")
    ap.add_argument("--threads", type=int, help="worker count, overriding run.threads")
    ap.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                    help="override one config key (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def run(command: str, cfg: ExperimentConfig) -> int:
    out = Path(cfg.run_out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out / "config.resolved")
    return COMMANDS[command](cfg, out)


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        raw = parse_config_text(Path(args.config).read_text()) if args.config else {}
        for item in args.set:
            raw.update(parse_config_text(item))
        if args.seed is not None:
            raw["run.seeds"] = str(args.seed)
        if args.out is not None:
            raw["run.out"] = args.out
        if args.threads is not None:
            raw["run.threads"] = str(args.threads)
        if args.method is not None:
            if args.command != "filter":
                raise ConfigError("a method argument is only accepted by the filter command")
            raw["filter.method"] = args.method
        cfg = ExperimentConfig.from_mapping(raw)
        return run(args.command, cfg)
    except (ConfigError, OSError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CFLError as exc:
        print(f"CFLError: {exc}", file=sys.stderr)
        return EXIT_CFL
    except (MassCollapseError, SupportViolation, BlowUpError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
