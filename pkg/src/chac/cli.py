"""Command-line frontend: ``chac simulate | converge | check``.

Configuration is a flat ``key = value`` file with ``#`` comments; every key
can also be set with ``--set key=value``. Exit codes: 0 success, 1 bad
configuration, 2 solver failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .diagnostics import DiagnosticsRow
from .fespace import REF_NODES, FeSpace, build_space
from .linalg import SingularMatrixError
from .mesh import build_periodic_mesh
from .model import MobilitySpec, ModelParams, PotentialSpec
from .scheme import NewtonOpts, NonConvergence, Sink, TimeGrid, default_initial_data, run
from .study import COLUMNS, ConvergenceTable, StudyConfig, run_ladder

log = logging.getLogger("chac")

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 1, 2
CHECK_STEPS = 20
MASS_TOL = 1e-11


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    mesh_k: int = 4
    tau_factor: float = 0.001
    T: float = 0.1
    gamma_rho: float = 1e-3
    gamma_eta: float = 1e-3
    C: float = 1.0
    D: float = 0.062
    alpha: float = 2.0
    l22: float = 1000.0
    l12_scale: float = math.sqrt(1000.0)
    c_normal: float = 1.0
    newton_tol: float = 1e-11
    newton_max_iter: int = 25
    snapshot_every: int = 100  # steps between VTK snapshots; 0 disables them
    output_dir: str = "chac-out"
    seed: int = 0

    def __post_init__(self):
        positive = ("mesh_k", "tau_factor", "T", "gamma_rho", "gamma_eta", "alpha", "l22", "c_normal",
                    "newton_tol", "newton_max_iter")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive (got {getattr(self, name)})")
        for name in ("C", "D", "l12_scale", "snapshot_every", "seed"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative (got {getattr(self, name)})")

    @property
    def h(self) -> float:
        return 2.0**-self.mesh_k

    @property
    def tau(self) -> float:
        return self.tau_factor * self.h

    def model_params(self) -> ModelParams:
        return ModelParams(
            self.gamma_rho, self.gamma_eta,
            PotentialSpec(self.C, self.D, self.alpha),
            MobilitySpec(self.l22, self.l12_scale, self.c_normal),
        )

    def newton_opts(self) -> NewtonOpts:
        return NewtonOpts(tol_residual=self.newton_tol, max_iter=self.newton_max_iter)

    def time_grid(self) -> TimeGrid:
        try:
            return TimeGrid.from_step(self.T, self.tau)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def study_config(self) -> StudyConfig:
        return StudyConfig(self.model_params(), self.tau_factor, self.T, self.newton_opts())

    def dump(self) -> str:
        lines = [f"{f.name} = {getattr(self, f.name)!r}".replace("'", "") for f in fields(self)]
        return "\n".join(lines) + "\n"


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _convert(key, text, where):
    kind = _TYPES[key]
    try:
        if kind == "int":
            value = float(text)
            if not value.is_integer():
                raise ValueError
            return int(value)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind}, got {text!r}") from None


def _assign(values, key, text, where):
    if key not in _TYPES:
        raise ConfigError(f"{where}: unknown key {key!r}; valid keys: {', '.join(_TYPES)}")
    values[key] = _convert(key, text.strip(), where)


def parse_config(path=None, overrides=()) -> RunConfig:
    """Read a config file (optional) and apply ``key=value`` overrides."""
    values = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep or not key.strip() or not val.strip():
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            _assign(values, key.strip(), val, f"{path}:{lineno}")
    for item in overrides:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _assign(values, key.strip(), val, "--set")
    try:
        return RunConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- output --------------------------------------------------------------


def _fmt(v):
    return str(v) if isinstance(v, (int, np.integer)) else "%.17g" % v


class CsvSink(Sink):
    """Writes one ``timeseries.csv`` row per completed step."""

    def __init__(self, path):
        self.file = open(path, "w", newline="")
        self.writer = csv.writer(self.file, lineterminator="\n")
        self.writer.writerow(DiagnosticsRow.columns())

    def step(self, row, state, pots):
        self.writer.writerow([_fmt(v) for v in row.values()])

    def finish(self):
        self.file.close()


def write_vtk(path, space: FeSpace, fields_: dict, title="chac"):
    """Legacy ASCII VTK: each P2 triangle as 4 linear triangles on its 6 nodes.

    Points form the (2n+1)^2 lattice of the closed unit square; values on the
    right and top edges repeat the periodic images.
    """
    m = 2 * space.mesh.n
    nodes = space.origin[:, None, :] + np.einsum("edk,ik->eid", space.jac, REF_NODES)
    lat = np.rint(nodes * m).astype(int)  # (E, 6, 2) lattice indices in [0, m]
    pid = lat[..., 1] * (m + 1) + lat[..., 0]
    dof_of_point = np.empty((m + 1) ** 2, dtype=int)
    dof_of_point[pid.ravel()] = space.dof_map.ravel()
    # points on the closing edges of the square map to their periodic image
    ii, jj = np.meshgrid(np.arange(m + 1), np.arange(m + 1))
    src = (jj % m) * (m + 1) + (ii % m)
    dof_of_point = dof_of_point[src.ravel()]
    sub = np.array([[0, 3, 5], [3, 1, 4], [5, 4, 2], [3, 4, 5]])
    cells = pid[:, sub].reshape(-1, 3)

    xs = np.arange(m + 1) / m
    with open(path, "w") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {(m + 1) ** 2} double\n")
        for y in xs:
            for x in xs:
                fh.write(f"{x:.17g} {y:.17g} 0\n")
        fh.write(f"CELLS {len(cells)} {4 * len(cells)}\n")
        np.savetxt(fh, np.column_stack([np.full(len(cells), 3), cells]), fmt="%d")
        fh.write(f"CELL_TYPES {len(cells)}\n")
        np.savetxt(fh, np.full(len(cells), 5), fmt="%d")
        fh.write(f"POINT_DATA {(m + 1) ** 2}\n")
        for name, vec in fields_.items():
            fh.write(f"SCALARS {name} double 1\nLOOKUP_TABLE default\n")
            np.savetxt(fh, np.asarray(vec)[dof_of_point], fmt="%.17g")


class VtkSink(Sink):
    def __init__(self, directory, space, every, last_step):
        self.dir = Path(directory)
        self.space = space
        self.every = every
        self.last = last_step

    def _write(self, n, state):
        write_vtk(self.dir / f"snapshot_{n:06d}.vtk", self.space, {"rho": state.rho, "eta": state.eta},
                  title=f"chac step {n} t={state.time:.17g}")

    def start(self, state, row):
        if self.every:
            self._write(0, state)

    def step(self, row, state, pots):
        if self.every and (row.step % self.every == 0 or row.step == self.last):
            self._write(row.step, state)


def write_convergence_csv(path, table: ConvergenceTable):
    header = ["k", "h", "tau"]
    for c in COLUMNS:
        header += [f"err_{c}", f"eoc_{c}"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in table.rows:
            cells = [str(r.k), _fmt(r.h), _fmt(r.tau)]
            for c in COLUMNS:
                cells += [_fmt(r.err[c]), _fmt(r.eoc[c]) if c in r.eoc else ""]
            w.writerow(cells)


def format_table(table: ConvergenceTable) -> str:
    head = f"{'k':>2}  {'h':>9}  {'tau':>9}"
    for c in COLUMNS:
        head += f"  {'err_' + c:>12}  {'eoc':>5}"
    lines = [head]
    for r in table.rows:
        line = f"{r.k:>2}  {r.h:9.3e}  {r.tau:9.3e}"
        for c in COLUMNS:
            e = f"{r.eoc[c]:5.2f}" if c in r.eoc else ""
            line += f"  {r.err[c]:12.3e}  {e:>5}"
        lines.append(line)
    return "\n".join(lines)


# -- commands ------------------------------------------------------------


def _space(cfg: RunConfig) -> FeSpace:
    return build_space(build_periodic_mesh(2**cfg.mesh_k, level=cfg.mesh_k))


def _out_dir(args, cfg: RunConfig) -> Path:
    out = Path(args.out or os.environ.get("CHAC_OUT_DIR") or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: RunConfig, out: Path) -> int:
    grid = cfg.time_grid()
    space = _space(cfg)
    info = out / "run_config.txt"
    info.write_text(
        cfg.dump() + f"# derived: h = {cfg.h!r}, tau = {grid.tau!r}, N = {grid.N}, n_dofs = {space.n_dofs}\n"
    )

    class Initial(Sink):
        def start(self, state, row):
            with open(info, "a") as fh:
                fh.write(f"# initial: mass_rho = {row.mass_rho:.17g}, energy = {row.energy:.17g}\n")

    sinks = [CsvSink(out / "timeseries.csv"), VtkSink(out, space, cfg.snapshot_every, grid.N), Initial()]
    log.info("simulate k=%d: %d dofs, tau=%g, %d steps", cfg.mesh_k, space.n_dofs, grid.tau, grid.N)
    try:
        run(space, cfg.model_params(), grid, default_initial_data(), sinks, cfg.newton_opts())
    finally:
        sinks[0].finish()
    return EXIT_OK


def cmd_converge(cfg: RunConfig, out: Path, k_min: int, k_max: int, jobs: int = 1) -> int:
    if not 1 <= k_min < k_max:
        raise ConfigError(f"need 1 <= k-min < k-max (got {k_min}, {k_max})")
    table, _ = run_ladder(cfg.study_config(), k_min, k_max, jobs=jobs)
    write_convergence_csv(out / "convergence.csv", table)
    print(format_table(table))
    return EXIT_OK


def check_rows(rows, mass0: float, tol_identity: float):
    """(name, passed, detail) for each invariant over the diagnostics rows."""
    drift = max(abs(r.mass_rho - mass0) for r in rows) / abs(mass0)
    ident = max(abs(r.energy_identity_residual) for r in rows)
    energies = [r.energy for r in rows]
    rise = max(0.0, max(b - a for a, b in zip(energies, energies[1:]))) if len(energies) > 1 else 0.0
    return [
        ("mass_conservation", drift <= MASS_TOL, f"max relative drift {drift:.3e} (tol {MASS_TOL:.0e})"),
        ("energy_identity", ident <= tol_identity, f"max |residual| {ident:.3e} (tol {tol_identity:.0e})"),
        ("energy_decay", rise <= tol_identity, f"max energy increase {rise:.3e} (tol {tol_identity:.0e})"),
    ]


def cmd_check(cfg: RunConfig, out: Path | None = None) -> int:
    grid = TimeGrid(CHECK_STEPS * cfg.tau, CHECK_STEPS)
    space = _space(cfg)

    class First(Sink):
        def start(self, state, row):
            self.row = row

    first = First()
    _, rows = run(space, cfg.model_params(), grid, default_initial_data(), [first], cfg.newton_opts())
    results = check_rows([first.row] + rows, first.row.mass_rho, 10 * cfg.newton_tol)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SOLVER


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chac", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"chac {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("simulate", "run one simulation, write timeseries.csv and VTK snapshots"),
        ("converge", "run the refinement ladder and write convergence.csv"),
        ("check", f"run {CHECK_STEPS} steps and verify mass and energy identities"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--out", help="output directory (default: $CHAC_OUT_DIR, then output_dir)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--jobs", type=int, default=1, help="parallel level jobs (converge)")
        if name == "converge":
            p.add_argument("--k-min", type=int, default=1)
            p.add_argument("--k-max", type=int, default=5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(asctime)s %(name)s %(message)s"
    )
    try:
        cfg = parse_config(args.config, args.set)
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1 (got {args.jobs})")
        if args.command == "simulate":
            return cmd_simulate(cfg, _out_dir(args, cfg))
        if args.command == "converge":
            return cmd_converge(cfg, _out_dir(args, cfg), args.k_min, args.k_max, args.jobs)
        return cmd_check(cfg)
    except ConfigError as exc:
        print(f"chac: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, SingularMatrixError, RuntimeError) as exc:
        print(f"chac: solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
