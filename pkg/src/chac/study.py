"""Convergence ladder on nested grids h = 2^-k, tau = c h.

No exact solution is available, so each level is compared with the next
finer one. Trajectories (nodal states at every time node, potentials on every
interval) are streamed to ``.npy`` files so the finest levels stay on disk.

The L-infinity-in-time norm is evaluated at the fine time nodes only: the
difference of two continuous piecewise linear trajectories is affine in time
on every fine interval, and a norm is convex along affine paths, so its
maximum over an interval sits at an endpoint.
"""
from __future__ import annotations

import logging
import math
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fespace import FeSpace, build_space, prolongation_matrix
from .mesh import build_periodic_mesh
from .model import ModelParams
from .scheme import NewtonOpts, Sink, TimeGrid, default_initial_data, run

log = logging.getLogger(__name__)

COLUMNS = ("rho", "eta", "mu_rho", "mu_eta")
NORM_OF = {"rho": "LinfH1", "eta": "LinfH1", "mu_rho": "L2H1", "mu_eta": "L2L2"}


@dataclass(frozen=True)
class StudyConfig:
    params: ModelParams = field(default_factory=ModelParams)
    tau_factor: float = 0.001
    T: float = 0.1
    newton: NewtonOpts = field(default_factory=NewtonOpts)
    quad_degree: int = 8

    def grid(self, k: int) -> TimeGrid:
        return TimeGrid.from_step(self.T, self.tau_factor * 2.0**-k)


@dataclass
class Trajectory:
    """Stored discrete solution of one level."""

    k: int
    space: FeSpace
    tau: float
    rho: np.ndarray  # (N+1, n_dofs)
    eta: np.ndarray
    mu_rho: np.ndarray  # (N, n_dofs)
    mu_eta: np.ndarray
    rows: list = field(default_factory=list)

    @property
    def N(self) -> int:
        return self.mu_rho.shape[0]


class TrajectoryWriter(Sink):
    """Streams states and potentials of a run into preallocated .npy files."""

    def __init__(self, directory, N: int, n_dofs: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        mm = np.lib.format.open_memmap
        self.arrays = {
            "rho": mm(self.dir / "rho.npy", "w+", float, (N + 1, n_dofs)),
            "eta": mm(self.dir / "eta.npy", "w+", float, (N + 1, n_dofs)),
            "mu_rho": mm(self.dir / "mu_rho.npy", "w+", float, (N, n_dofs)),
            "mu_eta": mm(self.dir / "mu_eta.npy", "w+", float, (N, n_dofs)),
        }

    def start(self, state, row):
        self.arrays["rho"][0] = state.rho
        self.arrays["eta"][0] = state.eta

    def step(self, row, state, pots):
        n = row.step
        self.arrays["rho"][n] = state.rho
        self.arrays["eta"][n] = state.eta
        self.arrays["mu_rho"][n - 1] = pots.mu_rho
        self.arrays["mu_eta"][n - 1] = pots.mu_eta

    def finish(self):
        for a in self.arrays.values():
            a.flush()


def load_trajectory(directory, k: int, space: FeSpace, tau: float, rows=()) -> Trajectory:
    d = Path(directory)
    arr = {name: np.load(d / f"{name}.npy", mmap_mode="r") for name in ("rho", "eta", "mu_rho", "mu_eta")}
    return Trajectory(k, space, tau, arr["rho"], arr["eta"], arr["mu_rho"], arr["mu_eta"], list(rows))


def run_level(config: StudyConfig, k: int, directory, initial=None) -> Trajectory:
    """Simulate level k (h = 2^-k) and store its trajectory under ``directory``."""
    space = build_space(build_periodic_mesh(2**k, level=k), config.quad_degree)
    grid = config.grid(k)
    writer = TrajectoryWriter(directory, grid.N, space.n_dofs)
    log.info("level k=%d: %d dofs, %d steps", k, space.n_dofs, grid.N)
    try:
        _, rows = run(space, config.params, grid, initial or default_initial_data(), [writer], config.newton)
    except Exception as exc:
        raise RuntimeError(f"level k={k} failed: {exc}") from exc
    return load_trajectory(directory, k, space, grid.tau, rows)


def _run_level_job(args):
    config, k, directory = args
    traj = run_level(config, k, directory)
    return k, traj.tau, traj.rows


def _sq_norms(A, D):
    """Row-wise squared norms d^T A d for the rows of D."""
    return np.einsum("ij,ij->i", D, (A @ D.T).T)


def inter_grid_error(fine: Trajectory, coarse: Trajectory, which: str, chunk: int = 256) -> float:
    """Distance between consecutive levels in the norm used for column ``which``.

    ``coarse`` must be one level below ``fine`` (h and tau doubled) or the
    same level (then the trajectories are compared directly).
    """
    if which not in NORM_OF:
        raise ValueError(f"unknown column {which!r}; expected one of {COLUMNS}")
    same = coarse.space.mesh.n == fine.space.mesh.n
    if same:
        if coarse.N != fine.N:
            raise ValueError("trajectories of the same level must have the same number of steps")
        P = None
        ratio = 1
    else:
        if fine.N != 2 * coarse.N:
            raise ValueError(f"time grids are not nested: {coarse.N} coarse vs {fine.N} fine steps")
        P = prolongation_matrix(coarse.space, fine.space)
        ratio = 2
    V = fine.space
    norm = NORM_OF[which]
    A = {"LinfH1": V.mass + V.stiffness, "L2H1": V.mass + V.stiffness, "L2L2": V.mass}[norm]
    fvals = getattr(fine, which)
    cvals = getattr(coarse, which)

    def coarse_at(idx):
        if norm == "LinfH1":
            lo = idx // ratio
            hi = (idx + ratio - 1) // ratio
            c = 0.5 * (np.asarray(cvals[lo]) + np.asarray(cvals[hi]))
        else:
            c = np.asarray(cvals[idx // ratio])
        return c if P is None else (P @ c.T).T

    n_rows = fvals.shape[0]
    acc = 0.0
    for start in range(0, n_rows, chunk):
        idx = np.arange(start, min(start + chunk, n_rows))
        sq = _sq_norms(A, np.asarray(fvals[idx]) - coarse_at(idx))
        if norm == "LinfH1":
            acc = max(acc, float(sq.max()))
        else:
            acc += fine.tau * float(sq.sum())
    return math.sqrt(max(acc, 0.0))


def eoc(err_coarse: float, err_fine: float) -> float:
    """Experimental order for halved h: log2 of the error ratio."""
    if not (err_coarse > 0 and err_fine > 0):
        raise ValueError(f"errors must be positive (got {err_coarse}, {err_fine})")
    return math.log2(err_coarse / err_fine)


@dataclass
class ConvergenceRow:
    k: int
    h: float
    tau: float
    err: dict
    eoc: dict = field(default_factory=dict)


@dataclass
class ConvergenceTable:
    rows: list = field(default_factory=list)

    def column(self, name: str):
        return [r.err[name] for r in self.rows]

    def eoc_column(self, name: str):
        return [r.eoc.get(name) for r in self.rows]


def table_from_errors(levels, errors) -> ConvergenceTable:
    """``errors[i]`` compares ``levels[i]`` with ``levels[i] + 1``."""
    table = ConvergenceTable()
    for i, (k, (tau, err)) in enumerate(zip(levels, errors)):
        row = ConvergenceRow(k, 2.0**-k, tau, dict(err))
        if i > 0:
            prev = table.rows[-1].err
            row.eoc = {c: eoc(prev[c], err[c]) if prev[c] > 0 and err[c] > 0 else float("nan") for c in COLUMNS}
        table.rows.append(row)
    return table


def run_ladder(config: StudyConfig, k_min: int, k_max: int, jobs: int = 1, workdir=None, keep: bool = False):
    """Run levels k_min..k_max and tabulate errors between consecutive levels.

    Returns the ConvergenceTable (one row per level k < k_max) and the
    per-level diagnostics rows.
    """
    if k_min < 1 or k_max <= k_min:
        raise ValueError(f"need 1 <= k_min < k_max (got {k_min}, {k_max})")
    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory(prefix="chac-ladder-")
        workdir = tmp.name
    workdir = Path(workdir)
    levels = list(range(k_min, k_max + 1))
    jobs_args = [(config, k, workdir / f"level{k}") for k in levels]
    try:
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                results = list(pool.map(_run_level_job, jobs_args))
        else:
            results = [_run_level_job(a) for a in jobs_args]
        taus = {k: tau for k, tau, _ in results}
        diag_rows = {k: rows for k, _, rows in results}
        trajs = {
            k: load_trajectory(
                workdir / f"level{k}", k, build_space(build_periodic_mesh(2**k, level=k), config.quad_degree), taus[k]
            )
            for k in levels
        }
        errors = []
        for k in levels[:-1]:
            err = {c: inter_grid_error(trajs[k + 1], trajs[k], c) for c in COLUMNS}
            log.info("k=%d errors %s", k, err)
            errors.append((taus[k], err))
        trajs.clear()
        return table_from_errors(levels[:-1], errors), diag_rows
    finally:
        if tmp is not None and not keep:
            tmp.cleanup()


# Reported values of the reference computation (h = 2^-k, tau = 0.001 h),
# for qualitative comparison only.
REFERENCE_TABLE = {
    1: {"rho": 8.61e0, "eta": 6.93e0, "mu_rho": 1.05e-2, "mu_eta": 1.86e-5},
    2: {"rho": 6.77e0, "eta": 2.48e0, "mu_rho": 8.35e-3, "mu_eta": 9.71e-6},
    3: {"rho": 1.81e-1, "eta": 1.28e-1, "mu_rho": 4.73e-4, "mu_eta": 4.96e-7},
    4: {"rho": 1.22e-2, "eta": 9.66e-3, "mu_rho": 3.16e-5, "mu_eta": 1.13e-8},
    5: {"rho": 8.15e-4, "eta": 6.51e-4, "mu_rho": 2.83e-6, "mu_eta": 7.95e-10},
}
REFERENCE_EOC = {
    2: {"rho": 0.59, "eta": 1.22, "mu_rho": 0.57, "mu_eta": 0.97},
    3: {"rho": 2.29, "eta": 2.07, "mu_rho": 2.04, "mu_eta": 2.07},
    4: {"rho": 1.97, "eta": 1.93, "mu_rho": 1.98, "mu_eta": 2.34},
    5: {"rho": 1.97, "eta": 1.97, "mu_rho": 1.87, "mu_eta": 1.96},
}
