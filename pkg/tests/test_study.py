import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chac.fespace import build_space, interpolate, norm, prolong
from chac.mesh import build_periodic_mesh
from chac.study import (
    COLUMNS,
    REFERENCE_TABLE,
    StudyConfig,
    Trajectory,
    eoc,
    inter_grid_error,
    run_ladder,
    run_level,
    table_from_errors,
)

SHORT = StudyConfig(T=0.002)  # 4 steps at k = 1, 8 at k = 2


def test_eoc_examples():
    assert eoc(4.0, 1.0) == 2.0
    assert eoc(1.0, 1.0) == 0.0
    assert round(eoc(1.86e-5, 9.71e-6), 2) == 0.94
    for bad in ((0.0, 1.0), (1.0, -1.0)):
        with pytest.raises(ValueError):
            eoc(*bad)


@given(st.floats(1e-8, 1e8), st.integers(1, 12))
def test_eoc_manufactured_second_order(A, k):
    assert abs(eoc(A * 4.0**-k, A * 4.0 ** -(k + 1)) - 2.0) <= 1e-12


def _traj(space, k, tau, N, fn_state, fn_pot):
    t = tau * np.arange(N + 1)
    tm = tau * (np.arange(N) + 0.5)
    rho = np.array([fn_state(s) for s in t])
    mu = np.array([fn_pot(s) for s in tm])
    return Trajectory(k, space, tau, rho, rho.copy(), mu, mu.copy())


@pytest.fixture(scope="module")
def pair():
    c = build_space(build_periodic_mesh(2, level=1))
    f = build_space(build_periodic_mesh(4, level=2))
    return c, f


def test_identical_trajectories_zero(pair):
    c, _ = pair
    rng = np.random.default_rng(1)
    base = rng.standard_normal(c.n_dofs)
    tr = _traj(c, 1, 0.1, 4, lambda t: np.sin(t) * base, lambda t: t * base)
    for col in COLUMNS:
        assert inter_grid_error(tr, tr, col) == 0.0


def test_prolonged_coarse_compared_with_itself(pair):
    c, f = pair
    rng = np.random.default_rng(2)
    base = rng.standard_normal(c.n_dofs)
    coarse = _traj(c, 1, 0.1, 4, lambda t: (1 + t) * base, lambda t: (2 - t) * base)
    fb = prolong(c, f, base)
    # fine values at fine nodes: the coarse fields are linear / piecewise constant in time
    fine_states = np.array([(1 + 0.05 * m) * fb for m in range(9)])
    fine_pots = np.array([(2 - 0.1 * (j // 2 + 0.5)) * fb for j in range(8)])
    fine = Trajectory(2, f, 0.05, fine_states, fine_states, fine_pots, fine_pots)
    for col in COLUMNS:
        assert inter_grid_error(fine, coarse, col) <= 1e-12


def test_constant_in_time_difference(pair):
    c, f = pair
    delta = interpolate(f, lambda x, y: np.cos(2 * np.pi * x) * np.sin(4 * np.pi * y))
    zero_c = np.zeros(c.n_dofs)
    coarse = _traj(c, 1, 0.1, 3, lambda t: zero_c, lambda t: zero_c)
    fine = _traj(f, 2, 0.05, 6, lambda t: delta, lambda t: delta)
    assert inter_grid_error(fine, coarse, "rho") == pytest.approx(norm(f, delta, "H1"), rel=1e-13)
    T = 0.3
    assert inter_grid_error(fine, coarse, "mu_eta") == pytest.approx(math.sqrt(T) * norm(f, delta, "L2"), rel=1e-13)
    assert inter_grid_error(fine, coarse, "mu_rho") == pytest.approx(math.sqrt(T) * norm(f, delta, "H1"), rel=1e-13)


def test_linear_in_time_difference(pair):
    # difference t * sin(2 pi x): the potentials are interval values at midpoints,
    # so the time factor is the midpoint sum sum_j tau t_{j+1/2}^2 = T^3/3 - T tau^2/12
    c, f = pair
    s = interpolate(f, lambda x, y: np.sin(2 * np.pi * x) + 0 * y)
    zero_c = np.zeros(c.n_dofs)
    T, Nf = 0.1, 40
    tau = T / Nf
    coarse = _traj(c, 1, 2 * tau, Nf // 2, lambda t: zero_c, lambda t: zero_c)
    fine = _traj(f, 2, tau, Nf, lambda t: t * s, lambda t: t * s)
    factor = math.sqrt(T**3 / 3 - T * tau**2 / 12)
    assert abs(inter_grid_error(fine, coarse, "mu_eta") - factor * norm(f, s, "L2")) <= 1e-10
    assert abs(inter_grid_error(fine, coarse, "mu_rho") - factor * norm(f, s, "H1")) <= 1e-10
    # closed form of the continuous time norm, approached as tau -> 0
    assert abs(factor - T**1.5 / math.sqrt(3)) <= T * tau
    assert inter_grid_error(fine, coarse, "rho") == pytest.approx(T * norm(f, s, "H1"), rel=1e-13)


def test_lineage_checks(pair):
    c, f = pair
    z = np.zeros(c.n_dofs)
    a = _traj(c, 1, 0.1, 4, lambda t: z, lambda t: z)
    b = _traj(f, 2, 0.1, 4, lambda t: np.zeros(f.n_dofs), lambda t: np.zeros(f.n_dofs))
    with pytest.raises(ValueError, match="nested"):
        inter_grid_error(b, a, "rho")
    with pytest.raises(ValueError, match="unknown column"):
        inter_grid_error(a, a, "phi")
    a3 = _traj(c, 1, 0.1, 3, lambda t: z, lambda t: z)
    with pytest.raises(ValueError):
        inter_grid_error(a, a3, "rho")


def test_same_level_twice_is_deterministic(tmp_path):
    a = run_level(SHORT, 1, tmp_path / "a")
    b = run_level(SHORT, 1, tmp_path / "b")
    for col in COLUMNS:
        assert inter_grid_error(a, b, col) == 0.0
    assert a.rho.shape == (5, 16) and a.mu_rho.shape == (4, 16)


def test_ladder_single_pair_has_no_eoc():
    table, rows = run_ladder(SHORT, 1, 2)
    assert len(table.rows) == 1
    r = table.rows[0]
    assert r.k == 1 and r.h == 0.5 and r.tau == pytest.approx(5e-4) and r.eoc == {}
    assert all(r.err[c] > 0 for c in COLUMNS)
    assert sorted(rows) == [1, 2] and len(rows[2]) == 8


def test_ladder_parallel_matches_serial():
    t1, _ = run_ladder(SHORT, 1, 3, jobs=1)
    t2, _ = run_ladder(SHORT, 1, 3, jobs=2)
    assert [r.err for r in t1.rows] == [r.err for r in t2.rows]
    assert set(t1.rows[1].eoc) == set(COLUMNS) and t1.rows[0].eoc == {}


def test_ladder_argument_checks():
    with pytest.raises(ValueError):
        run_ladder(SHORT, 0, 2)
    with pytest.raises(ValueError):
        run_ladder(SHORT, 2, 2)


def test_level_failure_tagged(tmp_path):
    from dataclasses import replace

    from chac.scheme import NewtonOpts

    with pytest.raises(RuntimeError, match="level k=1"):
        run_level(replace(SHORT, newton=NewtonOpts(max_iter=1)), 1, tmp_path)


def test_table_from_errors():
    errs = [(0.1, {c: 4.0 for c in COLUMNS}), (0.05, {c: 1.0 for c in COLUMNS})]
    t = table_from_errors([3, 4], errs)
    assert t.column("rho") == [4.0, 1.0]
    assert t.eoc_column("eta") == [None, 2.0]


def test_reference_table_recorded():
    # published values for qualitative comparison
    assert REFERENCE_TABLE[5]["rho"] == 8.15e-4 and REFERENCE_TABLE[1]["mu_eta"] == 1.86e-5
