"""Petrov-Galerkin time stepping: continuous piecewise linear phase fields,
piecewise constant chemical potentials, one monolithic Newton solve per step.

Unknowns of a step are stacked as ``x = (rho_n, eta_n, mu_rho, mu_eta)``;
residual blocks are

    R1 = M(rho_n - rho_p) + tau <L11 grad mu_rho + mu_eta L12, grad v>
    R2 = M(eta_n - eta_p) + tau <L12 . grad mu_rho + L22 mu_eta, v>
    R3 = tau M mu_rho - tau gamma_rho K rho_bar - int_I <f_rho(rho(s), eta(s)), w> ds
    R4 = tau M mu_eta - tau gamma_eta K eta_bar - int_I <f_eta(rho(s), eta(s)), w> ds

with the mobility evaluated at the interval mean omega_bar, which for fields
linear in time is the midpoint state.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial.legendre import leggauss

from . import diagnostics
from .fespace import FeSpace, h1_project
from .linalg import AssemblyPattern, LUFactor, nested_dissection
from .model import ModelParams, mobility_eval, potential_eval

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TimeGrid:
    T: float = 0.1
    N: int = 100

    def __post_init__(self):
        if self.T <= 0 or self.N < 0 or int(self.N) != self.N:
            raise ValueError(f"need T > 0 and integer N >= 0 (got T={self.T}, N={self.N})")

    @property
    def tau(self) -> float:
        return self.T / self.N if self.N else self.T

    def t(self, n: int) -> float:
        return n * self.tau

    @classmethod
    def from_step(cls, T: float, tau: float) -> "TimeGrid":
        N = int(round(T / tau))
        if N < 1 or abs(N * tau - T) > 1e-9 * T:
            raise ValueError(f"T={T} is not an integer multiple of tau={tau}")
        return cls(T, N)


@dataclass
class State:
    rho: np.ndarray
    eta: np.ndarray
    time: float = 0.0


@dataclass
class IntervalPotentials:
    mu_rho: np.ndarray
    mu_eta: np.ndarray


@dataclass(frozen=True)
class NewtonOpts:
    tol_residual: float = 1e-11
    max_iter: int = 25
    abs_floor: float = 1e-13
    fd_jacobian_check: bool = False
    time_quad_points: int = 2

    def __post_init__(self):
        if self.tol_residual <= 0 or self.max_iter < 1:
            raise ValueError(f"need tol_residual > 0 and max_iter >= 1 (got {self.tol_residual}, {self.max_iter})")


@dataclass
class StepStats:
    iterations: int
    residual: float
    history: list = field(default_factory=list)


class NonConvergence(RuntimeError):
    def __init__(self, iters, residual_history, step=None):
        self.iters = iters
        self.residual_history = list(residual_history)
        self.step = step
        where = f" in step {step}" if step is not None else ""
        last = residual_history[-1] if residual_history else float("nan")
        super().__init__(f"Newton did not converge{where} after {iters} iterations (residual {last:.3e})")


class StepAssembler:
    """Residual and Jacobian of one time step for fixed space, parameters and tau.

    The Jacobian used inside Newton is assembled directly in CSC form and in
    a node-blocked nested-dissection ordering (``self.order``, new -> old);
    ``jacobian`` returns it in the natural ordering.
    """

    def __init__(self, space: FeSpace, params: ModelParams, tau: float, time_quad_points: int = 2):
        if tau <= 0:
            raise ValueError(f"tau must be positive (got {tau})")
        self.space, self.params, self.tau = space, params, tau
        s, w = leggauss(time_quad_points)
        self.s = 0.5 * (s + 1.0)
        self.ws = 0.5 * w
        V = space
        E, Q = V.jxw.shape
        N = self.N = V.n_dofs
        self.tj = tau * V.jxw
        # (grad, value) slots of test/trial functions; columns (field, local dof):
        # field 0 tests with the gradient, field 1 with the value
        Zq = np.zeros((E, Q, 3, 2, 6))
        Zq[:, :, :2, 0, :] = V.grad.transpose(0, 1, 3, 2)
        Zq[:, :, 2, 1, :] = V.phi
        self.Zq = Zq.reshape(E, Q, 3, 12)
        self.Zw = (self.tj[:, :, None, None] * self.Zq).reshape(E, Q * 3, 12).transpose(0, 2, 1).copy()
        # d omega_bar / d(rho_n, eta_n): rows follow OMEGA_COMPONENTS
        Wq = np.zeros((E, Q, 6, 2, 6))
        Wq[:, :, 0, 0, :] = 0.5 * V.phi
        Wq[:, :, 2:4, 0, :] = 0.5 * V.grad.transpose(0, 1, 3, 2)
        Wq[:, :, 1, 1, :] = 0.5 * V.phi
        Wq[:, :, 4:6, 1, :] = 0.5 * V.grad.transpose(0, 1, 3, 2)
        self.Wq = Wq.reshape(E, Q, 6, 12)
        self.Mloc = np.einsum("eq,qi,qj->eij", V.jxw, V.phi, V.phi)
        self.Kloc = np.einsum("eq,eqid,eqjd->eij", V.jxw, V.grad, V.grad)
        self.phiphi = np.einsum("qi,qj->qij", V.phi, V.phi).reshape(Q, 36)

        self.order = nested_dissection(V.mass, block=4)
        self.rank = np.empty_like(self.order)
        self.rank[self.order] = np.arange(4 * N)
        self._blocks = np.arange(4)[None, :, None] * N + V.dof_map[:, None, :]  # (E, 4, 6)
        pb = self.rank[self._blocks]
        rows = np.broadcast_to(pb[:, :, :, None, None], (E, 4, 6, 4, 6))
        cols = np.broadcast_to(pb[:, None, None, :, :], (E, 4, 6, 4, 6))
        self.pattern = AssemblyPattern(4 * N, 4 * N, rows, cols, fmt="csc")

    def split(self, x):
        N = self.N
        return x[:N], x[N:2 * N], x[2 * N:3 * N], x[3 * N:]

    def _gather(self, vec):
        return vec[self.space.dof_map]

    def _mobility(self, prev, x, derivatives=True):
        V = self.space
        rn, en, mr, me = self.split(x)
        rbar, ebar = 0.5 * (prev.rho + rn), 0.5 * (prev.eta + en)
        L, dL = mobility_eval(
            self.params.mobility, V.values_at_qp(rbar), V.values_at_qp(ebar), V.grads_at_qp(rbar), V.grads_at_qp(ebar),
            derivatives,
        )
        X = np.concatenate([V.grads_at_qp(mr), V.values_at_qp(me)[..., None]], axis=-1)
        return L, dL, X

    def _time_samples(self, prev, x):
        V = self.space
        rn, en, _, _ = self.split(x)
        rp_q, ep_q = V.values_at_qp(prev.rho), V.values_at_qp(prev.eta)
        rn_q, en_q = V.values_at_qp(rn), V.values_at_qp(en)
        for s, w in zip(self.s, self.ws):
            yield s, w, potential_eval(self.params.potential, (1 - s) * rp_q + s * rn_q, (1 - s) * ep_q + s * en_q)

    def residual(self, prev: State, x):
        V, p, tau = self.space, self.params, self.tau
        E, Q = V.jxw.shape
        rn, en, mr, me = self.split(x)
        L, _, X = self._mobility(prev, x, derivatives=False)
        flux = np.matmul(L, X[..., None]).reshape(E, Q * 3, 1)

        res = np.empty(self._blocks.shape)
        res[:, :2] = np.matmul(self.Zw, flux).reshape(E, 2, 6)
        res[:, 0] += np.einsum("eij,ej->ei", self.Mloc, self._gather(rn - prev.rho))
        res[:, 1] += np.einsum("eij,ej->ei", self.Mloc, self._gather(en - prev.eta))

        Fr = 0.0
        Fe = 0.0
        for _, w, (_, fr, fe, *_) in self._time_samples(prev, x):
            Fr = Fr + w * fr
            Fe = Fe + w * fe
        rbar, ebar = 0.5 * (prev.rho + rn), 0.5 * (prev.eta + en)
        res[:, 2] = tau * np.einsum(
            "eij,ej->ei", self.Mloc, self._gather(mr)
        ) - tau * p.gamma_rho * np.einsum("eij,ej->ei", self.Kloc, self._gather(rbar)) - (self.tj * Fr) @ V.phi
        res[:, 3] = tau * np.einsum(
            "eij,ej->ei", self.Mloc, self._gather(me)
        ) - tau * p.gamma_eta * np.einsum("eij,ej->ei", self.Kloc, self._gather(ebar)) - (self.tj * Fe) @ V.phi
        return np.bincount(self._blocks.ravel(), weights=res.ravel(), minlength=4 * self.N)

    def _local_jacobian(self, prev, x):
        V, p, tau = self.space, self.params, self.tau
        E, Q = V.jxw.shape
        L, dL, X = self._mobility(prev, x)
        J = np.zeros((E, 4, 6, 4, 6))
        # potential columns
        LZ = np.matmul(L, self.Zq).reshape(E, Q * 3, 12)
        J[:, :2, :, 2:, :] = np.matmul(self.Zw, LZ).reshape(E, 2, 6, 2, 6)
        # state columns, through the mobility's dependence on omega_bar
        P = np.einsum("eqxyc,eqy->eqxc", dL, X)
        dflux = np.matmul(P, self.Wq).reshape(E, Q * 3, 12)
        J[:, :2, :, :2, :] = np.matmul(self.Zw, dflux).reshape(E, 2, 6, 2, 6)
        J[:, 0, :, 0, :] += self.Mloc
        J[:, 1, :, 1, :] += self.Mloc

        Hrr = Hre = Hee = 0.0
        for s, w, (_, _, _, frr, fre, fee) in self._time_samples(prev, x):
            Hrr = Hrr + (w * s) * frr
            Hre = Hre + (w * s) * fre
            Hee = Hee + (w * s) * fee
        Mrr, Mre, Mee = (((self.tj * h) @ self.phiphi).reshape(E, 6, 6) for h in (Hrr, Hre, Hee))
        J[:, 2, :, 0, :] = -0.5 * tau * p.gamma_rho * self.Kloc - Mrr
        J[:, 2, :, 1, :] = -Mre
        J[:, 2, :, 2, :] = tau * self.Mloc
        J[:, 3, :, 0, :] = -Mre
        J[:, 3, :, 1, :] = -0.5 * tau * p.gamma_eta * self.Kloc - Mee
        J[:, 3, :, 3, :] = tau * self.Mloc
        return J

    def permuted_jacobian(self, prev: State, x):
        """Jacobian in ``self.order`` numbering, CSC."""
        return self.pattern.assemble(self._local_jacobian(prev, x))

    def jacobian(self, prev: State, x):
        Jp = self.permuted_jacobian(prev, x).tocsr()
        return Jp[self.rank][:, self.rank]

    def evaluate(self, prev: State, x):
        return self.residual(prev, x), self.jacobian(prev, x)

    def initial_guess(self, prev: State):
        """Frozen state and the potentials solving R3 = R4 = 0 there."""
        V, p = self.space, self.params
        rq, eq = V.values_at_qp(prev.rho), V.values_at_qp(prev.eta)
        _, fr, fe, *_ = potential_eval(p.potential, rq, eq)
        mr = V.mass_lu.solve(p.gamma_rho * (V.stiffness @ prev.rho) + V.load_vector(fr))
        me = V.mass_lu.solve(p.gamma_eta * (V.stiffness @ prev.eta) + V.load_vector(fe))
        return np.concatenate([prev.rho, prev.eta, mr, me])


def assemble_step_residual(space, params, prev: State, next: State, pots: IntervalPotentials, tau, time_quad_points=2):
    x = np.concatenate([next.rho, next.eta, pots.mu_rho, pots.mu_eta])
    return StepAssembler(space, params, tau, time_quad_points).residual(prev, x)


def assemble_step_jacobian(space, params, prev: State, next: State, pots: IntervalPotentials, tau, time_quad_points=2):
    x = np.concatenate([next.rho, next.eta, pots.mu_rho, pots.mu_eta])
    return StepAssembler(space, params, tau, time_quad_points).jacobian(prev, x)


def newton_solve(assembler: StepAssembler, prev: State, opts: NewtonOpts, guess=None):
    """Plain Newton; falls back to step halving after two consecutive residual increases.

    Convergence is measured in the l2 norm of the residual with the two
    potential blocks divided by tau: they carry a factor tau that would
    otherwise let their error hide below the tolerance.
    """
    weights = np.repeat([1.0, 1.0, 1.0 / assembler.tau, 1.0 / assembler.tau], assembler.N)

    def rn(R):
        return np.linalg.norm(weights * R)

    x = assembler.initial_guess(prev) if guess is None else np.array(guess, dtype=float)
    R = assembler.residual(prev, x)
    rnorm = rn(R)
    history = [rnorm]
    target = max(opts.tol_residual * rnorm, opts.abs_floor)
    increases = 0
    it = 0
    while rnorm > target:
        if it >= opts.max_iter:
            raise NonConvergence(it, history)
        Jp = assembler.permuted_jacobian(prev, x)
        lu = LUFactor(Jp, assembler.order, permuted=True)
        dx = lu.solve(-R)
        if not np.all(np.isfinite(dx)) or np.linalg.norm(Jp @ dx[assembler.order] + R[assembler.order]) > 1e-8 * np.linalg.norm(R):
            # diagonal pivoting along the fill-reducing order failed; pivot properly
            dx = LUFactor(assembler.jacobian(prev, x)).solve(-R)
        if opts.fd_jacobian_check:
            _check_direction(assembler, prev, x, dx, assembler.jacobian(prev, x))
        lam = 1.0
        x_new = x + dx
        R_new = assembler.residual(prev, x_new)
        if increases >= 2:
            while rn(R_new) >= rnorm and lam > 2.0**-10:
                lam *= 0.5
                x_new = x + lam * dx
                R_new = assembler.residual(prev, x_new)
        new_norm = rn(R_new)
        increases = increases + 1 if new_norm > rnorm else 0
        x, R, rnorm = x_new, R_new, new_norm
        history.append(rnorm)
        it += 1
    return x, StepStats(it, rnorm, history)


def _check_direction(assembler, prev, x, v, J, eps=1e-6):
    v = v / max(np.linalg.norm(v), 1e-300)
    fd = (assembler.residual(prev, x + eps * v) - assembler.residual(prev, x - eps * v)) / (2 * eps)
    Jv = J @ v
    err = np.linalg.norm(fd - Jv) / max(np.linalg.norm(Jv), 1e-300)
    if err > 1e-6:
        raise AssertionError(f"Jacobian inconsistent with finite differences (relative error {err:.2e})")


def step(space, params, prev: State, tau, opts: NewtonOpts = NewtonOpts(), guess=None, assembler=None):
    """Advance one interval. Returns ``(next_state, potentials, stats)``."""
    if assembler is None:
        assembler = StepAssembler(space, params, tau, opts.time_quad_points)
    x, stats = newton_solve(assembler, prev, opts, guess)
    rn, en, mr, me = (a.copy() for a in assembler.split(x))
    return State(rn, en, prev.time + tau), IntervalPotentials(mr, me), stats


class Sink:
    """Receiver of run output; subclasses override what they need."""

    def start(self, state: State, row: diagnostics.DiagnosticsRow):
        pass

    def step(self, row: diagnostics.DiagnosticsRow, state: State, pots: IntervalPotentials):
        pass

    def finish(self):
        pass


def _initial_row(space, params, state):
    return diagnostics.DiagnosticsRow(
        0, state.time, diagnostics.mass(space, state.rho), diagnostics.energy(space, params, state.rho, state.eta),
        0.0, 0.0, 0, 0.0,
    )


def project_initial(space, initial):
    """H1 projection of ``((rho0, grad_rho0), (eta0, grad_eta0))``."""
    (fr, gr), (fe, ge) = initial
    return State(h1_project(space, fr, gr), h1_project(space, fe, ge), 0.0)


def run(space, params, grid: TimeGrid, initial, sinks=(), opts: NewtonOpts = NewtonOpts()):
    """Project the initial data and take ``grid.N`` steps.

    ``initial`` is either a State or ``((rho0, grad_rho0), (eta0, grad_eta0))``
    of vectorized callables. Returns the final State and the list of rows.
    """
    state = initial if isinstance(initial, State) else project_initial(space, initial)
    row = _initial_row(space, params, state)
    for s in sinks:
        s.start(state, row)
    rows = []
    if grid.N:
        assembler = StepAssembler(space, params, grid.tau, opts.time_quad_points)
    E_prev = row.energy
    for n in range(1, grid.N + 1):
        try:
            new, pots, stats = step(space, params, state, grid.tau, opts, assembler=assembler)
        except NonConvergence as exc:
            raise NonConvergence(exc.iters, exc.residual_history, step=n) from exc
        new.time = grid.t(n)
        D = diagnostics.dissipation(
            space, params, 0.5 * (state.rho + new.rho), 0.5 * (state.eta + new.eta), pots.mu_rho, pots.mu_eta
        )
        E = diagnostics.energy(space, params, new.rho, new.eta)
        row = diagnostics.DiagnosticsRow(
            n, new.time, diagnostics.mass(space, new.rho), E, grid.tau * D,
            diagnostics.energy_identity_residual(E_prev, E, grid.tau, D), stats.iterations, stats.residual,
        )
        rows.append(row)
        for s in sinks:
            s.step(row, new, pots)
        log.debug("step %d t=%.6g E=%.12g iters=%d", n, new.time, E, stats.iterations)
        state, E_prev = new, E
    for s in sinks:
        s.finish()
    return state, rows


def default_initial_data():
    """Periodic, non-symmetric initial phase fields with their gradients."""
    two_pi = 2 * np.pi

    def rho0(x, y):
        return 0.5 + 0.5 * np.sin(two_pi * x) * np.sin(two_pi * y)

    def grad_rho0(x, y):
        return (0.5 * two_pi * np.cos(two_pi * x) * np.sin(two_pi * y),
                0.5 * two_pi * np.sin(two_pi * x) * np.cos(two_pi * y))

    def eta0(x, y):
        return 0.5 + 0.5 * np.sin(2 * two_pi * x) * np.sin(two_pi * y)

    def grad_eta0(x, y):
        return (0.5 * 2 * two_pi * np.cos(2 * two_pi * x) * np.sin(two_pi * y),
                0.5 * two_pi * np.sin(2 * two_pi * x) * np.cos(two_pi * y))

    return (rho0, grad_rho0), (eta0, grad_eta0)
