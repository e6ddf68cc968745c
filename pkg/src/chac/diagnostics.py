"""Mass, free energy, dissipation and relative energy of discrete fields.

Every functional uses the quadrature rule of the space, i.e. the same rule
as the step assembly, so the discrete energy identity holds to solver
tolerance.
"""
from __future__ import annotations

from dataclasses import astuple, dataclass, fields

import numpy as np

from .fespace import FeSpace
from .model import ModelParams, mobility_eval, potential_eval


@dataclass(frozen=True)
class DiagnosticsRow:
    step: int
    t: float
    mass_rho: float
    energy: float
    dissipation_interval: float
    energy_identity_residual: float
    newton_iters: int
    newton_residual: float

    @classmethod
    def columns(cls):
        return [f.name for f in fields(cls)]

    def values(self):
        return astuple(self)


def mass(space: FeSpace, rho) -> float:
    return float(np.sum(space.values_at_qp(rho) * space.jxw))


def energy(space: FeSpace, params: ModelParams, rho, eta) -> float:
    """Gradient energy plus integrated potential."""
    gr = space.grads_at_qp(rho)
    ge = space.grads_at_qp(eta)
    f = potential_eval(params.potential, space.values_at_qp(rho), space.values_at_qp(eta))[0]
    density = 0.5 * params.gamma_rho * np.sum(gr * gr, -1) + 0.5 * params.gamma_eta * np.sum(ge * ge, -1) + f
    return float(np.sum(density * space.jxw))


def dissipation(space: FeSpace, params: ModelParams, rho_bar, eta_bar, mu_rho, mu_eta) -> float:
    """Quadratic form of L(omega_bar) in (grad mu_rho, mu_eta), integrated."""
    L, _ = mobility_eval(
        params.mobility,
        space.values_at_qp(rho_bar),
        space.values_at_qp(eta_bar),
        space.grads_at_qp(rho_bar),
        space.grads_at_qp(eta_bar),
        derivatives=False,
    )
    X = np.concatenate([space.grads_at_qp(mu_rho), space.values_at_qp(mu_eta)[..., None]], axis=-1)
    return float(np.sum(np.einsum("eqx,eqxy,eqy->eq", X, L, X) * space.jxw))


def energy_identity_residual(E_prev: float, E_next: float, tau: float, D: float) -> float:
    return E_next - E_prev + tau * D


def relative_energy(space: FeSpace, params: ModelParams, state, ref_state, alpha=None) -> float:
    """Regularized relative energy of ``state = (rho, eta)`` w.r.t. ``ref_state``."""
    if alpha is None:
        alpha = params.potential.alpha
    rho, eta = state
    rho_h, eta_h = ref_state
    dr = np.asarray(rho) - np.asarray(rho_h)
    de = np.asarray(eta) - np.asarray(eta_h)
    gdr, gde = space.grads_at_qp(dr), space.grads_at_qp(de)
    vdr, vde = space.values_at_qp(dr), space.values_at_qp(de)
    f, *_ = potential_eval(params.potential, space.values_at_qp(rho), space.values_at_qp(eta))
    fh, frh, feh, *_ = potential_eval(params.potential, space.values_at_qp(rho_h), space.values_at_qp(eta_h))
    density = (
        0.5 * params.gamma_rho * np.sum(gdr * gdr, -1)
        + 0.5 * params.gamma_eta * np.sum(gde * gde, -1)
        + 0.5 * alpha * (vdr**2 + vde**2)
        + f - fh - frh * vdr - feh * vde
    )
    return float(np.sum(density * space.jxw))
