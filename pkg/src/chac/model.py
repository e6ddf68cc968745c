"""Free-energy density and cross-kinetic mobility.

All functions broadcast over arrays of arguments.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# order of the scalar components of omega in mobility derivatives
OMEGA_COMPONENTS = ("rho", "eta", "rho_x", "rho_y", "eta_x", "eta_y")


@dataclass(frozen=True)
class PotentialSpec:
    """Two-field quartic f(rho, eta) with well depth C and coupling depth D.

    ``alpha`` is the convexity shift, used only by the relative energy.
    """

    C: float = 1.0
    D: float = 0.062
    alpha: float = 2.0

    def __post_init__(self):
        if self.C < 0 or self.D < 0:
            raise ValueError(f"C and D must be nonnegative (got C={self.C}, D={self.D})")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive (got {self.alpha})")


@dataclass(frozen=True)
class MobilitySpec:
    """L = [[I + (s^2/l22) n n^T, s n], [s n^T, l22]] with n the regularized normal of grad rho."""

    l22: float = 1000.0
    l12_scale: float = float(np.sqrt(1000.0))
    c: float = 1.0

    def __post_init__(self):
        if self.l22 <= 0:
            raise ValueError(f"l22 must be positive (got {self.l22})")
        if self.c <= 0:
            raise ValueError(f"c must be positive (got {self.c})")


@dataclass(frozen=True)
class ModelParams:
    gamma_rho: float = 1e-3
    gamma_eta: float = 1e-3
    potential: PotentialSpec = field(default_factory=PotentialSpec)
    mobility: MobilitySpec = field(default_factory=MobilitySpec)

    def __post_init__(self):
        if self.gamma_rho <= 0 or self.gamma_eta <= 0:
            raise ValueError(
                f"interface parameters must be positive (got gamma_rho={self.gamma_rho}, gamma_eta={self.gamma_eta})"
            )


def potential_eval(p: PotentialSpec, rho, eta):
    """f and its partial derivatives up to second order.

    Returns ``(f, f_rho, f_eta, f_rhorho, f_rhoeta, f_etaeta)``.
    """
    rho = np.asarray(rho, dtype=float)
    eta = np.asarray(eta, dtype=float)
    C, D = p.C, p.D
    s = 1.0 - rho
    e1 = 1.0 - eta
    a = eta**2 + e1**2
    da = 4.0 * eta - 2.0
    b = eta**3 + e1**3
    db = 3.0 * eta**2 - 3.0 * e1**2

    f = C * rho**2 * s**2 + D * (rho**2 + 6.0 * s * a - 4.0 * (2.0 - rho) * b + 3.0 * a**2)
    f_r = C * (2.0 * rho * s**2 - 2.0 * rho**2 * s) + D * (2.0 * rho - 6.0 * a + 4.0 * b)
    f_e = D * (6.0 * s * da - 4.0 * (2.0 - rho) * db + 6.0 * a * da)
    f_rr = C * (2.0 * s**2 - 8.0 * rho * s + 2.0 * rho**2) + 2.0 * D
    f_re = D * (-6.0 * da + 4.0 * db)
    f_ee = D * (24.0 * s - 24.0 * (2.0 - rho) + 6.0 * da**2 + 24.0 * a)
    return f, f_r, f_e, f_rr, f_re, f_ee


def regularized_normal(g, c: float):
    """n = g / sqrt(c + |g|^2) and its Jacobian dn/dg (shape (..., 2, 2))."""
    if c <= 0:
        raise ValueError(f"c must be positive (got {c})")
    g = np.asarray(g, dtype=float)
    s = np.sqrt(c + np.sum(g * g, axis=-1))
    n = g / s[..., None]
    dn = np.eye(2) / s[..., None, None] - g[..., :, None] * g[..., None, :] / (s**3)[..., None, None]
    return n, dn


def mobility_eval(m: MobilitySpec, rho, eta, grad_rho, grad_eta, derivatives: bool = True):
    """Mobility matrix acting on (grad mu_rho, mu_eta) and its derivatives.

    Returns ``L`` with shape (..., 3, 3) and ``dL`` with shape (..., 3, 3, 6),
    the last axis following ``OMEGA_COMPONENTS``; ``dL`` is None when
    ``derivatives`` is false.
    """
    grad_rho = np.asarray(grad_rho, dtype=float)
    shape = np.broadcast_shapes(np.shape(rho), np.shape(eta), grad_rho.shape[:-1], np.shape(grad_eta)[:-1])
    n, dn = regularized_normal(np.broadcast_to(grad_rho, shape + (2,)), m.c)
    k = m.l12_scale**2 / m.l22

    L = np.zeros(shape + (3, 3))
    L[..., :2, :2] = np.eye(2) + k * n[..., :, None] * n[..., None, :]
    L[..., :2, 2] = m.l12_scale * n
    L[..., 2, :2] = m.l12_scale * n
    L[..., 2, 2] = m.l22
    if not derivatives:
        return L, None

    dL = np.zeros(shape + (3, 3, 6))
    for j in range(2):
        dnj = dn[..., :, j]  # dn/dg_j
        dL[..., :2, :2, 2 + j] = k * (dnj[..., :, None] * n[..., None, :] + n[..., :, None] * dnj[..., None, :])
        dL[..., :2, 2, 2 + j] = m.l12_scale * dnj
        dL[..., 2, :2, 2 + j] = m.l12_scale * dnj
    return L, dL
