"""Periodic continuous P2 finite elements on a PeriodicMesh."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .linalg import AssemblyPattern, LUFactor, SparseMat, from_triplets
from .mesh import PeriodicMesh, element_affine_map

MIN_QUAD_DEGREE = 8

# local P2 nodes: three corners, then midpoints of sides (0,1), (1,2), (2,0)
REF_NODES = np.array([[0, 0], [1, 0], [0, 1], [0.5, 0], [0.5, 0.5], [0, 0.5]])
_SIDES = ((0, 1), (1, 2), (2, 0))


@dataclass(frozen=True)
class QuadRule:
    """Quadrature on the reference triangle {(0,0), (1,0), (0,1)}.

    ``points`` are barycentric coordinates (l0, l1, l2); ``weights`` sum to 1/2.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def ref_points(self) -> np.ndarray:
        return self.points[:, 1:]


def collapsed_gauss_rule(degree: int) -> QuadRule:
    """Tensor Gauss rule mapped to the triangle by the Duffy collapse.

    Gauss-Legendre in one direction and Gauss-Jacobi(1, 0) in the collapsed
    one; m points per direction integrate polynomials of degree 2m - 1.
    """
    m = (degree + 2) // 2
    a, wa = roots_legendre(m)
    b, wb = roots_jacobi(m, 1.0, 0.0)
    A, B = np.meshgrid(a, b, indexing="ij")
    x = 0.25 * (1 + A) * (1 - B)
    y = 0.5 * (1 + B)
    w = np.outer(wa, wb) / 8.0
    x, y, w = x.ravel(), y.ravel(), w.ravel()
    bary = np.stack([1 - x - y, x, y], axis=1)
    return QuadRule(bary, w, 2 * m - 1)


def p2_basis(ref):
    """Values (..., 6) and reference gradients (..., 6, 2) of the P2 shape functions."""
    ref = np.asarray(ref, dtype=float)
    x, y = ref[..., 0], ref[..., 1]
    lam = np.stack([1 - x - y, x, y], axis=-1)
    dlam = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])
    vals = np.empty(ref.shape[:-1] + (6,))
    grads = np.empty(ref.shape[:-1] + (6, 2))
    for i in range(3):
        vals[..., i] = lam[..., i] * (2 * lam[..., i] - 1)
        grads[..., i, :] = (4 * lam[..., i] - 1)[..., None] * dlam[i]
    for s, (i, j) in enumerate(_SIDES):
        vals[..., 3 + s] = 4 * lam[..., i] * lam[..., j]
        grads[..., 3 + s, :] = 4 * (lam[..., j][..., None] * dlam[i] + lam[..., i][..., None] * dlam[j])
    return vals, grads


class FeSpace:
    """Continuous piecewise quadratics on the torus.

    Global numbering: vertices first (the mesh's vertex order), then one DOF
    per periodic edge in the mesh's edge order. Quadrature data are cached per
    element: ``phi`` (Q, 6), ``grad`` (E, Q, 6, 2), ``jxw`` (E, Q).
    """

    def __init__(self, mesh: PeriodicMesh, quad_degree: int = MIN_QUAD_DEGREE):
        if quad_degree < MIN_QUAD_DEGREE:
            raise ValueError(
                f"quad_degree must be >= {MIN_QUAD_DEGREE} to integrate the quartic potential exactly (got {quad_degree})"
            )
        self.mesh = mesh
        self.quad = collapsed_gauss_rule(quad_degree)
        edge_ids, n_edges = mesh.edges()
        self.dof_map = np.concatenate([mesh.triangles, mesh.n_vertices + edge_ids], axis=1)
        self.n_dofs = mesh.n_vertices + n_edges

        self.origin, self.jac = element_affine_map(mesh, np.arange(mesh.n_elements))
        self.det = np.linalg.det(self.jac)
        jinv = np.linalg.inv(self.jac)
        self.phi, dphi = p2_basis(self.quad.ref_points)
        # physical gradient: grad_ref @ J^{-1}
        self.grad = np.einsum("qid,edk->eqik", dphi, jinv)
        self.jxw = self.det[:, None] * self.quad.weights[None, :]
        self.qpoints = self.origin[:, None, :] + np.einsum("edk,qk->eqd", self.jac, self.quad.ref_points)
        self._jinv = jinv

        rows = np.broadcast_to(self.dof_map[:, :, None], (mesh.n_elements, 6, 6))
        cols = np.broadcast_to(self.dof_map[:, None, :], (mesh.n_elements, 6, 6))
        self.pattern = AssemblyPattern(self.n_dofs, self.n_dofs, rows, cols)

    @property
    def n_elements(self) -> int:
        return self.mesh.n_elements

    # -- assembly helpers ---------------------------------------------------
    def assemble_matrix(self, local) -> SparseMat:
        """Global matrix from element matrices of shape (E, 6, 6)."""
        return self.pattern.assemble(local)

    def assemble_vector(self, local) -> np.ndarray:
        """Global vector from element vectors of shape (E, 6)."""
        return np.bincount(self.dof_map.ravel(), weights=np.ravel(local), minlength=self.n_dofs)

    def values_at_qp(self, vec):
        """Field values at all quadrature points, shape (E, Q)."""
        return np.asarray(vec)[self.dof_map] @ self.phi.T

    def grads_at_qp(self, vec):
        """Field gradients at all quadrature points, shape (E, Q, 2)."""
        return np.einsum("eqid,ei->eqd", self.grad, np.asarray(vec)[self.dof_map])

    def load_vector(self, values_qp) -> np.ndarray:
        """b_i = integral of g * phi_i for g given at quadrature points (E, Q)."""
        return self.assemble_vector((values_qp * self.jxw) @ self.phi)

    # -- global matrices ----------------------------------------------------
    @cached_property
    def mass(self) -> SparseMat:
        local = np.einsum("eq,qi,qj->eij", self.jxw, self.phi, self.phi)
        return self.assemble_matrix(local)

    @cached_property
    def stiffness(self) -> SparseMat:
        local = np.einsum("eq,eqid,eqjd->eij", self.jxw, self.grad, self.grad)
        return self.assemble_matrix(local)

    @cached_property
    def mass_lu(self) -> LUFactor:
        return LUFactor(self.mass)

    @cached_property
    def h1_lu(self) -> LUFactor:
        return LUFactor(self.mass + self.stiffness)

    @cached_property
    def dof_coords(self) -> np.ndarray:
        """Position in [0,1)^2 of every DOF."""
        pts = np.empty((self.n_dofs, 2))
        nodes = self.origin[:, None, :] + np.einsum("edk,ik->eid", self.jac, REF_NODES)
        pts[self.dof_map.ravel()] = nodes.reshape(-1, 2)
        return np.mod(pts, 1.0)


def build_space(mesh: PeriodicMesh, quad_degree: int = MIN_QUAD_DEGREE) -> FeSpace:
    return FeSpace(mesh, quad_degree)


def assemble_mass(space: FeSpace) -> SparseMat:
    return space.mass


def assemble_stiffness(space: FeSpace) -> SparseMat:
    return space.stiffness


def _eval_on_qp(space, fn):
    x = space.qpoints
    return np.broadcast_to(np.asarray(fn(x[..., 0], x[..., 1]), dtype=float), x.shape[:-1])


def interpolate(space: FeSpace, fn) -> np.ndarray:
    """Nodal interpolant; ``fn(x, y)`` must accept arrays and be 1-periodic."""
    x = space.dof_coords
    return np.broadcast_to(np.asarray(fn(x[:, 0], x[:, 1]), dtype=float), (space.n_dofs,)).copy()


def l2_project(space: FeSpace, fn) -> np.ndarray:
    """L2-orthogonal projection of ``fn(x, y)`` onto the space."""
    return space.mass_lu.solve(space.load_vector(_eval_on_qp(space, fn)))


def h1_project(space: FeSpace, fn, grad_fn) -> np.ndarray:
    """H1-orthogonal projection; ``grad_fn(x, y)`` returns the pair (d/dx, d/dy)."""
    x = space.qpoints
    g = grad_fn(x[..., 0], x[..., 1])
    gx = np.broadcast_to(np.asarray(g[0], dtype=float), x.shape[:-1])
    gy = np.broadcast_to(np.asarray(g[1], dtype=float), x.shape[:-1])
    b = space.load_vector(_eval_on_qp(space, fn))
    flux = np.stack([gx, gy], axis=-1) * space.jxw[..., None]
    b += space.assemble_vector(np.einsum("eqd,eqid->ei", flux, space.grad))
    return space.h1_lu.solve(b)


def evaluate(space: FeSpace, vec, elem, ref_point):
    """Value and physical gradient of a P2 field at a reference point of ``elem``."""
    if not 0 <= elem < space.n_elements:
        raise IndexError(f"element {elem} out of range [0, {space.n_elements})")
    vals, dref = p2_basis(np.asarray(ref_point, dtype=float))
    coef = np.asarray(vec)[space.dof_map[elem]]
    grad = (coef @ dref) @ space._jinv[elem]
    return float(coef @ vals), grad


def evaluate_points(space: FeSpace, vec, points) -> np.ndarray:
    """Values of a P2 field at arbitrary points (taken modulo 1)."""
    elem, ref = space.mesh.locate(points)
    vals, _ = p2_basis(ref)
    return np.einsum("pi,pi->p", np.asarray(vec)[space.dof_map[elem]], vals)


def norm(space: FeSpace, vec, kind: str = "L2") -> float:
    """L2, H1 seminorm or full H1 norm, exact for P2 fields."""
    v = np.asarray(vec, dtype=float)
    if kind == "L2":
        sq = v @ (space.mass @ v)
    elif kind == "H1semi":
        sq = v @ (space.stiffness @ v)
    elif kind == "H1":
        sq = v @ (space.mass @ v) + v @ (space.stiffness @ v)
    else:
        raise ValueError(f"unknown norm kind {kind!r}; expected 'L2', 'H1semi' or 'H1'")
    return float(np.sqrt(max(sq, 0.0)))


def prolongation_matrix(coarse: FeSpace, fine: FeSpace) -> SparseMat:
    """Sparse injection of coarse P2 fields into the once-refined space."""
    if fine.mesh.n != 2 * coarse.mesh.n:
        raise ValueError(
            f"fine mesh (n={fine.mesh.n}) is not the uniform refinement of the coarse mesh (n={coarse.mesh.n})"
        )
    elem, ref = coarse.mesh.locate(fine.dof_coords)
    vals, _ = p2_basis(ref)
    rows = np.repeat(np.arange(fine.n_dofs), 6)
    cols = coarse.dof_map[elem].ravel()
    P = from_triplets(fine.n_dofs, coarse.n_dofs, (rows, cols, vals.ravel()))
    P.eliminate_zeros()
    return P


def prolong(coarse: FeSpace, fine: FeSpace, vec) -> np.ndarray:
    return prolongation_matrix(coarse, fine) @ np.asarray(vec, dtype=float)
