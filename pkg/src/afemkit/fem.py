"""P1 Lagrange finite elements: spaces, assembly, solve, norms, prolongation.

All assembly integrals are exact: the diffusion coefficient and right-hand
side are piecewise linear, element gradients are constant, so stiffness
entries use the element mean of the coefficient and load entries the exact
P1 mass matrix.  No numerical quadrature enters anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import Mesh

__all__ = [
    "FeSpace",
    "FeFunction",
    "LinearSystem",
    "SolverError",
    "NonNestedMeshError",
    "interpolate",
    "stiffness_matrix",
    "mass_matrix",
    "assemble",
    "solve",
    "prolong",
    "prolong_values",
    "energy_norm",
    "l2_norm",
    "h1_seminorm",
    "norms",
]


class SolverError(RuntimeError):
    """Iterative solver failed to reach the requested tolerance."""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class NonNestedMeshError(ValueError):
    """Prolongation requested between meshes that are not nested."""


@dataclass(frozen=True)
class FeSpace:
    """P1 space on a mesh with homogeneous Dirichlet boundary.

    Degrees of freedom are the interior vertices; ``node2dof`` maps vertex
    ids to dof indices (-1 on the boundary).
    """

    mesh: Mesh
    free_nodes: np.ndarray
    node2dof: np.ndarray

    @classmethod
    def on(cls, mesh: Mesh) -> "FeSpace":
        boundary = mesh.boundary_vertex_mask()
        free = np.flatnonzero(~boundary)
        node2dof = np.full(mesh.n_vertices, -1, dtype=np.int64)
        node2dof[free] = np.arange(free.size)
        return cls(mesh, free, node2dof)

    @property
    def ndof(self) -> int:
        return self.free_nodes.size


@dataclass
class FeFunction:
    """Nodal P1 function as a full-node coefficient vector.

    Solutions of the Dirichlet problem carry zeros on boundary nodes; data
    fields (diffusion coefficient, load) hold plain nodal values everywhere.
    """

    space: FeSpace
    values: np.ndarray

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != (self.space.mesh.n_vertices,):
            raise ValueError(
                f"expected {self.space.mesh.n_vertices} nodal values, "
                f"got shape {self.values.shape}")

    @classmethod
    def from_free(cls, space: FeSpace, free_values: np.ndarray) -> "FeFunction":
        values = np.zeros(space.mesh.n_vertices)
        values[space.free_nodes] = free_values
        return cls(space, values)

    @property
    def free(self) -> np.ndarray:
        return self.values[self.space.free_nodes]

    def to_bytes(self) -> bytes:
        """Full-node coefficients as little-endian float64, vertex-id order."""
        return np.asarray(self.values, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, space: FeSpace, raw: bytes) -> "FeFunction":
        return cls(space, np.frombuffer(raw, dtype="<f8").copy())


@dataclass
class LinearSystem:
    """Reduced SPD system over the free nodes of a space."""

    A: sp.csr_matrix
    rhs: np.ndarray
    space: FeSpace

    def __post_init__(self):
        d = self.A.diagonal()
        if self.A.shape[0] and d.min() <= 0:
            raise ValueError("system matrix has a non-positive diagonal entry")


def interpolate(space: FeSpace, g: Callable[[np.ndarray], np.ndarray] | float) -> FeFunction:
    """Nodal interpolant of a pointwise field; ``g`` maps (n, 2) -> (n,)."""
    pts = space.mesh.vertex_coords()
    if callable(g):
        vals = np.asarray(g(pts), dtype=np.float64)
        if vals.shape == ():
            vals = np.full(pts.shape[0], float(vals))
    else:
        vals = np.full(pts.shape[0], float(g))
    if not np.all(np.isfinite(vals)):
        raise ValueError("field evaluates to non-finite values at mesh nodes")
    return FeFunction(space, vals)


def _element_geometry(mesh: Mesh):
    """Leaf connectivity, areas and constant hat-function gradients.

    Returns (tri, area, grad) with tri (m,3) vertex ids, area (m,),
    grad (m,3,2) where grad[e, i] is the gradient of the hat function of
    local vertex i on element e.
    """
    tri = mesh.leaf_vertex_array()
    coords = mesh.vertex_coords()
    p = coords[tri]  # (m, 3, 2)
    d1 = p[:, 1] - p[:, 0]
    d2 = p[:, 2] - p[:, 0]
    twice_area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
    area = 0.5 * twice_area
    # grad_i = rot90(edge opposite i) / (2A), rotation consistent with CCW order
    grad = np.empty((tri.shape[0], 3, 2))
    for i in range(3):
        a = p[:, (i + 1) % 3]
        b = p[:, (i + 2) % 3]
        grad[:, i, 0] = a[:, 1] - b[:, 1]
        grad[:, i, 1] = b[:, 0] - a[:, 0]
    grad /= twice_area[:, None, None]
    return tri, area, grad


def stiffness_matrix(mesh: Mesh, kappa_values: Optional[np.ndarray] = None) -> sp.csr_matrix:
    """Full-node stiffness for the form integral(kappa_h <grad u, grad w>).

    ``kappa_values`` are nodal values of the P1 coefficient (omitted: 1).
    The piecewise linear coefficient integrates to its element mean, so the
    local matrices are exact.
    """
    tri, area, grad = _element_geometry(mesh)
    if kappa_values is None:
        coef = area
    else:
        coef = area * np.asarray(kappa_values)[tri].mean(axis=1)
    local = np.einsum("eid,ejd->eij", grad, grad) * coef[:, None, None]
    rows = np.broadcast_to(tri[:, :, None], local.shape)
    cols = np.broadcast_to(tri[:, None, :], local.shape)
    n = mesh.n_vertices
    return sp.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def mass_matrix(mesh: Mesh) -> sp.csr_matrix:
    """Exact P1 mass matrix over all nodes: local block |T|/12 * (1 + I)."""
    tri, area, _ = _element_geometry(mesh)
    pattern = (np.ones((3, 3)) + np.eye(3)) / 12.0
    local = pattern[None, :, :] * area[:, None, None]
    rows = np.broadcast_to(tri[:, :, None], local.shape)
    cols = np.broadcast_to(tri[:, None, :], local.shape)
    n = mesh.n_vertices
    return sp.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(n, n)).tocsr()


def assemble(space: FeSpace, kappa: FeFunction, f_field: FeFunction) -> LinearSystem:
    """Assemble the reduced system A u = f for the Darcy form.

    The load vector is integral(f_h phi_j) = M f with the exact mass matrix.
    Dirichlet rows and columns are eliminated (homogeneous boundary data).
    """
    if kappa.space.mesh is not space.mesh or f_field.space.mesh is not space.mesh:
        raise ValueError("coefficient, load and space must share one mesh")
    if kappa.values.min() <= 0:
        raise ValueError(
            f"diffusion coefficient must be positive everywhere, "
            f"min value {kappa.values.min()}")
    A = stiffness_matrix(space.mesh, kappa.values)
    rhs = mass_matrix(space.mesh) @ f_field.values
    free = space.free_nodes
    A_ff = A[free][:, free].tocsr()
    return LinearSystem(A_ff, rhs[free], space)


def _pcg(A: sp.csr_matrix, b: np.ndarray, tol: float, max_iter: int,
         apply_m: Callable[[np.ndarray], np.ndarray]) -> tuple[np.ndarray, int, float]:
    norm_b = np.linalg.norm(b)
    x = np.zeros_like(b)
    if norm_b == 0.0 or b.size == 0:
        return x, 0, 0.0
    r = b.copy()
    z = apply_m(r)
    p = z.copy()
    rho = r @ z
    res = np.linalg.norm(r)
    for it in range(1, max_iter + 1):
        Ap = A @ p
        alpha = rho / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        if res <= tol * norm_b:
            return x, it, res / norm_b
        z = apply_m(r)
        rho_new = r @ z
        p = z + (rho_new / rho) * p
        rho = rho_new
    raise SolverError(
        f"PCG did not reach tolerance {tol} within {max_iter} iterations "
        f"(relative residual {res / norm_b:.3e})",
        residual=res / norm_b, iterations=max_iter)


def solve(system: LinearSystem, tol: float = 1e-10, max_iter: Optional[int] = None,
          precond: str = "jacobi") -> np.ndarray:
    """Solve the SPD system by preconditioned conjugate gradients.

    Returns the free-node coefficient vector with relative residual
    ``|A u - f| <= tol |f|``.  ``precond`` is "jacobi" (default) or "sgs"
    (symmetric Gauss-Seidel); both are deterministic.
    """
    A, b = system.A, system.rhs
    if max_iter is None:
        max_iter = max(100, 10 * A.shape[0])
    if precond == "jacobi":
        d = A.diagonal()
        apply_m = lambda r: r / d
    elif precond == "sgs":
        d = A.diagonal()
        lower = sp.tril(A, 0).tocsr()
        upper = sp.triu(A, 0).tocsr()
        apply_m = lambda r: spla.spsolve_triangular(
            upper, d * spla.spsolve_triangular(lower, r, lower=True), lower=False)
    else:
        raise ValueError(f"unknown preconditioner {precond!r}")
    x, _, _ = _pcg(A, b, tol, max_iter, apply_m)
    return x


def prolong_values(coarse_mesh: Mesh, fine_mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """Exact P1 interpolation of coarse nodal values onto a refining mesh.

    Retained nodes copy their value; each bisection midpoint takes the mean
    of its parent edge endpoints (parents always precede it in id order).
    """
    if not fine_mesh.refines(coarse_mesh):
        raise NonNestedMeshError("target mesh does not refine the source mesh")
    nc, nf = coarse_mesh.n_vertices, fine_mesh.n_vertices
    out = np.empty(nf)
    out[:nc] = values
    for vid in range(nc, nf):
        a, b = fine_mesh.vertex(vid).parents
        out[vid] = 0.5 * (out[a] + out[b])
    return out


def prolong(coarse: FeFunction, fine_space: FeSpace) -> FeFunction:
    """Represent a coarse P1 function exactly on a nested finer space."""
    vals = prolong_values(coarse.space.mesh, fine_space.mesh, coarse.values)
    return FeFunction(fine_space, vals)


def energy_norm(u: FeFunction, kappa: FeFunction) -> float:
    """sqrt(u^T A_kappa u) with the full-node stiffness of the given coefficient."""
    if kappa.space.mesh is not u.space.mesh:
        raise ValueError("function and coefficient live on different meshes")
    A = stiffness_matrix(u.space.mesh, kappa.values)
    return float(np.sqrt(u.values @ (A @ u.values)))


def l2_norm(u: FeFunction) -> float:
    M = mass_matrix(u.space.mesh)
    return float(np.sqrt(u.values @ (M @ u.values)))


def h1_seminorm(u: FeFunction) -> float:
    A = stiffness_matrix(u.space.mesh)
    return float(np.sqrt(u.values @ (A @ u.values)))


def norms(u: FeFunction, kappa: Optional[FeFunction] = None) -> dict[str, float]:
    """L2 norm and H1 seminorm; the energy norm is included when kappa is given."""
    out = {"l2": l2_norm(u), "h1": h1_seminorm(u)}
    if kappa is not None:
        out["energy"] = energy_norm(u, kappa)
    return out
