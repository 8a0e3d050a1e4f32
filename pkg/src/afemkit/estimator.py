"""Residual a posteriori error indicators for the Galerkin solution.

Per leaf triangle T with diameter h_T (longest edge),

    eta_T^2 = h_T^2 ||f_h + grad(kappa_h) . grad(u_h)||_{L2(T)}^2
            + h_T * sum over interior edges of T of integral(jump^2),

where the jump along an edge is kappa_h times the mismatch of the two
normal derivatives.  All integrands are polynomials of degree <= 2, so both
terms are integrated exactly (mass-matrix identity on triangles, Simpson on
edges).  Boundary edges carry no jump; every interior edge contributes to
both adjacent triangles.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fem import FeFunction, _element_geometry
from .mesh import Mesh

__all__ = ["EstimatorField", "EdgeJump", "jump", "estimate"]


@dataclass
class EstimatorField:
    """Squared local error indicators, one per leaf triangle (ascending id)."""

    mesh: Mesh
    eta_sq: np.ndarray

    def __post_init__(self):
        self.eta_sq = np.ascontiguousarray(self.eta_sq, dtype=np.float64)
        if np.any(self.eta_sq < 0):
            raise ValueError("squared indicators must be nonnegative")

    @property
    def total_sq(self) -> float:
        return float(self.eta_sq.sum())

    @property
    def total(self) -> float:
        return float(np.sqrt(self.eta_sq.sum()))

    def to_bytes(self) -> bytes:
        """Little-endian float64 array in leaf-triangle-id order."""
        return np.asarray(self.eta_sq, dtype="<f8").tobytes()


@dataclass(frozen=True)
class EdgeJump:
    """Flux jump along an interior edge, linear in arclength.

    ``value_start``/``value_end`` are the values at the edge endpoints
    (smaller vertex id first); the normal-derivative mismatch is constant on
    the edge, and the triangle labelling does not affect the values.
    """

    edge: tuple[int, int]
    value_start: float
    value_end: float

    def at(self, t: float) -> float:
        """Evaluate at relative arclength t in [0, 1]."""
        return (1.0 - t) * self.value_start + t * self.value_end


def _leaf_gradients(mesh: Mesh, values: np.ndarray) -> np.ndarray:
    """(n_leaves, 2) constant gradients of a nodal P1 function."""
    tri, _, grad = _element_geometry(mesh)
    return np.einsum("ei,eid->ed", values[tri], grad)


def jump(mesh: Mesh, kappa: FeFunction, u: FeFunction, edge: tuple[int, int]) -> EdgeJump:
    """Flux jump kappa_h * (n1 . grad u1 + n2 . grad u2) along an interior edge."""
    tids = mesh.edge_triangles(edge)
    if len(tids) != 2:
        raise ValueError(
            f"edge {edge} is not an interior edge with two leaf triangles")
    a, b = sorted(edge)
    coords = mesh.vertex_coords()
    leaf_index = {tid: k for k, tid in enumerate(mesh.leaf_ids())}
    grads = _leaf_gradients(mesh, u.values)
    g1, g2 = grads[leaf_index[tids[0]]], grads[leaf_index[tids[1]]]
    # outward normal of the first triangle; the second contributes with -n
    tvec = coords[b] - coords[a]
    n = np.array([tvec[1], -tvec[0]])
    n /= np.linalg.norm(n)
    t1 = mesh.triangle(tids[0])
    centroid = coords[list(t1.v)].mean(axis=0)
    if n @ (centroid - coords[a]) > 0:
        n = -n
    mismatch = float(n @ (g1 - g2))
    return EdgeJump((a, b), kappa.values[a] * mismatch, kappa.values[b] * mismatch)


def estimate(mesh: Mesh, kappa: FeFunction, f_field: FeFunction,
             u: FeFunction) -> EstimatorField:
    """Local residual indicators eta_T^2 for a discrete solution u."""
    for fn in (kappa, f_field, u):
        if fn.space.mesh is not mesh:
            raise ValueError("all functions must live on the given mesh")
    tri, area, grad = _element_geometry(mesh)
    h = _leaf_diameters(mesh)
    grad_u = np.einsum("ei,eid->ed", u.values[tri], grad)
    grad_k = np.einsum("ei,eid->ed", kappa.values[tri], grad)
    # div(kappa_h grad u_h) = grad kappa_h . grad u_h, constant per element
    c = np.einsum("ed,ed->e", grad_k, grad_u)
    g = f_field.values[tri] + c[:, None]
    # exact integral of the squared P1 residual: g^T M_loc g
    sq = (g ** 2).sum(axis=1)
    cross = g[:, 0] * g[:, 1] + g[:, 0] * g[:, 2] + g[:, 1] * g[:, 2]
    volume = area / 6.0 * (sq + cross)
    eta_sq = h ** 2 * volume

    leaf_ids = mesh.leaf_ids()
    leaf_index = {tid: k for k, tid in enumerate(leaf_ids)}
    coords = mesh.vertex_coords()
    kv = kappa.values
    for edge, tids in mesh.edge_adjacency.items():
        if len(tids) != 2:
            continue
        a, b = edge
        k1, k2 = leaf_index[tids[0]], leaf_index[tids[1]]
        tvec = coords[b] - coords[a]
        length = float(np.hypot(tvec[0], tvec[1]))
        n = np.array([tvec[1], -tvec[0]]) / length
        mismatch = float(n @ (grad_u[k1] - grad_u[k2]))
        ka, kb = kv[a], kv[b]
        km = 0.5 * (ka + kb)
        # Simpson, exact for the quadratic kappa^2 * mismatch^2
        integral = mismatch ** 2 * length * (ka ** 2 + 4.0 * km ** 2 + kb ** 2) / 6.0
        eta_sq[k1] += h[k1] * integral
        eta_sq[k2] += h[k2] * integral
    return EstimatorField(mesh, eta_sq)


def _leaf_diameters(mesh: Mesh) -> np.ndarray:
    tri = mesh.leaf_vertex_array()
    p = mesh.vertex_coords()[tri]
    d = np.stack([
        np.linalg.norm(p[:, 0] - p[:, 1], axis=1),
        np.linalg.norm(p[:, 1] - p[:, 2], axis=1),
        np.linalg.norm(p[:, 2] - p[:, 0], axis=1),
    ])
    return d.max(axis=0)
