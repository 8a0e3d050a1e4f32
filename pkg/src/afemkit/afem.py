"""Solve -> Estimate -> Mark -> Refine driver, hierarchical multilevel
decomposition of the resulting corrections, and masked-image encoding.

A run on N grids produces the coarse solution u_(1) and corrections
v_(n) = u_(n) - P(u_(n-1)) for n = 2..N, where P is exact P1 prolongation.
Each correction is stored both as nodal coefficients and as hierarchical
surplus layers: layer 1 holds the coarse-grid nodal values, layer i >= 2
holds, at nodes new on grid i, the value minus the coarser interpolant
(zero at older nodes).  Nodal data maps onto dyadic tensor-grid images with
0-1 masks flagging the pixels that are mesh nodes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import fem
from .estimator import EstimatorField, estimate
from .fem import FeFunction, FeSpace, SolverError, prolong_values
from .marking import Marking, MarkingRule, mark
from .mesh import Mesh, initial_mesh
from .problems import ProblemInstance

__all__ = [
    "AfemConfig",
    "MultilevelSolution",
    "GridImage",
    "EncodedSample",
    "afem_run",
    "solve_on_hierarchy",
    "hierarchical_decompose",
    "hierarchical_reconstruct",
    "marked_node_mask",
    "encode_images",
    "image_to_nodal",
]


@dataclass(frozen=True)
class AfemConfig:
    """Driver settings: number of grids, marking rule, solver tolerance."""

    n_steps: int
    rule: MarkingRule = field(default_factory=MarkingRule.dorfler)
    solver_tol: float = 1e-10
    n0: int = 4
    solver_max_iter: Optional[int] = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError(f"n_steps must be >= 1, got {self.n_steps}")


@dataclass
class MultilevelSolution:
    """Output of one adaptive run: nested meshes, coarse solution, corrections.

    ``surpluses[n-1]`` holds the hierarchical layers of the n-th component
    (u_(1) for n = 1, v_(n) for n >= 2); layer i is a full-node vector over
    mesh i.  ``estimators[k]`` and ``markings[k]`` belong to the k-th
    refinement step (computed on mesh k+1 in 0-based terms).
    """

    problem: ProblemInstance
    meshes: list[Mesh]
    u1: FeFunction
    corrections: list[FeFunction]
    surpluses: list[list[np.ndarray]]
    estimators: list[EstimatorField]
    markings: list[Marking]
    solver_tol: float

    @property
    def n_steps(self) -> int:
        return len(self.meshes)

    def components(self) -> list[FeFunction]:
        return [self.u1, *self.corrections]

    def final_space(self) -> FeSpace:
        return self.corrections[-1].space if self.corrections else self.u1.space

    def final_solution(self) -> FeFunction:
        """Telescoped solution on the finest mesh: P(u_(1)) + sum P(v_(n))."""
        fine = self.meshes[-1]
        total = np.zeros(fine.n_vertices)
        for comp in self.components():
            total += prolong_values(comp.space.mesh, fine, comp.values)
        return FeFunction(self.final_space(), total)

    def solution_on(self, step: int) -> FeFunction:
        """Galerkin solution u_(step) reconstructed from the components."""
        fine = self.meshes[step - 1]
        total = np.zeros(fine.n_vertices)
        for comp in self.components()[:step]:
            total += prolong_values(comp.space.mesh, fine, comp.values)
        space = self.components()[step - 1].space
        return FeFunction(space, total)


def _interpolate_fields(space: FeSpace, problem: ProblemInstance):
    kappa = fem.interpolate(space, problem.kappa)
    f_field = fem.interpolate(space, problem.f)
    return kappa, f_field


def _galerkin_solve(space: FeSpace, problem: ProblemInstance, tol: float,
                    max_iter: Optional[int], step: int) -> tuple[FeFunction, FeFunction, FeFunction]:
    kappa, f_field = _interpolate_fields(space, problem)
    system = fem.assemble(space, kappa, f_field)
    try:
        u_free = fem.solve(system, tol=tol, max_iter=max_iter)
    except SolverError as exc:
        raise SolverError(f"step {step}: {exc}", exc.residual, exc.iterations) from exc
    return FeFunction.from_free(space, u_free), kappa, f_field


def afem_run(problem: ProblemInstance, config: AfemConfig) -> MultilevelSolution:
    """Run the adaptive loop for a fixed parameter instance.

    Step 1 solves on the initial mesh; each further step estimates on the
    current mesh, marks, subdivides every marked triangle into its four
    grandchildren, re-solves, and stores the correction against the
    prolonged previous solution.
    """
    mesh = initial_mesh(config.n0)
    space = FeSpace.on(mesh)
    u, kappa, f_field = _galerkin_solve(space, problem, config.solver_tol,
                                        config.solver_max_iter, step=1)
    meshes = [mesh]
    u_prev = u
    corrections: list[FeFunction] = []
    estimators: list[EstimatorField] = []
    markings: list[Marking] = []
    for n in range(2, config.n_steps + 1):
        eta = estimate(mesh, kappa, f_field, u_prev)
        marking = mark(eta, config.rule)
        estimators.append(eta)
        markings.append(marking)
        mesh = mesh.copy()
        for tid in sorted(marking.triangle_ids):
            mesh.ensure_refined(tid)
        space = FeSpace.on(mesh)
        u, kappa, f_field = _galerkin_solve(space, problem, config.solver_tol,
                                            config.solver_max_iter, step=n)
        prev_on_fine = prolong_values(meshes[-1], mesh, u_prev.values)
        corrections.append(FeFunction(space, u.values - prev_on_fine))
        meshes.append(mesh)
        u_prev = u
    u1 = FeFunction(FeSpace.on(meshes[0]), (u_prev if config.n_steps == 1
                                            else corrections[0].space and _first(meshes, corrections, u_prev)).values
                    if False else _coarse_component(meshes, corrections, u_prev).values)
    surpluses = [hierarchical_decompose(comp.values, meshes[: i + 1])
                 for i, comp in enumerate([u1, *corrections])]
    return MultilevelSolution(problem, meshes, u1, corrections, surpluses,
                              estimators, markings, config.solver_tol)


def _coarse_component(meshes, corrections, u_last) -> FeFunction:
    if not corrections:
        return u_last
    # u_(1) was the first solve; reconstruct it from the stored pieces:
    # u_(1) = u_(n) - sum of prolonged corrections, restricted to mesh 1 ids.
    fine_vals = u_last.values.copy()
    fine_mesh = meshes[-1]
    for comp, m in zip(corrections, meshes[1:]):
        fine_vals -= prolong_values(m, fine_mesh, comp.values)
    coarse = fine_vals[: meshes[0].n_vertices]
    return FeFunction(FeSpace.on(meshes[0]), coarse)


def solve_on_hierarchy(problem: ProblemInstance, meshes: list[Mesh],
                       solver_tol: float = 1e-10,
                       solver_max_iter: Optional[int] = None,
                       with_estimators: bool = True) -> MultilevelSolution:
    """Galerkin-solve a fixed nested hierarchy without marking or refining.

    This is the fixed-grid mode used for dataset generation: the meshes come
    from one reference adaptive run and are reused for every parameter.
    """
    for coarse, fine in zip(meshes, meshes[1:]):
        if not fine.refines(coarse):
            raise ValueError("meshes must form a nested refinement hierarchy")
    u_prev: Optional[FeFunction] = None
    u1: Optional[FeFunction] = None
    corrections: list[FeFunction] = []
    estimators: list[EstimatorField] = []
    for n, mesh in enumerate(meshes, start=1):
        space = FeSpace.on(mesh)
        u, kappa, f_field = _galerkin_solve(space, problem, solver_tol,
                                            solver_max_iter, step=n)
        if with_estimators and n < len(meshes):
            estimators.append(estimate(mesh, kappa, f_field, u))
        if u_prev is None:
            u1 = u
        else:
            prev_on_fine = prolong_values(meshes[n - 2], mesh, u_prev.values)
            corrections.append(FeFunction(space, u.values - prev_on_fine))
        u_prev = u
    surpluses = [hierarchical_decompose(comp.values, meshes[: i + 1])
                 for i, comp in enumerate([u1, *corrections])]
    return MultilevelSolution(problem, list(meshes), u1, corrections, surpluses,
                              estimators, [], solver_tol)


def hierarchical_decompose(values: np.ndarray, meshes: list[Mesh]) -> list[np.ndarray]:
    """Split nodal values on the finest mesh into hierarchical surplus layers.

    Layer 1 is the restriction to the coarsest mesh's nodes; layer i >= 2
    holds value - (interpolant of the coarser restriction) at nodes new on
    mesh i and exact zeros at older nodes.
    """
    values = np.asarray(values, dtype=np.float64)
    for coarse, fine in zip(meshes, meshes[1:]):
        if not fine.refines(coarse):
            raise ValueError("meshes must form a nested refinement hierarchy")
    if values.shape != (meshes[-1].n_vertices,):
        raise ValueError(
            f"expected {meshes[-1].n_vertices} nodal values, got {values.shape}")
    layers = [values[: meshes[0].n_vertices].copy()]
    for coarse, fine in zip(meshes, meshes[1:]):
        nf = fine.n_vertices
        interp = prolong_values(coarse, fine, values[: coarse.n_vertices])
        layers.append(values[:nf] - interp)
    return layers


def hierarchical_reconstruct(layers: list[np.ndarray], meshes: list[Mesh]) -> np.ndarray:
    """Exact inverse of :func:`hierarchical_decompose` (linear in the layers)."""
    if len(layers) != len(meshes):
        raise ValueError(
            f"{len(layers)} layers for {len(meshes)} meshes")
    out = np.asarray(layers[0], dtype=np.float64).copy()
    for layer, coarse, fine in zip(layers[1:], meshes, meshes[1:]):
        layer = np.asarray(layer, dtype=np.float64)
        if layer.shape != (fine.n_vertices,):
            raise ValueError(
                f"layer has {layer.shape} values, mesh has {fine.n_vertices} nodes")
        out = prolong_values(coarse, fine, out) + layer
    return out


# ----------------------------------------------------------------------
# masked tensor-grid images
# ----------------------------------------------------------------------

@dataclass
class GridImage:
    """Node values scattered onto the dyadic tensor grid of a level.

    ``values[r, c]`` holds the coefficient of the node at coordinates
    (r, c) / (n0 * 2^grid_level); pixels that are not mesh nodes are zero
    and carry mask 0.
    """

    role: str
    grid_level: int
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise ValueError("value and mask images must have equal shapes")
        if np.any(self.values * (1 - self.mask.astype(np.float64)) != 0.0):
            raise ValueError("values must vanish outside the mask")


@dataclass
class EncodedSample:
    """Masked-image encoding of one multilevel solution (one parameter)."""

    kappa: GridImage
    f: GridImage
    layers: dict[tuple[int, int], GridImage]      # (component n, layer i)
    estimators: dict[int, GridImage]              # per refinement step
    markers: dict[int, GridImage]                 # per refinement step


def _grid_points(n0: int, level: int) -> np.ndarray:
    n = n0 * 2 ** level + 1
    axis = np.arange(n) / (n - 1)
    r, c = np.meshgrid(axis, axis, indexing="ij")
    return np.column_stack([r.ravel(), c.ravel()])


def nodal_to_image(mesh: Mesh, level: int, values: np.ndarray, role: str,
                   mask_nodes: Optional[np.ndarray] = None) -> GridImage:
    """Scatter full-node values to the level's tensor grid.

    ``mask_nodes`` restricts the mask (and the retained values) to a subset
    of nodes; by default every mesh node is live.
    """
    shape = mesh.grid_shape(level)
    img = np.zeros(shape)
    msk = np.zeros(shape, dtype=np.uint8)
    index = mesh.node_grid_index(level)
    for vid, (r, c) in index.items():
        if mask_nodes is not None and not mask_nodes[vid]:
            continue
        img[r, c] = values[vid]
        msk[r, c] = 1
    return GridImage(role, level, img, msk)


def image_to_nodal(mesh: Mesh, image: GridImage) -> np.ndarray:
    """Gather an image back to full-node values (inverse of the scatter)."""
    index = mesh.node_grid_index(image.grid_level)
    out = np.zeros(mesh.n_vertices)
    for vid, (r, c) in index.items():
        out[vid] = image.values[r, c]
    return out


def marked_node_mask(mesh: Mesh, marking: Marking) -> np.ndarray:
    """Node is flagged when any incident leaf triangle is marked."""
    flags = np.zeros(mesh.n_vertices, dtype=bool)
    for t in mesh.leaves():
        if t.id in marking.triangle_ids:
            flags[list(t.v)] = True
    return flags


def new_node_mask(coarse: Mesh, fine: Mesh) -> np.ndarray:
    """Over fine nodes: True exactly at nodes absent from the coarse mesh."""
    flags = np.zeros(fine.n_vertices, dtype=bool)
    flags[coarse.n_vertices:] = True
    return flags


def estimator_node_values(mesh: Mesh, eta: EstimatorField) -> np.ndarray:
    """Rasterize triangle indicators to nodes by summing over incident leaves."""
    out = np.zeros(mesh.n_vertices)
    for k, t in enumerate(mesh.leaves()):
        out[list(t.v)] += eta.eta_sq[k]
    return out


def encode_images(sol: MultilevelSolution) -> EncodedSample:
    """Encode a multilevel solution as masked sparse images.

    The diffusion coefficient and load are evaluated pointwise on the finest
    uniform tensor grid (dense images, all-ones mask).  Component n yields
    its hierarchical layers: layer i is scattered to the level-(i-1) grid
    with the mask restricted to the nodes that are new on mesh i (all nodes
    for i = 1), so the masked-pixel count equals the number of new nodes.
    Estimator images patch-sum eta_T^2 to nodes; marker images flag nodes of
    marked triangles.
    """
    meshes = sol.meshes
    n0 = meshes[0].n0
    finest_level = len(meshes) - 1
    pts = _grid_points(n0, finest_level)
    side = n0 * 2 ** finest_level + 1
    ones = np.ones((side, side), dtype=np.uint8)
    kappa_img = GridImage("kappa", finest_level,
                          np.asarray(sol.problem.kappa(pts)).reshape(side, side),
                          ones)
    f_img = GridImage("f", finest_level,
                      np.asarray(sol.problem.f(pts)).reshape(side, side), ones)

    layers: dict[tuple[int, int], GridImage] = {}
    for n, layer_list in enumerate(sol.surpluses, start=1):
        for i, layer in enumerate(layer_list, start=1):
            mask_nodes = None
            if i >= 2:
                mask_nodes = new_node_mask(meshes[i - 2], meshes[i - 1])
            layers[(n, i)] = nodal_to_image(
                meshes[i - 1], i - 1, layer, role=f"v{n}_layer{i}",
                mask_nodes=mask_nodes)

    estimators: dict[int, GridImage] = {}
    for k, eta in enumerate(sol.estimators, start=1):
        vals = estimator_node_values(meshes[k - 1], eta)
        estimators[k] = nodal_to_image(meshes[k - 1], k - 1, vals,
                                       role=f"eta{k}")

    markers: dict[int, GridImage] = {}
    for k, marking in enumerate(sol.markings, start=1):
        flags = marked_node_mask(meshes[k - 1], marking)
        img = nodal_to_image(meshes[k - 1], k - 1, flags.astype(np.float64),
                             role=f"marker{k}")
        markers[k] = img
    return EncodedSample(kappa_img, f_img, layers, estimators, markers)
