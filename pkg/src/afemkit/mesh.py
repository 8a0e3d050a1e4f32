"""Conforming triangulations of the unit square with newest-vertex bisection.

Every mesh starts from a uniform n0 x n0 grid of squares, each split along
the lower-left to upper-right diagonal into two right isosceles triangles.
The hypotenuse is the refinement edge, so bisection always halves the
hypotenuse and all descendants stay right isosceles.  Refined meshes embed
into the uniformly refined reference hierarchy: vertex coordinates are kept
as exact dyadic rationals (ix / (n0 * 2^level), iy / (n0 * 2^level)), which
makes grid indexing, nesting and angle checks exact integer arithmetic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "MeshError",
    "Vertex",
    "Triangle",
    "HangingNode",
    "Mesh",
    "initial_mesh",
]


class MeshError(ValueError):
    """Invalid mesh operation (unknown ids, non-leaf refinement, off-grid nodes)."""


@dataclass(frozen=True)
class Vertex:
    """Mesh vertex with exact dyadic coordinates x = ix/(n0*2^level)."""

    id: int
    ix: int
    iy: int
    level: int
    n0: int
    parents: Optional[tuple[int, int]] = None  # endpoints of the bisected edge

    @property
    def x(self) -> tuple[float, float]:
        s = self.n0 << self.level
        return (self.ix / s, self.iy / s)


@dataclass
class Triangle:
    """Triangle record; vertex triple is counterclockwise (positive area).

    ``newest`` is the local index of the newest vertex; the refinement edge
    is the edge opposite to it.  ``level`` counts bisection generations.
    """

    id: int
    v: tuple[int, int, int]
    newest: int
    level: int
    parent: Optional[int] = None
    children: Optional[tuple[int, int]] = None

    @property
    def is_leaf(self) -> bool:
        return self.children is None

    @property
    def newest_vertex(self) -> int:
        return self.v[self.newest]

    @property
    def refinement_edge(self) -> tuple[int, int]:
        a = self.v[(self.newest + 1) % 3]
        b = self.v[(self.newest + 2) % 3]
        return (a, b) if a < b else (b, a)


@dataclass(frozen=True)
class HangingNode:
    """Conformity defect: ``vertex`` lies in the interior of leaf edge ``edge``."""

    vertex: Optional[int]
    edge: tuple[int, int]
    reason: str


def _edge_key(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


class Mesh:
    """Triangulation with full refinement history.

    Leaves (``children is None``) form the current triangulation; bisected
    triangles are kept for hierarchy queries.  Vertex ids are stable under
    refinement, so a refined copy contains the parent's vertices as a prefix.
    Refinement mutates the mesh in place; use :meth:`copy` to keep a snapshot.
    """

    def __init__(self, n0: int):
        if n0 < 1:
            raise MeshError(f"initial grid resolution must be >= 1, got {n0}")
        self.n0 = n0
        self._vix: list[int] = []
        self._viy: list[int] = []
        self._vlevel: list[int] = []
        self._vparents: list[Optional[tuple[int, int]]] = []
        self._vlookup: dict[tuple[int, int, int], int] = {}
        self.triangles: list[Triangle] = []
        # edge -> ids of the (one or two) leaf triangles containing it
        self._adj: dict[tuple[int, int], list[int]] = {}
        self.max_level = 0  # finest dyadic grid level occupied by any vertex

    # ------------------------------------------------------------------
    # vertices
    # ------------------------------------------------------------------

    @property
    def n_vertices(self) -> int:
        return len(self._vix)

    @property
    def n_triangles(self) -> int:
        """Total number of triangle records, bisected ancestors included."""
        return len(self.triangles)

    def vertex(self, vid: int) -> Vertex:
        return Vertex(vid, self._vix[vid], self._viy[vid], self._vlevel[vid],
                      self.n0, self._vparents[vid])

    def vertex_key(self, vid: int) -> tuple[int, int, int]:
        """Normalized exact coordinate key (ix, iy, level)."""
        return (self._vix[vid], self._viy[vid], self._vlevel[vid])

    def vertex_coords(self) -> np.ndarray:
        """(n_vertices, 2) float coordinates in vertex-id order."""
        scale = np.ldexp(1.0, np.asarray(self._vlevel)) * self.n0
        return np.column_stack([np.asarray(self._vix) / scale,
                                np.asarray(self._viy) / scale])

    def is_boundary_vertex(self, vid: int) -> bool:
        s = self.n0 << self._vlevel[vid]
        ix, iy = self._vix[vid], self._viy[vid]
        return ix == 0 or iy == 0 or ix == s or iy == s

    def boundary_vertex_mask(self) -> np.ndarray:
        return np.fromiter((self.is_boundary_vertex(i) for i in range(self.n_vertices)),
                           dtype=bool, count=self.n_vertices)

    def _add_vertex(self, ix: int, iy: int, level: int,
                    parents: Optional[tuple[int, int]] = None) -> int:
        # normalize so the key is unique per grid point
        while level > 0 and (ix | iy) & 1 == 0:
            ix >>= 1
            iy >>= 1
            level -= 1
        key = (ix, iy, level)
        vid = self._vlookup.get(key)
        if vid is not None:
            return vid
        vid = len(self._vix)
        self._vix.append(ix)
        self._viy.append(iy)
        self._vlevel.append(level)
        self._vparents.append(parents)
        self._vlookup[key] = vid
        if level > self.max_level:
            self.max_level = level
        return vid

    def _midpoint_vertex(self, a: int, b: int) -> int:
        la, lb = self._vlevel[a], self._vlevel[b]
        lc = max(la, lb)
        ax, ay = self._vix[a] << (lc - la), self._viy[a] << (lc - la)
        bx, by = self._vix[b] << (lc - lb), self._viy[b] << (lc - lb)
        return self._add_vertex(ax + bx, ay + by, lc + 1, parents=(a, b))

    # ------------------------------------------------------------------
    # triangles and adjacency
    # ------------------------------------------------------------------

    def triangle(self, tid: int) -> Triangle:
        try:
            return self.triangles[tid]
        except IndexError:
            raise MeshError(f"unknown triangle id {tid}") from None

    def leaves(self) -> Iterator[Triangle]:
        """Leaf triangles in ascending id order."""
        return (t for t in self.triangles if t.children is None)

    def leaf_ids(self) -> list[int]:
        return [t.id for t in self.triangles if t.children is None]

    @property
    def n_leaves(self) -> int:
        return sum(1 for t in self.triangles if t.children is None)

    def leaf_vertex_array(self) -> np.ndarray:
        """(n_leaves, 3) vertex ids of the leaves, ascending leaf id."""
        return np.array([t.v for t in self.leaves()], dtype=np.int64)

    def edges(self) -> list[tuple[int, int]]:
        return list(self._adj.keys())

    @property
    def edge_adjacency(self) -> dict[tuple[int, int], list[int]]:
        """Edge -> incident leaf triangle ids. Treat as read-only."""
        return self._adj

    def edge_triangles(self, edge: tuple[int, int]) -> list[int]:
        key = _edge_key(*edge)
        try:
            return list(self._adj[key])
        except KeyError:
            raise MeshError(f"unknown edge {edge}") from None

    def is_boundary_edge(self, edge: tuple[int, int]) -> bool:
        """True iff both endpoints lie on a common side of the unit square."""
        a, b = edge
        for vid in (a, b):
            if not self.is_boundary_vertex(vid):
                return False
        ka, kb = self.vertex_key(a), self.vertex_key(b)
        sa, sb = self.n0 << ka[2], self.n0 << kb[2]
        return (
            (ka[0] == 0 and kb[0] == 0)
            or (ka[1] == 0 and kb[1] == 0)
            or (ka[0] == sa and kb[0] == sb)
            or (ka[1] == sa and kb[1] == sb)
        )

    def _add_triangle(self, v: tuple[int, int, int], newest: int, level: int,
                      parent: Optional[int]) -> int:
        tid = len(self.triangles)
        self.triangles.append(Triangle(tid, v, newest, level, parent))
        for i in range(3):
            key = _edge_key(v[i], v[(i + 1) % 3])
            self._adj.setdefault(key, []).append(tid)
        return tid

    def _detach_leaf(self, t: Triangle) -> None:
        for i in range(3):
            key = _edge_key(t.v[i], t.v[(i + 1) % 3])
            entry = self._adj[key]
            entry.remove(t.id)
            if not entry:
                del self._adj[key]

    def _bisect(self, tid: int) -> tuple[int, int]:
        """Bisect a leaf through its refinement edge. No conformity recursion."""
        t = self.triangle(tid)
        if not t.is_leaf:
            raise MeshError(f"triangle {tid} is not a leaf")
        k = t.newest
        c, a, b = t.v[k], t.v[(k + 1) % 3], t.v[(k + 2) % 3]
        m = self._midpoint_vertex(a, b)
        self._detach_leaf(t)
        c1 = self._add_triangle((c, a, m), newest=2, level=t.level + 1, parent=tid)
        c2 = self._add_triangle((c, m, b), newest=1, level=t.level + 1, parent=tid)
        t.children = (c1, c2)
        return c1, c2

    # ------------------------------------------------------------------
    # refinement
    # ------------------------------------------------------------------

    def refine_in_pair(self, tid: int) -> "Mesh":
        """Bisect leaf ``tid`` compatibly with its refinement-edge neighbour.

        If the neighbour shares the refinement edge, both triangles are
        bisected through the common midpoint.  An incompatible neighbour is
        refined first (iterative worklist; the neighbour is always one
        generation older, so the chain terminates).  A refinement edge on
        the domain boundary is bisected alone.
        """
        t = self.triangle(tid)
        if not t.is_leaf:
            raise MeshError(f"triangle {tid} is not a leaf")
        stack = [tid]
        while stack:
            s = self.triangles[stack[-1]]
            if not s.is_leaf:  # bisected while resolving a deeper neighbour
                stack.pop()
                continue
            edge = s.refinement_edge
            others = [i for i in self._adj[edge] if i != s.id]
            if not others:
                if not self.is_boundary_edge(edge):
                    raise MeshError(
                        f"interior edge {edge} has a single leaf; mesh is not conforming")
                self._bisect(s.id)
                stack.pop()
            else:
                nb = self.triangles[others[0]]
                if nb.refinement_edge == edge:
                    self._bisect(s.id)
                    self._bisect(nb.id)
                    stack.pop()
                else:
                    if nb.level >= s.level:
                        raise MeshError(
                            "newest-vertex structure violated: incompatible "
                            f"neighbour {nb.id} of {s.id} is not older")
                    stack.append(nb.id)
        return self

    def refine_triangle(self, tid: int) -> "Mesh":
        """Subdivide leaf ``tid`` into its four grandchildren.

        Bisects the triangle compatibly, then both children, yielding four
        half-scale similar triangles (the midpoints of all three edges are
        inserted).  Neighbours are refined as needed to stay conforming.
        """
        t = self.triangle(tid)
        if not t.is_leaf:
            raise MeshError(f"triangle {tid} is not a leaf")
        self.refine_in_pair(tid)
        for child in self.triangles[tid].children:
            if self.triangles[child].is_leaf:
                self.refine_in_pair(child)
        return self

    def ensure_refined(self, tid: int) -> "Mesh":
        """Refine until every leaf descendant of ``tid`` is two generations deeper.

        Equivalent to :meth:`refine_triangle` when ``tid`` is a leaf, but also
        valid when earlier refinements have already bisected it as a
        compatibility partner.
        """
        target = self.triangle(tid).level + 2
        pending = [tid]
        while pending:
            t = self.triangles[pending.pop()]
            if t.is_leaf:
                if t.level < target:
                    self.refine_in_pair(t.id)
                    pending.append(t.id)
            else:
                pending.extend(t.children)
        return self

    def uniform_refine(self) -> "Mesh":
        """Subdivide every leaf into four similar half-scale triangles."""
        first = [t.id for t in self.leaves()]
        children: list[int] = []
        for tid in first:
            children.extend(self._bisect(tid))
        for cid in children:
            self._bisect(cid)
        return self

    # ------------------------------------------------------------------
    # queries
    # ------------------------------------------------------------------

    def check_conformity(self) -> list[HangingNode]:
        """Hanging-node report; the mesh is conforming iff it is empty.

        Rebuilds edge incidences from the leaves.  An edge that is whole on
        one side but bisected on the other is reported through its midpoint
        vertex (every defect in a bisection hierarchy has this form); edges
        with more than two incident leaves and interior edges with a single
        leaf are reported as well.
        """
        edge_map: dict[tuple[int, int], list[int]] = {}
        for t in self.leaves():
            for i in range(3):
                key = _edge_key(t.v[i], t.v[(i + 1) % 3])
                edge_map.setdefault(key, []).append(t.id)
        report: list[HangingNode] = []
        for edge, tids in edge_map.items():
            a, b = edge
            la, lb = self._vlevel[a], self._vlevel[b]
            lc = max(la, lb)
            mx = (self._vix[a] << (lc - la)) + (self._vix[b] << (lc - lb))
            my = (self._viy[a] << (lc - la)) + (self._viy[b] << (lc - lb))
            level = lc + 1
            while level > 0 and (mx | my) & 1 == 0:
                mx >>= 1
                my >>= 1
                level -= 1
            mid = self._vlookup.get((mx, my, level))
            if mid is not None and _edge_key(a, mid) in edge_map \
                    and _edge_key(mid, b) in edge_map:
                report.append(HangingNode(mid, edge, "edge bisected on one side only"))
                continue
            if len(tids) > 2:
                report.append(HangingNode(None, edge, "edge shared by >2 leaves"))
            elif len(tids) == 1 and not self.is_boundary_edge(edge):
                report.append(HangingNode(None, edge, "interior edge with one leaf"))
        return report

    def node_grid_index(self, level: int) -> dict[int, tuple[int, int]]:
        """Map vertex id -> (row, col) on the (n0*2^level + 1)^2 tensor grid.

        row is the first-coordinate index round(x1 * n0 * 2^level), col the
        second; the agreement is exact because coordinates are dyadic.
        """
        out: dict[int, tuple[int, int]] = {}
        for vid in range(self.n_vertices):
            shift = level - self._vlevel[vid]
            if shift < 0:
                raise MeshError(
                    f"vertex {vid} lies on grid level {self._vlevel[vid]}, "
                    f"finer than requested level {level}")
            out[vid] = (self._vix[vid] << shift, self._viy[vid] << shift)
        return out

    def grid_shape(self, level: int) -> tuple[int, int]:
        n = self.n0 * 2 ** level + 1
        return (n, n)

    def leaf_is_right_isosceles(self, tid: int) -> bool:
        """Exact integer check: two equal legs and hypotenuse^2 = 2 leg^2."""
        t = self.triangle(tid)
        keys = [self.vertex_key(v) for v in t.v]
        lc = max(k[2] for k in keys)
        pts = [(k[0] << (lc - k[2]), k[1] << (lc - k[2])) for k in keys]
        d = []
        for i in range(3):
            (x1, y1), (x2, y2) = pts[i], pts[(i + 1) % 3]
            d.append((x1 - x2) ** 2 + (y1 - y2) ** 2)
        d.sort()
        return d[0] == d[1] and d[2] == 2 * d[0] and d[0] > 0

    def copy(self) -> "Mesh":
        other = Mesh.__new__(Mesh)
        other.n0 = self.n0
        other._vix = list(self._vix)
        other._viy = list(self._viy)
        other._vlevel = list(self._vlevel)
        other._vparents = list(self._vparents)
        other._vlookup = dict(self._vlookup)
        other.triangles = [
            Triangle(t.id, t.v, t.newest, t.level, t.parent, t.children)
            for t in self.triangles
        ]
        other._adj = {k: list(v) for k, v in self._adj.items()}
        other.max_level = self.max_level
        return other

    def refines(self, coarse: "Mesh") -> bool:
        """True iff this mesh was produced by refining ``coarse`` (shared id prefix)."""
        if coarse.n0 != self.n0 or coarse.n_vertices > self.n_vertices:
            return False
        return all(self.vertex_key(i) == coarse.vertex_key(i)
                   for i in range(coarse.n_vertices))

    # ------------------------------------------------------------------
    # serialization
    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        coords = self.vertex_coords()
        return {
            "n0": self.n0,
            "max_level": self.max_level,
            "vertices": [[float(x), float(y)] for x, y in coords],
            "vertex_parents": [list(p) if p is not None else None
                               for p in self._vparents],
            "triangles": [
                {"v": list(t.v), "refinement_edge": t.newest, "level": t.level}
                for t in self.leaves()
            ],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_dict(cls, data: dict) -> "Mesh":
        n0 = int(data["n0"])
        max_level = int(data["max_level"])
        mesh = cls.__new__(cls)
        mesh.n0 = n0
        mesh._vix, mesh._viy, mesh._vlevel = [], [], []
        mesh._vparents = []
        mesh._vlookup = {}
        mesh.triangles = []
        mesh._adj = {}
        mesh.max_level = 0
        scale = n0 << max_level
        parents = data.get("vertex_parents") or [None] * len(data["vertices"])
        for (x, y), par in zip(data["vertices"], parents):
            ix, iy = round(x * scale), round(y * scale)
            if abs(ix / scale - x) > 1e-12 or abs(iy / scale - y) > 1e-12:
                raise MeshError(f"vertex ({x}, {y}) is off the level-{max_level} grid")
            mesh._add_vertex(ix, iy, max_level,
                             parents=tuple(par) if par is not None else None)
        for rec in data["triangles"]:
            v = tuple(int(i) for i in rec["v"])
            mesh._add_triangle(v, newest=int(rec["refinement_edge"]),
                               level=int(rec["level"]), parent=None)
        return mesh

    @classmethod
    def from_json(cls, text: str) -> "Mesh":
        return cls.from_dict(json.loads(text))


def initial_mesh(n0: int) -> Mesh:
    """Uniform n0 x n0 criss-cross mesh: each square is split along its
    lower-left to upper-right diagonal; the hypotenuse is the refinement edge.
    """
    mesh = Mesh(n0)
    for iy in range(n0 + 1):
        for ix in range(n0 + 1):
            mesh._add_vertex(ix, iy, 0)
    for iy in range(n0):
        for ix in range(n0):
            ll = iy * (n0 + 1) + ix
            lr = ll + 1
            ul = ll + (n0 + 1)
            ur = ul + 1
            # lower triangle (ll, lr, ur): right angle at lr, hypotenuse ll-ur
            mesh._add_triangle((ll, lr, ur), newest=1, level=0, parent=None)
            # upper triangle (ll, ur, ul): right angle at ul, hypotenuse ll-ur
            mesh._add_triangle((ll, ur, ul), newest=2, level=0, parent=None)
    return mesh
