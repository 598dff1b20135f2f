"""Conforming 2D triangulations with newest-vertex bisection refinement.

Meshes are immutable after construction: refinement returns a new mesh
value and never mutates its input.  Element connectivity uses the
"peak vertex" convention: the refinement edge of element ``(v0, v1, v2)``
is the edge ``(v1, v2)`` opposite the first vertex.  Bisection inserts
the midpoint of that edge, and the two children inherit the midpoint as
their peak, which reproduces the classical newest-vertex scheme with its
finitely-many-similarity-classes shape guarantee.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

# Edge markers.
INTERIOR = 0
DIRICHLET_TOP_LEFT = 1
DIRICHLET_TOP_RIGHT = 2
NEUMANN_OUTER = 3
SLIT_FACE = 4
DIRICHLET = 5  # generic clamped edge, used by auxiliary test meshes

DIRICHLET_MARKERS = (DIRICHLET_TOP_LEFT, DIRICHLET_TOP_RIGHT, DIRICHLET)
NEUMANN_MARKERS = (NEUMANN_OUTER, SLIT_FACE)

_uid_counter = itertools.count(1)


class MeshError(ValueError):
    """Invalid mesh construction or query."""


@dataclass(frozen=True)
class MarkedSet:
    """Element indices selected for refinement."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        object.__setattr__(self, "indices", np.unique(idx))

    def __len__(self):
        return len(self.indices)


@dataclass(frozen=True, eq=False)
class Mesh:
    """Conforming triangulation with boundary markers and lineage.

    Attributes
    ----------
    vertices : (nv, 2) float array
    elements : (ne, 3) int array, positively oriented, peak convention
    generation : refinement round counter (0 for an initial mesh)
    parent : (ne,) index of each element in the predecessor mesh (-1 at
        generation 0)
    root : (ne,) generation-0 ancestor of each element
    n_parent_vertices : vertex count of the predecessor mesh; vertices
        ``[n_parent_vertices:]`` are edge midpoints created by the last
        refinement, with endpoints listed in ``vertex_parents``
    boundary_tag : mapping from sorted vertex pair to a non-interior
        edge marker
    """

    vertices: np.ndarray
    elements: np.ndarray
    generation: int = 0
    parent: np.ndarray | None = None
    root: np.ndarray | None = None
    n_parent_vertices: int = 0
    vertex_parents: np.ndarray | None = None
    boundary_tag: dict = field(default_factory=dict)
    uid: int = field(default_factory=lambda: next(_uid_counter))

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        e = np.ascontiguousarray(np.asarray(self.elements, dtype=np.int64))
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "elements", e)
        if self.parent is None:
            object.__setattr__(self, "parent", np.full(len(e), -1, dtype=np.int64))
        if self.root is None:
            object.__setattr__(self, "root", np.arange(len(e), dtype=np.int64))
        if self.vertex_parents is None:
            object.__setattr__(self, "vertex_parents", np.empty((0, 2), dtype=np.int64))
            object.__setattr__(self, "n_parent_vertices", len(v))
        self._build_geometry()
        self._build_edges()
        self._validate()
        for arr in (self.vertices, self.elements, self.parent, self.root,
                    self.vertex_parents, self.edges, self.edge_elements,
                    self.edge_marker, self.elem_edges, self.areas, self.grads,
                    self.h_tau, self.edge_length):
            arr.setflags(write=False)

    # -- derived tables -------------------------------------------------

    def _build_geometry(self):
        p = self.vertices[self.elements]              # (ne, 3, 2)
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        twice_area = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        areas = 0.5 * twice_area
        # grad of barycentric lambda_i: rotate the opposite edge by 90 deg
        grads = np.empty((len(self.elements), 3, 2))
        for k in range(3):
            a = p[:, (k + 1) % 3]
            b = p[:, (k + 2) % 3]
            grads[:, k, 0] = (a[:, 1] - b[:, 1]) / twice_area
            grads[:, k, 1] = (b[:, 0] - a[:, 0]) / twice_area
        side = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
        lens = np.linalg.norm(side, axis=2)
        object.__setattr__(self, "areas", areas)
        object.__setattr__(self, "grads", grads)
        object.__setattr__(self, "h_tau", lens.max(axis=1))

    def _build_edges(self):
        elems = self.elements
        ne = len(elems)
        # local edge k is opposite vertex k
        raw = np.stack([elems[:, [1, 2]], elems[:, [2, 0]], elems[:, [0, 1]]], axis=1)
        raw = raw.reshape(-1, 2)
        keys = np.sort(raw, axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        elem_edges = inverse.reshape(ne, 3)
        n_edges = len(edges)
        edge_elements = np.full((n_edges, 2), -1, dtype=np.int64)
        slot = np.zeros(n_edges, dtype=np.int64)
        owner = np.repeat(np.arange(ne, dtype=np.int64), 3)
        for g, el in zip(inverse, owner):
            edge_elements[g, slot[g]] = el
            slot[g] += 1
        marker = np.full(n_edges, INTERIOR, dtype=np.int64)
        for g in range(n_edges):
            tag = self.boundary_tag.get((int(edges[g, 0]), int(edges[g, 1])))
            if tag is not None:
                marker[g] = tag
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "edge_elements", edge_elements)
        object.__setattr__(self, "edge_marker", marker)
        object.__setattr__(self, "elem_edges", elem_edges)
        object.__setattr__(self, "edge_length",
                           np.linalg.norm(self.vertices[edges[:, 1]] - self.vertices[edges[:, 0]], axis=1))
        object.__setattr__(self, "_incidence", slot)

    def _validate(self):
        if np.any(self.areas <= 0):
            raise MeshError("element with non-positive area")
        counts = self._incidence
        if np.any(counts > 2) or np.any(counts < 1):
            raise MeshError("edge shared by more than two elements")
        boundary = counts == 1
        untagged = boundary & (self.edge_marker == INTERIOR)
        if np.any(untagged):
            raise MeshError("boundary edge without marker")
        if np.any(~boundary & (self.edge_marker != INTERIOR)):
            raise MeshError("interior edge carries a boundary marker")

    # -- queries ----------------------------------------------------------

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_elements(self):
        return len(self.elements)

    @property
    def area(self):
        return float(self.areas.sum())

    def dirichlet_vertices(self, markers=DIRICHLET_MARKERS):
        mask = np.isin(self.edge_marker, markers)
        return np.unique(self.edges[mask])

    def vertices_of_marker(self, marker):
        return np.unique(self.edges[self.edge_marker == marker])

    def min_angle(self):
        """Smallest interior angle over all elements, in radians."""
        p = self.vertices[self.elements]
        worst = np.inf
        for k in range(3):
            a = p[:, (k + 1) % 3] - p[:, k]
            b = p[:, (k + 2) % 3] - p[:, k]
            cosang = np.einsum("ij,ij->i", a, b) / (
                np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1))
            worst = min(worst, float(np.arccos(np.clip(cosang, -1, 1)).min()))
        return worst

    def prolong_values(self, parent_values):
        """Transfer P1 vertex values from the predecessor mesh (exact)."""
        parent_values = np.asarray(parent_values, dtype=np.float64)
        if len(parent_values) != self.n_parent_vertices:
            raise MeshError("value vector does not match the predecessor mesh")
        out = np.empty(self.n_vertices)
        out[: self.n_parent_vertices] = parent_values
        if len(self.vertex_parents):
            out[self.n_parent_vertices:] = parent_values[self.vertex_parents].mean(axis=1)
        return out


def _rotate_to_longest_edge(vertices, tri):
    """Cyclic rotation placing the longest edge opposite vertex 0.

    Ties go to the edge whose opposite vertex has the lowest global id.
    """
    tri = list(tri)
    lengths = []
    for k in range(3):
        a = vertices[tri[(k + 1) % 3]]
        b = vertices[tri[(k + 2) % 3]]
        lengths.append(float(np.hypot(*(a - b))))
    best = max(range(3), key=lambda k: (lengths[k], -tri[k]))
    return [tri[best], tri[(best + 1) % 3], tri[(best + 2) % 3]]


def from_arrays(vertices, triangles, boundary_tag=None, default_marker=NEUMANN_OUTER):
    """Build a generation-0 mesh from raw triangle soup.

    Each triangle is rotated so its refinement edge is the longest edge.
    Boundary edges missing from ``boundary_tag`` get ``default_marker``.
    """
    vertices = np.asarray(vertices, dtype=np.float64)
    tris = [_rotate_to_longest_edge(vertices, t) for t in np.asarray(triangles, dtype=np.int64)]
    elements = np.asarray(tris, dtype=np.int64)
    tag = dict(boundary_tag or {})
    tag = {(min(a, b), max(a, b)): m for (a, b), m in tag.items()}
    # tag remaining boundary edges with the default marker
    raw = np.concatenate([elements[:, [1, 2]], elements[:, [2, 0]], elements[:, [0, 1]]])
    keys = np.sort(raw, axis=1)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    for (a, b), c in zip(uniq, counts):
        if c == 1 and (int(a), int(b)) not in tag:
            tag[(int(a), int(b))] = default_marker
    return Mesh(vertices=vertices, elements=elements, boundary_tag=tag)


def build_unit_square(n, dirichlet="none"):
    """Structured mesh of [0,1]^2 with mirrored diagonals, no slit.

    ``dirichlet`` selects which boundary edges are clamped: "none" (all
    Neumann), "top", or "all".  Used by tests and verification drivers.
    """
    if n < 1:
        raise MeshError("n must be >= 1")
    verts, tris = _structured_grid(n)
    tag = {}
    for (a, b) in _boundary_pairs(tris):
        ym = (verts[a, 1] + verts[b, 1]) / 2
        on_top = abs(ym - 1.0) < 1e-12
        if dirichlet == "all" or (dirichlet == "top" and on_top):
            tag[(min(a, b), max(a, b))] = DIRICHLET
        else:
            tag[(min(a, b), max(a, b))] = NEUMANN_OUTER
    return from_arrays(verts, tris, boundary_tag=tag)


def _structured_grid(n):
    xs = np.linspace(0.0, 1.0, n + 1)
    verts = np.array([(x, y) for y in xs for x in xs])
    vid = lambda i, j: j * (n + 1) + i
    tris = []
    for j in range(n):
        for i in range(n):
            a, b = vid(i, j), vid(i + 1, j)
            c, d = vid(i + 1, j + 1), vid(i, j + 1)
            if i < n // 2:
                tris.append((a, b, c))
                tris.append((a, c, d))
            else:
                tris.append((a, b, d))
                tris.append((b, c, d))
    return verts, np.asarray(tris, dtype=np.int64)


def _boundary_pairs(tris):
    raw = np.concatenate([tris[:, [1, 2]], tris[:, [2, 0]], tris[:, [0, 1]]])
    keys = np.sort(raw, axis=1)
    uniq, counts = np.unique(keys, axis=0, return_counts=True)
    return [(int(a), int(b)) for (a, b), c in zip(uniq, counts) if c == 1]


def build_unit_square_with_slit(n_initial, slit_tip_y=0.5):
    """Unit square with a vertical slit from (0.5, 1) down to the tip.

    The slit is realized topologically: every grid vertex strictly above
    the tip on the line x = 0.5 is duplicated, and elements right of the
    line reference the duplicates, so the two crack faces carry separate
    unknowns.  The tip vertex itself stays single.  ``slit_tip_y`` is
    snapped to the nearest interior grid line.

    Top edges left of the slit are tagged ``DIRICHLET_TOP_LEFT``, right
    of it ``DIRICHLET_TOP_RIGHT``; slit faces ``SLIT_FACE``; remaining
    boundary ``NEUMANN_OUTER``.
    """
    n = n_initial
    if n < 2 or n % 2 != 0:
        raise MeshError("n_initial must be an even integer >= 2")
    if not (0.0 < slit_tip_y < 1.0):
        raise MeshError("slit_tip_y must lie strictly inside (0, 1)")
    verts, tris = _structured_grid(n)
    tip_row = int(round(slit_tip_y * n))
    tip_row = min(max(tip_row, 1), n - 1)

    mid = n // 2
    vid = lambda i, j: j * (n + 1) + i
    slit_rows = range(tip_row + 1, n + 1)
    dup_map = {}
    verts = list(map(tuple, verts))
    for j in slit_rows:
        orig = vid(mid, j)
        dup_map[orig] = len(verts)
        verts.append(verts[orig])
    verts = np.asarray(verts)

    new_tris = []
    for t in tris:
        cx = verts[list(t), 0].mean()
        if cx > 0.5:
            t = [dup_map.get(int(v), int(v)) for v in t]
        new_tris.append(tuple(int(v) for v in t))
    tris = np.asarray(new_tris, dtype=np.int64)

    tag = {}
    for (a, b) in _boundary_pairs(tris):
        pa, pb = verts[a], verts[b]
        xm, ym = (pa[0] + pb[0]) / 2, (pa[1] + pb[1]) / 2
        key = (min(a, b), max(a, b))
        if abs(ym - 1.0) < 1e-12:
            tag[key] = DIRICHLET_TOP_LEFT if xm < 0.5 else DIRICHLET_TOP_RIGHT
        elif abs(xm) < 1e-12 or abs(xm - 1.0) < 1e-12 or abs(ym) < 1e-12:
            tag[key] = NEUMANN_OUTER
        elif abs(pa[0] - 0.5) < 1e-12 and abs(pb[0] - 0.5) < 1e-12:
            tag[key] = SLIT_FACE
        else:
            raise MeshError("unclassifiable boundary edge in slit construction")
    return from_arrays(verts, tris, boundary_tag=tag)


def element_geometry(mesh, elem):
    """Area, diameter and the three barycentric gradients of one element.

    The gradients are constant 2-vectors satisfying ``sum_i grad_i = 0``.
    """
    if not 0 <= elem < mesh.n_elements:
        raise MeshError(f"element index {elem} out of range")
    return float(mesh.areas[elem]), float(mesh.h_tau[elem]), mesh.grads[elem].copy()


def bisect(mesh, marked):
    """Refine every marked element at least once; return a conforming mesh.

    Conformity closure marks additional refinement edges until the marked
    edge set is compatible, then each element is split into 2, 3 or 4
    children depending on how many of its edges are marked.  Boundary
    markers are inherited by sub-edges.  ``marked`` empty returns the
    input mesh unchanged.
    """
    if isinstance(marked, MarkedSet):
        idx = marked.indices
    else:
        idx = np.unique(np.asarray(list(marked), dtype=np.int64))
    if len(idx) == 0:
        return mesh
    if idx.min() < 0 or idx.max() >= mesh.n_elements:
        raise MeshError("marked set references elements outside the mesh")

    elem_edges = mesh.elem_edges
    edge_flag = np.zeros(len(mesh.edges), dtype=bool)
    edge_flag[elem_edges[idx, 0]] = True
    # closure: an element with any marked edge must have its refinement
    # edge marked; iterate to a fixpoint
    while True:
        any_marked = edge_flag[elem_edges].any(axis=1)
        need = any_marked & ~edge_flag[elem_edges[:, 0]]
        if not need.any():
            break
        edge_flag[elem_edges[need, 0]] = True

    n_old = mesh.n_vertices
    split_edges = np.flatnonzero(edge_flag)
    midpoint_of = {}
    new_vertex_parents = []
    new_coords = []
    for g in split_edges:
        a, b = int(mesh.edges[g, 0]), int(mesh.edges[g, 1])
        midpoint_of[g] = n_old + len(new_coords)
        new_vertex_parents.append((a, b))
        new_coords.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
    vertices = np.vstack([mesh.vertices, np.asarray(new_coords).reshape(-1, 2)])

    new_elems, new_parent, new_root = [], [], []

    def emit(tri, par):
        new_elems.append(tri)
        new_parent.append(par)
        new_root.append(int(mesh.root[par]))

    for t in range(mesh.n_elements):
        g0, g1, g2 = elem_edges[t]
        if not edge_flag[g0]:
            emit(tuple(mesh.elements[t]), t)
            continue
        v0, v1, v2 = (int(x) for x in mesh.elements[t])
        m0 = midpoint_of[g0]
        if edge_flag[g2]:
            m2 = midpoint_of[g2]
            emit((m2, m0, v0), t)
            emit((m2, v1, m0), t)
        else:
            emit((m0, v0, v1), t)
        if edge_flag[g1]:
            m1 = midpoint_of[g1]
            emit((m1, m0, v2), t)
            emit((m1, v0, m0), t)
        else:
            emit((m0, v2, v0), t)

    tag = {}
    for (a, b), m in mesh.boundary_tag.items():
        g = _edge_index(mesh, a, b)
        if g is not None and edge_flag[g]:
            mid = midpoint_of[g]
            tag[(min(a, mid), max(a, mid))] = m
            tag[(min(b, mid), max(b, mid))] = m
        else:
            tag[(a, b)] = m

    return Mesh(
        vertices=vertices,
        elements=np.asarray(new_elems, dtype=np.int64),
        generation=mesh.generation + 1,
        parent=np.asarray(new_parent, dtype=np.int64),
        root=np.asarray(new_root, dtype=np.int64),
        n_parent_vertices=n_old,
        vertex_parents=np.asarray(new_vertex_parents, dtype=np.int64).reshape(-1, 2),
        boundary_tag=tag,
    )


def _edge_index(mesh, a, b):
    key = np.array([min(a, b), max(a, b)])
    lo = np.searchsorted(mesh.edges[:, 0], key[0], side="left")
    hi = np.searchsorted(mesh.edges[:, 0], key[0], side="right")
    for g in range(lo, hi):
        if mesh.edges[g, 1] == key[1]:
            return g
    return None


def uniform_refine(mesh, rounds=1):
    """Bisect every element ``rounds`` times (marks the full mesh each round)."""
    for _ in range(rounds):
        mesh = bisect(mesh, MarkedSet(np.arange(mesh.n_elements)))
    return mesh


def check_stiffness_sign_condition(mesh, tol=1e-12):
    """Vertex pairs whose Laplace stiffness coupling is positive.

    Returns a list of ``(i, j, value)`` with ``i < j`` and
    ``int grad(xi_i) . grad(xi_j) > tol``.  Such pairs correspond to edges
    opposite obtuse angles.  Purely diagnostic; never blocks a run.
    """
    from scipy import sparse

    ne = mesh.n_elements
    gg = np.einsum("eik,ejk->eij", mesh.grads, mesh.grads) * mesh.areas[:, None, None]
    rows = np.repeat(mesh.elements, 3, axis=1).reshape(ne, 3, 3)
    cols = np.tile(mesh.elements, (1, 3)).reshape(ne, 3, 3)
    mat = sparse.coo_matrix(
        (gg.ravel(), (rows.ravel(), cols.ravel())),
        shape=(mesh.n_vertices, mesh.n_vertices),
    ).tocsr()
    mat = sparse.triu(mat, k=1).tocoo()
    out = [(int(i), int(j), float(v)) for i, j, v in zip(mat.row, mat.col, mat.data) if v > tol]
    out.sort()
    return out
