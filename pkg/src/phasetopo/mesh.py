"""Conforming 2D triangle meshes with labeled boundary edges.

Boundary labels follow a small naming convention: ``inlet-k`` and ``wall``
segments carry Dirichlet velocity data, ``outlet-k`` segments are natural
(do-nothing) outflow boundaries.  Indices are 0-based everywhere, including
the text format.
"""

import io
import re
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, MeshFormatError, MeshTopologyError
from .expr import Expression

LABEL_RE = re.compile(r"^[a-z0-9_-]+$")
FORMAT_HEADER = "mesh2d 1"


def label_class(label):
    """Return ``"dirichlet"`` or ``"neumann"`` for a boundary label."""
    if label == "wall" or label.startswith("wall-") or label.startswith("inlet"):
        return "dirichlet"
    if label.startswith("outlet"):
        return "neumann"
    raise ConfigurationError(f"boundary label {label!r} is neither inlet, wall nor outlet")


def _readonly(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Mesh:
    """Immutable triangle mesh.

    Attributes
    ----------
    vertices : (V, 2) float array
    triangles : (T, 3) int array, counterclockwise
    boundary_edges : (B, 2) int array
    boundary_labels : tuple of str, one per boundary edge
    """

    vertices: np.ndarray
    triangles: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: tuple
    domain_area: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "vertices", _readonly(self.vertices, float).reshape(-1, 2))
        object.__setattr__(self, "triangles", _readonly(self.triangles, np.int64).reshape(-1, 3))
        object.__setattr__(self, "boundary_edges", _readonly(self.boundary_edges, np.int64).reshape(-1, 2))
        object.__setattr__(self, "boundary_labels", tuple(str(s) for s in self.boundary_labels))
        validate(self)
        object.__setattr__(self, "domain_area", float(self.signed_areas().sum()))

    @property
    def n_vertices(self):
        return self.vertices.shape[0]

    @property
    def n_triangles(self):
        return self.triangles.shape[0]

    def signed_areas(self):
        p = self.vertices[self.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def edges(self):
        """Unique undirected edges as a sorted (E, 2) array."""
        e = np.sort(self.triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        return np.unique(e, axis=0)

    def boundary_edge_lengths(self):
        p = self.vertices[self.boundary_edges]
        return np.linalg.norm(p[:, 1] - p[:, 0], axis=1)

    def edges_with_label(self, label):
        mask = np.array([lab == label for lab in self.boundary_labels], dtype=bool)
        return self.boundary_edges[mask]

    def labels(self):
        return sorted(set(self.boundary_labels))

    def h(self):
        """Largest element diameter."""
        p = self.vertices[self.triangles]
        lens = np.linalg.norm(p[:, [1, 2, 0]] - p, axis=2)
        return float(lens.max())

    def __eq__(self, other):
        if not isinstance(other, Mesh):
            return NotImplemented
        return (np.array_equal(self.vertices, other.vertices)
                and np.array_equal(self.triangles, other.triangles)
                and np.array_equal(self.boundary_edges, other.boundary_edges)
                and self.boundary_labels == other.boundary_labels)

    __hash__ = None


def validate(mesh):
    """Check every mesh invariant; raise :class:`MeshTopologyError` otherwise."""
    V = mesh.vertices.shape[0]
    tri = mesh.triangles
    if tri.size and (tri.min() < 0 or tri.max() >= V):
        bad = int(np.nonzero((tri < 0).any(axis=1) | (tri >= V).any(axis=1))[0][0])
        raise MeshTopologyError(f"triangle {bad} references a missing vertex", entity=("triangle", bad))
    areas = mesh.signed_areas()
    nonpos = np.nonzero(areas <= 0.0)[0]
    if nonpos.size:
        k = int(nonpos[0])
        raise MeshTopologyError(
            f"triangle {k} has non-positive signed area {areas[k]:.3e} (clockwise or degenerate)",
            entity=("triangle", k))

    all_edges = np.sort(tri[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
    uniq, counts = np.unique(all_edges, axis=0, return_counts=True)
    if (counts > 2).any():
        e = uniq[np.argmax(counts > 2)]
        raise MeshTopologyError(f"edge {tuple(int(i) for i in e)} is shared by more than 2 triangles",
                                entity=("edge", tuple(int(i) for i in e)))
    topo_boundary = {tuple(e) for e in uniq[counts == 1].tolist()}

    be = mesh.boundary_edges
    if len(mesh.boundary_labels) != be.shape[0]:
        raise MeshTopologyError("boundary label count differs from boundary edge count")
    if be.size and (be.min() < 0 or be.max() >= V):
        bad = int(np.nonzero((be < 0).any(axis=1) | (be >= V).any(axis=1))[0][0])
        raise MeshTopologyError(f"boundary edge {bad} references a missing vertex",
                                entity=("boundary_edge", bad))
    listed = {}
    for k, (e, lab) in enumerate(zip(np.sort(be, axis=1).tolist(), mesh.boundary_labels)):
        key = tuple(e)
        if not LABEL_RE.match(lab):
            raise MeshTopologyError(f"boundary edge {k} has malformed label {lab!r}", entity=("boundary_edge", k))
        if key in listed:
            raise MeshTopologyError(f"boundary edge {k} duplicates edge {listed[key]}", entity=("boundary_edge", k))
        if key not in topo_boundary:
            raise MeshTopologyError(f"boundary edge {k} {key} is not on the mesh boundary",
                                    entity=("boundary_edge", k))
        listed[key] = k
    missing = topo_boundary - set(listed)
    if missing:
        e = sorted(missing)[0]
        mid = mesh.vertices[list(e)].mean(axis=0)
        raise MeshTopologyError(
            f"unlabeled boundary edge {e} with midpoint ({mid[0]:.6g}, {mid[1]:.6g})", entity=("edge", e))
    # closed polygon(s): every boundary vertex has boundary degree 2
    if be.size:
        deg = np.bincount(be.ravel(), minlength=V)
        bad = np.nonzero((deg != 0) & (deg != 2))[0]
        if bad.size:
            raise MeshTopologyError(f"boundary is not a closed polygon at vertex {int(bad[0])}",
                                    entity=("vertex", int(bad[0])))


# ---------------------------------------------------------------------------
# Boundary specifications


@dataclass(frozen=True)
class Segment:
    """One named boundary segment.

    ``predicate(x, y)`` is evaluated on edge midpoints (arrays) and returns a
    boolean mask.  Dirichlet segments may carry a velocity ``profile``, a pair
    of expressions; walls default to no-slip.
    """

    label: str
    predicate: Callable
    profile: Optional[tuple] = None

    def __post_init__(self):
        if not LABEL_RE.match(self.label):
            raise ConfigurationError(f"malformed boundary label {self.label!r}")
        kind = label_class(self.label)
        if self.profile is not None:
            if kind != "dirichlet":
                raise ConfigurationError(f"outflow segment {self.label!r} cannot carry a velocity profile")
            prof = tuple(p if isinstance(p, Expression) else Expression(p) for p in self.profile)
            if len(prof) != 2:
                raise ConfigurationError(f"profile of {self.label!r} needs two components")
            object.__setattr__(self, "profile", prof)

    @property
    def kind(self):
        return label_class(self.label)

    def velocity(self, x, y):
        """Prescribed velocity at points; zero when no profile is set."""
        x = np.asarray(x, dtype=float)
        if self.profile is None:
            return np.zeros(x.shape + (2,))
        return np.stack([self.profile[0](x, y), self.profile[1](x, y)], axis=-1)


@dataclass(frozen=True)
class BoundarySpec:
    segments: Sequence[Segment]
    name: str = "custom"

    def __post_init__(self):
        object.__setattr__(self, "segments", tuple(self.segments))
        labels = [s.label for s in self.segments]
        if len(set(labels)) != len(labels):
            raise ConfigurationError(f"duplicate segment labels in boundary spec {self.name!r}")

    def segment(self, label):
        for s in self.segments:
            if s.label == label:
                return s
        raise ConfigurationError(f"boundary spec {self.name!r} has no segment {label!r}", key=label)

    def classify(self, midpoints):
        """Label each midpoint; every one must match exactly one segment."""
        midpoints = np.asarray(midpoints, dtype=float).reshape(-1, 2)
        hits = np.zeros((len(self.segments), midpoints.shape[0]), dtype=bool)
        for k, seg in enumerate(self.segments):
            hits[k] = np.broadcast_to(np.asarray(seg.predicate(midpoints[:, 0], midpoints[:, 1]), bool),
                                      (midpoints.shape[0],))
        n = hits.sum(axis=0)
        if (n == 0).any():
            m = midpoints[np.argmax(n == 0)]
            raise ConfigurationError(
                f"boundary edge with midpoint ({m[0]:.6g}, {m[1]:.6g}) is not covered by spec {self.name!r}")
        if (n > 1).any():
            m = midpoints[np.argmax(n > 1)]
            raise ConfigurationError(
                f"boundary edge with midpoint ({m[0]:.6g}, {m[1]:.6g}) matches several segments of {self.name!r}")
        return [self.segments[i].label for i in np.argmax(hits, axis=0)]


def _near(a, b, tol=1e-9):
    return np.abs(np.asarray(a) - b) <= tol


def all_wall_spec():
    return BoundarySpec([Segment("wall", lambda x, y: np.ones_like(x, dtype=bool))], name="all-wall")


def plug_flow_spec(ux="1.0", uy="0.0"):
    """Whole boundary is a single inlet with a constant (or given) profile."""
    return BoundarySpec([Segment("inlet-1", lambda x, y: np.ones_like(x, dtype=bool), (ux, uy))],
                        name="plug")


def diffuser_spec():
    """Unit square: inlet u=(1,0) on x=0, outlet y in [1/3, 2/3] on x=1."""
    def inlet(x, y):
        return _near(x, 0.0)

    def outlet(x, y):
        return _near(x, 1.0) & (y >= 1.0 / 3.0) & (y <= 2.0 / 3.0)

    def wall(x, y):
        return ~inlet(x, y) & ~outlet(x, y)

    return BoundarySpec([
        Segment("inlet-1", inlet, ("1.0", "0.0")),
        Segment("outlet-1", outlet),
        Segment("wall", wall),
    ], name="diffuser")


BYPASS_PROFILE = "-50*(y**2 - 0.35**2)*(y**2 - 0.15**2)"


def bypass_spec():
    """[0,1.5]x[-0.5,0.5]: two inlets on x=0, two outlets on x=1.5 at 0.15<|y|<0.35."""
    def band(y, lo, hi):
        return (y >= lo) & (y <= hi)

    def in1(x, y):
        return _near(x, 0.0) & band(y, 0.15, 0.35)

    def in2(x, y):
        return _near(x, 0.0) & band(y, -0.35, -0.15)

    def out1(x, y):
        return _near(x, 1.5) & band(y, 0.15, 0.35)

    def out2(x, y):
        return _near(x, 1.5) & band(y, -0.35, -0.15)

    def wall(x, y):
        return ~(in1(x, y) | in2(x, y) | out1(x, y) | out2(x, y))

    return BoundarySpec([
        Segment("inlet-1", in1, (BYPASS_PROFILE, "0.0")),
        Segment("inlet-2", in2, (BYPASS_PROFILE, "0.0")),
        Segment("outlet-1", out1),
        Segment("outlet-2", out2),
        Segment("wall", wall),
    ], name="bypass")


BOUNDARY_PRESETS = {
    "all-wall": all_wall_spec,
    "plug": plug_flow_spec,
    "diffuser": diffuser_spec,
    "bypass": bypass_spec,
}


# ---------------------------------------------------------------------------
# Construction and I/O


def _boundary_edges_ccw(triangles):
    """Boundary edges oriented as in their (counterclockwise) triangle."""
    directed = triangles[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2)
    key = np.sort(directed, axis=1)
    _, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    return directed[counts[inv.ravel()] == 1]


def mesh_from_triangles(vertices, triangles, spec):
    """Build a :class:`Mesh`, labeling the topological boundary via ``spec``."""
    vertices = np.asarray(vertices, dtype=float)
    triangles = np.asarray(triangles, dtype=np.int64)
    be = _boundary_edges_ccw(triangles)
    labels = spec.classify(vertices[be].mean(axis=1))
    return Mesh(vertices, triangles, be, labels)


def generate_rect_mesh(x_range, y_range, nx, ny, spec):
    """Structured triangulation of a rectangle with alternating diagonals.

    Each grid cell is split along one diagonal; the direction alternates in a
    checkerboard pattern, so the mesh is mirror symmetric about both
    midlines when ``nx`` and ``ny`` are even.  Produces ``(nx+1)*(ny+1)``
    vertices and ``2*nx*ny`` triangles.
    """
    nx, ny = int(nx), int(ny)
    if nx < 2 or ny < 2:
        raise ConfigurationError("nx and ny must be at least 2")
    (x0, x1), (y0, y1) = map(tuple, (x_range, y_range))
    if not (x1 > x0 and y1 > y0):
        raise ConfigurationError("mesh intervals must be nondegenerate")
    xs = np.linspace(x0, x1, nx + 1)
    ys = np.linspace(y0, y1, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    vertices = np.column_stack([X.ravel(), Y.ravel()])

    j, i = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    i, j = i.ravel(), j.ravel()
    v00 = j * (nx + 1) + i
    v10 = v00 + 1
    v01 = v00 + nx + 1
    v11 = v01 + 1
    even = (i + j) % 2 == 0
    t_a = np.where(even[:, None], np.column_stack([v00, v10, v11]), np.column_stack([v00, v10, v01]))
    t_b = np.where(even[:, None], np.column_stack([v00, v11, v01]), np.column_stack([v10, v11, v01]))
    triangles = np.stack([t_a, t_b], axis=1).reshape(-1, 3)
    return mesh_from_triangles(vertices, triangles, spec)


def dump_mesh(mesh):
    """Serialize to the line-oriented ``mesh2d 1`` text format."""
    out = io.StringIO()
    out.write(FORMAT_HEADER + "\n")
    out.write(f"vertices {mesh.n_vertices}\n")
    for x, y in mesh.vertices.tolist():
        out.write(f"{x!r} {y!r}\n")
    out.write(f"triangles {mesh.n_triangles}\n")
    for a, b, c in mesh.triangles.tolist():
        out.write(f"{a} {b} {c}\n")
    out.write(f"boundary_edges {mesh.boundary_edges.shape[0]}\n")
    for (a, b), lab in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels):
        out.write(f"{a} {b} {lab}\n")
    return out.getvalue()


def load_mesh(text):
    """Parse mesh text (``str`` or ``bytes``) and validate eagerly."""
    if isinstance(text, (bytes, bytearray)):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MeshFormatError(f"mesh text is not UTF-8: {exc}")
    lines = [(n + 1, ln.strip()) for n, ln in enumerate(text.splitlines())]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    pos = 0

    def take():
        nonlocal pos
        if pos >= len(lines):
            last = lines[-1][0] if lines else 0
            raise MeshFormatError("unexpected end of file", line=last + 1)
        item = lines[pos]
        pos += 1
        return item

    n, ln = take()
    if ln != FORMAT_HEADER:
        raise MeshFormatError(f"expected header {FORMAT_HEADER!r}, got {ln!r}", line=n)

    def section(name):
        n, ln = take()
        parts = ln.split()
        if len(parts) != 2 or parts[0] != name:
            raise MeshFormatError(f"expected '{name} <count>', got {ln!r}", line=n)
        try:
            count = int(parts[1])
        except ValueError:
            raise MeshFormatError(f"bad count {parts[1]!r}", line=n)
        if count < 0:
            raise MeshFormatError("negative count", line=n)
        return count

    nv = section("vertices")
    verts = np.empty((nv, 2))
    for k in range(nv):
        n, ln = take()
        parts = ln.split()
        try:
            if len(parts) != 2:
                raise ValueError
            verts[k] = [float(parts[0]), float(parts[1])]
        except ValueError:
            raise MeshFormatError(f"vertex {k}: expected 'x y', got {ln!r}", line=n)

    def index_row(n, ln, n_idx, what, k):
        parts = ln.split()
        if len(parts) != 3:
            raise MeshFormatError(f"{what} {k}: expected 3 fields, got {ln!r}", line=n)
        try:
            idx = [int(p) for p in parts[:n_idx]]
        except ValueError:
            raise MeshFormatError(f"{what} {k}: non-integer vertex index in {ln!r}", line=n)
        for i in idx:
            if i < 0 or i >= nv:
                raise MeshFormatError(f"{what} {k} references missing vertex {i}", line=n)
        return idx, parts

    nt = section("triangles")
    tris = np.empty((nt, 3), dtype=np.int64)
    for k in range(nt):
        n, ln = take()
        tris[k], _ = index_row(n, ln, 3, "triangle", k)

    nb = section("boundary_edges")
    bes = np.empty((nb, 2), dtype=np.int64)
    labels = []
    for k in range(nb):
        n, ln = take()
        idx, parts = index_row(n, ln, 2, "boundary edge", k)
        if not LABEL_RE.match(parts[2]):
            raise MeshFormatError(f"boundary edge {k}: malformed label {parts[2]!r}", line=n)
        bes[k] = idx
        labels.append(parts[2])
    if pos != len(lines):
        raise MeshFormatError("trailing content after boundary_edges", line=lines[pos][0])
    return Mesh(verts, tris, bes, labels)


def boundary_dofs(mesh, kind):
    """Vertex indices on boundary edges of class ``kind`` (``dirichlet``/``neumann``).

    Vertices where a Dirichlet and a Neumann segment meet belong to the
    Dirichlet set only.
    """
    if kind not in ("dirichlet", "neumann"):
        raise ConfigurationError(f"unknown boundary class {kind!r}")
    classes = np.array([label_class(lab) for lab in mesh.boundary_labels])
    dir_v = np.unique(mesh.boundary_edges[classes == "dirichlet"])
    if kind == "dirichlet":
        return dir_v
    neu_v = np.unique(mesh.boundary_edges[classes == "neumann"])
    return np.setdiff1d(neu_v, dir_v)


def dirichlet_vertex_values(mesh, spec):
    """Prescribed vertex velocities on the Dirichlet set, shape (nD, 2).

    Returns ``(indices, values)``.  A vertex touching a wall edge is no-slip
    even if it also touches an inlet edge.
    """
    idx = boundary_dofs(mesh, "dirichlet")
    values = np.zeros((idx.size, 2))
    pos = {int(v): k for k, v in enumerate(idx)}
    wall_v = set()
    for (a, b), lab in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels):
        if label_class(lab) == "dirichlet" and spec.segment(lab).profile is None:
            wall_v.update((a, b))
    for (a, b), lab in zip(mesh.boundary_edges.tolist(), mesh.boundary_labels):
        seg = spec.segment(lab)
        if seg.kind != "dirichlet" or seg.profile is None:
            continue
        for v in (a, b):
            if v in wall_v:
                continue
            x, y = mesh.vertices[v]
            values[pos[v]] = seg.velocity(np.array([x]), np.array([y]))[0]
    return idx, values
