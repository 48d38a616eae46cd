"""Finite-element kernels: quadrature, P1 and MINI bases, sparse assembly
and the two linear solvers (SPD and saddle point).

Conventions
-----------
Scalar P1 dofs are vertex indices.  The scalar MINI space numbers the
``V`` vertex functions first and then one bubble per triangle, so triangle
``t`` owns bubble dof ``V + t``.  The vector MINI space stacks the two
components: dof ``c * (V + T) + s`` is component ``c`` of scalar dof ``s``.
The bubble is normalized to ``27 * l1 * l2 * l3`` (value 1 at the centroid).
"""

from dataclasses import dataclass
from itertools import permutations

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SingularMatrixError, SolverError

# ---------------------------------------------------------------------------
# Quadrature


@dataclass(frozen=True)
class QuadratureRule:
    """Barycentric points (n, 3) and weights summing to one.

    The integral over a triangle ``K`` is ``|K| * sum(w * f(points))``.
    """

    points: np.ndarray
    weights: np.ndarray
    degree: int

    @property
    def n_points(self):
        return self.weights.size


def _orbit(*bary):
    seen = {}
    for perm in permutations(bary):
        seen.setdefault(tuple(round(v, 13) for v in perm), perm)
    return [seen[k] for k in sorted(seen)]


def _rule(groups, degree):
    pts, wts = [], []
    for w, (a, b) in groups:
        orbit = _orbit(a, b, 1.0 - a - b)
        pts.extend(orbit)
        wts.extend([w] * len(orbit))
    pts = np.array(pts, dtype=float)
    wts = np.array(wts, dtype=float)
    return QuadratureRule(pts, wts / wts.sum(), degree)


def _dunavant():
    t = 1.0 / 3.0
    rules = {
        1: _rule([(1.0, (t, t))], 1),
        2: _rule([(1.0 / 3.0, (2.0 / 3.0, 1.0 / 6.0))], 2),
        4: _rule([
            (0.223381589678011, (0.445948490915965, 0.445948490915965)),
            (0.109951743655322, (0.091576213509771, 0.091576213509771)),
        ], 4),
        5: _rule([
            (0.225, (t, t)),
            (0.132394152788506, (0.470142064105115, 0.470142064105115)),
            (0.125939180544827, (0.101286507323456, 0.101286507323456)),
        ], 5),
        6: _rule([
            (0.116786275726379, (0.249286745170910, 0.249286745170910)),
            (0.050844906370207, (0.063089014491502, 0.063089014491502)),
            (0.082851075618374, (0.053145049844817, 0.310352451033784)),
        ], 6),
    }
    rules[3] = rules[4]
    return rules


_RULES = _dunavant()


def quadrature_rule(degree):
    """Symmetric rule exact for polynomials of total degree ``degree`` (1..6)."""
    try:
        return _RULES[int(degree)]
    except KeyError:
        raise ValueError(f"unsupported quadrature degree {degree}; supported: 1..6") from None


# ---------------------------------------------------------------------------
# Geometry and spaces


@dataclass(frozen=True)
class Geometry:
    """Per-triangle affine-map data, cached on the mesh."""

    area: np.ndarray      # (T,)
    grad_l: np.ndarray    # (T, 3, 2) gradients of barycentric coordinates


def geometry(mesh):
    geo = mesh.__dict__.get("_geometry")
    if geo is None:
        p = mesh.vertices[mesh.triangles]
        d1 = p[:, 1] - p[:, 0]
        d2 = p[:, 2] - p[:, 0]
        det = d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0]
        if (np.abs(det) <= 0).any():
            raise ValueError(f"degenerate triangle {int(np.argmin(np.abs(det)))}")
        # rows of J^{-T} give grad(l1), grad(l2)
        g1 = np.column_stack([d2[:, 1], -d2[:, 0]]) / det[:, None]
        g2 = np.column_stack([-d1[:, 1], d1[:, 0]]) / det[:, None]
        grad_l = np.stack([-g1 - g2, g1, g2], axis=1)
        geo = Geometry(0.5 * det, grad_l)
        object.__setattr__(mesh, "_geometry", geo)
    return geo


class FunctionSpace:
    """Scalar P1 or 2D vector MINI (P1 + cubic bubble) space on a mesh."""

    KINDS = ("scalar-P1", "vector-MINI")

    def __init__(self, mesh, kind):
        if kind not in self.KINDS:
            raise ValueError(f"unknown space kind {kind!r}")
        self.mesh = mesh
        self.kind = kind
        V, T = mesh.n_vertices, mesh.n_triangles
        if kind == "scalar-P1":
            self.n_scalar = V
            self.dof_count = V
            self.cell_dofs = mesh.triangles.copy()
        else:
            self.n_scalar = V + T
            self.dof_count = 2 * (V + T)
            self.cell_dofs = np.column_stack([mesh.triangles, V + np.arange(T)])

    def __repr__(self):
        return f"FunctionSpace({self.kind}, dofs={self.dof_count})"

    def component_dofs(self, c):
        """Global dofs of velocity component ``c`` (vector space only)."""
        return c * self.n_scalar + np.arange(self.n_scalar)


def tabulate(rule):
    """Reference data at quadrature points.

    Returns ``(p1, bub, bub_dl)``: P1 values (nq, 3), bubble values (nq,),
    and the coefficients (nq, 3) such that ``grad b = sum_i bub_dl[:, i] grad l_i``.
    """
    lam = rule.points
    bub = 27.0 * lam.prod(axis=1)
    bub_dl = 27.0 * np.column_stack([lam[:, 1] * lam[:, 2], lam[:, 0] * lam[:, 2], lam[:, 0] * lam[:, 1]])
    return lam.copy(), bub, bub_dl


@dataclass(frozen=True)
class MiniTables:
    """Scalar MINI basis (3 P1 + bubble) on every element at quadrature points."""

    rule: QuadratureRule
    values: np.ndarray   # (nq, 4)
    grads: np.ndarray    # (T, nq, 4, 2)
    wdet: np.ndarray     # (T, nq) quadrature weight times area
    p1: np.ndarray       # (nq, 3) P1 values (for pressure / phase data)


def mini_tables(mesh, degree=6):
    key = f"_mini_tables_{degree}"
    tab = mesh.__dict__.get(key)
    if tab is None:
        geo = geometry(mesh)
        rule = quadrature_rule(degree)
        p1, bub, bub_dl = tabulate(rule)
        values = np.column_stack([p1, bub])
        nq = rule.n_points
        T = mesh.n_triangles
        grads = np.empty((T, nq, 4, 2))
        grads[:, :, :3, :] = geo.grad_l[:, None, :, :]
        grads[:, :, 3, :] = np.einsum("qi,tid->tqd", bub_dl, geo.grad_l)
        wdet = geo.area[:, None] * rule.weights[None, :]
        tab = MiniTables(rule, values, grads, wdet, p1)
        object.__setattr__(mesh, key, tab)
    return tab


def eval_basis(space, triangle, point):
    """Basis values and physical gradients on one triangle.

    ``point`` is barycentric.  For scalar P1 returns arrays of shape (3,)
    and (3, 2).  For vector MINI returns (8, 2) values and (8, 2, 2)
    gradients (``grad[k, c, d] = d(phi_k)_c / dx_d``), ordered as the four
    scalar functions for component 0 followed by those for component 1.
    """
    lam = np.asarray(point, dtype=float)
    if lam.shape != (3,) or (lam < -1e-14).any() or abs(lam.sum() - 1.0) > 1e-12:
        raise ValueError(f"point {point!r} is not inside the reference triangle")
    geo = geometry(space.mesh)
    gl = geo.grad_l[triangle]
    if space.kind == "scalar-P1":
        return lam.copy(), gl.copy()
    bval = 27.0 * lam.prod()
    bdl = 27.0 * np.array([lam[1] * lam[2], lam[0] * lam[2], lam[0] * lam[1]])
    sval = np.append(lam, bval)
    sgrad = np.vstack([gl, bdl @ gl])
    values = np.zeros((8, 2))
    grads = np.zeros((8, 2, 2))
    for c in range(2):
        values[4 * c:4 * c + 4, c] = sval
        grads[4 * c:4 * c + 4, c, :] = sgrad
    return values, grads


# ---------------------------------------------------------------------------
# Assembly helpers


def assemble(rows, cols, vals, shape):
    """Sum element contributions into a CSR matrix (duplicates added)."""
    A = sp.coo_matrix((np.ravel(vals), (np.ravel(rows), np.ravel(cols))), shape=shape).tocsr()
    A.sum_duplicates()
    A.sort_indices()
    return A


def _cell_pairs(cell_dofs):
    n = cell_dofs.shape[1]
    rows = np.repeat(cell_dofs, n, axis=1)
    cols = np.tile(cell_dofs, (1, n))
    return rows, cols


def p1_mass(mesh):
    """Consistent P1 mass matrix."""
    area = geometry(mesh).area
    local = (np.ones((3, 3)) + np.eye(3)) / 12.0
    rows, cols = _cell_pairs(mesh.triangles)
    vals = area[:, None] * local.ravel()[None, :]
    n = mesh.n_vertices
    return assemble(rows, cols, vals, (n, n))


def p1_lumped_mass(mesh):
    """Row sums of the P1 mass matrix (|K|/3 per vertex of K)."""
    area = geometry(mesh).area
    return np.bincount(mesh.triangles.ravel(), weights=np.repeat(area / 3.0, 3), minlength=mesh.n_vertices)


def p1_stiffness(mesh):
    """P1 stiffness matrix ``(grad u, grad v)``."""
    geo = geometry(mesh)
    local = np.einsum("tid,tjd->tij", geo.grad_l, geo.grad_l) * geo.area[:, None, None]
    rows, cols = _cell_pairs(mesh.triangles)
    n = mesh.n_vertices
    return assemble(rows, cols, local.reshape(len(local), -1), (n, n))


def mini_mass(mesh):
    """Velocity mass matrix on the vector MINI space."""
    tab = mini_tables(mesh)
    local = np.einsum("tq,qa,qb->tab", tab.wdet, tab.values, tab.values)
    space = FunctionSpace(mesh, "vector-MINI")
    n = space.dof_count
    rows, cols = _cell_pairs(space.cell_dofs)
    flat = local.reshape(len(local), -1)
    R = np.concatenate([rows, rows + space.n_scalar])
    C = np.concatenate([cols, cols + space.n_scalar])
    return assemble(R, C, np.concatenate([flat, flat]), (n, n))


def p1_interpolate(mesh, func):
    """Nodal values of ``func(x, y)`` at the vertices."""
    return np.asarray(func(mesh.vertices[:, 0], mesh.vertices[:, 1]), dtype=float)


# ---------------------------------------------------------------------------
# Linear solvers


def solve_spd(A, b, tol=1e-13, maxiter=None):
    """Jacobi-preconditioned conjugate gradients.

    Guarantees ``||A x - b|| <= tol * ||b||`` or raises :class:`SolverError`
    carrying the residual history.
    """
    A = sp.csr_matrix(A)
    b = np.asarray(b, dtype=float)
    n = b.size
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros(n)
    diag = A.diagonal()
    if (diag <= 0).any():
        raise SolverError("matrix has a non-positive diagonal entry; not SPD")
    inv_d = 1.0 / diag
    maxiter = maxiter or max(10 * n, 100)

    x = inv_d * b
    r = b - A @ x
    z = inv_d * r
    p = z.copy()
    rz = r @ z
    history = [np.linalg.norm(r) / bnorm]
    for _ in range(maxiter):
        if history[-1] <= tol:
            break
        Ap = A @ p
        pAp = p @ Ap
        if pAp <= 0.0:
            raise SolverError("conjugate gradient breakdown (p.Ap <= 0)", history)
        a = rz / pAp
        x += a * p
        r -= a * Ap
        history.append(np.linalg.norm(r) / bnorm)
        z = inv_d * r
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    # recurrence drifts from the true residual; confirm
    true_res = np.linalg.norm(b - A @ x) / bnorm
    if true_res > tol:
        raise SolverError(f"CG did not reach tol {tol:.1e} (residual {true_res:.3e})", history)
    return x


def _zero_row(A):
    A = sp.csr_matrix(A)
    nnz = np.diff(A.indptr)
    absrow = np.asarray(abs(A).sum(axis=1)).ravel()
    bad = np.nonzero((nnz == 0) | (absrow == 0.0))[0]
    return int(bad[0]) if bad.size else None


class SaddleFactor:
    """Sparse LU factorization with threshold partial pivoting, reusable for
    several right-hand sides and for transposed solves."""

    def __init__(self, A):
        A = sp.csc_matrix(A)
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"matrix must be square, got {A.shape}")
        self.A = A
        zr = _zero_row(A)
        if zr is not None:
            raise SingularMatrixError(f"matrix is singular: row {zr} is identically zero", pivot=zr)
        zc = _zero_row(A.T)
        if zc is not None:
            raise SingularMatrixError(f"matrix is singular: column {zc} is identically zero", pivot=zc)
        try:
            self.lu = spla.splu(A, permc_spec="COLAMD", diag_pivot_thresh=0.1)
        except RuntimeError as exc:
            pivot = None
            msg = str(exc)
            for tok in msg.replace(",", " ").split():
                if tok.isdigit():
                    pivot = int(tok)
            raise SingularMatrixError(f"LU factorization failed: {msg}", pivot=pivot) from None

    def solve(self, b, trans=False):
        b = np.asarray(b, dtype=float)
        t = "T" if trans else "N"
        M = self.A.T if trans else self.A
        x = self.lu.solve(b, trans=t)
        tol = 1e-10 * max(1.0, np.linalg.norm(b))
        res = np.linalg.norm(M @ x - b)
        history = [res]
        for _ in range(3):
            if res <= tol:
                break
            x = x + self.lu.solve(b - M @ x, trans=t)
            res = np.linalg.norm(M @ x - b)
            history.append(res)
        if not np.isfinite(res) or res > tol:
            raise SolverError(f"direct solve residual {res:.3e} exceeds {tol:.3e}", history)
        return x


def solve_saddle(A, b):
    """Direct sparse solve of a nonsingular (possibly indefinite) system."""
    return SaddleFactor(A).solve(b)


@dataclass(frozen=True)
class P1Operators:
    mass: sp.csr_matrix
    stiffness: sp.csr_matrix
    lumped: np.ndarray


def p1_operators(mesh):
    """Cached consistent mass, stiffness and lumped mass for the P1 space."""
    ops = mesh.__dict__.get("_p1_ops")
    if ops is None:
        ops = P1Operators(p1_mass(mesh), p1_stiffness(mesh), p1_lumped_mass(mesh))
        object.__setattr__(mesh, "_p1_ops", ops)
    return ops


class Pattern:
    """Fixed sparsity pattern for repeated assembly with the same element
    index arrays; entries are summed with ``np.bincount`` in a fixed order."""

    def __init__(self, rows, cols, shape):
        rows = np.ravel(rows).astype(np.int64)
        cols = np.ravel(cols).astype(np.int64)
        key = rows * shape[1] + cols
        uniq, self.inverse = np.unique(key, return_inverse=True)
        self.shape = shape
        self.nnz = uniq.size
        self.rows = uniq // shape[1]
        self.cols = uniq % shape[1]
        self.indices = self.cols.copy()
        self.indptr = np.searchsorted(self.rows, np.arange(shape[0] + 1)).astype(np.int64)

    def data(self, vals):
        return np.bincount(self.inverse, weights=np.ravel(vals), minlength=self.nnz)

    def matrix(self, data):
        return sp.csr_matrix((data, self.indices.copy(), self.indptr.copy()), shape=self.shape)

    def position(self, rows, cols):
        """Data index of each (row, col) pair; pairs must be in the pattern."""
        key = np.asarray(rows) * self.shape[1] + np.asarray(cols)
        flat = self.rows * self.shape[1] + self.cols
        pos = np.searchsorted(flat, key)
        if (pos >= self.nnz).any() or (flat[np.minimum(pos, self.nnz - 1)] != key).any():
            raise KeyError("entry not in sparsity pattern")
        return pos
