"""Taylor-Hood (P2/P1) spaces, sparse assembly, boundary conditions, norms.

Velocity is a continuous piecewise-quadratic vector field with degrees of
freedom at vertices and edge midpoints, two components interleaved
(dof = 2*node + component).  Pressure is continuous piecewise linear on the
vertices.  All forms are integrated with fixed symmetric triangle rules:
degree 4 for products of quadratic basis functions, degree 5 for the
convection form, which is exact for every term assembled here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .mesh import LABEL_IDS, Mesh, MeshError

__all__ = [
    "DofMap",
    "State",
    "build_dof_map",
    "assemble_mass",
    "assemble_stiffness",
    "assemble_divergence",
    "assemble_convection",
    "assemble_load",
    "interpolate",
    "dirichlet_dofs",
    "apply_dirichlet",
    "estimate_lambda1",
    "l2_norm",
    "h1_seminorm",
    "relative_l2_error",
    "EigenSolveError",
]

# symmetric Gauss rules on the reference triangle (barycentric, weights sum 1)
_QUAD4_B = np.array(
    [
        [0.108103018168070, 0.445948490915965, 0.445948490915965],
        [0.445948490915965, 0.108103018168070, 0.445948490915965],
        [0.445948490915965, 0.445948490915965, 0.108103018168070],
        [0.816847572980459, 0.091576213509771, 0.091576213509771],
        [0.091576213509771, 0.816847572980459, 0.091576213509771],
        [0.091576213509771, 0.091576213509771, 0.816847572980459],
    ]
)
_QUAD4_W = np.array([0.223381589678011] * 3 + [0.109951743655322] * 3)

_QUAD5_B = np.array(
    [
        [1 / 3, 1 / 3, 1 / 3],
        [0.059715871789770, 0.470142064105115, 0.470142064105115],
        [0.470142064105115, 0.059715871789770, 0.470142064105115],
        [0.470142064105115, 0.470142064105115, 0.059715871789770],
        [0.797426985353087, 0.101286507323456, 0.101286507323456],
        [0.101286507323456, 0.797426985353087, 0.101286507323456],
        [0.101286507323456, 0.101286507323456, 0.797426985353087],
    ]
)
_QUAD5_W = np.array(
    [0.225]
    + [0.132394152788506] * 3
    + [0.125939180544827] * 3
)


def _p2_values(bary: np.ndarray) -> np.ndarray:
    """P2 basis at barycentric points; local order v0 v1 v2 m01 m12 m20."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    return np.column_stack(
        [
            l0 * (2 * l0 - 1),
            l1 * (2 * l1 - 1),
            l2 * (2 * l2 - 1),
            4 * l0 * l1,
            4 * l1 * l2,
            4 * l2 * l0,
        ]
    )


def _p2_grads(bary: np.ndarray) -> np.ndarray:
    """Reference gradients (nq, 6, 2) w.r.t. (l1, l2) with l0 = 1-l1-l2."""
    l0, l1, l2 = bary[:, 0], bary[:, 1], bary[:, 2]
    nq = len(bary)
    g = np.zeros((nq, 6, 2))
    g[:, 0, 0] = -(4 * l0 - 1)
    g[:, 0, 1] = -(4 * l0 - 1)
    g[:, 1, 0] = 4 * l1 - 1
    g[:, 2, 1] = 4 * l2 - 1
    g[:, 3, 0] = 4 * (l0 - l1)
    g[:, 3, 1] = -4 * l1
    g[:, 4, 0] = 4 * l2
    g[:, 4, 1] = 4 * l1
    g[:, 5, 0] = -4 * l2
    g[:, 5, 1] = 4 * (l0 - l2)
    return g


def _p1_values(bary: np.ndarray) -> np.ndarray:
    return bary.copy()


_P1_GRADS = np.array([[-1.0, -1.0], [1.0, 0.0], [0.0, 1.0]])  # w.r.t. (l1, l2)


@dataclass
class DofMap:
    """Degree-of-freedom numbering of one Taylor-Hood component space."""

    space: str  # "velocity_quadratic_vector" | "pressure_linear_scalar"
    mesh: Mesh
    cell_nodes: np.ndarray  # (nt, 6) or (nt, 3) node ids
    node_coords: np.ndarray  # (n_nodes, 2)
    edges: np.ndarray  # (ne, 2) unique sorted vertex pairs (velocity only)
    n_dofs: int
    boundary_dofs: dict  # label name -> dof index array

    @property
    def n_nodes(self) -> int:
        return len(self.node_coords)

    @property
    def components(self) -> int:
        return 2 if self.space == "velocity_quadratic_vector" else 1

    def cell_dofs(self) -> np.ndarray:
        if self.components == 1:
            return self.cell_nodes
        base = 2 * self.cell_nodes
        out = np.empty((len(base), 12), dtype=base.dtype)
        out[:, 0::2] = base
        out[:, 1::2] = base + 1
        return out

    def dof_coords(self) -> np.ndarray:
        return np.repeat(self.node_coords, self.components, axis=0)


# precedence when a boundary node sits on several labels
_LABEL_PRECEDENCE = (
    "obstacle",
    "inner_circle",
    "outer_circle",
    "inflow",
    "wall",
    "artificial",
    "outflow",
)


def build_dof_map(mesh: Mesh, space: str) -> DofMap:
    """Deterministic dof numbering; raises MeshError on non-conforming input."""
    edges, counts = mesh.unique_edges()
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: edge shared by more than 2 triangles")

    if space == "pressure_linear_scalar":
        boundary = _boundary_nodes_by_label(mesh, edges, midpoints=False)
        return DofMap(
            space=space,
            mesh=mesh,
            cell_nodes=mesh.triangles.astype(np.int64),
            node_coords=mesh.vertices.copy(),
            edges=edges,
            n_dofs=mesh.n_vertices,
            boundary_dofs={k: v for k, v in boundary.items()},
        )
    if space != "velocity_quadratic_vector":
        raise ValueError(f"unknown space {space!r}")

    nv = mesh.n_vertices
    t = mesh.triangles.astype(np.int64)
    tri_edges = np.stack(
        [np.sort(t[:, [0, 1]], axis=1),
         np.sort(t[:, [1, 2]], axis=1),
         np.sort(t[:, [2, 0]], axis=1)],
        axis=1,
    )  # (nt, 3, 2) in local midpoint order m01 m12 m20
    keys = edges[:, 0].astype(np.int64) * (nv + 1) + edges[:, 1]
    q = tri_edges[:, :, 0].astype(np.int64) * (nv + 1) + tri_edges[:, :, 1]
    mid_nodes = nv + np.searchsorted(keys, q)
    cell_nodes = np.hstack([t, mid_nodes])

    mid_coords = 0.5 * (mesh.vertices[edges[:, 0]] + mesh.vertices[edges[:, 1]])
    node_coords = np.vstack([mesh.vertices, mid_coords])

    node_label = _boundary_nodes_by_label(mesh, edges, midpoints=True)
    boundary = {}
    for name, nodes in node_label.items():
        dofs = np.empty(2 * len(nodes), dtype=np.int64)
        dofs[0::2] = 2 * nodes
        dofs[1::2] = 2 * nodes + 1
        boundary[name] = dofs

    return DofMap(
        space=space,
        mesh=mesh,
        cell_nodes=cell_nodes,
        node_coords=node_coords,
        edges=edges,
        n_dofs=2 * (nv + len(edges)),
        boundary_dofs=boundary,
    )


def _boundary_nodes_by_label(mesh: Mesh, edges: np.ndarray, midpoints: bool) -> dict:
    nv = mesh.n_vertices
    keys = edges[:, 0].astype(np.int64) * (nv + 1) + edges[:, 1]
    claimed: dict[int, str] = {}
    for name in _LABEL_PRECEDENCE:
        lid = LABEL_IDS[name]
        sel = mesh.boundary_labels == lid
        if not sel.any():
            continue
        be = np.sort(mesh.boundary_edges[sel].astype(np.int64), axis=1)
        nodes = set(be[:, 0].tolist()) | set(be[:, 1].tolist())
        if midpoints:
            q = be[:, 0] * (nv + 1) + be[:, 1]
            nodes |= set((nv + np.searchsorted(keys, q)).tolist())
        for n in sorted(nodes):
            claimed.setdefault(n, name)
    out: dict[str, list] = {}
    for n, name in claimed.items():
        out.setdefault(name, []).append(n)
    return {k: np.array(sorted(v), dtype=np.int64) for k, v in out.items()}


# ---------------------------------------------------------------------------
# geometry caches and scalar-form assembly
# ---------------------------------------------------------------------------


def _geometry(mesh: Mesh):
    c = mesh.triangle_corners()
    j = np.stack([c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]], axis=2)  # d x / d l12
    det = j[:, 0, 0] * j[:, 1, 1] - j[:, 0, 1] * j[:, 1, 0]
    inv_t = np.empty_like(j)  # inverse transpose, maps reference grads
    inv_t[:, 0, 0] = j[:, 1, 1]
    inv_t[:, 0, 1] = -j[:, 1, 0]
    inv_t[:, 1, 0] = -j[:, 0, 1]
    inv_t[:, 1, 1] = j[:, 0, 0]
    inv_t /= det[:, None, None]
    return det, inv_t


def _scatter(rows_nodes, cols_nodes, vals, shape) -> sp.csr_matrix:
    nt, ni, nj = vals.shape
    r = np.repeat(rows_nodes, nj, axis=1).ravel()
    c = np.tile(cols_nodes, (1, ni)).ravel()
    m = sp.coo_matrix((vals.ravel(), (r, c)), shape=shape).tocsr()
    m.sum_duplicates()
    m.sort_indices()
    return m


def _expand_vector(m_nodes: sp.csr_matrix) -> sp.csr_matrix:
    """Scalar node matrix -> interleaved 2-component dof matrix."""
    out = sp.kron(m_nodes, sp.identity(2, format="csr"), format="csr")
    out.sort_indices()
    return out


def _symmetrize_local(vals: np.ndarray) -> np.ndarray:
    # make element matrices bitwise symmetric (einsum contraction order
    # otherwise differs between (i, j) and (j, i) at the last ulp)
    return 0.5 * (vals + vals.transpose(0, 2, 1))


def _scalar_mass(dofmap: DofMap) -> sp.csr_matrix:
    det, _ = _geometry(dofmap.mesh)
    if dofmap.space == "velocity_quadratic_vector":
        phi = _p2_values(_QUAD4_B)
    else:
        phi = _p1_values(_QUAD4_B)
    ref = np.einsum("q,qi,qj->ij", 0.5 * _QUAD4_W, phi, phi)
    ref = 0.5 * (ref + ref.T)
    vals = ref[None, :, :] * det[:, None, None]
    n = dofmap.n_nodes
    return _scatter(dofmap.cell_nodes, dofmap.cell_nodes, vals, (n, n))


def _scalar_stiffness(dofmap: DofMap) -> sp.csr_matrix:
    det, inv_t = _geometry(dofmap.mesh)
    if dofmap.space == "velocity_quadratic_vector":
        gref = _p2_grads(_QUAD4_B)
    else:
        gref = np.broadcast_to(_P1_GRADS, (len(_QUAD4_B), 3, 2))
    w = 0.5 * _QUAD4_W
    g = np.einsum("tab,qib->tqia", inv_t, gref)
    vals = _symmetrize_local(np.einsum("q,t,tqia,tqja->tij", w, det, g, g))
    n = dofmap.n_nodes
    return _scatter(dofmap.cell_nodes, dofmap.cell_nodes, vals, (n, n))


def assemble_mass(dofmap: DofMap) -> sp.csr_matrix:
    """Mass matrix; vector-expanded for the velocity space."""
    m = _scalar_mass(dofmap)
    return _expand_vector(m) if dofmap.components == 2 else m


def assemble_stiffness(dofmap: DofMap) -> sp.csr_matrix:
    """Stiffness (grad-grad) matrix; vector-expanded for velocity."""
    k = _scalar_stiffness(dofmap)
    return _expand_vector(k) if dofmap.components == 2 else k


def assemble_divergence(vel: DofMap, pres: DofMap) -> sp.csr_matrix:
    """B with B[q, u] = (psi_q, div phi_u), shape (n_pressure, n_velocity)."""
    if vel.mesh is not pres.mesh and vel.mesh.n_triangles != pres.mesh.n_triangles:
        raise MeshError("velocity and pressure dof maps use different meshes")
    det, inv_t = _geometry(vel.mesh)
    gref = _p2_grads(_QUAD4_B)
    g = np.einsum("tab,qib->tqia", inv_t, gref)  # (nt, nq, 6, 2)
    psi = _p1_values(_QUAD4_B)
    w = 0.5 * _QUAD4_W
    bx = np.einsum("q,t,qi,tqj->tij", w, det, psi, g[:, :, :, 0])
    by = np.einsum("q,t,qi,tqj->tij", w, det, psi, g[:, :, :, 1])
    rows = pres.cell_nodes
    colsx = 2 * vel.cell_nodes
    colsy = 2 * vel.cell_nodes + 1
    shape = (pres.n_dofs, vel.n_dofs)
    b = _scatter(rows, colsx, bx, shape) + _scatter(rows, colsy, by, shape)
    b.sort_indices()
    return b


def convection_local(vel: DofMap, w_coeffs: np.ndarray) -> np.ndarray:
    """Per-element Oseen matrices ((w.grad) phi_j, phi_i), shape (nt, 6, 6)."""
    if len(w_coeffs) != vel.n_dofs:
        raise ValueError("advecting field has wrong length")
    mesh = vel.mesh
    cache = getattr(vel, "_conv_cache", None)
    if cache is None:
        det, inv_t = _geometry(mesh)
        gref = _p2_grads(_QUAD5_B)
        g = np.einsum("tab,qib->tqia", inv_t, gref)
        phi = _p2_values(_QUAD5_B)
        # weight the test function by the quadrature factors once
        phi_w = (0.5 * _QUAD5_W)[:, None] * phi  # (nq, 6)
        cache = (det, g, phi, phi_w)
        vel._conv_cache = cache
    det, g, phi, phi_w = cache
    wc = w_coeffs[vel.cell_dofs()].reshape(-1, 6, 2)
    out = np.zeros((mesh.n_triangles, 6, 6))
    for q in range(len(_QUAD5_W)):
        w_q = wc[:, :, 0] @ phi[q], wc[:, :, 1] @ phi[q]  # (nt,), (nt,)
        wdotg = w_q[0][:, None] * g[:, q, :, 0] + w_q[1][:, None] * g[:, q, :, 1]
        out += phi_w[q][None, :, None] * wdotg[:, None, :]
    return out * det[:, None, None]


def assemble_convection(vel: DofMap, w_coeffs: np.ndarray) -> sp.csr_matrix:
    """Skew-symmetrized convection matrix C(w), advecting field w given as
    velocity coefficients.

    Assembled as the antisymmetric part of the Oseen form ((w.grad) u, theta),
    so v' C(w) v = 0 holds for every coefficient vector by construction.
    """
    n_local = convection_local(vel, w_coeffs)
    n = vel.n_nodes
    nmat = _scatter(vel.cell_nodes, vel.cell_nodes, n_local, (n, n))
    c = 0.5 * (nmat - nmat.T)
    return _expand_vector(c.tocsr())


def assemble_load(vel: DofMap, f) -> np.ndarray:
    """Load vector (f, theta) for a callable f(x, y) -> (fx, fy)."""
    det, _ = _geometry(vel.mesh)
    phi = _p2_values(_QUAD5_B)
    corners = vel.mesh.triangle_corners()
    dofs = vel.cell_dofs()
    local = np.zeros((vel.mesh.n_triangles, 12))
    for q, (bary, wq) in enumerate(zip(_QUAD5_B, _QUAD5_W)):
        pts = np.einsum("k,tkd->td", bary, corners)
        fx, fy = f(pts[:, 0], pts[:, 1])
        coef = 0.5 * wq * det
        local[:, 0::2] += coef[:, None] * phi[q][None, :] * np.asarray(fx)[:, None]
        local[:, 1::2] += coef[:, None] * phi[q][None, :] * np.asarray(fy)[:, None]
    return np.bincount(dofs.ravel(), weights=local.ravel(), minlength=vel.n_dofs)


def interpolate(dofmap: DofMap, func) -> np.ndarray:
    """Nodal interpolation of a callable field onto the space."""
    xy = dofmap.node_coords
    if dofmap.components == 1:
        return np.asarray(func(xy[:, 0], xy[:, 1]), dtype=float)
    u, v = func(xy[:, 0], xy[:, 1])
    out = np.empty(dofmap.n_dofs)
    out[0::2] = u
    out[1::2] = v
    return out


# ---------------------------------------------------------------------------
# boundary conditions
# ---------------------------------------------------------------------------


def dirichlet_dofs(vel: DofMap, values: dict) -> tuple[np.ndarray, np.ndarray]:
    """Constrained velocity dof indices and their prescribed values.

    `values` maps label name -> callable (x, y) -> (u, v) or a constant pair.
    Every Dirichlet-labeled boundary present in the mesh must be covered;
    the outflow label is natural and must not appear.
    """
    present = {name for name in vel.boundary_dofs}
    dirichlet = present - {"outflow"}
    missing = dirichlet - set(values)
    if missing:
        raise ValueError(f"missing boundary values for labels {sorted(missing)}")
    idx, vals = [], []
    for name in sorted(dirichlet):
        dofs = vel.boundary_dofs[name]
        nodes = dofs[0::2] // 2
        xy = vel.node_coords[nodes]
        bv = values[name]
        if callable(bv):
            u, v = bv(xy[:, 0], xy[:, 1])
            u = np.broadcast_to(np.asarray(u, dtype=float), (len(nodes),))
            v = np.broadcast_to(np.asarray(v, dtype=float), (len(nodes),))
        else:
            u = np.full(len(nodes), float(bv[0]))
            v = np.full(len(nodes), float(bv[1]))
        idx.append(dofs)
        pair = np.empty(2 * len(nodes))
        pair[0::2] = u
        pair[1::2] = v
        vals.append(pair)
    if not idx:
        return np.empty(0, dtype=np.int64), np.empty(0)
    return np.concatenate(idx), np.concatenate(vals)


def apply_dirichlet(
    a: sp.spmatrix, b: np.ndarray, vel: DofMap, values: dict
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Row-replacement imposition with symmetric column elimination.

    Constrained rows become identity with the prescribed value on the right
    hand side; constrained columns are moved onto the right hand side.
    """
    idx, vals = dirichlet_dofs(vel, values)
    return eliminate_dofs(a.tocsr(), b, idx, vals)


def eliminate_dofs(a: sp.csr_matrix, b: np.ndarray, idx, vals):
    n = a.shape[0]
    g = np.zeros(n)
    g[idx] = vals
    b = b - a @ g
    free = np.ones(n)
    free[idx] = 0.0
    d_free = sp.diags(free)
    ind = np.zeros(n)
    ind[idx] = 1.0
    a = ((d_free @ a @ d_free) + sp.diags(ind)).tocsr()
    a.sort_indices()
    b[idx] = vals
    return a, b


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------


def l2_norm(field: np.ndarray, mass: sp.spmatrix) -> float:
    return float(np.sqrt(max(field @ (mass @ field), 0.0)))


def h1_seminorm(field: np.ndarray, stiffness: sp.spmatrix) -> float:
    return float(np.sqrt(max(field @ (stiffness @ field), 0.0)))


def relative_l2_error(a: np.ndarray, b: np.ndarray, mass: sp.spmatrix) -> float:
    diff = l2_norm(a - b, mass)
    ref = l2_norm(a, mass)
    if ref == 0.0:
        return 0.0 if diff == 0.0 else float("inf")
    return diff / ref


def quadrature_errors(vel: DofMap, coeffs: np.ndarray, exact, exact_grad=None):
    """True L2 (and optionally H1-seminorm) error of a discrete velocity
    field against a closed-form solution, by degree-5 quadrature.

    exact(x, y) -> (u, v); exact_grad(x, y) -> (ux, uy, vx, vy).
    """
    det, inv_t = _geometry(vel.mesh)
    corners = vel.mesh.triangle_corners()
    phi = _p2_values(_QUAD5_B)
    gref = _p2_grads(_QUAD5_B)
    g = np.einsum("tab,qib->tqia", inv_t, gref)
    wc = coeffs[vel.cell_dofs()].reshape(-1, 6, 2)
    err2 = 0.0
    err_h1 = 0.0
    for q, (bary, wq) in enumerate(zip(_QUAD5_B, _QUAD5_W)):
        pts = np.einsum("k,tkd->td", bary, corners)
        uh = np.einsum("k,tkc->tc", phi[q], wc)
        ue = np.column_stack(exact(pts[:, 0], pts[:, 1]))
        w = 0.5 * wq * det
        err2 += float(np.sum(w[:, None] * (uh - ue) ** 2))
        if exact_grad is not None:
            gh = np.einsum("tkc,tka->tca", wc, g[:, q])
            gx_u, gy_u, gx_v, gy_v = exact_grad(pts[:, 0], pts[:, 1])
            ge = np.stack(
                [np.column_stack([gx_u, gy_u]), np.column_stack([gx_v, gy_v])],
                axis=1,
            )
            err_h1 += float(np.sum(w[:, None, None] * (gh - ge) ** 2))
    l2 = np.sqrt(err2)
    return (l2, np.sqrt(err_h1)) if exact_grad is not None else (l2, None)


# ---------------------------------------------------------------------------
# smallest Stokes eigenvalue
# ---------------------------------------------------------------------------


class EigenSolveError(RuntimeError):
    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


def estimate_lambda1(
    mesh: Mesh,
    vel: DofMap | None = None,
    pres: DofMap | None = None,
    tol: float = 1e-8,
    maxiter: int = 2000,
    seed: int = 1234,
) -> float:
    """Smallest eigenvalue of the Stokes operator with no-slip boundary.

    Inverse iteration on the saddle-point system, which restricts the
    iterates to the discretely divergence-free subspace.  Stops when the
    relative eigenvalue residual drops below `tol`.
    """
    if vel is None:
        vel = build_dof_map(mesh, "velocity_quadratic_vector")
    if pres is None:
        pres = build_dof_map(mesh, "pressure_linear_scalar")
    k = assemble_stiffness(vel)
    m = assemble_mass(vel)
    b = assemble_divergence(vel, pres)

    bdofs = np.unique(np.concatenate([d for d in vel.boundary_dofs.values()]))
    free = np.setdiff1d(np.arange(vel.n_dofs), bdofs)
    kf = k[free][:, free].tocsr()
    mf = m[free][:, free].tocsr()
    bf = b[:, free].tocsr()

    npr = pres.n_dofs
    s = sp.bmat([[kf, bf.T], [bf, None]], format="lil")
    # pin one pressure dof; the lost constraint is recovered by the zero
    # net boundary flux of the homogeneous data
    s.rows[len(free)] = [len(free)]
    s.data[len(free)] = [1.0]
    lu = spla.splu(s.tocsc())

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(len(free))
    x /= np.sqrt(x @ (mf @ x))
    lam = 0.0
    resid = np.inf
    for _ in range(maxiter):
        rhs = np.concatenate([mf @ x, np.zeros(npr)])
        w = lu.solve(rhs)[: len(free)]
        mw = mf @ w
        lam = float((w @ (mf @ x)) / (w @ mw))
        resid = float(np.linalg.norm(mf @ x - lam * mw) / (abs(lam) * np.linalg.norm(mw)))
        x = w / np.sqrt(w @ mw)
        if resid <= tol:
            return lam
    raise EigenSolveError(
        f"inverse iteration did not reach tol={tol} in {maxiter} iterations",
        resid,
    )


@dataclass
class State:
    """Velocity/pressure coefficient pair at one time level."""

    velocity: np.ndarray
    pressure: np.ndarray
    t: float = 0.0

    def copy(self) -> "State":
        return State(self.velocity.copy(), self.pressure.copy(), self.t)
