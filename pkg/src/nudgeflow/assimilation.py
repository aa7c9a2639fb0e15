"""Localized coarse-grid observation operator and its interpolation constant.

The operator restricts a fine quadratic velocity field to the coarse vertex
values on the observation region and prolongates them back by piecewise
linear interpolation, supported strictly on the observed triangles and zero
elsewhere.  Restriction samples exact point values (coarse vertices are fine
vertices by nested refinement), so restriction o prolongation is the
identity on coarse data and the composed operator is an exact projection.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .fem import DofMap, _p2_values, _QUAD4_B, _QUAD4_W, _geometry, _scatter, _expand_vector
from .mesh import Mesh, MeshError, NestingMap

__all__ = [
    "ObservationOperator",
    "build_observation_operator",
    "estimate_C1",
    "nudging_matrices",
    "region_mass",
    "region_stiffness",
]


@dataclass
class ObservationOperator:
    """Sparse realization of the localized coarse observation map."""

    restriction: sp.csr_matrix  # (2 nc, n_fine_dofs)
    prolongation: sp.csr_matrix  # (n_fine_dofs, 2 nc)
    composed: sp.csr_matrix  # prolongation @ restriction
    support_tags: frozenset
    H: float
    coarse_vertices: np.ndarray  # observed coarse vertex ids
    fine_inside_tris: np.ndarray  # fine triangle mask inside the support

    @property
    def n_coarse(self) -> int:
        return len(self.coarse_vertices)


def build_observation_operator(
    fine: Mesh,
    coarse_local: Mesh,
    nesting: NestingMap,
    fine_dofs: DofMap,
    support_tags=None,
    H: float | None = None,
) -> ObservationOperator:
    """Assemble restriction/prolongation between nested meshes.

    `nesting` must map the fine mesh onto `coarse_local` (parents -1 outside
    the covered subregion).  `support_tags` selects which coarse regions are
    observed; the default observes every region of the coarse mesh.
    """
    if len(nesting.parent) != fine.n_triangles:
        raise MeshError("nesting does not match the fine mesh")
    tags = (
        frozenset(coarse_local.region_tags_present())
        if support_tags is None
        else frozenset(int(t) for t in support_tags)
    )
    sel_coarse = np.isin(coarse_local.region_tag, list(tags))
    if not sel_coarse.any():
        raise MeshError("support tags select no coarse triangles")

    inside = (nesting.parent >= 0) & sel_coarse[np.maximum(nesting.parent, 0)]
    if not inside.any():
        raise MeshError("no fine triangles nest inside the observed region")

    coarse_vids = np.unique(coarse_local.triangles[sel_coarse])
    c_index = -np.ones(coarse_local.n_vertices, dtype=np.int64)
    c_index[coarse_vids] = np.arange(len(coarse_vids))

    # coarse vertices are fine vertices verbatim (refinement copies coords)
    fine_lookup = {
        fine.vertices[i].tobytes(): i for i in range(fine.n_vertices)
    }
    r_cols = np.empty(len(coarse_vids), dtype=np.int64)
    for k, cv in enumerate(coarse_vids):
        key = coarse_local.vertices[cv].tobytes()
        if key not in fine_lookup:
            raise MeshError(
                "nesting inconsistency: coarse vertex not found in the fine mesh"
            )
        r_cols[k] = fine_lookup[key]

    nc = len(coarse_vids)
    n_nodes = fine_dofs.n_nodes
    restriction_nodes = sp.coo_matrix(
        (np.ones(nc), (np.arange(nc), r_cols)), shape=(nc, n_nodes)
    ).tocsr()

    # prolongation weights per fine node, from the first inside triangle
    node_rows: list[int] = []
    node_cols: list[int] = []
    node_w: list[float] = []
    assigned = np.zeros(n_nodes, dtype=bool)
    inside_ids = np.nonzero(inside)[0]
    cells = fine_dofs.cell_nodes[inside_ids]  # (m, 6)
    parents = nesting.parent[inside_ids]
    cb = nesting.corner_bary[inside_ids]  # (m, 3, 3)
    # node barycentrics inside the coarse parent: corners then edge midpoints
    node_bary = np.concatenate(
        [cb, 0.5 * (cb + np.roll(cb, -1, axis=1))], axis=1
    )  # (m, 6, 3)
    coarse_tris = coarse_local.triangles[parents]
    for local in range(6):
        nodes = cells[:, local]
        new = ~assigned[nodes]
        if not new.any():
            continue
        rows = np.nonzero(new)[0]
        seen: dict[int, int] = {}
        for r in rows:
            n = int(nodes[r])
            if n not in seen:
                seen[n] = r
        rr = np.fromiter(seen.values(), dtype=np.int64)
        nn = np.fromiter(seen.keys(), dtype=np.int64)
        assigned[nn] = True
        for corner in range(3):
            cols = c_index[coarse_tris[rr, corner]]
            if np.any(cols < 0):
                raise MeshError("observed coarse triangle has unobserved vertex")
            node_rows.extend(nn.tolist())
            node_cols.extend(cols.tolist())
            node_w.extend(node_bary[rr, local, corner].tolist())

    prolongation_nodes = sp.coo_matrix(
        (node_w, (node_rows, node_cols)), shape=(n_nodes, nc)
    ).tocsr()
    prolongation_nodes.sum_duplicates()

    restriction = _expand_vector(restriction_nodes)
    prolongation = _expand_vector(prolongation_nodes)
    composed = (prolongation @ restriction).tocsr()
    composed.sort_indices()
    return ObservationOperator(
        restriction=restriction,
        prolongation=prolongation,
        composed=composed,
        support_tags=tags,
        H=float(coarse_local.h_max if H is None else H),
        coarse_vertices=coarse_vids,
        fine_inside_tris=inside,
    )


def region_mass(dofmap: DofMap, tri_mask: np.ndarray) -> sp.csr_matrix:
    """Velocity mass matrix restricted to the masked triangles."""
    det, _ = _geometry(dofmap.mesh)
    phi = _p2_values(_QUAD4_B)
    ref = np.einsum("q,qi,qj->ij", 0.5 * _QUAD4_W, phi, phi)
    vals = ref[None, :, :] * np.where(tri_mask, det, 0.0)[:, None, None]
    n = dofmap.n_nodes
    m = _scatter(dofmap.cell_nodes, dofmap.cell_nodes, vals, (n, n))
    return _expand_vector(m)


def region_stiffness(dofmap: DofMap, tri_mask: np.ndarray) -> sp.csr_matrix:
    from .fem import _p2_grads, _QUAD4_B as QB, _QUAD4_W as QW

    det, inv_t = _geometry(dofmap.mesh)
    gref = _p2_grads(QB)
    g = np.einsum("tab,qib->tqia", inv_t, gref)
    vals = np.einsum("q,t,tqia,tqja->tij", 0.5 * QW, np.where(tri_mask, det, 0.0), g, g)
    n = dofmap.n_nodes
    k = _scatter(dofmap.cell_nodes, dofmap.cell_nodes, vals, (n, n))
    return _expand_vector(k)


def sample_field_family(count: int):
    """Deterministic trigonometric velocity fields with growing wavenumbers."""
    fields = []
    for k in range(1, count + 1):
        a = np.pi * (1.0 + 0.5 * (k - 1))
        b = 0.7 * a + 0.3

        def make(a=a, b=b, k=k):
            def f(x, y):
                u = np.sin(a * x + 0.31) * np.sin(b * y + 0.11)
                v = np.cos(b * x + 0.07 * k) * np.sin(a * y + 0.53)
                return u, v

            return f

        fields.append(make())
    return fields


def heldout_field_family(count: int = 10):
    """Smooth validation fields distinct from the calibration family."""
    rng = np.random.default_rng(20240517)
    fields = []
    for _ in range(count):
        a1, a2, b1, b2 = rng.uniform(1.0, 14.0, size=4)
        p1, p2 = rng.uniform(0, 2 * np.pi, size=2)

        def make(a1=a1, a2=a2, b1=b1, b2=b2, p1=p1, p2=p2):
            def f(x, y):
                u = np.cos(a1 * x + p1) * np.cos(a2 * y + p2)
                v = np.sin(b1 * x + p2) * np.cos(b2 * y + p1)
                return u, v

            return f

        fields.append(make())
    return fields


def interpolation_ratio(
    op: ObservationOperator, fine_dofs: DofMap, field, mass=None, stiff=None
) -> float | None:
    """||phi - I_H phi|| / (H ||grad phi||) over the observed subregion.

    Returns None for (numerically) gradient-free samples.
    """
    from .fem import interpolate, l2_norm, h1_seminorm

    tri_mask = op.fine_inside_tris
    m = region_mass(fine_dofs, tri_mask) if mass is None else mass
    k = region_stiffness(fine_dofs, tri_mask) if stiff is None else stiff
    phi = interpolate(fine_dofs, field)
    grad = h1_seminorm(phi, k)
    scale = l2_norm(phi, m)
    if grad <= 1e-12 * max(scale, 1.0):
        return None
    err = l2_norm(phi - op.composed @ phi, m)
    return err / (op.H * grad)


def estimate_C1(
    op: ObservationOperator, fine_dofs: DofMap, sample_count: int = 12
) -> float:
    """Operational lower bound for the interpolation constant.

    Maximum of ||phi - I_H phi|| / (H ||grad phi||) over the deterministic
    trigonometric family, all norms over the observed subregion.
    """
    if sample_count < 1:
        raise ValueError("sample_count must be >= 1")
    tri_mask = op.fine_inside_tris
    m = region_mass(fine_dofs, tri_mask)
    k = region_stiffness(fine_dofs, tri_mask)
    ratios = []
    for field in sample_field_family(sample_count):
        r = interpolation_ratio(op, fine_dofs, field, mass=m, stiff=k)
        if r is not None:
            ratios.append(r)
    if not ratios:
        raise ValueError("all sample fields were gradient-free")
    return float(max(ratios))


def nudging_matrices(op: ObservationOperator, mass: sp.spmatrix, mu: float):
    """Implicit nudging contribution: matrix added to the velocity block and
    the right-hand-side map applied to reference observations."""
    if mu < 0:
        raise ValueError("mu must be >= 0")
    if mass.shape[1] != op.composed.shape[0]:
        raise ValueError("mass and observation operator dimensions differ")
    if mu == 0.0:
        n = mass.shape[0]
        z = sp.csr_matrix((n, n))
        return z, lambda u_obs: np.zeros(n)
    lhs_add = (mu * (mass @ op.composed)).tocsr()
    lhs_add.sort_indices()

    def rhs_apply(u_obs: np.ndarray) -> np.ndarray:
        return lhs_add @ u_obs

    return lhs_add, rhs_apply
