"""Deterministic triangulations for the study domains.

All generators produce conforming, counterclockwise-oriented triangle meshes
with per-triangle region tags and labeled boundary edges.  The construction
follows a local-to-global pipeline: a coarse mesh is built on the observation
subregion(s), uniformly refined by midpoint subdivision (each triangle split
into 4 congruent children), and finally extended to cover the full domain so
that the global mesh restricted to the subregion is vertex-for-vertex the
refined local mesh.

Curved boundaries are polygonalized once, at coarse-mesh time; refinement
does not re-project midpoints onto the circle.  This keeps the parent-child
nesting exact, which the observation operator relies on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

__all__ = [
    "Mesh",
    "NestingMap",
    "DomainSpec",
    "MeshError",
    "LABEL_IDS",
    "LABEL_NAMES",
    "channel_spec",
    "annulus_spec",
    "disk_with_hole_spec",
    "polygon_spec",
    "build_coarse_subregion_mesh",
    "refine_uniform",
    "extend_to_global",
    "compute_delta",
    "mesh_statistics",
    "pad_nesting",
]

# Stable boundary-label ids used in mesh files and throughout the code.
LABEL_NAMES = (
    "inflow",
    "outflow",
    "wall",
    "obstacle",
    "inner_circle",
    "outer_circle",
    "artificial",
)
LABEL_IDS = {name: i + 1 for i, name in enumerate(LABEL_NAMES)}
_ID_TO_LABEL = {i: n for n, i in LABEL_IDS.items()}


class MeshError(ValueError):
    """Raised for degenerate domain specs or inconsistent mesh inputs."""


# ---------------------------------------------------------------------------
# core types
# ---------------------------------------------------------------------------


@dataclass
class Mesh:
    """Conforming triangulation with region tags and labeled boundary edges.

    vertices       (nv, 2) float64 coordinates
    triangles      (nt, 3) int32 vertex indices, counterclockwise
    region_tag     (nt,)   int32, 0 = untagged complement, 1..k = regions
    boundary_edges (nbe, 2) int32 vertex pairs on the boundary
    boundary_labels(nbe,)  int32 label ids (see LABEL_IDS)
    level          refinement level (0 = as generated)
    """

    vertices: np.ndarray
    triangles: np.ndarray
    region_tag: np.ndarray
    boundary_edges: np.ndarray
    boundary_labels: np.ndarray
    level: int = 0
    h_max: float = field(init=False, default=0.0)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int32)
        self.region_tag = np.ascontiguousarray(self.region_tag, dtype=np.int32)
        self.boundary_edges = np.ascontiguousarray(
            np.asarray(self.boundary_edges, dtype=np.int32).reshape(-1, 2)
        )
        self.boundary_labels = np.ascontiguousarray(
            self.boundary_labels, dtype=np.int32
        )
        self.h_max = float(self.edge_lengths().max()) if len(self.triangles) else 0.0

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    def triangle_corners(self) -> np.ndarray:
        """(nt, 3, 2) corner coordinates."""
        return self.vertices[self.triangles]

    def signed_areas(self) -> np.ndarray:
        c = self.triangle_corners()
        d1 = c[:, 1] - c[:, 0]
        d2 = c[:, 2] - c[:, 0]
        return 0.5 * (d1[:, 0] * d2[:, 1] - d1[:, 1] * d2[:, 0])

    def area(self) -> float:
        return float(self.signed_areas().sum())

    def edge_lengths(self) -> np.ndarray:
        c = self.triangle_corners()
        out = np.empty((len(c), 3))
        for k in range(3):
            out[:, k] = np.linalg.norm(c[:, (k + 1) % 3] - c[:, k], axis=1)
        return out

    def unique_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Sorted unique edges and the number of triangles sharing each."""
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e = np.sort(e, axis=1)
        edges, counts = np.unique(e, axis=0, return_counts=True)
        return edges, counts

    def region_tags_present(self) -> list[int]:
        return sorted(int(t) for t in np.unique(self.region_tag))

    def vertex_regions(self) -> dict[int, np.ndarray]:
        """Vertex index sets per region; interface vertices appear in each."""
        out = {}
        for tag in self.region_tags_present():
            tris = self.triangles[self.region_tag == tag]
            out[tag] = np.unique(tris)
        return out

    def validate(self) -> None:
        """Check conformity and orientation; raise MeshError on violation."""
        if np.any(self.signed_areas() <= 0):
            bad = int(np.argmin(self.signed_areas()))
            raise MeshError(f"triangle {bad} is degenerate or clockwise")
        edges, counts = self.unique_edges()
        if np.any(counts > 2):
            raise MeshError("non-manifold edge (shared by >2 triangles)")
        boundary = edges[counts == 1]
        labeled = {tuple(sorted(e)) for e in self.boundary_edges.tolist()}
        actual = {tuple(e) for e in boundary.tolist()}
        if labeled != actual:
            missing = actual - labeled
            extra = labeled - actual
            raise MeshError(
                f"boundary labeling mismatch: {len(missing)} unlabeled, "
                f"{len(extra)} spurious"
            )


@dataclass
class NestingMap:
    """Parent-child relation of a refined mesh with respect to its source.

    parent        (nt_fine,) index of the containing coarse triangle, -1 if
                  the fine triangle lies outside the refined subregion
    corner_bary   (nt_fine, 3, 3) barycentric coordinates of each fine
                  triangle's corners inside its coarse parent
    vertex_parent (nv_fine,) a coarse triangle containing the fine vertex
    vertex_bary   (nv_fine, 3) barycentric coordinates of the fine vertex
                  in vertex_parent
    """

    parent: np.ndarray
    corner_bary: np.ndarray
    vertex_parent: np.ndarray
    vertex_bary: np.ndarray

    @property
    def child_barycentric(self) -> np.ndarray:
        return self.vertex_bary

    def prolong_vertex_values(self, coarse_mesh: Mesh, nodal: np.ndarray) -> np.ndarray:
        """Linear interpolation of coarse vertex values at all fine vertices."""
        has = self.vertex_parent >= 0
        out = np.zeros(len(self.vertex_parent))
        tris = coarse_mesh.triangles[self.vertex_parent[has]]
        vals = nodal[tris]
        out[has] = np.einsum("ij,ij->i", self.vertex_bary[has], vals)
        return out


# ---------------------------------------------------------------------------
# domain specifications
# ---------------------------------------------------------------------------


@dataclass
class DomainSpec:
    """Geometry and region layout for one study domain.

    kind selects the generator: channel_with_plate, annulus, disk_with_hole
    or polygon.  Regions are tagged 1..3 (1 = nearest the obstacle/inner
    boundary, 2 = interior observation band, 3 = nearest the outer walls);
    the polygon kind has a single region tagged 1.
    """

    kind: str
    # channel_with_plate
    channel: tuple[float, float, float, float] | None = None  # x0, y0, x1, y1
    plate: tuple[float, float, float] | None = None  # px0, px1, height
    layer: float = 1.0
    # annulus / disk_with_hole
    inner_radius: float = 0.1
    outer_radius: float = 1.0
    hole_center: tuple[float, float] = (0.0, 0.0)
    r1: float = 0.2
    r2: float = 0.9
    # polygon
    polygon: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("channel_with_plate", "annulus", "disk_with_hole", "polygon"):
            raise MeshError(f"unknown domain kind {self.kind!r}")
        if self.kind == "channel_with_plate":
            x0, y0, x1, y1 = self.channel
            px0, px1, ph = self.plate
            if not (x0 < px0 < px1 < x1 and y0 < y0 + ph < y1 and self.layer > 0):
                raise MeshError("degenerate channel/plate geometry")
        elif self.kind == "annulus":
            if not (0 < self.inner_radius < self.r1 < self.r2 < self.outer_radius):
                raise MeshError("annulus radii must satisfy rin < r1 < r2 < rout")
        elif self.kind == "disk_with_hole":
            cx, cy = self.hole_center
            if math.hypot(cx, cy) + self.inner_radius >= self.outer_radius:
                raise MeshError("hole must lie strictly inside the disk")
            if not (self.inner_radius < self.r1 and self.r2 < self.outer_radius):
                raise MeshError("artificial radii must fit in the gap")
            if math.hypot(cx, cy) + self.r1 >= self.r2:
                raise MeshError("r1 circle must lie strictly inside the r2 circle")
        else:
            poly = np.asarray(self.polygon, dtype=float)
            if poly.ndim != 2 or len(poly) < 3:
                raise MeshError("polygon needs at least 3 vertices")
            self.polygon = poly

    def all_region_tags(self) -> set[int]:
        return {1} if self.kind == "polygon" else {1, 2, 3}

    # --- channel region boxes -------------------------------------------
    def channel_region_boxes(self):
        """Return (omega1 box, strip thickness) for the plate scenario."""
        x0, y0, x1, y1 = self.channel
        px0, px1, ph = self.plate
        l = self.layer
        box = (px0 - l, y0, px1 + l, y0 + ph + 2 * l)
        return box, l

    def classify(self, pts: np.ndarray) -> np.ndarray:
        """Region tag for each point (points assumed inside the domain)."""
        pts = np.atleast_2d(pts)
        if self.kind == "polygon":
            return np.ones(len(pts), dtype=np.int32)
        if self.kind == "channel_with_plate":
            x0, y0, x1, y1 = self.channel
            (bx0, by0, bx1, by1), l = self.channel_region_boxes()
            tag = np.full(len(pts), 2, dtype=np.int32)
            in_strip = (pts[:, 1] < y0 + l) | (pts[:, 1] > y1 - l)
            tag[in_strip] = 3
            in_box = (
                (pts[:, 0] >= bx0) & (pts[:, 0] <= bx1)
                & (pts[:, 1] >= by0) & (pts[:, 1] <= by1)
            )
            tag[in_box] = 1
            return tag
        # ring kinds: classify by the bounding circles
        r_in = np.linalg.norm(pts - self._center_at(0), axis=1)
        tag = np.full(len(pts), 2, dtype=np.int32)
        tag[np.linalg.norm(pts - self._center_at(1), axis=1) <= self.r1] = 1
        tag[np.linalg.norm(pts - self._center_at(2), axis=1) >= self.r2] = 3
        del r_in
        return tag

    def ring_lines(self) -> list[tuple[float, float, float]]:
        """Bounding circles (cx, cy, r) from innermost to outermost."""
        if self.kind == "annulus":
            return [
                (0.0, 0.0, self.inner_radius),
                (0.0, 0.0, self.r1),
                (0.0, 0.0, self.r2),
                (0.0, 0.0, self.outer_radius),
            ]
        if self.kind == "disk_with_hole":
            cx, cy = self.hole_center
            return [
                (cx, cy, self.inner_radius),
                (cx, cy, self.r1),
                (0.0, 0.0, self.r2),
                (0.0, 0.0, self.outer_radius),
            ]
        raise MeshError(f"{self.kind} has no ring structure")

    def _center_at(self, line_index: int) -> np.ndarray:
        cx, cy, _ = self.ring_lines()[line_index]
        return np.array([cx, cy])

    def analytic_area(self) -> float:
        if self.kind == "annulus":
            return math.pi * (self.outer_radius**2 - self.inner_radius**2)
        if self.kind == "disk_with_hole":
            return math.pi * (self.outer_radius**2 - self.inner_radius**2)
        if self.kind == "channel_with_plate":
            x0, y0, x1, y1 = self.channel
            px0, px1, ph = self.plate
            return (x1 - x0) * (y1 - y0) - (px1 - px0) * ph
        poly = self.polygon
        x, y = poly[:, 0], poly[:, 1]
        return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def channel_spec(x0=-7.0, y0=0.0, x1=20.0, y1=20.0,
                 plate_x0=0.0125, plate_x1=0.1375, plate_height=1.0,
                 layer=1.0) -> DomainSpec:
    return DomainSpec(
        kind="channel_with_plate",
        channel=(x0, y0, x1, y1),
        plate=(plate_x0, plate_x1, plate_height),
        layer=layer,
    )


def annulus_spec(inner_radius=0.1, outer_radius=1.0, r1=0.2, r2=0.9) -> DomainSpec:
    return DomainSpec(kind="annulus", inner_radius=inner_radius,
                      outer_radius=outer_radius, r1=r1, r2=r2)


def disk_with_hole_spec(outer_radius=1.0, hole_radius=0.1,
                        hole_center=(0.2, 0.0), r1=0.2, r2=0.9) -> DomainSpec:
    return DomainSpec(kind="disk_with_hole", inner_radius=hole_radius,
                      outer_radius=outer_radius, hole_center=tuple(hole_center),
                      r1=r1, r2=r2)


def polygon_spec(points) -> DomainSpec:
    return DomainSpec(kind="polygon", polygon=np.asarray(points, dtype=float))


# ---------------------------------------------------------------------------
# structured generators
# ---------------------------------------------------------------------------


def _fill_lines(breaks: list[float], spacing: float) -> np.ndarray:
    """Breakpoints plus uniform fillers so consecutive gaps are <= spacing."""
    breaks = sorted(set(float(b) for b in breaks))
    out = [breaks[0]]
    for a, b in zip(breaks[:-1], breaks[1:]):
        n = max(1, math.ceil((b - a) / spacing - 1e-12))
        out.extend(np.linspace(a, b, n + 1)[1:].tolist())
    return np.asarray(out)


def _grid_mesh(xs, ys, keep_cell, classify, label_edge) -> Mesh:
    """Tensor-product triangulation of [xs]x[ys] cells.

    keep_cell(cx, cy) -> bool mask over cell centers; classify(points) gives
    region tags; label_edge(midpoints) gives boundary label ids.
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    nx, ny = len(xs), len(ys)
    cx, cy = np.meshgrid(
        0.5 * (xs[:-1] + xs[1:]), 0.5 * (ys[:-1] + ys[1:]), indexing="ij"
    )
    keep = keep_cell(np.column_stack([cx.ravel(), cy.ravel()])).reshape(cx.shape)

    def vid(i, j):
        return i * ny + j

    tris = []
    tags = []
    centers = []
    for i in range(nx - 1):
        for j in range(ny - 1):
            if not keep[i, j]:
                continue
            v00, v10 = vid(i, j), vid(i + 1, j)
            v11, v01 = vid(i + 1, j + 1), vid(i, j + 1)
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
            centers.append((cx[i, j], cy[i, j]))
    tris = np.asarray(tris, dtype=np.int64)
    if len(tris) == 0:
        raise MeshError("grid mesh is empty (spacing too large or empty region)")
    centers = np.repeat(np.asarray(centers), 2, axis=0)
    tags = classify(centers)

    # compact unused grid vertices
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    allverts = np.column_stack([gx.ravel(), gy.ravel()])
    used = np.unique(tris)
    remap = -np.ones(nx * ny, dtype=np.int64)
    remap[used] = np.arange(len(used))
    verts = allverts[used]
    tris = remap[tris]

    mesh = Mesh(verts, tris, tags, np.empty((0, 2)), np.empty(0))
    edges, counts = mesh.unique_edges()
    bedges = edges[counts == 1]
    mids = 0.5 * (verts[bedges[:, 0]] + verts[bedges[:, 1]])
    labels = label_edge(mids)
    return Mesh(verts, tris, tags, bedges, labels)


def _channel_mesh(spec: DomainSpec, spacing: float, keep_tags: set[int]) -> Mesh:
    x0, y0, x1, y1 = spec.channel
    px0, px1, ph = spec.plate
    (bx0, by0, bx1, by1), l = spec.channel_region_boxes()
    xb = [x0, px0, px1, x1, bx0, bx1]
    yb = [y0, y1, y0 + ph, by1, y0 + l, y1 - l]
    xs = _fill_lines([b for b in xb if x0 <= b <= x1], spacing)
    ys = _fill_lines([b for b in yb if y0 <= b <= y1], spacing)
    eps = 1e-9 * max(x1 - x0, y1 - y0)

    def keep_cell(c):
        inside_plate = (
            (c[:, 0] > px0) & (c[:, 0] < px1) & (c[:, 1] < y0 + ph)
        )
        tag_ok = np.isin(spec.classify(c), list(keep_tags))
        return (~inside_plate) & tag_ok

    def label_edge(m):
        lab = np.full(len(m), LABEL_IDS["artificial"], dtype=np.int32)
        lab[np.abs(m[:, 0] - x0) < eps] = LABEL_IDS["inflow"]
        lab[np.abs(m[:, 0] - x1) < eps] = LABEL_IDS["outflow"]
        on_wall = (np.abs(m[:, 1] - y0) < eps) | (np.abs(m[:, 1] - y1) < eps)
        lab[on_wall] = LABEL_IDS["wall"]
        on_plate = (
            (m[:, 0] > px0 - eps) & (m[:, 0] < px1 + eps) & (m[:, 1] < y0 + ph + eps)
        )
        # plate sides/top, but the channel floor under the plate is wall
        lab[on_plate & ~(np.abs(m[:, 1] - y0) < eps)] = LABEL_IDS["obstacle"]
        return lab

    return _grid_mesh(xs, ys, keep_cell, spec.classify, label_edge)


def _ring_points(line_a, line_b, s: float, thetas: np.ndarray) -> np.ndarray:
    """Blend between two circles at parameter s in [0, 1]."""
    ax, ay, ar = line_a
    bx, by, br = line_b
    ca, sa = np.cos(thetas), np.sin(thetas)
    pa = np.column_stack([ax + ar * ca, ay + ar * sa])
    pb = np.column_stack([bx + br * ca, by + br * sa])
    return (1.0 - s) * pa + s * pb


def _ring_stack_mesh(spec: DomainSpec, spacing: float, keep_tags: set[int]) -> Mesh:
    lines = spec.ring_lines()
    keep = sorted(keep_tags)
    n_theta = max(
        8,
        max(math.ceil(2 * math.pi * lines[tag][2] / spacing) for tag in keep),
    )
    thetas = 2 * math.pi * np.arange(n_theta) / n_theta

    # split kept bands into contiguous runs so ring lines are shared exactly
    runs: list[list[int]] = []
    for tag in keep:
        if runs and runs[-1][-1] == tag - 1:
            runs[-1].append(tag)
        else:
            runs.append([tag])

    verts_list, tris, tags, bedges, blabels = [], [], [], [], []
    offset = 0
    i = np.arange(n_theta)
    ip = (i + 1) % n_theta
    for run in runs:
        # radial parameter rows and the band each layer belongs to
        rows: list[tuple] = []  # (line_a, line_b, s)
        layer_band: list[int] = []
        for tag in run:
            la, lb = lines[tag - 1], lines[tag]
            gap = (lb[2] - la[2]) + math.hypot(lb[0] - la[0], lb[1] - la[1])
            n_r = max(1, math.ceil(gap / spacing))
            if tag == run[0]:
                rows.append((la, lb, 0.0))
            for j in range(1, n_r + 1):
                rows.append((la, lb, j / n_r))
                layer_band.append(tag)

        ring_ids = []
        for (la, lb, s) in rows:
            verts_list.append(_ring_points(la, lb, s, thetas))
            ring_ids.append(offset + np.arange(n_theta))
            offset += n_theta
        for row in range(len(ring_ids) - 1):
            inner, outer = ring_ids[row], ring_ids[row + 1]
            tris.append(np.column_stack([inner[i], outer[i], outer[ip]]))
            tris.append(np.column_stack([inner[i], outer[ip], inner[ip]]))
            tags.extend([layer_band[row]] * (2 * n_theta))

        for ring, line_index in ((ring_ids[0], run[0] - 1), (ring_ids[-1], run[-1])):
            bedges.append(np.column_stack([ring[i], ring[ip]]))
            if line_index == 0:
                lab = LABEL_IDS["inner_circle"]
            elif line_index == len(lines) - 1:
                lab = LABEL_IDS["outer_circle"]
            else:
                lab = LABEL_IDS["artificial"]
            blabels.extend([lab] * n_theta)

    return Mesh(
        np.vstack(verts_list),
        np.vstack(tris),
        np.asarray(tags, dtype=np.int32),
        np.vstack(bedges),
        np.asarray(blabels),
    )


def _is_axis_rect(poly: np.ndarray) -> bool:
    if len(poly) != 4:
        return False
    xs, ys = np.unique(poly[:, 0]), np.unique(poly[:, 1])
    return len(xs) == 2 and len(ys) == 2


def _earclip(poly: np.ndarray) -> np.ndarray:
    """Ear-clipping triangulation of a simple CCW polygon."""
    n = len(poly)
    idx = list(range(n))
    x, y = poly[:, 0], poly[:, 1]
    area2 = np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))
    if area2 < 0:
        idx = idx[::-1]

    def cross(o, a, b):
        return (poly[a, 0] - poly[o, 0]) * (poly[b, 1] - poly[o, 1]) - (
            poly[a, 1] - poly[o, 1]
        ) * (poly[b, 0] - poly[o, 0])

    def inside(p, a, b, c):
        d1 = cross(a, b, p)
        d2 = cross(b, c, p)
        d3 = cross(c, a, p)
        return (d1 >= 0) and (d2 >= 0) and (d3 >= 0)

    tris = []
    guard = 0
    while len(idx) > 3 and guard < 10 * n * n:
        guard += 1
        m = len(idx)
        for k in range(m):
            a, b, c = idx[(k - 1) % m], idx[k], idx[(k + 1) % m]
            if cross(a, b, c) <= 0:
                continue
            if any(
                inside(p, a, b, c)
                for p in idx
                if p not in (a, b, c)
            ):
                continue
            tris.append((a, b, c))
            idx.pop(k)
            break
        else:
            raise MeshError("ear clipping failed (polygon not simple?)")
    tris.append(tuple(idx))
    return np.asarray(tris, dtype=np.int64)


def _polygon_mesh(spec: DomainSpec, H: float) -> Mesh:
    poly = spec.polygon
    if _is_axis_rect(poly):
        x0, x1 = poly[:, 0].min(), poly[:, 0].max()
        y0, y1 = poly[:, 1].min(), poly[:, 1].max()
        s = H / math.sqrt(2.0)
        xs = _fill_lines([x0, x1], s)
        ys = _fill_lines([y0, y1], s)

        def label_edge(m):
            return np.full(len(m), LABEL_IDS["wall"], dtype=np.int32)

        return _grid_mesh(
            xs, ys, lambda c: np.ones(len(c), bool), spec.classify, label_edge
        )
    tris = _earclip(poly)
    tags = np.ones(len(tris), dtype=np.int32)
    mesh = Mesh(poly.copy(), tris, tags, np.empty((0, 2)), np.empty(0))
    edges, counts = mesh.unique_edges()
    bedges = edges[counts == 1]
    labels = np.full(len(bedges), LABEL_IDS["wall"], dtype=np.int32)
    mesh = Mesh(poly.copy(), tris, tags, bedges, labels)
    while mesh.h_max > 1.5 * H:
        mesh, _ = refine_uniform(mesh, 1)
    return mesh


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def build_coarse_subregion_mesh(
    spec: DomainSpec, H: float, tags: set[int] | None = None
) -> Mesh:
    """Coarse conforming mesh of the selected region tags at size H.

    Curved boundaries are polygonalized with chord length <= H.  The result
    has h_max <= 1.5 H.  Meshing all tags of the spec covers the full domain.
    """
    if H <= 0:
        raise MeshError("H must be positive")
    tags = set(spec.all_region_tags() if tags is None else tags)
    unknown = tags - spec.all_region_tags()
    if unknown:
        raise MeshError(f"unknown region tags {sorted(unknown)}")
    if not tags:
        raise MeshError("empty observation region")
    diam = _subregion_diameter(spec, tags)
    if H > diam * (1 + 1e-12):
        raise MeshError(
            f"H={H} exceeds subregion diameter {diam:.6g}; refine the target size"
        )

    if spec.kind == "polygon":
        mesh = _polygon_mesh(spec, H)
    elif spec.kind == "channel_with_plate":
        mesh = _channel_mesh(spec, H / math.sqrt(2.0), tags)
    else:
        mesh = _ring_stack_mesh(spec, H / math.sqrt(2.0), tags)
    mesh.validate()
    if mesh.h_max > 1.5 * H * (1 + 1e-9):
        raise MeshError(f"generator exceeded target size: h_max={mesh.h_max}, H={H}")
    return mesh


def _subregion_diameter(spec: DomainSpec, tags: set[int]) -> float:
    if spec.kind == "polygon":
        p = spec.polygon
        return float(
            max(np.linalg.norm(p[i] - p[j]) for i in range(len(p)) for j in range(i))
        )
    if spec.kind == "channel_with_plate":
        x0, y0, x1, y1 = spec.channel
        return math.hypot(x1 - x0, y1 - y0)
    lines = spec.ring_lines()
    outer = max(lines[t][2] for t in tags)
    return 2.0 * outer


def refine_uniform(mesh: Mesh, levels: int = 1) -> tuple[Mesh, NestingMap]:
    """Split every triangle into 4 congruent children, `levels` times.

    Original vertices keep their indices and exact coordinates; each level
    halves every edge.  The returned NestingMap composes parentage back to
    the input mesh.
    """
    if levels < 1:
        raise MeshError("levels must be >= 1")
    cur = mesh
    parent = np.arange(mesh.n_triangles, dtype=np.int64)
    eye = np.eye(3)
    corner_bary = np.repeat(eye[None, :, :], mesh.n_triangles, axis=0)

    for _ in range(levels):
        t = cur.triangles.astype(np.int64)
        nv = cur.n_vertices
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e_sorted = np.sort(e, axis=1)
        edges, inverse = np.unique(e_sorted, axis=0, return_inverse=True)
        mids = 0.5 * (cur.vertices[edges[:, 0]] + cur.vertices[edges[:, 1]])
        verts = np.vstack([cur.vertices, mids])
        mid_ids = (nv + inverse).reshape(3, -1).T  # (nt, 3): m01, m12, m20

        m01, m12, m20 = mid_ids[:, 0], mid_ids[:, 1], mid_ids[:, 2]
        v0, v1, v2 = t[:, 0], t[:, 1], t[:, 2]
        children = np.empty((4 * len(t), 3), dtype=np.int64)
        children[0::4] = np.column_stack([v0, m01, m20])
        children[1::4] = np.column_stack([m01, v1, m12])
        children[2::4] = np.column_stack([m20, m12, v2])
        children[3::4] = np.column_stack([m01, m12, m20])
        tags = np.repeat(cur.region_tag, 4)

        # compose root barycentrics: child corners are fixed combinations
        b = corner_bary  # (nt, 3, 3) rows: root-bary of v0, v1, v2
        h01 = 0.5 * (b[:, 0] + b[:, 1])
        h12 = 0.5 * (b[:, 1] + b[:, 2])
        h20 = 0.5 * (b[:, 2] + b[:, 0])
        new_b = np.empty((4 * len(t), 3, 3))
        new_b[0::4] = np.stack([b[:, 0], h01, h20], axis=1)
        new_b[1::4] = np.stack([h01, b[:, 1], h12], axis=1)
        new_b[2::4] = np.stack([h20, h12, b[:, 2]], axis=1)
        new_b[3::4] = np.stack([h01, h12, h20], axis=1)

        # boundary edges split in two, labels inherited
        be = cur.boundary_edges.astype(np.int64)
        be_sorted = np.sort(be, axis=1)
        pos = _edge_lookup(edges, be_sorted)
        bm = nv + pos
        new_be = np.vstack(
            [np.column_stack([be[:, 0], bm]), np.column_stack([bm, be[:, 1]])]
        )
        new_bl = np.concatenate([cur.boundary_labels, cur.boundary_labels])

        cur = Mesh(verts, children, tags, new_be, new_bl, level=cur.level + 1)
        parent = np.repeat(parent, 4)
        corner_bary = new_b

    vertex_parent = -np.ones(cur.n_vertices, dtype=np.int64)
    vertex_bary = np.zeros((cur.n_vertices, 3))
    # first triangle (ascending) wins; deterministic
    for k in range(3):
        vids = cur.triangles[:, k]
        newmask = vertex_parent[vids] < 0
        rows = np.nonzero(newmask)[0]
        # keep only the first triangle touching each vertex
        first = {}
        for r in rows:
            v = int(vids[r])
            if v not in first:
                first[v] = r
        rr = np.array(list(first.values()), dtype=np.int64)
        vv = np.array(list(first.keys()), dtype=np.int64)
        if len(rr):
            vertex_parent[vv] = parent[rr]
            vertex_bary[vv] = corner_bary[rr, k]
    nesting = NestingMap(parent, corner_bary, vertex_parent, vertex_bary)
    return cur, nesting


def _edge_lookup(sorted_edges: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Indices of query edges in the lexicographically sorted edge table."""
    keys = sorted_edges[:, 0].astype(np.int64) << 32 | sorted_edges[:, 1]
    q = queries[:, 0].astype(np.int64) << 32 | queries[:, 1]
    pos = np.searchsorted(keys, q)
    if np.any(keys[pos] != q):
        raise MeshError("boundary edge not found in edge table")
    return pos


def extend_to_global(fine_local: Mesh, spec: DomainSpec, h_target: float) -> Mesh:
    """Mesh the complement of the covered regions and merge conformingly.

    The returned mesh keeps fine_local's vertices and triangles as an exact
    prefix (indices unchanged).  Interface vertices of the complement are
    taken verbatim from fine_local, so there are no hanging nodes; edges in
    the complement do not exceed max(h_target, existing interface spacing).
    """
    present = set(fine_local.region_tags_present())
    missing = sorted(spec.all_region_tags() - present)
    if not missing:
        return fine_local
    if spec.kind == "polygon":
        raise MeshError("polygon domains have a single region; nothing to extend")
    if spec.kind == "channel_with_plate":
        return _extend_channel(fine_local, spec, h_target, missing)
    return _extend_rings(fine_local, spec, h_target, missing)


def _boundary_loops(mesh: Mesh, edge_mask: np.ndarray) -> list[np.ndarray]:
    """Chain selected boundary edges into closed vertex loops."""
    nxt = {}
    for (a, b) in mesh.boundary_edges[edge_mask].tolist():
        nxt[a] = b
    loops = []
    seen = set()
    for start in sorted(nxt):
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            loop.append(cur)
            seen.add(cur)
            cur = nxt.get(cur)
            if cur is None:
                raise MeshError("open boundary chain where a loop was expected")
        loops.append(np.asarray(loop, dtype=np.int64))
    return loops


def _oriented_loop_thetas(mesh: Mesh, loop: np.ndarray, center) -> tuple[np.ndarray, np.ndarray]:
    pts = mesh.vertices[loop]
    th = np.arctan2(pts[:, 1] - center[1], pts[:, 0] - center[0])
    # boundary edges of CCW triangulations traverse outer loops CCW and
    # inner loops CW; reorder to increasing theta starting at the first
    order = np.argsort(th)
    return loop[order], th[order]


def _extend_rings(fine_local: Mesh, spec: DomainSpec, h_target, missing) -> Mesh:
    lines = spec.ring_lines()
    art = fine_local.boundary_labels == LABEL_IDS["artificial"]
    loops = _boundary_loops(fine_local, art)
    if not loops:
        raise MeshError("no artificial interface found on the local mesh")

    # classify each loop by its bounding ring line (mean radius match)
    loop_line = {}
    for loop in loops:
        pts = fine_local.vertices[loop]
        best, bestd = None, np.inf
        for li, (cx, cy, r) in enumerate(lines):
            d = abs(np.mean(np.hypot(pts[:, 0] - cx, pts[:, 1] - cy)) - r)
            if d < bestd:
                best, bestd = li, d
        gap = min(
            abs(lines[best][2] - lines[max(best - 1, 0)][2]),
            abs(lines[min(best + 1, len(lines) - 1)][2] - lines[best][2]),
        )
        if bestd > 0.45 * max(gap, 1e-30):
            raise MeshError("artificial interface does not match any ring line")
        loop_line[best] = loop

    verts = [fine_local.vertices]
    tris = [fine_local.triangles.astype(np.int64)]
    tags = [fine_local.region_tag]
    bedges = [fine_local.boundary_edges.astype(np.int64)]
    blabels = [fine_local.boundary_labels]
    offset = fine_local.n_vertices
    drop_artificial = np.zeros(len(fine_local.boundary_edges), dtype=bool)

    for band in missing:
        inner_li, outer_li = band - 1, band
        side = {}
        for li in (inner_li, outer_li):
            if li in loop_line:
                loop, th = _oriented_loop_thetas(
                    fine_local, loop_line[li], lines[li][:2]
                )
                side[li] = ("existing", loop, th)
        if inner_li in side:
            n_theta = len(side[inner_li][1])
            thetas = side[inner_li][2]
        elif outer_li in side:
            n_theta = len(side[outer_li][1])
            thetas = side[outer_li][2]
        else:
            raise MeshError(f"band {band} touches no interface of the local mesh")

        ring_pts = {}
        for li in (inner_li, outer_li):
            if li in side:
                ring_pts[li] = fine_local.vertices[side[li][1]]
            else:
                cx, cy, r = lines[li]
                ring_pts[li] = np.column_stack(
                    [cx + r * np.cos(thetas), cy + r * np.sin(thetas)]
                )
        gap = (lines[outer_li][2] - lines[inner_li][2]) + math.hypot(
            lines[outer_li][0] - lines[inner_li][0],
            lines[outer_li][1] - lines[inner_li][1],
        )
        n_r = max(1, math.ceil(gap / h_target))

        ring_ids = []
        for j in range(n_r + 1):
            s = j / n_r
            if j == 0 and inner_li in side:
                ring_ids.append(side[inner_li][1])
                continue
            if j == n_r and outer_li in side:
                ring_ids.append(side[outer_li][1])
                continue
            pts = (1 - s) * ring_pts[inner_li] + s * ring_pts[outer_li]
            verts.append(pts)
            ring_ids.append(offset + np.arange(n_theta))
            offset += n_theta

        i = np.arange(n_theta)
        ip = (i + 1) % n_theta
        for row in range(n_r):
            a, b = ring_ids[row], ring_ids[row + 1]
            tris.append(np.column_stack([a[i], b[i], b[ip]]))
            tris.append(np.column_stack([a[i], b[ip], a[ip]]))
            tags.append(np.full(2 * n_theta, band, dtype=np.int32))

        # new outer boundaries of the band
        for li, ring in ((inner_li, ring_ids[0]), (outer_li, ring_ids[-1])):
            if li in side:
                continue  # interface absorbed into the interior
            e = np.column_stack([ring[i], ring[ip]])
            bedges.append(e)
            lab = (
                LABEL_IDS["inner_circle"] if li == 0
                else LABEL_IDS["outer_circle"] if li == len(lines) - 1
                else LABEL_IDS["artificial"]
            )
            blabels.append(np.full(n_theta, lab, dtype=np.int32))
        # absorbed interfaces are no longer boundary
        for li in (inner_li, outer_li):
            if li in side:
                loop_set = set(side[li][1].tolist())
                for k, (a, b) in enumerate(fine_local.boundary_edges.tolist()):
                    if a in loop_set and b in loop_set and art[k]:
                        drop_artificial[k] = True

    keep = ~drop_artificial
    bedges[0] = fine_local.boundary_edges[keep].astype(np.int64)
    blabels[0] = fine_local.boundary_labels[keep]
    out = Mesh(
        np.vstack(verts),
        np.vstack(tris),
        np.concatenate(tags),
        np.vstack(bedges),
        np.concatenate(blabels),
        level=fine_local.level,
    )
    out.validate()
    return out


def _extend_channel(fine_local: Mesh, spec: DomainSpec, h_target, missing) -> Mesh:
    x0, y0, x1, y1 = spec.channel
    px0, px1, ph = spec.plate
    # Reuse the local mesh's tensor lines inside its extent; add fillers only
    # beyond it.  Filler lines crossing the local interface would create
    # hanging nodes, so within [min, max] of the local coordinates the line
    # sets must match exactly.
    xs = np.unique(fine_local.vertices[:, 0])
    ys = np.unique(fine_local.vertices[:, 1])
    s = h_target / math.sqrt(2.0)
    xs = _extend_lines(xs, x0, x1, s)
    ys = _extend_lines(ys, y0, y1, s)
    eps = 1e-9 * max(x1 - x0, y1 - y0)

    def keep_cell(c):
        inside_plate = (c[:, 0] > px0) & (c[:, 0] < px1) & (c[:, 1] < y0 + ph)
        return np.isin(spec.classify(c), missing) & ~inside_plate

    def label_edge(m):
        lab = np.full(len(m), LABEL_IDS["artificial"], dtype=np.int32)
        lab[np.abs(m[:, 0] - x0) < eps] = LABEL_IDS["inflow"]
        lab[np.abs(m[:, 0] - x1) < eps] = LABEL_IDS["outflow"]
        on_wall = (np.abs(m[:, 1] - y0) < eps) | (np.abs(m[:, 1] - y1) < eps)
        lab[on_wall] = LABEL_IDS["wall"]
        on_plate = (
            (m[:, 0] > px0 - eps) & (m[:, 0] < px1 + eps) & (m[:, 1] < y0 + ph + eps)
        )
        lab[on_plate & ~(np.abs(m[:, 1] - y0) < eps)] = LABEL_IDS["obstacle"]
        return lab

    comp = _grid_mesh(xs, ys, keep_cell, spec.classify, label_edge)
    return _merge_meshes(fine_local, comp, tol=1e-10)


def _extend_lines(existing: np.ndarray, lo: float, hi: float, s: float) -> np.ndarray:
    """Existing coordinate lines plus uniform fillers strictly outside them."""
    parts = [existing]
    if existing[0] > lo + 1e-12:
        parts.insert(0, _fill_lines([lo, existing[0]], s)[:-1])
    if existing[-1] < hi - 1e-12:
        parts.append(_fill_lines([existing[-1], hi], s)[1:])
    return np.concatenate(parts)


def _merge_meshes(base: Mesh, other: Mesh, tol: float) -> Mesh:
    """Merge `other` into `base`, identifying shared vertices within tol."""
    tree = cKDTree(base.vertices)
    d, idx = tree.query(other.vertices, k=1)
    remap = np.where(d <= tol, idx, -1)
    new_ids = np.nonzero(remap < 0)[0]
    remap[new_ids] = base.n_vertices + np.arange(len(new_ids))
    verts = np.vstack([base.vertices, other.vertices[new_ids]])
    tris = np.vstack([base.triangles.astype(np.int64), remap[other.triangles]])
    tags = np.concatenate([base.region_tag, other.region_tag])

    mesh = Mesh(verts, tris, tags, np.empty((0, 2)), np.empty(0), level=base.level)
    edges, counts = mesh.unique_edges()
    bedges = edges[counts == 1]
    if np.any(counts > 2):
        raise MeshError("interface vertex mismatch: merged mesh is non-manifold")
    # carry labels over from whichever input labeled the surviving edge
    label_of = {}
    for m, off_remap in ((base, None), (other, remap)):
        be = m.boundary_edges.astype(np.int64)
        if off_remap is not None:
            be = off_remap[be]
        for (a, b), lab in zip(np.sort(be, axis=1).tolist(), m.boundary_labels):
            label_of[(a, b)] = int(lab)
    labels = np.array(
        [label_of.get(tuple(e), LABEL_IDS["artificial"]) for e in bedges.tolist()],
        dtype=np.int32,
    )
    out = Mesh(verts, tris, tags, bedges, labels, level=base.level)
    out.validate()
    return out


def pad_nesting(nesting: NestingMap, global_mesh: Mesh) -> NestingMap:
    """Extend a local NestingMap with -1 parents for appended triangles."""
    nt, nv = global_mesh.n_triangles, global_mesh.n_vertices
    nt0 = len(nesting.parent)
    nv0 = len(nesting.vertex_parent)
    parent = np.concatenate([nesting.parent, -np.ones(nt - nt0, dtype=np.int64)])
    cb = np.concatenate([nesting.corner_bary, np.zeros((nt - nt0, 3, 3))])
    vp = np.concatenate([nesting.vertex_parent, -np.ones(nv - nv0, dtype=np.int64)])
    vb = np.concatenate([nesting.vertex_bary, np.zeros((nv - nv0, 3))])
    return NestingMap(parent, cb, vp, vb)


# ---------------------------------------------------------------------------
# geometric diagnostics
# ---------------------------------------------------------------------------

# degree-5 symmetric triangle rule reused for delta sampling points
_DELTA_BARY = np.array(
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


def _point_triangle_distance(pts: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Exact Euclidean distance from points (m,2) to one triangle (3,2)."""
    a, b, c = tri
    d = np.zeros(len(pts))
    # inside test via barycentric signs
    T = np.column_stack([b - a, c - a])
    det = T[0, 0] * T[1, 1] - T[0, 1] * T[1, 0]
    rel = pts - a
    l1 = (rel[:, 0] * T[1, 1] - rel[:, 1] * T[0, 1]) / det
    l2 = (-rel[:, 0] * T[1, 0] + rel[:, 1] * T[0, 0]) / det
    inside = (l1 >= 0) & (l2 >= 0) & (l1 + l2 <= 1)
    out = ~inside
    if np.any(out):
        dmin = np.full(out.sum(), np.inf)
        p = pts[out]
        for (s, t) in ((a, b), (b, c), (c, a)):
            st = t - s
            L2 = st @ st
            u = np.clip(((p - s) @ st) / L2, 0.0, 1.0)
            proj = s + u[:, None] * st
            dmin = np.minimum(dmin, np.linalg.norm(p - proj, axis=1))
        d[out] = dmin
    return d


def compute_delta(global_mesh: Mesh, observation_tags: set[int]) -> float:
    """Maximum distance from any mesh point to the observed triangle union.

    Sampled at all vertices plus the degree-5 quadrature points of every
    triangle; distance to each candidate triangle is exact (no sampling of
    the observation set).
    """
    obs_tags = sorted(set(int(t) for t in observation_tags))
    mask = np.isin(global_mesh.region_tag, obs_tags)
    if not mask.any():
        raise MeshError("observation tag set selects no triangles")
    obs_tris = global_mesh.triangles[mask]
    corners = global_mesh.vertices[obs_tris]

    pts = [global_mesh.vertices]
    allc = global_mesh.triangle_corners()
    for bary in _DELTA_BARY:
        pts.append(np.einsum("k,nkd->nd", bary, allc))
    pts = np.vstack(pts)

    centroids = corners.mean(axis=1)
    circum = np.linalg.norm(corners - centroids[:, None, :], axis=2).max()
    tree = cKDTree(centroids)
    d_cent, nearest = tree.query(pts, k=1)

    # exact distance to the nearest-centroid triangle bounds best from above
    best = np.full(len(pts), np.inf)
    for t in np.unique(nearest):
        sel = nearest == t
        best[sel] = _point_triangle_distance(pts[sel], corners[t])

    # only points whose upper bound reaches the best lower bound can attain
    # the maximum; everything else is discarded before the exact pass
    lower = np.maximum(d_cent - circum, 0.0)
    survivors = np.nonzero(best >= lower.max() - 1e-15)[0]
    for i in survivors:
        if best[i] == 0.0:
            continue
        cand = tree.query_ball_point(pts[i], best[i] + circum + 1e-15)
        for t in cand:
            if t == nearest[i]:
                continue
            dt = _point_triangle_distance(pts[i : i + 1], corners[t])[0]
            if dt < best[i]:
                best[i] = dt
                if best[i] == 0.0:
                    break
    return float(best[survivors].max())


@dataclass
class MeshStats:
    n_vertices: int
    n_triangles: int
    area: float
    h_max: float
    vertices_per_area: float
    per_region: dict  # tag -> dict(n_vertices, area, vertices_per_area, h_max)

    def as_text(self) -> str:
        lines = [
            f"vertices            {self.n_vertices}",
            f"triangles           {self.n_triangles}",
            f"area                {self.area:.6g}",
            f"h_max               {self.h_max:.6g}",
            f"vertices_per_area   {self.vertices_per_area:.6g}",
        ]
        for tag in sorted(self.per_region):
            r = self.per_region[tag]
            lines.append(
                f"region {tag}: vertices {r['n_vertices']}, area {r['area']:.6g}, "
                f"per-area {r['vertices_per_area']:.6g}, h_max {r['h_max']:.6g}"
            )
        return "\n".join(lines)


def mesh_statistics(mesh: Mesh) -> MeshStats:
    """Vertex counts, densities and mesh sizes, globally and per region.

    Vertices on region interfaces are counted for each adjacent region.
    """
    areas = mesh.signed_areas()
    lengths = mesh.edge_lengths().max(axis=1)
    per = {}
    for tag, vids in mesh.vertex_regions().items():
        sel = mesh.region_tag == tag
        a = float(areas[sel].sum())
        per[tag] = {
            "n_vertices": int(len(vids)),
            "area": a,
            "vertices_per_area": len(vids) / a if a > 0 else math.inf,
            "h_max": float(lengths[sel].max()),
        }
    total = float(areas.sum())
    return MeshStats(
        n_vertices=mesh.n_vertices,
        n_triangles=mesh.n_triangles,
        area=total,
        h_max=mesh.h_max,
        vertices_per_area=mesh.n_vertices / total,
        per_region=per,
    )
