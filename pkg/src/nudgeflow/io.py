"""File formats: mesh interchange text, legacy VTK snapshots, observation
records for offline replay, and full-precision CSV tables.

All floating-point text is written with 17 significant digits so parsing
recovers the exact double.
"""

from __future__ import annotations

import numpy as np

from .fem import DofMap, State
from .mesh import _ID_TO_LABEL, LABEL_IDS, Mesh, MeshError

__all__ = [
    "write_mesh",
    "read_mesh",
    "write_vtk",
    "write_csv",
    "read_csv",
    "ObservationRecorder",
    "ObservationReplay",
]

FLOAT_FMT = "%.17g"


def write_mesh(path, mesh: Mesh) -> None:
    """Text interchange: header `nv nt nbe`, vertex lines, triangle lines
    `v0 v1 v2 region_tag`, boundary lines `v0 v1 label_id` (0-based ids)."""
    with open(path, "w", encoding="utf-8") as fh:
        for lid in sorted(_ID_TO_LABEL):
            fh.write(f"# {lid} {_ID_TO_LABEL[lid]}\n")
        fh.write(f"{mesh.n_vertices} {mesh.n_triangles} {len(mesh.boundary_edges)}\n")
        for x, y in mesh.vertices:
            fh.write(f"{FLOAT_FMT % x} {FLOAT_FMT % y}\n")
        for (a, b, c), tag in zip(mesh.triangles, mesh.region_tag):
            fh.write(f"{a} {b} {c} {tag}\n")
        for (a, b), lab in zip(mesh.boundary_edges, mesh.boundary_labels):
            fh.write(f"{a} {b} {lab}\n")


def read_mesh(path) -> Mesh:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip() and not ln.startswith("#")]
    nv, nt, nbe = (int(v) for v in lines[0].split())
    if len(lines) != 1 + nv + nt + nbe:
        raise MeshError(f"mesh file has {len(lines) - 1} records, expected {nv + nt + nbe}")
    verts = np.array([[float(v) for v in ln.split()] for ln in lines[1 : 1 + nv]])
    tri_rows = [ln.split() for ln in lines[1 + nv : 1 + nv + nt]]
    tris = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in tri_rows])
    tags = np.array([int(r[3]) for r in tri_rows])
    be_rows = [ln.split() for ln in lines[1 + nv + nt :]]
    bedges = np.array([[int(r[0]), int(r[1])] for r in be_rows]).reshape(-1, 2)
    blabels = np.array([int(r[2]) for r in be_rows])
    return Mesh(verts, tris, tags, bedges, blabels)


def write_vtk(path, mesh: Mesh, vel: DofMap, state: State) -> None:
    """Legacy ASCII VTK unstructured grid with vertex velocity/pressure."""
    nv = mesh.n_vertices
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write("flow snapshot\nASCII\nDATASET UNSTRUCTURED_GRID\n")
        fh.write(f"POINTS {nv} double\n")
        for x, y in mesh.vertices:
            fh.write(f"{FLOAT_FMT % x} {FLOAT_FMT % y} 0\n")
        nt = mesh.n_triangles
        fh.write(f"CELLS {nt} {4 * nt}\n")
        for a, b, c in mesh.triangles:
            fh.write(f"3 {a} {b} {c}\n")
        fh.write(f"CELL_TYPES {nt}\n")
        fh.write("\n".join(["5"] * nt) + "\n")
        fh.write(f"POINT_DATA {nv}\n")
        fh.write("VECTORS velocity double\n")
        for i in range(nv):
            u = state.velocity[2 * i]
            v = state.velocity[2 * i + 1]
            fh.write(f"{FLOAT_FMT % u} {FLOAT_FMT % v} 0\n")
        fh.write("SCALARS pressure double 1\nLOOKUP_TABLE default\n")
        for i in range(nv):
            fh.write(f"{FLOAT_FMT % state.pressure[i]}\n")


def write_csv(path, header: list, columns: list) -> None:
    """Comma-separated table, one header row, 17-significant-digit floats."""
    cols = [np.asarray(c) for c in columns]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in zip(*cols):
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")


def read_csv(path) -> tuple[list, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    return header, data


class ObservationRecorder:
    """Writes per-step coarse observation values.

    Format: `obsrecord 1` header, then one line per sample:
    `step coarse_node_id u_x u_y`.
    """

    def __init__(self, path, restriction):
        self._fh = open(path, "w", encoding="utf-8")
        self._fh.write("obsrecord 1\n")
        self._restriction = restriction

    def __call__(self, step_index: int, u_velocity: np.ndarray) -> None:
        values = self._restriction @ u_velocity
        nc = len(values) // 2
        for k in range(nc):
            self._fh.write(
                f"{step_index} {k} "
                f"{FLOAT_FMT % values[2 * k]} {FLOAT_FMT % values[2 * k + 1]}\n"
            )

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class ObservationReplay:
    """Reads a recorded observation file; callable as replay(step) -> values."""

    def __init__(self, path):
        with open(path, encoding="utf-8") as fh:
            head = fh.readline().split()
            if head != ["obsrecord", "1"]:
                raise ValueError(f"unsupported observation record header {head}")
            raw = np.loadtxt(fh, ndmin=2)
        steps = raw[:, 0].astype(int)
        nodes = raw[:, 1].astype(int)
        self.n_steps = steps.max() + 1 if len(steps) else 0
        nc = nodes.max() + 1 if len(nodes) else 0
        self._values = np.zeros((self.n_steps, 2 * nc))
        self._values[steps, 2 * nodes] = raw[:, 2]
        self._values[steps, 2 * nodes + 1] = raw[:, 3]

    def __call__(self, step_index: int) -> np.ndarray:
        return self._values[step_index]
