import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nudgeflow import mesh as M
from nudgeflow.io import read_mesh, write_mesh

SQUARE = M.polygon_spec([(0, 0), (1, 0), (1, 1), (0, 1)])


def test_unit_square_minimal_triangulation():
    m = M.build_coarse_subregion_mesh(SQUARE, math.sqrt(2))
    assert m.n_triangles == 2
    assert m.n_vertices == 4
    m.validate()


def test_refine_counts_unit_square():
    m = M.build_coarse_subregion_mesh(SQUARE, math.sqrt(2))
    fine, _ = M.refine_uniform(m, 1)
    # V' = V + E = 4 + 5
    assert fine.n_vertices == 9
    assert fine.n_triangles == 8
    fine.validate()


def test_refine_quadruples_and_halves():
    m = M.build_coarse_subregion_mesh(M.annulus_spec(), 0.35)
    fine, _ = M.refine_uniform(m, 1)
    assert fine.n_triangles == 4 * m.n_triangles
    assert fine.h_max == pytest.approx(0.5 * m.h_max, rel=1e-14)


def test_coarse_annulus_region2_area():
    spec = M.annulus_spec(r1=0.2, r2=0.9)
    m = M.build_coarse_subregion_mesh(spec, 0.3, tags={2})
    exact = math.pi * (0.9**2 - 0.2**2)
    assert m.area() == pytest.approx(exact, rel=0.02)
    assert m.h_max <= 1.5 * 0.3
    m.validate()


def test_coarse_channel_region2_vertex_count():
    # target from the l=1 interior-region table row (~1447 vertices)
    spec = M.channel_spec()
    m = M.build_coarse_subregion_mesh(spec, 0.82, tags={2})
    assert abs(m.n_vertices - 1447) <= 0.30 * 1447
    m.validate()


def test_nesting_barycentric_partition_of_unity():
    spec = M.annulus_spec()
    coarse = M.build_coarse_subregion_mesh(spec, 0.3, tags={2})
    fine, nest = M.refine_uniform(coarse, 2)
    has = nest.vertex_parent >= 0
    assert has.all()
    assert np.abs(nest.vertex_bary.sum(axis=1) - 1.0).max() <= 1e-12


def test_nesting_reproduces_linear_functions():
    spec = M.annulus_spec()
    coarse = M.build_coarse_subregion_mesh(spec, 0.3)
    fine, nest = M.refine_uniform(coarse, 2)
    for fn in (lambda p: np.ones(len(p)), lambda p: p[:, 0], lambda p: p[:, 1]):
        coarse_vals = fn(coarse.vertices)
        out = nest.prolong_vertex_values(coarse, coarse_vals)
        assert np.abs(out - fn(fine.vertices)).max() <= 1e-12


def test_extend_to_global_annulus_area_and_prefix():
    spec = M.annulus_spec(r1=0.2, r2=0.9)
    local = M.build_coarse_subregion_mesh(spec, 0.12, tags={2})
    fine, _ = M.refine_uniform(local, 1)
    g = M.extend_to_global(fine, spec, h_target=0.06)
    g.validate()
    assert g.area() == pytest.approx(math.pi * (1 - 0.01), rel=0.01)
    # restriction to the covered region is vertex-for-vertex the input
    assert np.array_equal(g.vertices[: fine.n_vertices], fine.vertices)
    assert sorted(g.region_tags_present()) == [1, 2, 3]


def test_extend_identity_when_all_regions_covered():
    spec = M.annulus_spec()
    m = M.build_coarse_subregion_mesh(spec, 0.2)
    out = M.extend_to_global(m, spec, h_target=0.1)
    assert out is m


def test_extend_channel_complement():
    spec = M.channel_spec()
    local = M.build_coarse_subregion_mesh(spec, 1.1, tags={2})
    fine, _ = M.refine_uniform(local, 1)
    g = M.extend_to_global(fine, spec, h_target=0.55)
    g.validate()
    assert g.area() == pytest.approx(27 * 20 - 0.125, rel=1e-9)
    assert np.array_equal(g.vertices[: fine.n_vertices], fine.vertices)


def test_dns_scale_annulus_resolves_dissipation_scale():
    # mesh targeting the reported global vertex count resolves Re^{-1/2}
    spec = M.annulus_spec(r1=0.2, r2=0.9)
    coarse = M.build_coarse_subregion_mesh(spec, 0.062)
    fine, _ = M.refine_uniform(coarse, 1)
    assert fine.h_max <= 600 ** -0.5
    assert abs(fine.n_vertices - 12293) <= 0.30 * 12293


@pytest.mark.parametrize(
    "r1,r2,expected",
    [(0.2, 0.9, 0.1), (0.3, 0.8, 0.2), (0.5, 0.85, 0.4)],
)
def test_compute_delta_annulus(r1, r2, expected):
    spec = M.annulus_spec(r1=r1, r2=r2)
    coarse = M.build_coarse_subregion_mesh(spec, 0.1)
    fine, _ = M.refine_uniform(coarse, 1)
    d = M.compute_delta(fine, {2})
    assert d == pytest.approx(expected, rel=0.02)


def test_compute_delta_whole_domain_zero():
    spec = M.annulus_spec()
    m = M.build_coarse_subregion_mesh(spec, 0.2)
    assert M.compute_delta(m, {1, 2, 3}) == 0.0


def test_compute_delta_monotone_in_tags():
    spec = M.annulus_spec()
    m = M.build_coarse_subregion_mesh(spec, 0.15)
    d2 = M.compute_delta(m, {2})
    d12 = M.compute_delta(m, {1, 2})
    d123 = M.compute_delta(m, {1, 2, 3})
    assert d123 <= d12 <= d2


def test_statistics_unit_square():
    m = M.build_coarse_subregion_mesh(SQUARE, math.sqrt(2))
    s = M.mesh_statistics(m)
    assert s.n_vertices == 4
    assert s.vertices_per_area == pytest.approx(4.0)
    assert s.h_max == pytest.approx(math.sqrt(2))


def test_statistics_channel_dns_density():
    spec = M.channel_spec()
    coarse = M.build_coarse_subregion_mesh(spec, 0.76)
    fine, _ = M.refine_uniform(coarse, 1)
    s = M.mesh_statistics(fine)
    assert abs(s.vertices_per_area - 14) <= 0.30 * 14


def test_statistics_per_region_h_max_halves_under_refinement():
    spec = M.annulus_spec()
    coarse = M.build_coarse_subregion_mesh(spec, 0.25)
    fine, _ = M.refine_uniform(coarse, 1)
    sc = M.mesh_statistics(coarse)
    sf = M.mesh_statistics(fine)
    for tag in sc.per_region:
        assert sf.per_region[tag]["h_max"] == pytest.approx(
            0.5 * sc.per_region[tag]["h_max"], rel=1e-12
        )


def test_area_second_order_convergence_on_curved_domain():
    spec = M.annulus_spec()
    exact = spec.analytic_area()
    errs = []
    for h in (0.4, 0.2, 0.1):
        m = M.build_coarse_subregion_mesh(spec, h)
        errs.append(abs(m.area() - exact))
    r1 = errs[0] / errs[1]
    r2 = errs[1] / errs[2]
    assert 2.5 <= r1 <= 6.5
    assert 2.5 <= r2 <= 6.5


def test_conformity_of_all_generators():
    for spec, h in (
        (M.annulus_spec(), 0.2),
        (M.disk_with_hole_spec(), 0.2),
        (M.channel_spec(), 1.3),
        (M.polygon_spec([(0, 0), (2, 0), (2, 1), (1, 1.5), (0, 1)]), 0.8),
    ):
        m = M.build_coarse_subregion_mesh(spec, h)
        m.validate()
        edges, counts = m.unique_edges()
        assert set(np.unique(counts)) <= {1, 2}
        fine, _ = M.refine_uniform(m, 1)
        fine.validate()


def test_degenerate_spec_rejected():
    with pytest.raises(M.MeshError):
        M.build_coarse_subregion_mesh(M.annulus_spec(), 5.0)  # H > diameter
    with pytest.raises(M.MeshError):
        M.build_coarse_subregion_mesh(M.annulus_spec(), 0.2, tags=set())
    with pytest.raises(M.MeshError):
        M.annulus_spec(r1=0.9, r2=0.2)
    with pytest.raises(M.MeshError):
        M.compute_delta(M.build_coarse_subregion_mesh(SQUARE, 1.5), {7})


def test_mesh_file_roundtrip(tmp_path):
    spec = M.disk_with_hole_spec()
    m = M.build_coarse_subregion_mesh(spec, 0.25)
    path = tmp_path / "m.mesh"
    write_mesh(path, m)
    back = read_mesh(path)
    assert np.array_equal(back.vertices, m.vertices)
    assert np.array_equal(back.triangles, m.triangles)
    assert np.array_equal(back.region_tag, m.region_tag)
    assert np.array_equal(back.boundary_labels, m.boundary_labels)


@settings(max_examples=12, deadline=None)
@given(
    st.sets(st.sampled_from([1, 2, 3]), min_size=1, max_size=3),
    st.sets(st.sampled_from([1, 2, 3]), min_size=1, max_size=3),
)
def test_delta_monotonicity_property(tags_a, tags_b):
    spec = M.annulus_spec()
    m = _CACHED.setdefault("m", M.build_coarse_subregion_mesh(spec, 0.2))
    if not tags_a <= tags_b:
        tags_b = tags_a | tags_b
    da = M.compute_delta(m, tags_a)
    db = M.compute_delta(m, tags_b)
    assert db <= da + 1e-12


_CACHED: dict = {}
