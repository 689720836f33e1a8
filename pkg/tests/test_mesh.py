import numpy as np
import pytest

from rdcontrol import mesh as m


class TestBuildUnitSquare:
    def test_smallest_square(self):
        sq = m.build_unit_square(1, 1, 1, 1)
        assert sq.n_nodes == 4
        assert sq.n_elements == 2
        assert sq.n_regions == 1
        assert len(sq.boundary_edges) == 4
        assert all(kind == m.FLUX for _, _, kind in sq.boundary_edges)

    def test_node_and_element_counts(self):
        sq = m.build_unit_square(8, 8, 8, 8)
        assert sq.n_nodes == 81
        assert sq.n_elements == 128
        assert sq.n_regions == 64

    def test_region_counts_by_centroid_classification(self):
        sq = m.build_unit_square(16, 16, 8, 8)
        assert sq.n_elements == 512
        counts = np.bincount(sq.region_of_element, minlength=64)
        assert np.all(counts == 8)
        # Brute-force recheck: classify each centroid against the patch grid.
        for e in range(sq.n_elements):
            cx, cy = sq.element_coords(e).mean(axis=0)
            patch = int(cy * 8) * 8 + int(cx * 8)
            assert patch == sq.region_of_element[e]

    def test_rejects_non_divisible_patches(self):
        with pytest.raises(m.MeshError, match="does not divide"):
            m.build_unit_square(10, 10, 3, 3)
        with pytest.raises(m.MeshError):
            m.build_unit_square(2, 2, 4, 1)

    def test_all_elements_ccw(self):
        sq = m.build_unit_square(5, 3, 1, 1)
        for e in range(sq.n_elements):
            area, _ = m.element_gradients(sq, e)
            assert area > 0

    def test_area_sums_to_one(self):
        sq = m.build_unit_square(7, 5, 1, 1)
        areas, _ = m.all_element_gradients(sq)
        assert abs(areas.sum() - 1.0) < 1e-12


class TestElementGradients:
    def test_unit_right_triangle(self):
        tri = m.from_arrays(
            [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], [[0, 1, 2]], [0]
        )
        area, grads = m.element_gradients(tri, 0)
        assert area == pytest.approx(0.5)
        np.testing.assert_allclose(grads, [[-1, -1], [1, 0], [0, 1]], atol=1e-14)

    def test_gradients_sum_to_zero(self):
        sq = m.build_unit_square(4, 4, 2, 2)
        for e in range(sq.n_elements):
            _, grads = m.element_gradients(sq, e)
            np.testing.assert_allclose(grads.sum(axis=0), 0.0, atol=1e-13)

    def test_affine_field_reproduced_exactly(self):
        # Nodal interpolation of u = a.x + b has per-element gradient a.
        rng = np.random.default_rng(7)
        sq = m.build_unit_square(6, 6, 3, 3)
        for _ in range(20):
            a = rng.normal(size=2)
            b = rng.normal()
            u = sq.nodes @ a + b
            for e in range(0, sq.n_elements, 7):
                _, grads = m.element_gradients(sq, e)
                grad_u = u[sq.elements[e]] @ grads
                np.testing.assert_allclose(grad_u, a, atol=1e-12)

    def test_vectorized_matches_scalar(self):
        sq = m.build_unit_square(3, 5, 1, 1)
        areas, grads = m.all_element_gradients(sq)
        for e in range(sq.n_elements):
            area_e, grads_e = m.element_gradients(sq, e)
            assert areas[e] == pytest.approx(area_e)
            np.testing.assert_allclose(grads[e], grads_e)

    def test_bad_element_id(self):
        sq = m.build_unit_square(1, 1)
        with pytest.raises(m.MeshError, match="out of range"):
            m.element_gradients(sq, 99)

    def test_degenerate_triangle_rejected(self):
        with pytest.raises(m.MeshError, match="degenerate"):
            m.from_arrays(
                [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]], [[0, 1, 2]], [0]
            )


class TestBoundaryExtraction:
    def test_boundary_edges_touch_one_element(self):
        sq = m.build_unit_square(4, 3, 1, 1)
        counts: dict = {}
        for tri in sq.elements:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                counts[(min(a, b), max(a, b))] = counts.get((min(a, b), max(a, b)), 0) + 1
        boundary = {(a, b) for a, b, _ in sq.boundary_edges}
        for edge, n in counts.items():
            assert n in (1, 2)
            assert (edge in boundary) == (n == 1)

    def test_square_boundary_edge_count(self):
        sq = m.build_unit_square(6, 4, 1, 1)
        assert len(sq.boundary_edges) == 2 * (6 + 4)

    def test_dirichlet_edges_marked_essential(self):
        sq = m.build_unit_square(2, 2, 1, 1)
        bottom = [n for n in range(sq.n_nodes) if sq.nodes[n, 1] == 0.0]
        tagged = m.from_arrays(
            sq.nodes, sq.elements, sq.region_of_element, {n: 0.25 for n in bottom}
        )
        kinds = {}
        for a, b, kind in tagged.boundary_edges:
            kinds[(a, b)] = kind
        n_essential = sum(1 for k in kinds.values() if k == m.ESSENTIAL)
        assert n_essential == 2
        for (a, b), kind in kinds.items():
            both_bottom = tagged.nodes[a, 1] == 0.0 and tagged.nodes[b, 1] == 0.0
            assert kind == (m.ESSENTIAL if both_bottom else m.FLUX)


class TestMeshIO:
    def test_round_trip(self, tmp_path):
        sq = m.build_unit_square(2, 2, 1, 1)
        path = tmp_path / "sq.mesh"
        m.save_mesh(sq, path)
        again = m.load_mesh(path)
        assert m.meshes_equal(sq, again)

    def test_round_trip_with_dirichlet_and_odd_coords(self, tmp_path):
        rng = np.random.default_rng(3)
        sq = m.build_unit_square(3, 3, 3, 3)
        jitter = sq.nodes + 1e-3 * rng.normal(size=sq.nodes.shape)
        mesh = m.from_arrays(jitter, sq.elements, sq.region_of_element, {0: -1.5})
        path = tmp_path / "jitter.mesh"
        m.save_mesh(mesh, path)
        assert m.meshes_equal(mesh, m.load_mesh(path))

    def test_regions15_fixture(self):
        from rdcontrol.cli import regions15_mesh_path

        mesh = m.load_mesh(regions15_mesh_path())
        assert mesh.n_regions == 15
        assert all(kind == m.FLUX for _, _, kind in mesh.boundary_edges)

    def test_clockwise_triangle_reoriented(self, tmp_path):
        path = tmp_path / "cw.mesh"
        path.write_text(
            "mesh 2d tri\nnodes 3\n0 0\n1 0\n0 1\nelements 1\n0 2 1 0\n"
        )
        mesh = m.load_mesh(path)
        area, _ = m.element_gradients(mesh, 0)
        assert area > 0

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "c.mesh"
        path.write_text(
            "# a comment\nmesh 2d tri\n\nnodes 3  # three nodes\n"
            "0 0\n1 0\n0 1\nelements 1\n0 1 2 0\n"
        )
        assert m.load_mesh(path).n_nodes == 3

    @pytest.mark.parametrize(
        "text,line",
        [
            ("mesh 2d quad\n", 1),
            ("mesh 2d tri\nnodes x\n", 2),
            ("mesh 2d tri\nnodes 2\n0 0\n", 3),
            ("mesh 2d tri\nnodes 3\n0 0\n1 0\n0 1\nelements 1\n0 1 5 0\n", 7),
            ("mesh 2d tri\nnodes 3\n0 0\n1 0\n0 1\nelements 1\n0 1 2\n", 7),
            ("mesh 2d tri\nnodes 3\n0 0\n1 0\n2 0\nelements 1\n0 1 2 0\n", 7),
            (
                "mesh 2d tri\nnodes 3\n0 0\n1 0\n0 1\nelements 1\n0 1 2 0\n"
                "dirichlet 1\n9 0.0\n",
                9,
            ),
        ],
    )
    def test_malformed_files_name_the_line(self, tmp_path, text, line):
        path = tmp_path / "bad.mesh"
        path.write_text(text)
        with pytest.raises(m.MeshFormatError) as err:
            m.load_mesh(path)
        assert err.value.line == line

    def test_region_gap_rejected(self, tmp_path):
        path = tmp_path / "gap.mesh"
        path.write_text(
            "mesh 2d tri\nnodes 4\n0 0\n1 0\n1 1\n0 1\n"
            "elements 2\n0 1 2 0\n0 2 3 2\n"
        )
        with pytest.raises(m.MeshError, match="gaps"):
            m.load_mesh(path)


class TestRegionQueries:
    def test_region_areas_sum_to_domain(self):
        sq = m.build_unit_square(8, 8, 4, 2)
        areas = sq.region_areas()
        assert areas.shape == (8,)
        assert abs(areas.sum() - 1.0) < 1e-12
        np.testing.assert_allclose(areas, 1.0 / 8.0)

    def test_region_nodes(self):
        sq = m.build_unit_square(2, 1, 2, 1)
        left = sq.region_nodes(0)
        assert all(sq.nodes[n, 0] <= 0.5 + 1e-12 for n in left)

    def test_every_element_in_exactly_one_region(self):
        sq = m.build_unit_square(6, 6, 3, 3)
        assert sq.region_of_element.shape == (sq.n_elements,)
        assert set(np.unique(sq.region_of_element)) == set(range(9))
