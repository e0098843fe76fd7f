import numpy as np
import pytest

from core.geometry import CurveSpec, barycenter, discretize, make_curve, make_polygon
from core.utils import GeometryError


class TestMakeCurve:
    def test_circle_is_counterclockwise(self, unit_circle):
        assert unit_circle.is_smooth
        assert unit_circle.signed_area == pytest.approx(np.pi, rel=1e-5)

    def test_clockwise_polygon_is_reversed(self):
        poly = make_polygon([[0, 0], [0, 1], [1, 1], [1, 0]])
        assert poly.signed_area == pytest.approx(1.0)

    def test_triangle_vertices(self):
        tri = make_curve(CurveSpec(kind="triangle", a=0.5, b=0.2, c=0.8))
        np.testing.assert_allclose(tri.vertices, [[0, 0], [0.5, 0], [0.2, 0.8]])

    @pytest.mark.parametrize("spec", [
        CurveSpec(kind="circle", radius=0.0),
        CurveSpec(kind="square", side=-1.0),
        CurveSpec(kind="triangle", a=1.5),
        CurveSpec(kind="triangle", c=0.0),
        CurveSpec(kind="hexagon"),
    ])
    def test_invalid_specs(self, spec):
        with pytest.raises(GeometryError):
            make_curve(spec)

    def test_degenerate_polygon(self):
        with pytest.raises(GeometryError):
            make_polygon([[0, 0], [1, 1], [2, 2]])

    def test_contains_and_distance(self):
        square = make_curve(CurveSpec(kind="square", side=2.0))
        inside = square.contains(np.array([[0.0, 0.0], [1.5, 0.0], [0.9, -0.9]]))
        assert inside.tolist() == [True, False, True]
        np.testing.assert_allclose(square.distance(np.array([[0.0, 0.0], [2.0, 0.0]])), [1.0, 1.0])

    def test_barycenter_requires_polygon(self, unit_circle):
        tri = make_curve(CurveSpec(kind="triangle", a=0.3, b=0.6, c=0.3))
        np.testing.assert_allclose(barycenter(tri), [0.3, 0.1])
        with pytest.raises(GeometryError):
            barycenter(unit_circle)


class TestDiscretize:
    def test_circle_nodes_and_normals(self, circle_grid):
        np.testing.assert_allclose(np.linalg.norm(circle_grid.points, axis=1), 1.0)
        np.testing.assert_allclose(circle_grid.normals, circle_grid.points, atol=1e-12)
        np.testing.assert_allclose(circle_grid.curvature, 1.0)
        assert circle_grid.length == pytest.approx(2 * np.pi)

    def test_star_length_matches_polyline(self, star_grid):
        star = make_curve(CurveSpec(kind="star"))
        assert star_grid.length == pytest.approx(star.length, rel=1e-4)

    def test_square_midpoints_avoid_corners(self, square_grid):
        assert square_grid.n == 200
        assert square_grid.length == pytest.approx(8.0)
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=float)
        gaps = np.linalg.norm(square_grid.points[:, None, :] - corners[None], axis=-1)
        assert gaps.min() == pytest.approx(0.02)
        np.testing.assert_allclose(np.linalg.norm(square_grid.normals, axis=1), 1.0)

    def test_square_normals_point_outward(self, square_grid):
        assert np.all(np.sum(square_grid.points * square_grid.normals, axis=1) > 0)

    def test_polygon_count_must_divide(self):
        square = make_curve(CurveSpec(kind="square"))
        with pytest.raises(GeometryError):
            discretize(square, 201)

    def test_smooth_minimum(self, unit_circle):
        with pytest.raises(GeometryError):
            discretize(unit_circle, 8)

    def test_grid_hash_is_stable(self, unit_circle):
        assert discretize(unit_circle, 32).grid_hash == discretize(unit_circle, 32).grid_hash
        assert discretize(unit_circle, 32).grid_hash != discretize(unit_circle, 64).grid_hash

    def test_boundary_distance(self, square_grid):
        d = square_grid.boundary_distance(np.array([[0.0, 0.0], [0.0, 0.5]]))
        np.testing.assert_allclose(d, [1.0, 0.5])
