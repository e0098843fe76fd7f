import numpy as np
import pytest
from scipy import special as sp

from core.special import (bessel_j0, bessel_j1, bessel_y0, bessel_y1, hankel_h0, hankel_h1,
                          hankel_h0_remainder_limit)

# 級数と漸近展開の切り替え点 12 の両側を含める
POINTS = np.array([1e-6, 0.05, 0.5, 1.0, 2.4048, 5.0, 9.3, 11.99, 12.0, 12.01, 15.0, 30.0, 80.0, 250.0])


class TestBesselAgainstScipy:
    @pytest.mark.parametrize("ours, reference", [
        (bessel_j0, sp.j0),
        (bessel_j1, sp.j1),
        (bessel_y0, sp.y0),
        (bessel_y1, sp.y1),
    ])
    def test_matches_reference(self, ours, reference):
        np.testing.assert_allclose(ours(POINTS), reference(POINTS), atol=1e-9, rtol=1e-9)

    def test_y1_near_zero_is_relatively_accurate(self):
        np.testing.assert_allclose(bessel_y1(1e-6), sp.y1(1e-6), rtol=1e-10)

    def test_scalar_in_scalar_out(self):
        value = bessel_j0(1.0)
        assert isinstance(value, float)
        assert value == pytest.approx(0.7651976865579666, abs=1e-12)

    def test_hankel(self):
        np.testing.assert_allclose(hankel_h0(POINTS), sp.hankel1(0, POINTS), atol=1e-9, rtol=1e-9)
        np.testing.assert_allclose(hankel_h1(POINTS[1:]), sp.hankel1(1, POINTS[1:]), atol=1e-9, rtol=1e-9)

    @pytest.mark.parametrize("bad", [0.0, -1.0, np.inf, np.nan])
    def test_rejects_non_positive(self, bad):
        with pytest.raises(ValueError):
            bessel_y0(bad)


class TestRemainderLimit:
    def test_limit_matches_small_argument(self):
        k, r = 3.0, 1e-7
        remainder = -0.25j * sp.hankel1(0, k * r) - np.log(r) / (2 * np.pi)
        assert abs(hankel_h0_remainder_limit(k) - remainder) < 1e-9


class TestWronskian:
    def test_identity_on_log_grid(self):
        x = np.geomspace(1e-3, 500.0, 400)
        w = bessel_j0(x) * bessel_y1(x) - bessel_j1(x) * bessel_y0(x)
        np.testing.assert_allclose(w, -2.0 / (np.pi * x), rtol=1e-8, atol=0.0)
