import hashlib
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Optional, Tuple

import numpy as np

from .utils import AppConstants, GeometryError

"""
境界形状モジュール。
- `CurveSpec` : 実験設定から読み込む曲線指定
- `BoundaryGeometry` : 滑らかな閉曲線または多角形（常に反時計回り）
- `QuadratureGrid` : 境界上の節点・外向き法線・求積重み
- `make_curve` / `discretize` / `barycenter`
"""

logger = logging.getLogger(__name__)

SMOOTH = "smooth"
POLYGON = "polygon"

CURVE_KINDS = ("circle", "ellipse", "star", "square", "triangle", "polygon")

# 包含判定・距離計算に使う滑らかな曲線の折れ線近似の分割数
_SMOOTH_POLYLINE_POINTS = 4096

CurveMap = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class CurveSpec:
    """境界曲線の指定。`kind` ごとに使うフィールドが異なる。

    - circle: radius
    - ellipse: axes (x半径, y半径)
    - star: パラメータなし（r(t) = 9/20 − cos(5t)/9）
    - square: side（中心が原点の正方形）
    - triangle: a, b, c（頂点 (0,0), (a,0), (b,c)）
    - polygon: vertices
    いずれも center で平行移動できる。
    """
    kind: str
    radius: float = 1.0
    axes: Tuple[float, float] = (1.0, 0.5)
    side: float = 2.0
    a: float = 0.3
    b: float = 0.6
    c: float = 0.4
    vertices: Tuple[Tuple[float, float], ...] = ()
    center: Tuple[float, float] = (0.0, 0.0)


@dataclass(frozen=True, eq=False)
class BoundaryGeometry:
    """2次元の閉曲線。向きは常に反時計回り。

    滑らかな曲線は 2π 周期の写像 t → y(t) とその1階・2階導関数を持ち、
    多角形は頂点列を持つ。生成後は不変。
    """
    kind: str
    name: str
    position: Optional[CurveMap] = None
    d1: Optional[CurveMap] = None
    d2: Optional[CurveMap] = None
    vertices: Optional[np.ndarray] = None

    @property
    def is_smooth(self) -> bool:
        return self.kind == SMOOTH

    @property
    def edge_count(self) -> int:
        if self.is_smooth:
            raise GeometryError(f"{self.name} is a smooth curve and has no edges")
        return len(self.vertices)

    @cached_property
    def polyline(self) -> np.ndarray:
        """包含判定・距離計算用の閉折れ線（始点は繰り返さない）"""
        if not self.is_smooth:
            return np.asarray(self.vertices, dtype=float)
        t = 2.0 * np.pi * np.arange(_SMOOTH_POLYLINE_POINTS) / _SMOOTH_POLYLINE_POINTS
        return self.position(t)

    @property
    def signed_area(self) -> float:
        return _shoelace(self.polyline)

    @property
    def length(self) -> float:
        pts = self.polyline
        return float(np.sum(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1)))

    @property
    def bounding_box(self) -> Tuple[float, float, float, float]:
        pts = self.polyline
        return (float(pts[:, 0].min()), float(pts[:, 1].min()),
                float(pts[:, 0].max()), float(pts[:, 1].max()))

    def contains(self, points: np.ndarray) -> np.ndarray:
        """偶奇規則のレイキャストで、各点が領域 Ω の内側にあるかを返す。"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        px, py = pts[:, 0], pts[:, 1]
        poly = self.polyline
        nxt = np.roll(poly, -1, axis=0)
        inside = np.zeros(len(pts), dtype=bool)
        for (x0, y0), (x1, y1) in zip(poly, nxt):
            crosses = (y0 > py) != (y1 > py)
            if not np.any(crosses):
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                x_hit = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            inside ^= crosses & (px < x_hit)
        return inside

    def distance(self, points: np.ndarray) -> np.ndarray:
        """各点から境界（折れ線近似）までの距離"""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        poly = self.polyline
        return segment_distance(pts, poly, np.roll(poly, -1, axis=0))


@dataclass(frozen=True, eq=False)
class QuadratureGrid:
    """境界の離散化。重みは求積重み × 弧長要素。

    滑らかな曲線では `params`（パラメータ t）と `curvature` を持ち、
    多角形では `panel_id`（所属する辺の番号）と `panel_ends`（各小区間の端点）を持つ。
    `curve` は滑らかな曲線の元の形状で、評価点までの距離に使う。
    """
    kind: str
    points: np.ndarray
    normals: np.ndarray
    weights: np.ndarray
    curvature: Optional[np.ndarray] = None
    params: Optional[np.ndarray] = None
    panel_id: Optional[np.ndarray] = None
    panel_ends: Optional[np.ndarray] = None
    curve: Optional[BoundaryGeometry] = None

    @property
    def n(self) -> int:
        return len(self.points)

    @property
    def is_smooth(self) -> bool:
        return self.kind == SMOOTH

    @property
    def length(self) -> float:
        return float(np.sum(self.weights))

    @property
    def max_spacing(self) -> float:
        return float(np.max(self.weights))

    @property
    def signed_area(self) -> float:
        return _shoelace(self.points)

    @cached_property
    def grid_hash(self) -> str:
        """節点と重みから作るキャッシュキー"""
        digest = hashlib.sha1()
        digest.update(self.kind.encode("utf-8"))
        digest.update(np.ascontiguousarray(self.points).tobytes())
        digest.update(np.ascontiguousarray(self.weights).tobytes())
        return digest.hexdigest()

    def segments(self) -> Tuple[np.ndarray, np.ndarray]:
        """境界を覆う線分 (始点, 終点) の配列"""
        if self.panel_ends is not None:
            return self.panel_ends[:, 0, :], self.panel_ends[:, 1, :]
        return self.points, np.roll(self.points, -1, axis=0)

    def boundary_distance(self, targets: np.ndarray) -> np.ndarray:
        """評価点から境界までの距離。滑らかな曲線は元の曲線の細かい折れ線で測る。"""
        if self.curve is not None:
            return self.curve.distance(targets)
        p0, p1 = self.segments()
        return segment_distance(np.atleast_2d(targets), p0, p1)


def segment_distance(points: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """点群から線分群までの最短距離（線分ごとにループし、点方向はベクトル化）"""
    best = np.full(len(points), np.inf)
    for a, b in zip(p0, p1):
        ab = b - a
        denom = float(ab @ ab)
        ap = points - a
        s = np.clip(ap @ ab / denom, 0.0, 1.0) if denom > 0 else np.zeros(len(points))
        proj = a + s[:, None] * ab
        np.minimum(best, np.linalg.norm(points - proj, axis=1), out=best)
    return best


def _shoelace(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def _radial_curve(name: str, r: CurveMap, dr: CurveMap, ddr: CurveMap,
                  center: np.ndarray) -> BoundaryGeometry:
    """極座標表示 y(t) = r(t)(cos t, sin t) の曲線を作る。"""

    def position(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return center + r(t)[:, None] * np.stack([np.cos(t), np.sin(t)], axis=-1)

    def d1(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c, s = np.cos(t), np.sin(t)
        rt, drt = r(t), dr(t)
        return np.stack([drt * c - rt * s, drt * s + rt * c], axis=-1)

    def d2(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c, s = np.cos(t), np.sin(t)
        rt, drt, ddrt = r(t), dr(t), ddr(t)
        return np.stack([ddrt * c - 2.0 * drt * s - rt * c,
                         ddrt * s + 2.0 * drt * c - rt * s], axis=-1)

    return BoundaryGeometry(kind=SMOOTH, name=name, position=position, d1=d1, d2=d2)


def _ellipse(ax: float, ay: float, center: np.ndarray, name: str) -> BoundaryGeometry:
    def position(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return center + np.stack([ax * np.cos(t), ay * np.sin(t)], axis=-1)

    def d1(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([-ax * np.sin(t), ay * np.cos(t)], axis=-1)

    def d2(t):
        t = np.atleast_1d(np.asarray(t, dtype=float))
        return np.stack([-ax * np.cos(t), -ay * np.sin(t)], axis=-1)

    return BoundaryGeometry(kind=SMOOTH, name=name, position=position, d1=d1, d2=d2)


def make_polygon(vertices, name: str = "polygon") -> BoundaryGeometry:
    """頂点列から多角形を作る。時計回りの入力は反転し、面積ゼロは拒否する。

    Raises:
        GeometryError: 頂点が3未満、重複頂点、または面積がゼロ
    """
    verts = np.asarray(vertices, dtype=float)
    if verts.ndim != 2 or verts.shape[1] != 2 or len(verts) < 3:
        raise GeometryError(f"{name}: at least three 2D vertices are required")
    edges = np.linalg.norm(np.roll(verts, -1, axis=0) - verts, axis=1)
    if np.any(edges <= AppConstants.AREA_TOLERANCE):
        raise GeometryError(f"{name}: vertices must be distinct")
    area = _shoelace(verts)
    if abs(area) <= AppConstants.AREA_TOLERANCE:
        raise GeometryError(f"{name}: degenerate polygon (zero area)")
    if area < 0:
        verts = verts[::-1].copy()
    verts.setflags(write=False)
    return BoundaryGeometry(kind=POLYGON, name=name, vertices=verts)


def make_curve(spec: CurveSpec) -> BoundaryGeometry:
    """曲線指定から境界形状を作る。

    Args:
        spec: 曲線指定

    Returns:
        反時計回りの境界形状

    Raises:
        GeometryError: 未知の種類、非正の半径・辺長、三角形パラメータが (0,1] の外、退化した多角形
    """
    center = np.asarray(spec.center, dtype=float)
    kind = spec.kind

    if kind == "circle":
        if spec.radius <= 0:
            raise GeometryError(f"circle radius must be positive, got {spec.radius}")
        radius = float(spec.radius)
        return _radial_curve(f"circle({radius:g})",
                             lambda t: np.full_like(t, radius, dtype=float),
                             lambda t: np.zeros_like(t, dtype=float),
                             lambda t: np.zeros_like(t, dtype=float), center)

    if kind == "ellipse":
        ax, ay = (float(v) for v in spec.axes)
        if ax <= 0 or ay <= 0:
            raise GeometryError(f"ellipse axes must be positive, got {spec.axes}")
        return _ellipse(ax, ay, center, f"ellipse({ax:g},{ay:g})")

    if kind == "star":
        return _radial_curve("star",
                             lambda t: 9.0 / 20.0 - np.cos(5.0 * t) / 9.0,
                             lambda t: 5.0 / 9.0 * np.sin(5.0 * t),
                             lambda t: 25.0 / 9.0 * np.cos(5.0 * t), center)

    if kind == "square":
        if spec.side <= 0:
            raise GeometryError(f"square side must be positive, got {spec.side}")
        h = 0.5 * float(spec.side)
        verts = np.array([[-h, -h], [h, -h], [h, h], [-h, h]]) + center
        return make_polygon(verts, name=f"square({spec.side:g})")

    if kind == "triangle":
        a, b, c = float(spec.a), float(spec.b), float(spec.c)
        for label, value in (("a", a), ("b", b), ("c", c)):
            if not 0.0 < value <= 1.0:
                raise GeometryError(f"triangle parameter {label}={value} must lie in (0, 1]")
        verts = np.array([[0.0, 0.0], [a, 0.0], [b, c]]) + center
        return make_polygon(verts, name=f"triangle({a:g},{b:g},{c:g})")

    if kind == "polygon":
        return make_polygon(np.asarray(spec.vertices, dtype=float) + center)

    raise GeometryError(f"unknown curve kind '{kind}' (expected one of {', '.join(CURVE_KINDS)})")


def discretize(geom: BoundaryGeometry, n: int) -> QuadratureGrid:
    """境界を n 個の節点で離散化する。

    滑らかな曲線はパラメータ等間隔の台形則、多角形は各辺を等分した中点則。
    角は節点にならない。

    Raises:
        GeometryError: 節点数が少なすぎる、または辺数で割り切れない
    """
    if geom.is_smooth:
        if n < AppConstants.MIN_SMOOTH_NODES:
            raise GeometryError(
                f"{geom.name}: smooth curves need at least {AppConstants.MIN_SMOOTH_NODES} nodes, got {n}")
        t = 2.0 * np.pi * np.arange(n) / n
        pts = geom.position(t)
        dy = geom.d1(t)
        ddy = geom.d2(t)
        speed = np.hypot(dy[:, 0], dy[:, 1])
        normals = np.stack([dy[:, 1], -dy[:, 0]], axis=-1) / speed[:, None]
        weights = speed * (2.0 * np.pi / n)
        curvature = (dy[:, 0] * ddy[:, 1] - dy[:, 1] * ddy[:, 0]) / speed ** 3
        logger.debug("discretized %s with %d trapezoid nodes", geom.name, n)
        return QuadratureGrid(kind=SMOOTH, points=pts, normals=normals, weights=weights,
                              curvature=curvature, params=t, curve=geom)

    verts = geom.vertices
    edges = len(verts)
    if n <= 0 or n % edges != 0:
        raise GeometryError(f"{geom.name}: node count {n} is not divisible by edge count {edges}")
    per_edge = n // edges
    logger.debug("discretized %s with %d midpoint nodes per edge", geom.name, per_edge)
    starts = np.repeat(verts, per_edge, axis=0)
    ends = np.repeat(np.roll(verts, -1, axis=0), per_edge, axis=0)
    direction = ends - starts
    edge_len = np.hypot(direction[:, 0], direction[:, 1])
    local = np.tile(np.arange(per_edge), edges)
    s0 = (local / per_edge)[:, None]
    s1 = ((local + 1) / per_edge)[:, None]
    pts = starts + 0.5 * (s0 + s1) * direction
    normals = np.stack([direction[:, 1], -direction[:, 0]], axis=-1) / edge_len[:, None]
    panel_ends = np.stack([starts + s0 * direction, starts + s1 * direction], axis=1)
    return QuadratureGrid(kind=POLYGON, points=pts, normals=normals, weights=edge_len / per_edge,
                          panel_id=np.repeat(np.arange(edges), per_edge), panel_ends=panel_ends)


def barycenter(geom: BoundaryGeometry) -> np.ndarray:
    """多角形の頂点の算術平均（三角形では重心）

    Raises:
        GeometryError: 滑らかな曲線が渡された
    """
    if geom.is_smooth:
        raise GeometryError(f"barycenter is defined for polygons only, got {geom.name}")
    return np.mean(geom.vertices, axis=0)
