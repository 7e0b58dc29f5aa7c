"""Parametric layouts for the vertebrae resonator, snowflake lattice and grating couplers.

All lengths are in nm. Every emitted loop is an exposed (etched) region and is
stored counter-clockwise; loops are implicitly closed (the first vertex is not
repeated).
"""

from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist


class GeometryError(ValueError):
    """Invalid or degenerate geometric parameters."""


# ---------------------------------------------------------------------------
# smoothstep
# ---------------------------------------------------------------------------


def smoothstep(n: int, x):
    """Minimal-degree polynomial step from 0 to 1 with ``n`` vanishing derivatives at both ends.

    ``x**(n+1) * sum_k C(n+k, k) C(2n+1, n-k) (-x)**k`` for ``k = 0..n``.
    Accepts a scalar or an array; values outside [0, 1] raise. A
    :class:`fractions.Fraction` argument is evaluated exactly.
    """
    if int(n) != n or n < 0:
        raise GeometryError(f"smoothstep order must be a non-negative integer, got {n!r}")
    n = int(n)
    if isinstance(x, Fraction):
        if not 0 <= x <= 1:
            raise GeometryError("smoothstep argument must lie in [0, 1]")
        return x ** (n + 1) * sum(math.comb(n + k, k) * math.comb(2 * n + 1, n - k) * (-x) ** k for k in range(n + 1))
    xa = np.asarray(x, dtype=float)
    if np.any(~np.isfinite(xa)) or np.any(xa < 0.0) or np.any(xa > 1.0):
        raise GeometryError("smoothstep argument must lie in [0, 1]")
    total = np.zeros_like(xa)
    for k in range(n + 1):
        total = total + math.comb(n + k, k) * math.comb(2 * n + 1, n - k) * (-xa) ** k
    out = xa ** (n + 1) * total
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# parameter sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CellParams:
    """C-hole cell: outer height ``q`` (along x), outer width ``v`` (along y),
    paddle length ``p`` (along y) and paddle width ``u`` (along x)."""

    q: float
    v: float
    p: float
    u: float

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise GeometryError(f"cell field {f.name} must be > 0, got {getattr(self, f.name)}")
        if not self.p < self.v:
            raise GeometryError(f"paddle length p={self.p} must be < hole width v={self.v}")
        if not self.u < self.q:
            raise GeometryError(f"paddle width u={self.u} must be < hole height q={self.q}")

    def scaled(self, k: float) -> "CellParams":
        return CellParams(self.q * k, self.v * k, self.p * k, self.u * k)


def _interp_cell(a: CellParams, b: CellParams, s: float) -> CellParams:
    return CellParams(*(getattr(a, n) + (getattr(b, n) - getattr(a, n)) * s for n in ("q", "v", "p", "u")))


@dataclass(frozen=True)
class ResonatorParams:
    a: float
    r: float
    w: float
    mirror: CellParams
    defect: CellParams
    d: float
    s: float
    t: float = 250.0
    chamfer: float = 20.0
    n_defect: int = 1
    n_gradient: int = 3
    n_mirror: int = 6
    n_taper: int = 0
    n_rows: int = 5
    extra_columns: int = 2
    chord_tol: float = 0.1

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise GeometryError("; ".join(errors))

    def validate(self) -> list[str]:
        errors = []
        for name in ("a", "r", "w", "d", "s", "t", "chord_tol"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        if self.chamfer < 0:
            errors.append("chamfer must be >= 0")
        for name in ("n_defect", "n_gradient", "n_mirror", "n_taper", "n_rows", "extra_columns"):
            val = getattr(self, name)
            if int(val) != val or val < 0:
                errors.append(f"{name} must be a non-negative integer")
        if self.n_defect < 1:
            errors.append("n_defect must be >= 1")
        if not self.a > 2 * self.r:
            errors.append(f"lattice pitch a={self.a} must exceed 2r={2 * self.r}")
        for label, cell in (("mirror", self.mirror), ("defect", self.defect)):
            if not self.d < cell.u:
                errors.append(f"neck d={self.d} must be narrower than {label} paddle width u={cell.u}")
            if not cell.q < self.a:
                errors.append(f"{label} hole height q={cell.q} must be < pitch a={self.a}")
        return errors

    def scaled(self, k: float) -> "ResonatorParams":
        """Apply a global scale factor to every length (counts are untouched)."""
        return replace(
            self,
            a=self.a * k,
            r=self.r * k,
            w=self.w * k,
            mirror=self.mirror.scaled(k),
            defect=self.defect.scaled(k),
            d=self.d * k,
            s=self.s * k,
            t=self.t * k,
            chamfer=self.chamfer * k,
            chord_tol=self.chord_tol * k,
        )


SIMULATION_PARAMS = dict(
    t=250.0, a=550.0, r=245.0, w=87.0,
    q_mirror=320.0, v_mirror=480.0, p_mirror=175.0, u_mirror=210.0,
    q_defect=310.0, v_defect=470.0, p_defect=220.0, u_defect=210.0,
    d=80.0, s=1503.0, n_defect=1, n_gradient=3, n_mirror=6, n_taper=0,
)

FABRICATION_PARAMS = dict(
    t=250.0, a=572.0, r=245.0, w=62.0,
    q_mirror=299.0, v_mirror=472.0, p_mirror=182.0, u_mirror=252.0,
    q_defect=285.0, v_defect=453.0, p_defect=228.0, u_defect=249.0,
    d=115.0, s=1563.0, n_defect=1, n_gradient=3, n_mirror=3, n_taper=2,
)


def resonator_from_flat(values: dict) -> ResonatorParams:
    """Build :class:`ResonatorParams` from the flat table naming (``q_mirror``, ``p_defect``, ...)."""
    v = dict(values)
    try:
        mirror = CellParams(v.pop("q_mirror"), v.pop("v_mirror"), v.pop("p_mirror"), v.pop("u_mirror"))
        defect = CellParams(v.pop("q_defect"), v.pop("v_defect"), v.pop("p_defect"), v.pop("u_defect"))
    except KeyError as exc:
        raise GeometryError(f"missing cell parameter {exc.args[0]}") from None
    if "c" in v:
        v["chamfer"] = v.pop("c")
    for name in ("n_defect", "n_gradient", "n_mirror", "n_taper", "n_rows", "extra_columns"):
        if name in v:
            v[name] = int(v[name])
    return ResonatorParams(mirror=mirror, defect=defect, **v)


def simulation_params(**overrides) -> ResonatorParams:
    return resonator_from_flat({**SIMULATION_PARAMS, **overrides})


def fabrication_params(**overrides) -> ResonatorParams:
    return resonator_from_flat({**FABRICATION_PARAMS, **overrides})


@dataclass(frozen=True)
class GratingParams:
    pitch: float = 632.0
    fill: float = 0.58
    b: float = -0.05
    n_grates: int = 40
    w: float = 1000.0
    h: float = 150.0
    t: float = 250.0
    a0: float = 10000.0
    half_angle_deg: float = 20.0
    chord_tol: float = 0.1

    def __post_init__(self):
        if not 0 < self.fill < 1:
            raise GeometryError(f"fill fraction must be in (0, 1), got {self.fill}")
        if not abs(self.b) < 1:
            raise GeometryError(f"|b| must be < 1, got {self.b}")
        if self.pitch <= 0 or self.a0 <= 0 or self.chord_tol <= 0:
            raise GeometryError("pitch, a0 and chord_tol must be > 0")
        if int(self.n_grates) != self.n_grates or self.n_grates < 1:
            raise GeometryError("n_grates must be a positive integer")
        if not 0 < self.half_angle_deg < 90:
            raise GeometryError("half_angle_deg must be in (0, 90)")


# ---------------------------------------------------------------------------
# polygons and layouts
# ---------------------------------------------------------------------------


def signed_area(vertices) -> float:
    v = np.asarray(vertices, dtype=float)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _segments_cross(p1, p2, p3, p4) -> bool:
    def orient(a, b, c):
        return (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])

    d1, d2 = orient(p3, p4, p1), orient(p3, p4, p2)
    d3, d4 = orient(p1, p2, p3), orient(p1, p2, p4)
    return (d1 * d2 < 0) and (d3 * d4 < 0)


def is_simple(vertices) -> bool:
    """O(n^2) check that no two non-adjacent edges properly cross."""
    v = np.asarray(vertices, dtype=float)
    n = len(v)
    if n < 3:
        return False
    for i in range(n):
        a, b = v[i], v[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if _segments_cross(a, b, v[j], v[(j + 1) % n]):
                return False
    return True


@dataclass
class Polygon:
    layer: str
    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 2 or len(self.vertices) < 3:
            raise GeometryError("polygon needs at least 3 (x, y) vertices")

    @property
    def area(self) -> float:
        return signed_area(self.vertices)

    @property
    def centroid(self) -> np.ndarray:
        return self.vertices.mean(axis=0)


@dataclass
class Layout:
    polygons: list[Polygon] = field(default_factory=list)

    @property
    def bbox(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax)"""
        if not self.polygons:
            raise GeometryError("empty layout has no bounding box")
        allv = np.vstack([p.vertices for p in self.polygons])
        lo, hi = allv.min(axis=0), allv.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def layer(self, name: str) -> "Layout":
        return Layout([p for p in self.polygons if p.layer == name])

    def __add__(self, other: "Layout") -> "Layout":
        return Layout(self.polygons + other.polygons)

    def to_dict(self) -> dict:
        return {
            "units": "nm",
            "polygons": [{"layer": p.layer, "vertices": p.vertices.tolist()} for p in self.polygons],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Layout":
        if data.get("units", "nm") != "nm":
            raise GeometryError(f"unsupported layout units {data.get('units')!r}")
        return cls([Polygon(p["layer"], p["vertices"]) for p in data["polygons"]])

    def save(self, path) -> None:
        path = Path(path)
        if path.suffix.lower() == ".svg":
            path.write_text(self.to_svg())
        else:
            path.write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "Layout":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_svg(self, margin: float = 100.0) -> str:
        palette = {"c_hole": "#7b2d8e", "snowflake": "#2a6fb0", "grating": "#c0392b"}
        xmin, ymin, xmax, ymax = self.bbox
        width, height = xmax - xmin + 2 * margin, ymax - ymin + 2 * margin
        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="{xmin - margin:.3f} {-ymax - margin:.3f} '
            f'{width:.3f} {height:.3f}" width="{width:.0f}" height="{height:.0f}">'
        ]
        for p in self.polygons:
            # svg y axis points down
            pts = " ".join(f"{x:.3f},{-y:.3f}" for x, y in p.vertices)
            colour = palette.get(p.layer, "#444444")
            out.append(f'<polygon class="{p.layer}" points="{pts}" fill="{colour}" stroke="none"/>')
        out.append("</svg>")
        return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# corner rounding
# ---------------------------------------------------------------------------


def _arc_segments(sweep: float, radius: float, tol: float) -> int:
    if tol >= radius:
        return 1
    max_step = 2.0 * math.acos(1.0 - tol / radius)
    return max(1, math.ceil(abs(sweep) / max_step - 1e-12))


def fillet(vertices, setback: float, tol: float = 0.1) -> np.ndarray:
    """Round every corner of a closed loop with a tangent circular arc.

    ``setback`` is the distance from the corner to each tangent point, as for a
    CAD chamfer; the arc radius is ``setback * tan(half interior angle)``, so a
    right-angle corner gets radius ``setback``. Works for convex and reflex
    corners. Arcs are sampled so the chord error stays below ``tol``.
    """
    v = np.asarray(vertices, dtype=float)
    if setback <= 0:
        return v.copy()
    n = len(v)
    to_prev = np.roll(v, 1, axis=0) - v
    to_next = np.roll(v, -1, axis=0) - v
    len_prev = np.linalg.norm(to_prev, axis=1)
    len_next = np.linalg.norm(to_next, axis=1)
    if np.any(len_prev == 0):
        raise GeometryError("polygon has repeated vertices")
    u1 = to_prev / len_prev[:, None]
    u2 = to_next / len_next[:, None]
    half = 0.5 * np.arccos(np.clip(np.sum(u1 * u2, axis=1), -1.0, 1.0))
    straight = np.abs(half - math.pi / 2) < 1e-12
    tangent = np.where(straight, 0.0, setback)
    # edge i runs from vertex i to i+1
    need = tangent + np.roll(tangent, -1)
    if np.any(need > len_next * (1 + 1e-12)):
        i = int(np.argmax(need - len_next))
        raise GeometryError(f"edge {i} of length {len_next[i]:.3f} nm is too short for chamfer {setback:.3f} nm")
    out = []
    for i in range(n):
        if straight[i]:
            out.append(v[i])
            continue
        radius = setback * math.tan(half[i])
        bis = u1[i] + u2[i]
        bis /= np.linalg.norm(bis)
        centre = v[i] + bis * (radius / math.sin(half[i]))
        t1 = v[i] + u1[i] * setback
        t2 = v[i] + u2[i] * setback
        a1 = math.atan2(t1[1] - centre[1], t1[0] - centre[0])
        a2 = math.atan2(t2[1] - centre[1], t2[0] - centre[0])
        sweep = (a2 - a1 + math.pi) % (2 * math.pi) - math.pi
        m = _arc_segments(sweep, radius, tol)
        out.append(t1)
        for k in range(1, m):
            ang = a1 + sweep * k / m
            out.append(centre + radius * np.array([math.cos(ang), math.sin(ang)]))
        out.append(t2)
    res = np.array(out)
    # neighbouring arcs can meet exactly when an edge is fully consumed
    gaps = np.linalg.norm(res - np.roll(res, -1, axis=0), axis=1)
    return res[gaps >= 1e-9 * max(1.0, setback)]


# ---------------------------------------------------------------------------
# hole shapes
# ---------------------------------------------------------------------------


def snowflake_polygon(r: float, w: float, chamfer: float = 0.0, center=(0.0, 0.0), tol: float = 0.1) -> np.ndarray:
    """Three crossed bars of half-length ``r`` and width ``w`` at 60 degree spacing.

    One arm points along +y, so the shape is mirror symmetric about x=0 and y=0.
    """
    if not w > 0 or not r > w / 2:
        raise GeometryError(f"degenerate snowflake: need r > w/2 > 0 (r={r}, w={w})")
    if not r > w * math.sqrt(3) / 2:
        raise GeometryError(f"degenerate snowflake: arms of length {r} too short for width {w}")
    pts = []
    for k in range(6):
        th = math.pi / 2 + k * math.pi / 3
        u = np.array([math.cos(th), math.sin(th)])
        nrm = np.array([-math.sin(th), math.cos(th)])
        pts.append(r * u - 0.5 * w * nrm)
        pts.append(r * u + 0.5 * w * nrm)
        mid = th + math.pi / 6
        pts.append(w * np.array([math.cos(mid), math.sin(mid)]))
    verts = fillet(np.array(pts), chamfer, tol) if chamfer > 0 else np.array(pts)
    return verts + np.asarray(center, dtype=float)


def c_hole_polygons(cell: CellParams, neck: float, chamfer: float = 0.0, center=(0.0, 0.0), tol: float = 0.1):
    """The two mirror-image C-shaped holes of one vertebrae cell.

    The etched region is the ``q`` x ``v`` rectangle minus a ``u`` x ``p``
    paddle that is tied to the slab above and below by a neck of width
    ``neck``. That splits the etch into a left and a right C.
    """
    q, v, p, u = cell.q, cell.v, cell.p, cell.u
    if not 0 < neck < u:
        raise GeometryError(f"neck width {neck} must be in (0, u={u})")
    left = np.array(
        [
            (-q / 2, -v / 2),
            (-neck / 2, -v / 2),
            (-neck / 2, -p / 2),
            (-u / 2, -p / 2),
            (-u / 2, p / 2),
            (-neck / 2, p / 2),
            (-neck / 2, v / 2),
            (-q / 2, v / 2),
        ]
    )
    if chamfer > 0:
        left = fillet(left, chamfer, tol)
    right = left[::-1] * np.array([-1.0, 1.0])
    c = np.asarray(center, dtype=float)
    return [left + c, right + c]


# ---------------------------------------------------------------------------
# vertebrae resonator
# ---------------------------------------------------------------------------


def gradient_cell(mirror: CellParams, defect: CellParams, i: int, n_gradient: int) -> CellParams:
    """Cell ``i`` (1 at the mirror side) of an ``n_gradient``-cell SmoothStep_1 transition."""
    if int(i) != i or int(n_gradient) != n_gradient or not 1 <= i <= n_gradient:
        raise GeometryError(f"gradient index {i} out of range 1..{n_gradient}")
    s = smoothstep(1, i / (n_gradient + 1))
    return _interp_cell(mirror, defect, s)


@dataclass(frozen=True)
class Cell:
    kind: str  # taper | mirror | gradient | defect
    x: float
    params: CellParams
    neck: float
    chamfer: float


def cell_sequence(params: ResonatorParams) -> list[Cell]:
    """All C-hole cells left to right. Defect cells straddle x=0."""
    pr = params
    half: list[tuple[str, CellParams, float]] = []  # ordered from the outside towards the defect
    for j in range(pr.n_taper, 0, -1):
        f = 1.0 - j / (pr.n_taper + 1)
        half.append(("taper", pr.mirror.scaled(f), f))
    half += [("mirror", pr.mirror, 1.0)] * pr.n_mirror
    for i in range(1, pr.n_gradient + 1):
        half.append(("gradient", gradient_cell(pr.mirror, pr.defect, i, pr.n_gradient), 1.0))

    x_inner = (pr.n_defect - 1) / 2 * pr.a  # centre of the outermost defect cell
    cells = []
    nh = len(half)
    for idx, (kind, cp, f) in enumerate(half):
        x = -(x_inner + (nh - idx) * pr.a)
        cells.append(Cell(kind, x, cp, pr.d * f, pr.chamfer * f))
    for k in range(pr.n_defect):
        cells.append(Cell("defect", (k - (pr.n_defect - 1) / 2) * pr.a, pr.defect, pr.d, pr.chamfer))
    for idx in range(nh - 1, -1, -1):
        kind, cp, f = half[idx]
        cells.append(Cell(kind, x_inner + (nh - idx) * pr.a, cp, pr.d * f, pr.chamfer * f))
    return cells


def cells_per_side(params: ResonatorParams) -> int:
    return params.n_taper + params.n_mirror + params.n_gradient + params.n_defect


def snowflake_centres(params: ResonatorParams) -> np.ndarray:
    pr = params
    n_half = pr.n_taper + pr.n_mirror + pr.n_gradient + (pr.n_defect + 1) // 2 + pr.extra_columns
    row_step = pr.a * math.sqrt(3) / 2
    centres = []
    for k in range(pr.n_rows):
        y = pr.s / 2 + k * row_step
        if k % 2 == 0:
            xs = [m * pr.a for m in range(-n_half, n_half + 1)]
        else:
            xs = [(m + 0.5) * pr.a for m in range(-n_half - 1, n_half + 1)]
        for x in xs:
            centres.append((x, y))
            centres.append((x, -y))
    return np.array(centres)


def vertebrae_layout(params: ResonatorParams) -> Layout:
    """C-hole train along the waveguide axis (y=0) flanked by snowflake rows."""
    polys = []
    for cell in cell_sequence(params):
        for loop in c_hole_polygons(cell.params, cell.neck, cell.chamfer, (cell.x, 0.0), params.chord_tol):
            polys.append(Polygon("c_hole", loop))
    base = snowflake_polygon(params.r, params.w, params.chamfer, (0.0, 0.0), params.chord_tol)
    for cx, cy in snowflake_centres(params):
        polys.append(Polygon("snowflake", base + np.array([cx, cy])))
    return Layout(polys)


# ---------------------------------------------------------------------------
# grating couplers
# ---------------------------------------------------------------------------


def curve_y(a: float, b: float, x):
    """Positive branch of ``a = b x + sqrt(x^2 + y^2)`` solved for y."""
    x = np.asarray(x, dtype=float)
    lhs = a - b * x
    arg = lhs**2 - x**2
    if np.any(lhs < 0) or np.any(arg < -1e-12 * max(a * a, 1.0)):
        raise GeometryError("x lies outside the domain of the grating curve")
    y = np.sqrt(np.maximum(arg, 0.0))
    return float(y) if y.ndim == 0 else y


def _curve_point(a: float, b: float, th: float) -> np.ndarray:
    rho = a / (1.0 + b * math.cos(th))
    return np.array([rho * math.cos(th), rho * math.sin(th)])


def grating_curve(a: float, b: float, half_angle: float, tol: float = 0.1) -> np.ndarray:
    """Points on one grating curve for polar angles in [-half_angle, half_angle] (radians).

    The curve opens towards +x with the focus at the origin; sampling is
    refined until every chord deviates from the curve by less than ``tol``.
    """
    if not abs(b) < 1:
        raise GeometryError("|b| must be < 1")
    if a <= 0:
        raise GeometryError("curve y-intercept a must be > 0")
    thetas = [-half_angle, half_angle]
    pts = {th: _curve_point(a, b, th) for th in thetas}
    out_th = [thetas[0]]
    stack = [(thetas[0], thetas[1])]
    # depth-first refinement, emitting in increasing angle
    while stack:
        t0, t1 = stack.pop()
        tm = 0.5 * (t0 + t1)
        pm = _curve_point(a, b, tm)
        p0, p1 = pts[t0], pts[t1]
        chord = p1 - p0
        clen = np.linalg.norm(chord)
        dev = abs(chord[0] * (pm[1] - p0[1]) - chord[1] * (pm[0] - p0[0])) / clen if clen > 0 else 0.0
        if dev > tol:
            pts[tm] = pm
            stack.append((tm, t1))
            stack.append((t0, tm))
        else:
            out_th.append(t1)
    return np.array([pts[t] for t in out_th])


def grating_curves(params: GratingParams) -> list[np.ndarray]:
    """Inner and outer edge of every grate: ``a_n`` and ``a_n + f*pitch``."""
    half = math.radians(params.half_angle_deg)
    curves = []
    for n in range(params.n_grates):
        a_n = params.a0 + n * params.pitch
        curves.append(grating_curve(a_n, params.b, half, params.chord_tol))
        curves.append(grating_curve(a_n + params.fill * params.pitch, params.b, half, params.chord_tol))
    return curves


def grating_layout(params: GratingParams) -> Layout:
    curves = grating_curves(params)
    polys = []
    for inner, outer in zip(curves[0::2], curves[1::2]):
        polys.append(Polygon("grating", np.vstack([outer, inner[::-1]])))
    return Layout(polys)


# ---------------------------------------------------------------------------
# symmetry
# ---------------------------------------------------------------------------


@dataclass
class SymmetryReport:
    normal: tuple[float, float]
    offset: float
    max_distance: float
    n_polygons: int
    unmatched: int = 0

    @property
    def symmetric(self) -> bool:
        return self.unmatched == 0 and self.max_distance < 1e-9


def _plane(plane) -> tuple[np.ndarray, float]:
    if isinstance(plane, str):
        if plane == "x":
            return np.array([1.0, 0.0]), 0.0
        if plane == "y":
            return np.array([0.0, 1.0]), 0.0
        raise GeometryError(f"unknown plane {plane!r}; use 'x', 'y' or (nx, ny, offset)")
    nx, ny, off = plane
    nrm = np.array([nx, ny], dtype=float)
    length = np.linalg.norm(nrm)
    if length == 0:
        raise GeometryError("plane normal must be non-zero")
    return nrm / length, float(off) / length


def reflect(vertices, normal, offset: float = 0.0) -> np.ndarray:
    """Householder reflection through the line ``normal . r = offset``."""
    v = np.asarray(vertices, dtype=float)
    n = np.asarray(normal, dtype=float)
    dist = v @ n - offset
    return v - 2.0 * dist[:, None] * n[None, :]


def _loop_distance(a: np.ndarray, b: np.ndarray) -> float:
    n = len(a)
    dm = cdist(a, b)
    idx = (np.arange(n)[:, None] + np.arange(n)[None, :]) % n
    per_shift = dm[np.arange(n)[:, None], idx].max(axis=0)
    return float(per_shift.min())


def symmetry_check(layout: Layout, plane) -> SymmetryReport:
    """Largest vertex displacement between ``layout`` and its mirror image.

    Polygons are paired by layer and vertex count (Hungarian assignment on
    centroids); vertices within a pair are matched by the best cyclic shift.
    """
    normal, offset = _plane(plane)
    groups: dict[tuple[str, int], list[np.ndarray]] = {}
    for p in layout.polygons:
        groups.setdefault((p.layer, len(p.vertices)), []).append(p.vertices)
    worst = 0.0
    unmatched = 0
    for key, loops in groups.items():
        mirrored = [reflect(lp, normal, offset)[::-1] for lp in loops]
        ca = np.array([lp.mean(axis=0) for lp in loops])
        cb = np.array([lp.mean(axis=0) for lp in mirrored])
        rows, cols = linear_sum_assignment(cdist(ca, cb))
        for i, j in zip(rows, cols):
            worst = max(worst, _loop_distance(loops[i], mirrored[j]))
    return SymmetryReport((float(normal[0]), float(normal[1])), offset, worst, len(layout.polygons), unmatched)


def vertex_set_distance(a: Iterable[Sequence[float]], b: Iterable[Sequence[float]]) -> float:
    """Symmetric Hausdorff distance between two vertex sets."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dm = cdist(a, b)
    return float(max(dm.min(axis=1).max(), dm.min(axis=0).max()))


def params_to_flat(params: ResonatorParams) -> dict:
    d = asdict(params)
    mirror, defect = d.pop("mirror"), d.pop("defect")
    for k, val in mirror.items():
        d[f"{k}_mirror"] = val
    for k, val in defect.items():
        d[f"{k}_defect"] = val
    return d
