import json
import math
from fractions import Fraction

import numpy as np
import pytest
import shapely.affinity
import shapely.geometry
import shapely.ops
from hypothesis import given
from hypothesis import strategies as st

from omcrystal import geometry as g


def smoothstep_oracle(n, x):
    # exact rational expansion, independent of the implementation
    x = Fraction(x)
    total = Fraction(0)
    for k in range(n + 1):
        total += math.comb(n + k, k) * math.comb(2 * n + 1, n - k) * (-x) ** k
    return x ** (n + 1) * total


@pytest.mark.parametrize(
    "n, x, expected",
    [(1, 0.0, 0.0), (1, 0.5, 0.5), (1, 0.25, 0.15625), (3, 0.5, 0.5)],
)
def test_smoothstep_examples(n, x, expected):
    assert g.smoothstep(n, x) == pytest.approx(expected, abs=1e-15)
    assert smoothstep_oracle(n, x) == Fraction(expected)


def test_smoothstep_n1_is_cubic():
    x = np.linspace(0, 1, 101)
    assert np.allclose(g.smoothstep(1, x), 3 * x**2 - 2 * x**3, atol=1e-15)


@pytest.mark.parametrize("n", range(6))
def test_smoothstep_matches_rational_oracle(n):
    for num in range(0, 17):
        x = Fraction(num, 16)
        assert g.smoothstep(n, float(x)) == pytest.approx(float(smoothstep_oracle(n, x)), abs=1e-14)
        assert g.smoothstep(n, x) == smoothstep_oracle(n, x)


def _forward_derivative(f, x0, k, h, direction):
    return sum((-1) ** (k - j) * math.comb(k, j) * f(x0 + direction * j * h) for j in range(k + 1)) / (
        (direction * h) ** k
    )


def _richardson(f, x0, k, h, direction, levels):
    # forward differences of a polynomial are polynomial in h; extrapolate to h -> 0
    table = [_forward_derivative(f, x0, k, h / 2**i, direction) for i in range(levels)]
    for m in range(1, levels):
        table = [(2**m * table[i + 1] - table[i]) / (2**m - 1) for i in range(len(table) - 1)]
    return table[0]


@pytest.mark.parametrize("n", range(6))
def test_smoothstep_endpoint_derivatives_vanish(n):
    h = Fraction(1, 10**5)
    f = lambda x: g.smoothstep(n, x)  # noqa: E731
    for k in range(1, n + 1):
        at0 = _richardson(f, Fraction(0), k, h, +1, n + 3)
        at1 = _richardson(f, Fraction(1), k, h, -1, n + 3)
        assert abs(at0) < 1e-6
        assert abs(at1) < 1e-6
    # order n+1 does not vanish at the start, so the check has teeth
    assert abs(_richardson(f, Fraction(0), n + 1, h, +1, n + 3)) >= 1


@given(st.integers(0, 5), st.floats(0, 1))
def test_smoothstep_complement(n, x):
    assert g.smoothstep(n, x) + g.smoothstep(n, 1 - x) == pytest.approx(1.0, abs=1e-12)


@given(st.integers(0, 5), st.floats(0, 1), st.floats(0, 1))
def test_smoothstep_monotone(n, x1, x2):
    lo, hi = sorted((x1, x2))
    assert g.smoothstep(n, lo) <= g.smoothstep(n, hi) + 1e-15


@pytest.mark.parametrize("bad", [(-1, 0.5), (1, -0.1), (1, 1.5), (1.5, 0.5)])
def test_smoothstep_domain(bad):
    with pytest.raises(g.GeometryError):
        g.smoothstep(*bad)


# --- gradient cells ------------------------------------------------------------

MIRROR = g.CellParams(320, 480, 175, 210)
DEFECT = g.CellParams(310, 470, 220, 210)


def test_gradient_cell_midpoint_values():
    cell = g.gradient_cell(MIRROR, DEFECT, 2, 3)
    assert cell.p == pytest.approx(197.5, abs=1e-12)
    assert cell.q == pytest.approx(315.0, abs=1e-12)


def test_gradient_cell_mirror_end():
    cell = g.gradient_cell(MIRROR, DEFECT, 1, 10_000)
    for name in "qvpu":
        assert getattr(cell, name) == pytest.approx(getattr(MIRROR, name), abs=1e-5)


@given(st.integers(1, 8), st.data())
def test_gradient_cell_equal_endpoints(n_gradient, data):
    i = data.draw(st.integers(1, n_gradient))
    cell = g.gradient_cell(MIRROR, MIRROR, i, n_gradient)
    for name in "qvpu":
        assert getattr(cell, name) == pytest.approx(getattr(MIRROR, name), rel=1e-15)


@pytest.mark.parametrize("i", [0, 4, -1])
def test_gradient_cell_index_range(i):
    with pytest.raises(g.GeometryError):
        g.gradient_cell(MIRROR, DEFECT, i, 3)


def test_cell_params_invariants():
    with pytest.raises(g.GeometryError):
        g.CellParams(320, 480, 500, 210)  # paddle longer than the hole
    with pytest.raises(g.GeometryError):
        g.CellParams(320, 480, 175, 330)
    with pytest.raises(g.GeometryError):
        g.CellParams(0, 480, 175, 210)


# --- snowflakes ------------------------------------------------------------------


def _rotate(v, ang):
    c, s = math.cos(ang), math.sin(ang)
    return v @ np.array([[c, s], [-s, c]])


@pytest.mark.parametrize("chamfer", [0.0, 20.0])
def test_snowflake_sixfold(chamfer):
    v = g.snowflake_polygon(245, 87, chamfer)
    assert g.vertex_set_distance(v, _rotate(v, math.pi / 3)) < 1e-9


@pytest.mark.parametrize("chamfer", [0.0, 20.0])
def test_snowflake_arm_mirrors(chamfer):
    layout = g.Layout([g.Polygon("snowflake", g.snowflake_polygon(245, 87, chamfer))])
    for k in range(6):
        th = math.pi / 2 + k * math.pi / 3
        report = g.symmetry_check(layout, (-math.sin(th), math.cos(th), 0.0))
        assert report.max_distance < 1e-9


def test_snowflake_about_own_centre():
    centre = (1234.5, -987.0)
    layout = g.Layout([g.Polygon("snowflake", g.snowflake_polygon(245, 87, 20, centre))])
    assert g.symmetry_check(layout, (1, 0, centre[0])).max_distance < 1e-9
    assert g.symmetry_check(layout, (0, 1, centre[1])).max_distance < 1e-9


def test_snowflake_sharp_area_closed_form():
    r, w = 245.0, 87.0
    # three bars of 2r x w minus the doubly counted central hexagon-like overlap, via shapely
    bars = [
        shapely.affinity.rotate(shapely.geometry.box(-w / 2, -r, w / 2, r), ang, origin=(0, 0))
        for ang in (0, 60, 120)
    ]
    union = shapely.ops.unary_union(bars)
    assert g.signed_area(g.snowflake_polygon(r, w, 0)) == pytest.approx(union.area, rel=1e-12)


def test_snowflake_chamfer_reduces_area():
    sharp = shapely.geometry.Polygon(g.snowflake_polygon(245, 87, 0)).area
    rounded = shapely.geometry.Polygon(g.snowflake_polygon(245, 87, 20)).area
    assert rounded < sharp


@pytest.mark.parametrize("w", [0.0, -5.0, 600.0])
def test_snowflake_degenerate(w):
    with pytest.raises(g.GeometryError):
        g.snowflake_polygon(245, w, 0)


def test_fillet_chord_tolerance():
    v = g.snowflake_polygon(245, 87, 20, tol=0.1)
    poly = shapely.geometry.Polygon(v)
    assert poly.is_valid
    # arc vertices lie on circles; chord sagitta of each arc segment is below tol
    seg = np.linalg.norm(np.diff(np.vstack([v, v[:1]]), axis=0), axis=1)
    # right-angle arcs have radius 20: sagitta = r - sqrt(r^2 - (L/2)^2)
    short = seg[seg < 10]
    sag = 20 - np.sqrt(20**2 - (short / 2) ** 2)
    assert sag.max() <= 0.1 + 1e-12


# --- vertebrae layout --------------------------------------------------------------


@pytest.mark.parametrize("params", [g.simulation_params(), g.fabrication_params()])
def test_vertebrae_symmetry(params):
    layout = g.vertebrae_layout(params)
    assert g.symmetry_check(layout, "x").max_distance < 1e-9
    assert g.symmetry_check(layout, "y").max_distance < 1e-9


@pytest.mark.parametrize("params", [g.simulation_params(), g.fabrication_params()])
def test_vertebrae_loops_simple_and_ccw(params):
    layout = g.vertebrae_layout(params)
    for p in layout.polygons:
        assert p.area > 0
        assert shapely.geometry.Polygon(p.vertices).is_valid


def test_vertebrae_holes_do_not_overlap():
    layout = g.vertebrae_layout(g.fabrication_params())
    shapes = [shapely.geometry.Polygon(p.vertices) for p in layout.polygons]
    union = shapely.ops.unary_union(shapes)
    assert union.area == pytest.approx(sum(s.area for s in shapes), rel=1e-9)


def test_fabrication_cell_count():
    params = g.fabrication_params()
    cells = g.cell_sequence(params)
    assert g.cells_per_side(params) == 9
    assert sum(1 for c in cells if c.x <= 0) == 9
    assert len(cells) == 2 * 9 - 1
    kinds = [c.kind for c in cells if c.x <= 0]
    assert kinds == ["taper"] * 2 + ["mirror"] * 3 + ["gradient"] * 3 + ["defect"]
    # C holes come in mirror-image pairs
    assert len(g.vertebrae_layout(params).layer("c_hole").polygons) == 2 * len(cells)


def test_periodic_train_without_gradient():
    params = g.simulation_params(n_gradient=0, q_defect=320.0, v_defect=480.0, p_defect=175.0)
    cells = g.cell_sequence(params)
    xs = np.array([c.x for c in cells])
    assert np.allclose(np.diff(xs), params.a, atol=1e-9)
    assert len({c.params for c in cells}) == 1
    holes = g.vertebrae_layout(params).layer("c_hole").polygons
    lefts = holes[0::2]
    for a, b in zip(lefts, lefts[1:]):
        assert np.allclose(b.vertices - a.vertices, [params.a, 0.0], atol=1e-9)


def test_gradient_is_monotone_towards_defect():
    cells = [c for c in g.cell_sequence(g.simulation_params()) if c.x <= 0]
    ps = [c.params.p for c in cells]
    assert ps == sorted(ps)
    assert ps[0] == 175.0 and ps[-1] == 220.0


@given(st.floats(0.5, 2.0))
def test_global_scale(k):
    base = g.simulation_params(n_mirror=2)
    a = g.vertebrae_layout(base)
    b = g.vertebrae_layout(base.scaled(k))
    assert len(a.polygons) == len(b.polygons)
    for pa, pb in zip(a.polygons, b.polygons):
        assert pa.vertices.shape == pb.vertices.shape
        np.testing.assert_allclose(pb.vertices, k * pa.vertices, rtol=1e-12, atol=1e-12 * k * 1e4)


def test_scale_by_exact_rational_is_bit_identical_in_cell_positions():
    base = g.simulation_params()
    xs = [c.x for c in g.cell_sequence(base)]
    xs2 = [c.x for c in g.cell_sequence(base.scaled(2.0))]
    assert xs2 == [2.0 * x for x in xs]


def test_invalid_resonator_params():
    with pytest.raises(g.GeometryError, match="pitch"):
        g.simulation_params(a=400.0)
    with pytest.raises(g.GeometryError, match="neck"):
        g.simulation_params(d=300.0)


def test_perturbed_paddle_breaks_symmetry():
    layout = g.vertebrae_layout(g.simulation_params())
    holes = [i for i, p in enumerate(layout.polygons) if p.layer == "c_hole"]
    # right C of the rightmost defect-side gradient cell: lift its paddle's upper end by 1 nm
    target = layout.polygons[holes[-3]]
    v = target.vertices.copy()
    cx = v[:, 0].mean()
    paddle_top = (v[:, 1] > 0) & (np.abs(v[:, 1]) < 150) & (np.abs(v[:, 0] - cx) < 200)
    assert paddle_top.any()
    v[paddle_top, 1] += 1.0
    layout.polygons[holes[-3]] = g.Polygon("c_hole", v)
    assert g.symmetry_check(layout, "x").max_distance >= 1.0 - 1e-9


def test_layout_json_roundtrip(tmp_path):
    layout = g.vertebrae_layout(g.simulation_params(n_mirror=1))
    path = tmp_path / "layout.json"
    layout.save(path)
    data = json.loads(path.read_text())
    assert data["units"] == "nm"
    assert set(data["polygons"][0]) == {"layer", "vertices"}
    back = g.Layout.load(path)
    for a, b in zip(layout.polygons, back.polygons):
        assert a.layer == b.layer
        np.testing.assert_array_equal(a.vertices, b.vertices)


def test_layout_svg(tmp_path):
    layout = g.vertebrae_layout(g.simulation_params(n_mirror=1))
    path = tmp_path / "layout.svg"
    layout.save(path)
    text = path.read_text()
    assert text.startswith("<svg") and text.count("<polygon") == len(layout.polygons)


# --- gratings ------------------------------------------------------------------------


def test_grating_circle_for_zero_eccentricity():
    pts = g.grating_curve(1000.0, 0.0, math.radians(40))
    assert np.allclose(np.hypot(pts[:, 0], pts[:, 1]), 1000.0, atol=1e-9)


def test_grating_intercepts():
    assert g.curve_y(632.0, -0.05, 0.0) == pytest.approx(632.0, abs=1e-12)
    x_axis = 632.0 / (1 - 0.05)
    assert x_axis == pytest.approx(665.26, abs=5e-3)
    assert g.curve_y(632.0, -0.05, x_axis) == pytest.approx(0.0, abs=1e-5)
    pts = g.grating_curve(632.0, -0.05, 0.5)
    mid = pts[np.argmin(np.abs(pts[:, 1]))]
    assert mid[0] == pytest.approx(x_axis, abs=1e-9)


def test_grating_curve_domain():
    with pytest.raises(g.GeometryError):
        g.curve_y(632.0, -0.05, 700.0)


@given(st.floats(-0.6, 0.6), st.floats(100.0, 30000.0))
def test_grating_implicit_curve(b, a):
    pts = g.grating_curve(a, b, math.radians(30))
    resid = a - b * pts[:, 0] - np.hypot(pts[:, 0], pts[:, 1])
    assert np.abs(resid).max() < 1e-9


def test_grating_chord_error():
    a, b = 15000.0, -0.05
    pts = g.grating_curve(a, b, math.radians(20), tol=0.1)
    # dense reference points between consecutive samples
    th = np.arctan2(pts[:, 1], pts[:, 0])
    for (t0, t1), p0, p1 in zip(zip(th, th[1:]), pts, pts[1:]):
        ts = np.linspace(t0, t1, 9)[1:-1]
        rho = a / (1 + b * np.cos(ts))
        ref = np.column_stack([rho * np.cos(ts), rho * np.sin(ts)])
        chord = p1 - p0
        dev = np.abs(chord[0] * (ref[:, 1] - p0[1]) - chord[1] * (ref[:, 0] - p0[0])) / np.linalg.norm(chord)
        assert dev.max() <= 0.1 + 1e-9


def test_grating_layout():
    params = g.GratingParams(n_grates=5)
    layout = g.grating_layout(params)
    assert len(layout.polygons) == 5
    for p in layout.polygons:
        assert p.area > 0
        assert shapely.geometry.Polygon(p.vertices).is_valid
    assert len(g.grating_curves(params)) == 10


@pytest.mark.parametrize("kwargs", [{"fill": 1.2}, {"b": 1.0}, {"n_grates": 0}])
def test_grating_params_invariants(kwargs):
    with pytest.raises(g.GeometryError):
        g.GratingParams(**kwargs)
