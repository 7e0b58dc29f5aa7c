import cmath
import json
import math
from importlib import resources

import numpy as np
import pytest
import sympy as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.constants import epsilon_0, hbar

from omcrystal.coupling import (
    SOLID,
    VACUUM,
    CouplingError,
    FieldMesh,
    MaterialProps,
    box_tet_mesh,
    em_norm,
    g_mb,
    g_om_total,
    g_pe,
    load_field_mesh,
    mech_norm,
    mirror_mesh_x,
    photoelastic_tensor,
    rotation_z,
    slab_fixture,
    slab_g_mb_closed_form,
    solid_boundary,
    strain_from_displacement,
)

GAAS = MaterialProps.gaas()
W_O = 2 * math.pi * 194e12
W_M = 2 * math.pi * 4.488e9


def unit_tet():
    return np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]), np.array([[0, 1, 2, 3]])


def cube_mesh(material=SOLID, n=1, size=1.0):
    nodes, cells = box_tet_mesh((n, n, n), (0, 0, 0), (size, size, size))
    return nodes, cells, np.full(len(cells), material)


def make_mesh(nodes, cells, material, Q=None, E=None, D=None, strain=None, facets=None, normals=None, **kw):
    n = len(nodes)
    if facets is None:
        facets, normals = solid_boundary(nodes, cells, material)
    Q = np.ones((n, 3), complex) if Q is None else Q
    E = np.ones((n, 3), complex) if E is None else E
    return FieldMesh(nodes, cells, material, facets, normals, Q, E, D, strain, kw.pop("omega_o", W_O), kw.pop("omega_m", W_M), **kw)


def uniform_strain_mesh(strain_tensor, e_vec, cells_material=SOLID):
    nodes, cells, material = cube_mesh(cells_material)
    E = np.tile(np.asarray(e_vec, complex), (len(nodes), 1))
    strain = np.tile(np.asarray(strain_tensor, complex), (len(cells), 1, 1))
    Q = np.zeros((len(nodes), 3), complex)
    Q[:, 2] = 1e-12
    return make_mesh(nodes, cells, material, Q=Q, E=E, strain=strain)


def pe_closed(mesh, integrand):
    # prefactor and normalisations for a unit solid cube with uniform fields
    pref = 0.5 * mesh.omega_o * math.sqrt(hbar / (2 * mesh.omega_m))
    return pref * integrand / (math.sqrt(mech_norm(mesh, GAAS)) * em_norm(mesh, GAAS))


# --- material and tensor ------------------------------------------------------


def test_gaas_table_values():
    m = GAAS
    assert (m.rho, m.c11, m.c12, m.c44, m.e14) == (5317.0, 118.41, 53.78, 59.12, -0.16)
    assert (m.p11, m.p12, m.p44, m.eps_r) == (-0.165, -0.140, -0.072, 11.361)


def test_material_validation():
    with pytest.raises(CouplingError, match="rho"):
        MaterialProps(rho=0, c11=1, c12=0.5, c44=1, e14=0, p11=0, p12=0, p44=0, eps_r=2)
    with pytest.raises(CouplingError, match="stiffness"):
        MaterialProps(rho=1, c11=1, c12=2, c44=1, e14=0, p11=0, p12=0, p44=0, eps_r=2)
    with pytest.raises(CouplingError, match="eps_r"):
        MaterialProps(rho=1, c11=2, c12=1, c44=1, e14=0, p11=0, p12=0, p44=0, eps_r=1)


def test_material_json_round_trip(tmp_path):
    GAAS.save(tmp_path / "m.json")
    assert MaterialProps.load(tmp_path / "m.json") == GAAS
    with pytest.raises(CouplingError, match="p44"):
        MaterialProps.from_dict({k: v for k, v in GAAS.to_dict().items() if k != "p44"})


def test_shipped_material_file_matches():
    text = resources.files("omcrystal").joinpath("materials/gaas.json").read_text()
    assert MaterialProps.from_dict(json.loads(text)) == GAAS


def test_tensor_symmetries():
    p = photoelastic_tensor(GAAS)
    np.testing.assert_array_equal(p, p.transpose(1, 0, 2, 3))
    np.testing.assert_array_equal(p, p.transpose(0, 1, 3, 2))
    np.testing.assert_array_equal(p, p.transpose(2, 3, 0, 1))


@settings(max_examples=50)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_tensor_matches_voigt_matrix(s):
    # independent oracle: 6x6 Voigt matrix acting on engineering strain
    p11, p12, p44 = GAAS.p11, GAAS.p12, GAAS.p44
    P = np.array(
        [
            [p11, p12, p12, 0, 0, 0],
            [p12, p11, p12, 0, 0, 0],
            [p12, p12, p11, 0, 0, 0],
            [0, 0, 0, p44, 0, 0],
            [0, 0, 0, 0, p44, 0],
            [0, 0, 0, 0, 0, p44],
        ]
    )
    xx, yy, zz, yz, xz, xy = s
    eps = np.array([[xx, xy, xz], [xy, yy, yz], [xz, yz, zz]])
    voigt = P @ np.array([xx, yy, zz, 2 * yz, 2 * xz, 2 * xy])
    d = np.einsum("abcd,cd->ab", photoelastic_tensor(GAAS), eps)
    got = np.array([d[0, 0], d[1, 1], d[2, 2], d[1, 2], d[0, 2], d[0, 1]])
    np.testing.assert_allclose(got, voigt, atol=1e-15)


def test_rotation_about_z():
    p = photoelastic_tensor(GAAS)
    np.testing.assert_allclose(photoelastic_tensor(GAAS, rotation_z(math.pi / 2)), p, atol=1e-15)
    p45 = photoelastic_tensor(GAAS, rotation_z(math.pi / 4))
    # [110] axis: p'11 = (p11 + p12)/2 + p44
    assert p45[0, 0, 0, 0] == pytest.approx((GAAS.p11 + GAAS.p12) / 2 + GAAS.p44, abs=1e-15)
    with pytest.raises(CouplingError):
        photoelastic_tensor(GAAS, np.diag([1.0, 2.0, 1.0]))


def test_non_cubic_rejected():
    mat = MaterialProps(**{**GAAS.__dict__, "symmetry": "hexagonal"})
    with pytest.raises(CouplingError, match="cubic"):
        photoelastic_tensor(mat)


# --- mesh file and validation ---------------------------------------------------


def one_tet_mesh(**over):
    nodes, cells = unit_tet()
    facets = np.array([[0, 2, 1]])
    normals = np.array([[0.0, 0, -1]])
    args = dict(
        nodes=nodes,
        cells=cells,
        material=[SOLID],
        facets=facets,
        normals=normals,
        Q=np.ones((4, 3)),
        E=np.ones((4, 3)),
        D=np.ones((4, 3)),
        strain=np.zeros((1, 3, 3)),
        omega_o=W_O,
        omega_m=W_M,
    )
    args.update(over)
    return FieldMesh(**args)


def test_one_tet_round_trip(tmp_path):
    mesh = one_tet_mesh()
    mesh.save(tmp_path / "t.omcf")
    back = load_field_mesh(tmp_path / "t.omcf")
    assert len(back.nodes) == 4 and len(back.cells) == 1
    for name in ("nodes", "cells", "material", "facets", "normals", "Q", "E", "D", "strain"):
        np.testing.assert_array_equal(getattr(back, name), getattr(mesh, name))
    assert back.facet_E is None and back.omega_m == W_M


def test_unnormalised_normal_rejected():
    with pytest.raises(CouplingError, match="unit"):
        one_tet_mesh(normals=np.array([[1.0, 1.0, 0.0]]))


def test_bad_indices_and_asymmetric_strain():
    with pytest.raises(CouplingError, match="outside"):
        one_tet_mesh(cells=np.array([[0, 1, 2, 7]]))
    strain = np.zeros((1, 3, 3))
    strain[0, 0, 1] = 1e-3
    with pytest.raises(CouplingError, match="symmetric"):
        one_tet_mesh(strain=strain)


def test_unit_mismatch_rejected(tmp_path):
    one_tet_mesh().save(tmp_path / "t.omcf")
    raw = (tmp_path / "t.omcf").read_bytes().replace(b"length=m ", b"length=um ", 1)
    (tmp_path / "u.omcf").write_bytes(raw)
    with pytest.raises(CouplingError, match="length"):
        load_field_mesh(tmp_path / "u.omcf")


def test_truncated_file_rejected(tmp_path):
    one_tet_mesh().save(tmp_path / "t.omcf")
    raw = (tmp_path / "t.omcf").read_bytes()
    (tmp_path / "x.omcf").write_bytes(raw[:-8])
    with pytest.raises(CouplingError, match="truncated"):
        load_field_mesh(tmp_path / "x.omcf")
    (tmp_path / "y.omcf").write_bytes(b"garbage")
    with pytest.raises(CouplingError):
        load_field_mesh(tmp_path / "y.omcf")


def test_slab_fixture_round_trip(tmp_path):
    mesh = slab_fixture((2, 2, 2))
    mesh.save(tmp_path / "s.omcf")
    back = load_field_mesh(tmp_path / "s.omcf")
    assert g_om_total(back, GAAS) == g_om_total(mesh, GAAS)


def test_solid_boundary_tiles_cube():
    nodes, cells, material = cube_mesh(n=3)
    facets, normals = solid_boundary(nodes, cells, material)
    v = nodes[facets]
    area = 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    assert area.sum() == pytest.approx(6.0)
    # divergence theorem: sum of n dA vanishes; sum of (x.n) dA = 3 V
    np.testing.assert_allclose((normals * area[:, None]).sum(axis=0), 0, atol=1e-12)
    centroid = v.mean(axis=1)
    assert np.sum(np.einsum("fi,fi->f", centroid, normals) * area) == pytest.approx(3.0)


# --- normalisations -------------------------------------------------------------


def test_mech_norm_uniform_unit_cube():
    nodes, cells, material = cube_mesh()
    Q = np.zeros((len(nodes), 3), complex)
    Q[:, 0] = 1.0
    mesh = make_mesh(nodes, cells, material, Q=Q)
    assert mech_norm(mesh, GAAS) == pytest.approx(5317.0, rel=1e-13)
    assert mech_norm(mesh.replace(Q=2 * Q), GAAS) == pytest.approx(4 * 5317.0, rel=1e-13)


def test_mech_norm_linear_field_exact():
    # sympy oracle: exact integral of rho |Q|^2 over the unit tet
    x, y, z = sp.symbols("x y z")
    qx = 1 + 2 * x - y + 3 * z
    qy = sp.Rational(1, 2) * x + 4 * y
    qz = 2 - z + x
    integrand = qx**2 + qy**2 + qz**2
    exact = sp.integrate(integrand, (z, 0, 1 - x - y), (y, 0, 1 - x), (x, 0, 1))
    nodes, cells = unit_tet()
    fq = sp.lambdify((x, y, z), [qx, qy, qz])
    Q = np.array([fq(*p) for p in nodes], complex)
    mesh = make_mesh(nodes, cells, np.array([SOLID]), Q=Q)
    assert mech_norm(mesh, GAAS) == pytest.approx(GAAS.rho * float(exact), rel=1e-13)


def test_mech_norm_ignores_vacuum_and_flags_zero():
    nodes, cells, material = cube_mesh(VACUUM)
    mesh = make_mesh(nodes, cells, material, facets=np.zeros((0, 3)), normals=np.zeros((0, 3)))
    with pytest.raises(CouplingError, match="zero"):
        mech_norm(mesh, GAAS)


def test_em_norm_vacuum_solid_mixed():
    E = np.zeros((8, 3), complex)
    E[:, 1] = 3.0 + 4.0j
    nodes, cells, _ = cube_mesh()
    vac = make_mesh(nodes, cells, np.full(6, VACUUM), E=E, facets=np.zeros((0, 3)), normals=np.zeros((0, 3)))
    sol = make_mesh(nodes, cells, np.full(6, SOLID), E=E)
    assert em_norm(vac, GAAS) == pytest.approx(epsilon_0 * 25.0, rel=1e-13)
    assert em_norm(sol, GAAS) == pytest.approx(11.361 * epsilon_0 * 25.0, rel=1e-13)
    # two stacked cubes, one of each
    nodes2, cells2 = box_tet_mesh((1, 1, 2), (0, 0, 0), (1, 1, 2))
    material = np.where(nodes2[cells2][:, :, 2].mean(axis=1) < 1, SOLID, VACUUM)
    E2 = np.zeros((len(nodes2), 3), complex)
    E2[:, 1] = 3.0 + 4.0j
    mixed = make_mesh(nodes2, cells2, material, E=E2)
    assert em_norm(mixed, GAAS) == pytest.approx(em_norm(vac, GAAS) + em_norm(sol, GAAS), rel=1e-13)


def test_em_norm_zero_field():
    mesh = make_mesh(*cube_mesh(), E=np.zeros((8, 3)))
    with pytest.raises(CouplingError):
        em_norm(mesh, GAAS)


# --- moving boundary --------------------------------------------------------------


def slab_oracle(size, thickness, gap, q0, e0):
    # symbolic integrals of the defining expressions over the slab geometry
    x, y, z = sp.symbols("x y z", real=True)
    lx, ly = size
    eps0, er = sp.Float(epsilon_0, 30), sp.Float(GAAS.eps_r, 30)
    top = sp.integrate(q0 * e0**2 * (er * eps0 - eps0), (x, 0, lx), (y, 0, ly))
    mech = sp.integrate(GAAS.rho * (q0 * z / thickness) ** 2, (x, 0, lx), (y, 0, ly), (z, 0, thickness))
    em = sp.integrate(er * eps0 * e0**2, (x, 0, lx), (y, 0, ly), (z, 0, thickness)) + sp.integrate(
        eps0 * e0**2, (x, 0, lx), (y, 0, ly), (z, thickness, thickness + gap)
    )
    pref = 0.5 * W_O * math.sqrt(hbar / (2 * W_M))
    return float(-pref * top / (sp.sqrt(mech) * em))


@pytest.mark.parametrize("divisions", [(1, 1, 1), (2, 2, 2), (4, 3, 2)])
def test_slab_matches_closed_form(divisions):
    size, t, gap, q0, e0 = (1e-6, 8e-7), 2.5e-7, 4e-7, 2e-12, 3e6
    mesh = slab_fixture(divisions, size, t, gap, q0, e0)
    oracle = slab_oracle(size, t, gap, q0, e0)
    assert g_mb(mesh, GAAS).real == pytest.approx(oracle, rel=1e-10)
    assert slab_g_mb_closed_form(size, t, gap, q0, e0) == pytest.approx(oracle, rel=1e-12)


def test_slab_refinement_stable():
    coarse = g_mb(slab_fixture((1, 1, 1)), GAAS)
    fine = g_mb(slab_fixture((4, 4, 4)), GAAS)
    assert abs(fine / coarse - 1) < 5e-3


def test_tangential_motion_on_single_face():
    nodes, cells, material = cube_mesh()
    facets, normals = solid_boundary(nodes, cells, material)
    top = normals[:, 2] > 0.5
    Q = np.zeros((len(nodes), 3), complex)
    Q[:, 0] = 1.0 + 0.5j
    mesh = make_mesh(nodes, cells, material, Q=Q, D=np.ones((8, 3)), facets=facets[top], normals=normals[top],
                     facet_E=np.ones((int(top.sum()), 3, 3)), facet_D=np.ones((int(top.sum()), 3, 3)))
    assert g_mb(mesh, GAAS) == 0


def test_omega_m_scaling():
    mesh = slab_fixture((2, 2, 2))
    g1 = g_mb(mesh, GAAS)
    g2 = g_mb(mesh.replace(omega_m=2 * mesh.omega_m), GAAS)
    assert g2 / g1 == pytest.approx(1 / math.sqrt(2), rel=1e-14)
    p1, p2 = g_pe(mesh, GAAS), g_pe(mesh.replace(omega_m=4 * mesh.omega_m), GAAS)
    assert p2 / p1 == pytest.approx(0.5, rel=1e-14)


def test_missing_d_field():
    mesh = slab_fixture((1, 1, 1)).replace(D=None, facet_D=None)
    with pytest.raises(CouplingError, match="D field"):
        g_mb(mesh, GAAS)


def test_nodal_fallback_warns():
    mesh = slab_fixture((1, 1, 1)).replace(facet_E=None, facet_D=None)
    with pytest.warns(UserWarning, match="nodal"):
        g_mb(mesh, GAAS)


def test_degenerate_facet():
    mesh = slab_fixture((1, 1, 1))
    facets = mesh.facets.copy()
    facets[0] = [facets[0, 0], facets[0, 0], facets[0, 1]]
    with pytest.raises(CouplingError, match="degenerate"):
        g_mb(mesh.replace(facets=facets), GAAS)


def test_d_perp_term_sign():
    # normal E at the top face: only the D_perp term survives
    mesh = slab_fixture((1, 1, 1))
    top = mesh.normals[:, 2] > 0.5
    e_solid = np.zeros_like(mesh.facet_E)
    d_vac = np.zeros_like(mesh.facet_D)
    d0 = 1e-5
    d_vac[top, :, 2] = d0
    m2 = mesh.replace(facet_E=e_solid, facet_D=d_vac)
    area = 1e-12
    num = 1e-12 * d0**2 * -(1 / (epsilon_0 * GAAS.eps_r) - 1 / epsilon_0) * area
    pref = 0.5 * W_O * math.sqrt(hbar / (2 * W_M))
    expected = -pref * num / (math.sqrt(mech_norm(m2, GAAS)) * em_norm(m2, GAAS))
    assert g_mb(m2, GAAS).real == pytest.approx(expected, rel=1e-12)
    assert expected < 0  # outward motion into a normal field lowers the coupling sign


# --- photoelastic -------------------------------------------------------------------


def test_zero_strain_zero_pe():
    mesh = uniform_strain_mesh(np.zeros((3, 3)), [1e6, 0, 0])
    assert g_pe(mesh, GAAS) == 0


def test_missing_strain():
    mesh = uniform_strain_mesh(np.zeros((3, 3)), [1e6, 0, 0]).replace(strain=None)
    with pytest.raises(CouplingError, match="strain"):
        g_pe(mesh, GAAS)


def test_hydrostatic_single_cell():
    delta, e0 = 1e-4, 2e6
    mesh = uniform_strain_mesh(delta * np.eye(3), [e0, 0, 0])
    eps_s = epsilon_0 * GAAS.eps_r
    integrand = eps_s**2 / epsilon_0 * (GAAS.p11 + 2 * GAAS.p12) * delta * e0**2  # unit volume
    assert g_pe(mesh, GAAS).real == pytest.approx(pe_closed(mesh, integrand), rel=1e-12)


def test_shear_single_cell_picks_p44():
    eta, e0 = 1e-4, 2e6
    shear = np.array([[0, eta, 0], [eta, 0, 0], [0, 0, 0]])
    along_x = uniform_strain_mesh(shear, [e0, 0, 0])
    # a cubic tensor cannot couple xy shear into the xx permittivity
    assert g_pe(along_x, GAAS) == 0
    diag = uniform_strain_mesh(shear, [e0 / math.sqrt(2), e0 / math.sqrt(2), 0])
    eps_s = epsilon_0 * GAAS.eps_r
    integrand = eps_s**2 / epsilon_0 * 2 * GAAS.p44 * eta * e0**2
    assert g_pe(diag, GAAS).real == pytest.approx(pe_closed(diag, integrand), rel=1e-12)
    # flipping p11/p12 leaves the shear response untouched
    other = MaterialProps(**{**GAAS.__dict__, "p11": 0.3, "p12": -0.9})
    assert g_pe(diag, other) == pytest.approx(g_pe(diag, GAAS), rel=1e-14)


def test_strain_from_linear_displacement():
    nodes, cells = box_tet_mesh((2, 2, 2), (0, 0, 0), (1, 1, 1))
    grad = np.array([[1.0, 2.0, 0.5], [-1.0, 0.3, 0.0], [0.2, 0.1, -0.7]])
    Q = nodes @ grad.T
    strain = strain_from_displacement(nodes, cells, Q)
    np.testing.assert_allclose(strain, np.broadcast_to(0.5 * (grad + grad.T), strain.shape), atol=1e-14)


# --- totals and invariances -------------------------------------------------------------


def test_total_without_pe():
    mesh = slab_fixture((2, 2, 2))
    mesh = mesh.replace(strain=np.zeros_like(mesh.strain))
    res = g_om_total(mesh, GAAS)
    assert res.g_pe == 0 and res.g_om == pytest.approx(abs(res.g_mb), rel=1e-15)


def test_cancellation():
    mesh = slab_fixture((2, 2, 2))
    mb, pe = g_mb(mesh, GAAS), g_pe(mesh, GAAS)
    tuned = mesh.replace(strain=mesh.strain * (-mb / pe))
    res = g_om_total(tuned, GAAS)
    assert res.g_om < 1e-9 * abs(mb)


@settings(max_examples=25)
@given(phi=st.floats(0, 2 * math.pi), psi=st.floats(0, 2 * math.pi))
def test_phase_invariance(phi, psi):
    mesh = slab_fixture((2, 2, 1))
    ref = g_om_total(mesh, GAAS)
    a, b = cmath.exp(1j * phi), cmath.exp(1j * psi)
    rot = mesh.replace(Q=a * mesh.Q, strain=a * mesh.strain, E=b * mesh.E, D=b * mesh.D, facet_E=b * mesh.facet_E, facet_D=b * mesh.facet_D)
    res = g_om_total(rot, GAAS)
    assert abs(res.g_mb) == pytest.approx(abs(ref.g_mb), rel=1e-12)
    assert abs(res.g_pe) == pytest.approx(abs(ref.g_pe), rel=1e-12)


@settings(max_examples=25)
@given(alpha=st.floats(1e-3, 1e3), beta=st.floats(1e-3, 1e3))
def test_amplitude_invariance(alpha, beta):
    mesh = slab_fixture((2, 2, 1))
    ref = g_om_total(mesh, GAAS)
    sc = mesh.replace(Q=alpha * mesh.Q, strain=alpha * mesh.strain, E=beta * mesh.E, D=beta * mesh.D,
                      facet_E=beta * mesh.facet_E, facet_D=beta * mesh.facet_D)
    res = g_om_total(sc, GAAS)
    assert res.g_mb == pytest.approx(ref.g_mb, rel=1e-10)
    assert res.g_pe == pytest.approx(ref.g_pe, rel=1e-10)


def mirrored_slab(parity):
    half_nodes, half_cells = box_tet_mesh((3, 2, 2), (0, 0, 0), (1e-6, 1e-6, 5e-7))
    nodes, cells, _ = mirror_mesh_x(half_nodes, half_cells)
    material = np.where(nodes[cells][:, :, 2].mean(axis=1) < 2.5e-7, SOLID, VACUUM)
    facets, normals = solid_boundary(nodes, cells, material)
    x, y, z = nodes.T
    L = 1e-6
    # x-mirror: a symmetric vector field has Q_x odd and Q_y, Q_z even in x
    even = np.cos(math.pi * x / L) + 0.3 * y / L
    odd = np.sin(math.pi * x / L) * (1 + z / L)
    Q = np.zeros((len(nodes), 3), complex)
    if parity == "sym":
        Q[:, 0], Q[:, 1], Q[:, 2] = odd, 0.5 * even, even * (1 + z / L)
    else:
        Q[:, 0], Q[:, 1], Q[:, 2] = even, 0.5 * odd, odd * (1 + z / L)
    Q *= 1e-12
    E = np.zeros((len(nodes), 3), complex)
    E[:, 0] = 1e6 * np.sin(math.pi * x / L)
    E[:, 1] = 1e6 * (1 + np.cos(2 * math.pi * x / L)) * (1 + z / L)
    E[:, 2] = 2e5 * np.cos(math.pi * x / L)
    strain = np.zeros((len(cells), 3, 3), complex)
    solid = material == SOLID
    strain[solid] = strain_from_displacement(nodes, cells[solid], Q)
    D = epsilon_0 * E
    return FieldMesh(nodes, cells, material, facets, normals, Q, E, D, strain, W_O, W_M, E[facets], epsilon_0 * E[facets])


def test_selection_rule():
    sym = g_om_total(mirrored_slab("sym"), GAAS)
    anti = g_om_total(mirrored_slab("anti"), GAAS)
    assert sym.g_om > 0
    assert anti.g_om < 1e-10 * sym.g_om
