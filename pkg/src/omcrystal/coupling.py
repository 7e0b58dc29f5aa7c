"""Optomechanical coupling rate from discretised mechanical and optical mode fields.

``g_om = |g_MB + g_PE|``: a moving-boundary surface integral plus a
photoelastic volume integral, both normalised by the mechanical mass integral
and the optical energy integral. SI units throughout; rates in rad/s.

Meshes are first-order tetrahedral: nodal fields are linear inside cells and
the strain is one symmetric 3x3 tensor per cell (tensor components, not
engineering shear).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.constants import epsilon_0, hbar

SOLID = 1
VACUUM = 0

UNITS = {
    "length": "m",
    "displacement": "m",
    "efield": "V/m",
    "dfield": "C/m^2",
    "frequency": "rad/s",
}

# order-2 tetrahedron rule (4 points), barycentric
_A, _B = 0.5854101966249685, 0.1381966011250105
TET_POINTS = np.array([[_A, _B, _B, _B], [_B, _A, _B, _B], [_B, _B, _A, _B], [_B, _B, _B, _A]])
TET_WEIGHTS = np.full(4, 0.25)

# degree-4 triangle rule (6 points); the boundary integrand is cubic in the nodal values
_T1, _W1 = 0.445948490915965, 0.223381589678011
_T2, _W2 = 0.091576213509771, 0.109951743655322
TRI_POINTS = np.array(
    [
        [_T1, _T1, 1 - 2 * _T1],
        [_T1, 1 - 2 * _T1, _T1],
        [1 - 2 * _T1, _T1, _T1],
        [_T2, _T2, 1 - 2 * _T2],
        [_T2, 1 - 2 * _T2, _T2],
        [1 - 2 * _T2, _T2, _T2],
    ]
)
TRI_WEIGHTS = np.array([_W1] * 3 + [_W2] * 3)


class CouplingError(ValueError):
    """Invalid mesh, field or material input."""


# ---------------------------------------------------------------------------
# material
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MaterialProps:
    """Cubic crystal parameters. Stiffness in GPa; ``e14`` is stored for completeness but unused here."""

    rho: float
    c11: float
    c12: float
    c44: float
    e14: float
    p11: float
    p12: float
    p44: float
    eps_r: float
    symmetry: str = "cubic"

    def __post_init__(self):
        errors = []
        if not self.rho > 0:
            errors.append("rho must be > 0")
        if not self.eps_r > 1:
            errors.append("eps_r must be > 1")
        if not (self.c11 > abs(self.c12) and self.c44 > 0):
            errors.append("stiffness must satisfy c11 > |c12| and c44 > 0")
        if errors:
            raise CouplingError("; ".join(errors))

    @classmethod
    def gaas(cls) -> "MaterialProps":
        return cls(rho=5317.0, c11=118.41, c12=53.78, c44=59.12, e14=-0.16, p11=-0.165, p12=-0.140, p44=-0.072, eps_r=11.361)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {
            "rho_kg_m3": d["rho"],
            "c11_GPa": d["c11"],
            "c12_GPa": d["c12"],
            "c44_GPa": d["c44"],
            "e14_C_m2": d["e14"],
            "p11": d["p11"],
            "p12": d["p12"],
            "p44": d["p44"],
            "eps_r": d["eps_r"],
            "symmetry": d["symmetry"],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MaterialProps":
        keys = {
            "rho_kg_m3": "rho",
            "c11_GPa": "c11",
            "c12_GPa": "c12",
            "c44_GPa": "c44",
            "e14_C_m2": "e14",
            "p11": "p11",
            "p12": "p12",
            "p44": "p44",
            "eps_r": "eps_r",
        }
        missing = [k for k in keys if k not in data]
        if missing:
            raise CouplingError(f"material is missing {', '.join(missing)}")
        return cls(**{v: float(data[k]) for k, v in keys.items()}, symmetry=data.get("symmetry", "cubic"))

    @classmethod
    def load(cls, path) -> "MaterialProps":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def photoelastic_tensor(mat: MaterialProps, rotation=None) -> np.ndarray:
    """Rank-4 photoelastic tensor ``p_abcd`` of a cubic crystal.

    The Voigt constants map stress-like: ``p_aaaa = p11``, ``p_aabb = p12`` and
    ``p_abab = p_abba = p44`` for ``a != b``. Contracting with tensor strain
    then gives the Voigt result with engineering shear, e.g.
    ``p_yzcd eps_cd = 2 p44 eps_yz = p44 * gamma_yz``.
    ``rotation`` (3x3, crystal -> lab) rotates the tensor into the lab frame.
    """
    if mat.symmetry != "cubic":
        raise CouplingError(f"only cubic photoelastic tensors are supported, got {mat.symmetry!r}")
    p = np.zeros((3, 3, 3, 3))
    for a in range(3):
        for b in range(3):
            if a == b:
                p[a, a, a, a] = mat.p11
            else:
                p[a, a, b, b] = mat.p12
                p[a, b, a, b] = p[a, b, b, a] = mat.p44
    if rotation is not None:
        r = np.asarray(rotation, dtype=float)
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-12):
            raise CouplingError("rotation must be orthogonal")
        p = np.einsum("ai,bj,ck,dl,ijkl->abcd", r, r, r, r, p)
    return p


def rotation_z(angle_rad: float) -> np.ndarray:
    c, s = math.cos(angle_rad), math.sin(angle_rad)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# ---------------------------------------------------------------------------
# mesh
# ---------------------------------------------------------------------------


@dataclass
class FieldMesh:
    """Tetrahedral mesh with one mechanical and one optical mode.

    ``facets`` are boundary triangles of the solid with outward ``normals``.
    ``facet_E`` / ``facet_D`` optionally hold per-facet vertex traces (solid
    side for E, vacuum side for D), shape (F, 3, 3); without them the nodal
    fields are used on the boundary.
    """

    nodes: np.ndarray
    cells: np.ndarray
    material: np.ndarray
    facets: np.ndarray
    normals: np.ndarray
    Q: np.ndarray
    E: np.ndarray
    D: np.ndarray | None
    strain: np.ndarray | None
    omega_o: float
    omega_m: float
    facet_E: np.ndarray | None = None
    facet_D: np.ndarray | None = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=float)
        self.cells = np.asarray(self.cells, dtype=np.int64).reshape(-1, 4)
        self.material = np.asarray(self.material, dtype=np.int64).reshape(-1)
        self.facets = np.asarray(self.facets, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=float).reshape(-1, 3)
        self.Q = np.asarray(self.Q, dtype=complex)
        self.E = np.asarray(self.E, dtype=complex)
        for name in ("D", "strain", "facet_E", "facet_D"):
            val = getattr(self, name)
            if val is not None:
                setattr(self, name, np.asarray(val, dtype=complex))
        self.omega_o = float(self.omega_o)
        self.omega_m = float(self.omega_m)
        self.validate()

    def validate(self) -> None:
        errors = []
        n, m, f = len(self.nodes), len(self.cells), len(self.facets)
        if self.nodes.ndim != 2 or self.nodes.shape[1] != 3:
            errors.append("nodes must be (N, 3)")
        if len(self.material) != m:
            errors.append("material needs one id per cell")
        if np.any((self.material != SOLID) & (self.material != VACUUM)):
            errors.append("material ids must be 0 (vacuum) or 1 (solid)")
        for name, idx in (("cells", self.cells), ("facets", self.facets)):
            if idx.size and (idx.min() < 0 or idx.max() >= n):
                errors.append(f"{name} reference nodes outside 0..{n - 1}")
        if len(self.normals) != f:
            errors.append("normals need one row per facet")
        elif f:
            norm = np.linalg.norm(self.normals, axis=1)
            bad = np.flatnonzero(np.abs(norm - 1.0) > 1e-9)
            if bad.size:
                errors.append(f"facet normals must be unit vectors (facet {bad[0]} has length {norm[bad[0]]:.6g})")
        for name, arr in (("Q", self.Q), ("E", self.E), ("D", self.D)):
            if arr is not None and arr.shape != (n, 3):
                errors.append(f"{name} must be (N, 3)")
        if self.strain is not None:
            if self.strain.shape != (m, 3, 3):
                errors.append("strain must be (M, 3, 3)")
            else:
                asym = np.abs(self.strain - self.strain.transpose(0, 2, 1)).max(initial=0.0)
                scale = np.abs(self.strain).max(initial=0.0)
                if asym > 1e-12 * max(scale, 1e-300):
                    errors.append("strain tensors must be symmetric")
        for name in ("facet_E", "facet_D"):
            arr = getattr(self, name)
            if arr is not None and arr.shape != (f, 3, 3):
                errors.append(f"{name} must be (F, 3, 3)")
        if not (self.omega_o > 0 and self.omega_m > 0):
            errors.append("mode frequencies must be > 0")
        if errors:
            raise CouplingError("; ".join(errors))

    @property
    def solid(self) -> np.ndarray:
        return self.material == SOLID

    def volumes(self) -> np.ndarray:
        return tet_volumes(self.nodes, self.cells)

    def facet_areas(self) -> np.ndarray:
        v = self.nodes[self.facets]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def replace(self, **changes) -> "FieldMesh":
        fields = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields.update(changes)
        return FieldMesh(**fields)

    def stats(self) -> dict:
        return {
            "nodes": int(len(self.nodes)),
            "cells": int(len(self.cells)),
            "solid_cells": int(self.solid.sum()),
            "facets": int(len(self.facets)),
            "solid_volume_m3": float(self.volumes()[self.solid].sum()),
            "boundary_area_m2": float(self.facet_areas().sum()),
        }

    # --- file format ---------------------------------------------------------

    _ARRAYS = (
        ("nodes", "<f8", lambda s: (s["nodes"], 3)),
        ("cells", "<i8", lambda s: (s["cells"], 4)),
        ("material", "<i8", lambda s: (s["cells"],)),
        ("facets", "<i8", lambda s: (s["facets"], 3)),
        ("normals", "<f8", lambda s: (s["facets"], 3)),
        ("Q", "<c16", lambda s: (s["nodes"], 3)),
        ("E", "<c16", lambda s: (s["nodes"], 3)),
        ("D", "<c16", lambda s: (s["nodes"], 3)),
        ("strain", "<c16", lambda s: (s["cells"], 3, 3)),
        ("facet_E", "<c16", lambda s: (s["facets"], 3, 3)),
        ("facet_D", "<c16", lambda s: (s["facets"], 3, 3)),
    )

    def save(self, path) -> None:
        present = [name for name, _, _ in self._ARRAYS if getattr(self, name) is not None]
        header = [
            "OMCF 1",
            "units " + " ".join(f"{k}={v}" for k, v in UNITS.items()),
            f"omega_o {self.omega_o!r}",
            f"omega_m {self.omega_m!r}",
            f"counts nodes={len(self.nodes)} cells={len(self.cells)} facets={len(self.facets)}",
            "arrays " + " ".join(present),
            "END",
        ]
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            for name, dtype, _ in self._ARRAYS:
                if name in present:
                    fh.write(np.ascontiguousarray(getattr(self, name), dtype=dtype).tobytes())


def _parse_pairs(tokens) -> dict:
    out = {}
    for tok in tokens:
        key, _, val = tok.partition("=")
        out[key] = val
    return out


def load_field_mesh(path) -> FieldMesh:
    """Read and validate an ``.omcf`` field file."""
    raw = Path(path).read_bytes()
    end = raw.find(b"\nEND\n")
    if not raw.startswith(b"OMCF ") or end < 0:
        raise CouplingError(f"{path}: not an OMCF field file")
    header = {}
    for line in raw[:end].decode("ascii").splitlines()[1:]:
        key, *rest = line.split()
        header[key] = rest
    for key in ("units", "omega_o", "omega_m", "counts", "arrays"):
        if key not in header:
            raise CouplingError(f"{path}: header is missing {key!r}")
    units = _parse_pairs(header["units"])
    for key, expected in UNITS.items():
        if units.get(key) != expected:
            raise CouplingError(f"{path}: unit of {key} is {units.get(key)!r}, expected {expected!r}")
    counts = {k: int(v) for k, v in _parse_pairs(header["counts"]).items()}
    present = set(header["arrays"])
    known = {name for name, _, _ in FieldMesh._ARRAYS}
    if present - known:
        raise CouplingError(f"{path}: unknown arrays {sorted(present - known)}")
    for required in ("nodes", "cells", "material", "facets", "normals", "Q", "E"):
        if required not in present:
            raise CouplingError(f"{path}: required array {required!r} missing")
    offset = end + 5
    arrays = {}
    for name, dtype, shape_of in FieldMesh._ARRAYS:
        if name not in present:
            arrays[name] = None
            continue
        shape = shape_of(counts)
        count = int(np.prod(shape))
        nbytes = count * np.dtype(dtype).itemsize
        if offset + nbytes > len(raw):
            raise CouplingError(f"{path}: truncated while reading {name!r}")
        arrays[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise CouplingError(f"{path}: {len(raw) - offset} trailing bytes")
    return FieldMesh(omega_o=float(header["omega_o"][0]), omega_m=float(header["omega_m"][0]), **arrays)


# ---------------------------------------------------------------------------
# geometry helpers
# ---------------------------------------------------------------------------


def tet_volumes(nodes, cells) -> np.ndarray:
    v = nodes[cells]
    return np.abs(np.einsum("ij,ij->i", v[:, 1] - v[:, 0], np.cross(v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]))) / 6.0


def _tet_gradients(nodes, cells) -> np.ndarray:
    # gradients of the four barycentric shape functions, shape (M, 4, 3)
    v = nodes[cells]
    jac = np.stack([v[:, 1] - v[:, 0], v[:, 2] - v[:, 0], v[:, 3] - v[:, 0]], axis=2)
    inv = np.linalg.inv(jac)  # rows: d(lambda_k)/dx for k = 1..3
    g = np.empty((len(cells), 4, 3))
    g[:, 1:] = inv
    g[:, 0] = -inv.sum(axis=1)
    return g


def strain_from_displacement(nodes, cells, Q) -> np.ndarray:
    """Cell-wise symmetric gradient of a linear displacement field (tensor strain)."""
    grads = _tet_gradients(np.asarray(nodes, float), np.asarray(cells))
    gu = np.einsum("mki,mkj->mij", np.asarray(Q, complex)[cells], grads)  # gu[m, i, j] = dQ_i/dx_j
    return 0.5 * (gu + gu.transpose(0, 2, 1))


def box_tet_mesh(shape, lower, upper):
    """Structured tetrahedral mesh of a box: each hexahedron split into 6 tets sharing its main diagonal."""
    nx, ny, nz = shape
    xs = np.linspace(lower[0], upper[0], nx + 1)
    ys = np.linspace(lower[1], upper[1], ny + 1)
    zs = np.linspace(lower[2], upper[2], nz + 1)
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def idx(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    corners = [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)]
    kuhn = [(0, 1, 2, 6), (0, 2, 3, 6), (0, 3, 7, 6), (0, 7, 4, 6), (0, 4, 5, 6), (0, 5, 1, 6)]
    cells = []
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                c = [idx(i + a, j + b, k + d) for a, b, d in corners]
                cells.extend([[c[t] for t in tet] for tet in kuhn])
    return nodes, np.array(cells, dtype=np.int64)


def mirror_mesh_x(nodes, cells, tol=1e-15):
    """Union of a mesh on x >= 0 with its mirror image in x = 0, merging nodes on the plane."""
    nodes = np.asarray(nodes, float)
    on_plane = np.abs(nodes[:, 0]) <= tol
    mirror_index = np.empty(len(nodes), dtype=np.int64)
    off = np.flatnonzero(~on_plane)
    mirror_index[on_plane] = np.flatnonzero(on_plane)
    mirror_index[off] = len(nodes) + np.arange(len(off))
    mirrored = nodes[off] * np.array([-1.0, 1.0, 1.0])
    all_nodes = np.vstack([nodes, mirrored])
    all_cells = np.vstack([cells, mirror_index[cells]])
    return all_nodes, all_cells, mirror_index


def solid_boundary(nodes, cells, material):
    """Boundary triangles of the solid region with outward unit normals."""
    faces = {}
    for ci in np.flatnonzero(np.asarray(material) == SOLID):
        tet = cells[ci]
        for drop in range(4):
            tri = tuple(int(t) for k, t in enumerate(tet) if k != drop)
            key = tuple(sorted(tri))
            if key in faces:
                faces[key] = None
            else:
                faces[key] = (tri, int(tet[drop]))
    tris, normals = [], []
    for entry in faces.values():
        if entry is None:
            continue
        tri, opposite = entry
        a, b, c = nodes[list(tri)]
        n = np.cross(b - a, c - a)
        if np.dot(n, nodes[opposite] - a) > 0:
            n = -n
            tri = (tri[0], tri[2], tri[1])
        tris.append(tri)
        normals.append(n / np.linalg.norm(n))
    return np.array(tris, dtype=np.int64).reshape(-1, 3), np.array(normals).reshape(-1, 3)


# ---------------------------------------------------------------------------
# integrals
# ---------------------------------------------------------------------------


def _tet_quadrature(values_at_nodes, cells):
    # values_at_nodes: (N, k) complex; returns per-cell quadrature points (M, 4, k)
    return np.einsum("pq,mqk->mpk", TET_POINTS, values_at_nodes[cells])


def _prefactor(mesh: FieldMesh) -> float:
    return 0.5 * mesh.omega_o * math.sqrt(hbar / (2.0 * mesh.omega_m))


def mech_norm(mesh: FieldMesh, mat: MaterialProps) -> float:
    """``int_S rho |Q|^2 dV`` over solid cells (kg m^2)."""
    solid = mesh.solid
    cells = mesh.cells[solid]
    vol = tet_volumes(mesh.nodes, cells)
    qp = _tet_quadrature(mesh.Q, cells)
    val = mat.rho * float(np.sum(vol[:, None] * TET_WEIGHTS[None, :] * np.sum(np.abs(qp) ** 2, axis=2)))
    if not val > 0:
        raise CouplingError("mechanical normalisation is zero: Q vanishes on the solid")
    return val


def em_norm(mesh: FieldMesh, mat: MaterialProps) -> float:
    """``int_V E* eps E dV`` over all cells (eps_0 eps_r in the solid, eps_0 in vacuum)."""
    vol = mesh.volumes()
    eps = np.where(mesh.solid, epsilon_0 * mat.eps_r, epsilon_0)
    qp = _tet_quadrature(mesh.E, mesh.cells)
    val = float(np.sum(eps[:, None] * vol[:, None] * TET_WEIGHTS[None, :] * np.sum(np.abs(qp) ** 2, axis=2)))
    if not val > 0:
        raise CouplingError("optical normalisation is zero: E vanishes everywhere")
    return val


def _boundary_traces(mesh: FieldMesh):
    if mesh.facet_E is not None and mesh.facet_D is not None:
        return mesh.facet_E, mesh.facet_D
    if mesh.D is None and mesh.facet_D is None:
        raise CouplingError("moving-boundary integral needs the D field")
    warnings.warn("boundary traces missing; using nodal E and D on the boundary", stacklevel=3)
    e = mesh.facet_E if mesh.facet_E is not None else mesh.E[mesh.facets]
    d = mesh.facet_D if mesh.facet_D is not None else mesh.D[mesh.facets]
    return e, d


def mb_integral(mesh: FieldMesh, mat: MaterialProps) -> complex:
    """Surface integral ``int (Q.n) [|E_par|^2 (eps_S - eps_0) - |D_perp|^2 (1/eps_S - 1/eps_0)] dA``."""
    if len(mesh.facets) == 0:
        raise CouplingError("no boundary facets")
    area = mesh.facet_areas()
    if np.any(area <= 0):
        raise CouplingError(f"degenerate boundary facet {int(np.flatnonzero(area <= 0)[0])}")
    e_tr, d_tr = _boundary_traces(mesh)
    n = mesh.normals
    # quadrature-point values, shape (F, P, 3)
    q = np.einsum("pk,fki->fpi", TRI_POINTS, mesh.Q[mesh.facets])
    e = np.einsum("pk,fki->fpi", TRI_POINTS, e_tr)
    d = np.einsum("pk,fki->fpi", TRI_POINTS, d_tr)
    qn = np.einsum("fpi,fi->fp", q, n)
    e_n = np.einsum("fpi,fi->fp", e, n)
    e_par = e - e_n[..., None] * n[:, None, :]
    d_perp = np.einsum("fpi,fi->fp", d, n)
    eps_s = epsilon_0 * mat.eps_r
    integrand = qn * (
        np.sum(np.abs(e_par) ** 2, axis=2) * (eps_s - epsilon_0) - np.abs(d_perp) ** 2 * (1.0 / eps_s - 1.0 / epsilon_0)
    )
    return complex(np.sum(area[:, None] * TRI_WEIGHTS[None, :] * integrand))


def pe_integral(mesh: FieldMesh, mat: MaterialProps, rotation=None) -> complex:
    """Volume integral ``(1/eps_0) int_S E* eps_S (p : strain) eps_S E dV``."""
    if mesh.strain is None:
        raise CouplingError("photoelastic integral needs the strain field")
    p = photoelastic_tensor(mat, rotation)
    solid = mesh.solid
    cells = mesh.cells[solid]
    vol = tet_volumes(mesh.nodes, cells)
    dperm = np.einsum("abcd,mcd->mab", p, mesh.strain[solid])
    e = _tet_quadrature(mesh.E, cells)
    quad = np.einsum("mpa,mab,mpb->mp", e.conj(), dperm, e)
    eps_s = epsilon_0 * mat.eps_r
    return complex(eps_s**2 / epsilon_0 * np.sum(vol[:, None] * TET_WEIGHTS[None, :] * quad))


def g_mb(mesh: FieldMesh, mat: MaterialProps) -> complex:
    """Moving-boundary coupling (rad/s, complex)."""
    num = mb_integral(mesh, mat)
    return -_prefactor(mesh) * num / (math.sqrt(mech_norm(mesh, mat)) * em_norm(mesh, mat))


def g_pe(mesh: FieldMesh, mat: MaterialProps, rotation=None) -> complex:
    """Photoelastic coupling (rad/s, complex)."""
    num = pe_integral(mesh, mat, rotation)
    return _prefactor(mesh) * num / (math.sqrt(mech_norm(mesh, mat)) * em_norm(mesh, mat))


@dataclass(frozen=True)
class CouplingResult:
    g_mb: complex
    g_pe: complex
    g_om: float

    def to_dict(self) -> dict:
        return {
            "g_mb_rad_s": [self.g_mb.real, self.g_mb.imag],
            "g_pe_rad_s": [self.g_pe.real, self.g_pe.imag],
            "g_om_rad_s": self.g_om,
            "g_om_over_2pi_hz": self.g_om / (2 * math.pi),
        }


def g_om_total(mesh: FieldMesh, mat: MaterialProps, rotation=None) -> CouplingResult:
    """``|g_MB + g_PE|`` together with both contributions."""
    mb = g_mb(mesh, mat)
    pe = g_pe(mesh, mat, rotation)
    return CouplingResult(mb, pe, abs(mb + pe))


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------


def slab_fixture(
    divisions=(2, 2, 2),
    size=(1e-6, 1e-6),
    thickness=250e-9,
    gap=250e-9,
    q0=1e-12,
    e0=1e6,
    mat: MaterialProps | None = None,
    omega_o=2 * math.pi * 194e12,
    omega_m=2 * math.pi * 4.488e9,
) -> FieldMesh:
    """Solid slab ``0 < z < thickness`` under a vacuum layer of height ``gap``.

    The displacement ``Q = q0 (z / thickness) z_hat`` moves only the top face;
    E is uniform along x (tangential to the top face) and D = eps E.
    ``divisions`` is (nx, ny, nz) per layer.
    """
    mat = mat or MaterialProps.gaas()
    nx, ny, nz = divisions
    nodes, cells = box_tet_mesh((nx, ny, 2 * nz), (0, 0, 0), (size[0], size[1], 2 * thickness))
    # remap the upper half into the vacuum gap
    z = nodes[:, 2]
    nodes[:, 2] = np.where(z <= thickness, z, thickness + (z - thickness) * gap / thickness)
    centroid_z = nodes[cells][:, :, 2].mean(axis=1)
    material = np.where(centroid_z < thickness, SOLID, VACUUM)
    facets, normals = solid_boundary(nodes, cells, material)
    zn = nodes[:, 2]
    Q = np.zeros((len(nodes), 3), complex)
    Q[:, 2] = q0 * np.minimum(zn, thickness) / thickness
    E = np.zeros((len(nodes), 3), complex)
    E[:, 0] = e0
    eps = np.where(zn < thickness - 1e-30, mat.eps_r, 1.0)
    D = epsilon_0 * eps[:, None] * E
    solid_cells = material == SOLID
    strain = np.zeros((len(cells), 3, 3), complex)
    strain[solid_cells] = strain_from_displacement(nodes, cells[solid_cells], Q)
    # boundary traces: E from the solid side is continuous here, D from the vacuum side
    facet_E = E[facets]
    facet_D = epsilon_0 * E[facets]
    return FieldMesh(nodes, cells, material, facets, normals, Q, E, D, strain, omega_o, omega_m, facet_E, facet_D)


def slab_g_mb_closed_form(
    size=(1e-6, 1e-6),
    thickness=250e-9,
    gap=250e-9,
    q0=1e-12,
    e0=1e6,
    mat: MaterialProps | None = None,
    omega_o=2 * math.pi * 194e12,
    omega_m=2 * math.pi * 4.488e9,
) -> float:
    """Hand-derived g_MB for :func:`slab_fixture`: only the top face contributes."""
    mat = mat or MaterialProps.gaas()
    area = size[0] * size[1]
    num = q0 * e0**2 * epsilon_0 * (mat.eps_r - 1.0) * area
    mech = mat.rho * q0**2 * area * thickness / 3.0
    em = epsilon_0 * e0**2 * area * (mat.eps_r * thickness + gap)
    pref = 0.5 * omega_o * math.sqrt(hbar / (2.0 * omega_m))
    return -pref * num / (math.sqrt(mech) * em)
