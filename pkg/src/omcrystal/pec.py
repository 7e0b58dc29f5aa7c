"""Electron-beam proximity-effect model: point spread function, dose convolution and correction.

Lengths are nm and doses are dimensionless (clearing dose = 1). A PSF is a
weighted sum of Gaussian-Pearson VII terms, each radially normalised to one.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
import scipy.fft
from scipy import integrate

from .geometry import Layout

EULER_GAMMA = 0.5772156649015329
_EPS = 1e-16
_FPMIN = 1e-300

# worker count handed to scipy.fft; the CLI overrides this from --threads
FFT_WORKERS = 1


class PecError(ValueError):
    """Invalid PEC input."""


class PaddingError(PecError):
    """FFT zero-padding too small for a linear (non-wrapping) convolution."""


# ---------------------------------------------------------------------------
# exponential integral
# ---------------------------------------------------------------------------


def _expint_cf_scaled(nu: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction; returns e^x E_nu(x)
    b = x + nu
    c = 1.0 / _FPMIN
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (nu - 1.0 + i)
        b += 2.0
        d = an * d + b
        d = _FPMIN if abs(d) < _FPMIN else d
        c = b + an / c
        c = _FPMIN if abs(c) < _FPMIN else c
        d = 1.0 / d
        delta = c * d
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"continued fraction for E_{nu}({x}) did not converge")


def _expint_series_integer(n: int, x: float) -> float:
    nm1 = n - 1
    ans = 1.0 / nm1 if nm1 != 0 else -math.log(x) - EULER_GAMMA
    fact = 1.0
    for i in range(1, 10_000):
        fact *= -x / i
        if i != nm1:
            delta = -fact / (i - nm1)
        else:
            psi = -EULER_GAMMA + sum(1.0 / k for k in range(1, nm1 + 1))
            delta = fact * (-math.log(x) + psi)
        ans += delta
        if abs(delta) < abs(ans) * _EPS:
            return ans
    raise ArithmeticError(f"series for E_{n}({x}) did not converge")


def _expint_series_real(nu: float, x: float) -> float:
    # E_nu(x) = x^(nu-1) Gamma(1-nu) - sum_k (-x)^k / (k! (1 - nu + k)), nu not a positive integer
    total = 0.0
    term = 1.0
    for k in range(0, 10_000):
        if k:
            term *= -x / k
        delta = term / (1.0 - nu + k)
        total += delta
        if k > 2 and abs(delta) < _EPS * max(abs(total), 1e-300):
            break
    return x ** (nu - 1.0) * math.gamma(1.0 - nu) - total


def _expint_quad(nu: float, x: float) -> float:
    # t = e^u turns the tail into a double-exponential decay
    peak = max(0.0, math.log(max(1.0 - nu, 1e-300) / x)) if nu < 1 else 0.0
    f = lambda u: math.exp(-x * math.exp(u) + (1.0 - nu) * u)  # noqa: E731
    upper = max(peak, 0.0) + 60.0
    val, _ = integrate.quad(f, 0.0, upper, points=[peak] if 0 < peak < upper else None, epsabs=0, epsrel=1e-13, limit=400)
    return val


def expint(nu: float, x: float) -> float:
    """Generalised exponential integral ``E_nu(x) = int_1^inf exp(-x t) t^-nu dt`` for real ``nu >= 0``."""
    return math.exp(-x) * expint_scaled(nu, x)


def expint_scaled(nu: float, x: float) -> float:
    """``exp(x) * E_nu(x)``, free of underflow for large ``x``."""
    if not x > 0 or not math.isfinite(x):
        raise PecError(f"E_nu(x) needs x > 0, got {x}")
    if not nu >= 0 or not math.isfinite(nu):
        raise PecError(f"E_nu(x) needs nu >= 0, got {nu}")
    if nu == 0:
        return 1.0 / x
    if x > 1.0:
        return _expint_cf_scaled(nu, x)
    n = round(nu)
    if nu == n:
        val = _expint_series_integer(int(n), x)
    elif abs(nu - n) > 1e-3 or n == 0:
        val = _expint_series_real(nu, x)
    else:
        val = _expint_quad(nu, x)
    return math.exp(x) * val


# ---------------------------------------------------------------------------
# PSF terms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GpTerm:
    """One Gaussian-Pearson VII term: Gaussian radius ``sigma``, Pearson range ``gamma``, exponent ``nu``."""

    weight: float
    sigma: float
    gamma: float = 0.0
    nu: float = 0.0

    def __post_init__(self):
        if not self.weight > 0:
            raise PecError(f"term weight must be > 0, got {self.weight}")
        if not self.sigma > 0:
            raise PecError(f"sigma must be > 0, got {self.sigma}")
        if self.gamma < 0 or self.nu < 0:
            raise PecError("gamma and nu must be >= 0")

    @property
    def is_gaussian(self) -> bool:
        return self.gamma == 0 or self.nu == 0

    def tail_mass(self, radius: float) -> float:
        """Fraction of this term's (unit) mass beyond ``radius``."""
        if radius <= 0:
            return 1.0
        if self.is_gaussian:
            return math.exp(-(radius**2) / self.sigma**2)
        x = self.gamma**2 / self.sigma**2
        s = radius**2 / self.gamma**2
        # int_S^inf e^{-x s}(1+s)^{-nu} ds = e^x (1+S)^{1-nu} E_nu(x(1+S))
        log_ratio = (
            -x * s
            + (1.0 - self.nu) * math.log1p(s)
            + math.log(expint_scaled(self.nu, x * (1.0 + s)))
            - math.log(expint_scaled(self.nu, x))
        )
        return math.exp(log_ratio)


def gp_eval(term: GpTerm, r):
    """Areal density (nm^-2) of one normalised Gaussian-Pearson VII term at radius ``r``."""
    r = np.asarray(r, dtype=float)
    if np.any(r < 0):
        raise PecError("radius must be >= 0")
    s2 = term.sigma**2
    if term.is_gaussian:
        out = np.exp(-(r**2) / s2) / (math.pi * s2)
    else:
        g2 = term.gamma**2
        pref = 1.0 / (math.pi * g2 * expint_scaled(term.nu, g2 / s2))
        out = pref * np.exp(-(r**2) / s2) * (r**2 / g2 + 1.0) ** (-term.nu)
    return float(out) if out.ndim == 0 else out


@dataclass
class PsfModel:
    terms: list[GpTerm]
    cutoff: float = 100.0

    def __post_init__(self):
        if not self.terms:
            raise PecError("PSF needs at least one term")
        if self.cutoff < 0:
            raise PecError("cutoff must be >= 0")
        total = sum(t.weight for t in self.terms)
        if abs(total - 1.0) > 1e-9:
            raise PecError(f"PSF weights must sum to 1, got {total:.9f}")

    @property
    def sigma_min(self) -> float:
        return min(t.sigma for t in self.terms)

    def to_dict(self) -> dict:
        return {
            "cutoff_nm": self.cutoff,
            "terms": [{"weight": t.weight, "sigma_nm": t.sigma, "gamma_nm": t.gamma, "nu": t.nu} for t in self.terms],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PsfModel":
        try:
            terms = [GpTerm(t["weight"], t["sigma_nm"], t.get("gamma_nm", 0.0), t.get("nu", 0.0)) for t in data["terms"]]
        except KeyError as exc:
            raise PecError(f"PSF term is missing {exc.args[0]!r}") from None
        return cls(terms, float(data.get("cutoff_nm", 0.0)))

    @classmethod
    def load(cls, path) -> "PsfModel":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def gaas_250nm(cls) -> "PsfModel":
        """The shipped PSF for snowflake patterns on 250 nm GaAs."""
        text = resources.files("omcrystal").joinpath("psf/gaas-250nm.json").read_text()
        return cls.from_dict(json.loads(text))

    def without_cutoff(self) -> "PsfModel":
        return PsfModel(list(self.terms), 0.0)


def psf_eval(model: PsfModel, r):
    """Weighted PSF density, flat inside the short-range cutoff."""
    r = np.maximum(np.asarray(r, dtype=float), model.cutoff)
    out = sum(t.weight * gp_eval(t, r) for t in model.terms)
    return float(out) if np.ndim(out) == 0 else out


# ---------------------------------------------------------------------------
# dose maps
# ---------------------------------------------------------------------------


@dataclass
class DoseMap:
    """Square-pixel dose grid. ``values[iy, ix]``; ``origin`` is the lower-left map corner in nm."""

    origin: tuple[float, float]
    pixel: float
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = (float(self.origin[0]), float(self.origin[1]))
        if self.values.ndim != 2 or min(self.values.shape) == 0:
            raise PecError("dose map must be a non-empty 2-D grid")
        if not self.pixel > 0:
            raise PecError("pixel size must be > 0")
        if np.any(self.values < 0):
            raise PecError("dose values must be >= 0")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        ny, nx = self.shape
        xs = self.origin[0] + (np.arange(nx) + 0.5) * self.pixel
        ys = self.origin[1] + (np.arange(ny) + 0.5) * self.pixel
        return xs, ys

    def total(self) -> float:
        """Integrated dose (dose * nm^2)."""
        return float(self.values.sum()) * self.pixel**2

    def with_values(self, values) -> "DoseMap":
        return DoseMap(self.origin, self.pixel, values)

    def save(self, path) -> None:
        ny, nx = self.shape
        header = (
            "OMCRYSTAL-DOSEMAP 1\n"
            f"shape {ny} {nx}\n"
            f"pixel_nm {self.pixel!r}\n"
            f"origin_nm {self.origin[0]!r} {self.origin[1]!r}\n"
            "dtype <f8\n"
            "order row-major\n"
            "END\n"
        )
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii"))
            fh.write(np.ascontiguousarray(self.values, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "DoseMap":
        raw = Path(path).read_bytes()
        end = raw.find(b"END\n")
        if not raw.startswith(b"OMCRYSTAL-DOSEMAP") or end < 0:
            raise PecError(f"{path}: not a dose map file")
        meta = {}
        for line in raw[:end].decode("ascii").splitlines()[1:]:
            key, *vals = line.split()
            meta[key] = vals
        ny, nx = (int(v) for v in meta["shape"])
        data = np.frombuffer(raw[end + 4 :], dtype="<f8")
        if data.size != ny * nx:
            raise PecError(f"{path}: expected {ny * nx} values, found {data.size}")
        origin = tuple(float(v) for v in meta["origin_nm"])
        return cls(origin, float(meta["pixel_nm"][0]), data.reshape(ny, nx).copy())


# ---------------------------------------------------------------------------
# rasterisation
# ---------------------------------------------------------------------------


def _accumulate_edge(acc, x0, y0, x1, y1, ny):
    # exact signed-area accumulation of one edge (pixel units); coverage is the row-wise cumsum
    if y0 == y1:
        return
    direction = 1.0
    if y0 > y1:
        x0, y0, x1, y1 = x1, y1, x0, y0
        direction = -1.0
    dxdy = (x1 - x0) / (y1 - y0)
    ystart, yend = max(y0, 0.0), min(y1, float(ny))
    if ystart >= yend:
        return
    x = x0 + (ystart - y0) * dxdy
    for row in range(int(math.floor(ystart)), int(math.ceil(yend))):
        dy = min(row + 1.0, yend) - max(float(row), ystart)
        xnext = x + dxdy * dy
        d = dy * direction
        xa, xb = (x, xnext) if x < xnext else (xnext, x)
        xa_floor = math.floor(xa)
        i0 = int(xa_floor)
        i1 = int(math.ceil(xb))
        line = acc[row]
        if i1 <= i0 + 1:
            xmf = 0.5 * (x + xnext) - xa_floor
            line[i0] += d - d * xmf
            line[i0 + 1] += d * xmf
        else:
            s = 1.0 / (xb - xa)
            fa = xa - xa_floor
            a0 = 0.5 * s * (1.0 - fa) ** 2
            fb = xb - i1 + 1.0
            am = 0.5 * s * fb * fb
            line[i0] += d * a0
            if i1 == i0 + 2:
                line[i0 + 1] += d * (1.0 - a0 - am)
            else:
                a1 = s * (1.5 - fa)
                line[i0 + 1] += d * (a1 - a0)
                line[i0 + 2 : i1 - 1] += d * s
                a2 = a1 + (i1 - i0 - 3) * s
                line[i1 - 1] += d * (1.0 - a2 - am)
            line[i1] += d * am
        x = xnext


def _clamped_edges(p0, p1, width):
    # split at x = 0 and x = width, then clamp; coverage only depends on the area left of each column
    xs = [p0[0], p1[0]]
    cuts = [0.0]
    for bound in (0.0, width):
        if (xs[0] - bound) * (xs[1] - bound) < 0:
            cuts.append((bound - xs[0]) / (xs[1] - xs[0]))
    cuts.append(1.0)
    cuts.sort()
    for t0, t1 in zip(cuts, cuts[1:]):
        a = p0 + (p1 - p0) * t0
        b = p0 + (p1 - p0) * t1
        yield min(max(a[0], 0.0), width), a[1], min(max(b[0], 0.0), width), b[1]


def min_feature_size(layout: Layout) -> float:
    """Smallest ``2 * area / perimeter`` over the layout's loops (the width of a long bar)."""
    sizes = []
    for p in layout.polygons:
        v = p.vertices
        perim = np.linalg.norm(np.diff(np.vstack([v, v[:1]]), axis=0), axis=1).sum()
        sizes.append(2.0 * abs(p.area) / perim)
    return float(min(sizes))


def rasterize(
    layout: Layout,
    pixel: float,
    origin: tuple[float, float] | None = None,
    shape: tuple[int, int] | None = None,
    margin: float = 0.0,
    check_resolution: bool = True,
) -> DoseMap:
    """Exact area coverage of the layout's loops on a pixel grid, clipped to [0, 1].

    Without ``origin``/``shape`` the grid is the layout bounding box grown by
    ``margin`` and snapped to whole pixels.
    """
    if not layout.polygons:
        raise PecError("cannot rasterize an empty layout")
    if not pixel > 0:
        raise PecError("pixel must be > 0")
    if check_resolution:
        feature = min_feature_size(layout)
        if pixel > feature / 4:
            raise PecError(f"pixel {pixel} nm is coarser than a quarter of the smallest feature ({feature:.2f} nm)")
    if origin is None or shape is None:
        xmin, ymin, xmax, ymax = layout.bbox
        x0 = math.floor((xmin - margin) / pixel) * pixel
        y0 = math.floor((ymin - margin) / pixel) * pixel
        nx = int(math.ceil((xmax + margin - x0) / pixel))
        ny = int(math.ceil((ymax + margin - y0) / pixel))
        origin, shape = (x0, y0), (ny, nx)
    ny, nx = shape
    acc = np.zeros((ny, nx + 2))
    off = np.asarray(origin, dtype=float)
    for poly in layout.polygons:
        v = (poly.vertices - off) / pixel
        for p0, p1 in zip(v, np.roll(v, -1, axis=0)):
            for seg in _clamped_edges(p0, p1, float(nx)):
                _accumulate_edge(acc, *seg, ny)
    coverage = np.minimum(np.abs(np.cumsum(acc, axis=1)[:, :nx]), 1.0)
    coverage[coverage < 1e-12] = 0.0
    return DoseMap(origin, pixel, coverage)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def psf_kernel(model: PsfModel, terms, pixel: float, radius: float) -> np.ndarray:
    """Discretised kernel (fraction of dose per pixel) for a subset of the model's terms.

    Off-centre pixels hold point samples of the (cut-off) PSF times the pixel
    area; the centre pixel receives whatever mass the samples miss, so the
    kernel sums to the analytic mass inside ``radius``.
    """
    n = int(math.ceil(radius / pixel))
    ax = np.arange(-n, n + 1) * pixel
    rr = np.hypot(ax[None, :], ax[:, None])
    r_eval = np.maximum(rr, model.cutoff)
    kern = sum(t.weight * gp_eval(t, r_eval) for t in terms) * pixel**2
    kern[rr > radius] = 0.0
    kern[n, n] = 0.0
    mass = sum(t.weight * (1.0 - t.tail_mass(radius)) for t in terms)
    kern[n, n] = mass - kern.sum()
    if kern[n, n] < 0:
        raise PecError("pixel too coarse for this PSF: centre mass would be negative")
    return kern


@dataclass
class _KernelPlan:
    kernel: np.ndarray
    factor: int
    radius_px: int
    fft_shape: tuple[int, int]
    kernel_fft: np.ndarray = field(repr=False)


class DoseConvolver:
    """Linear convolution of dose maps of one grid shape with a PSF.

    Narrow terms use the map pixel; wide Gaussian terms (sigma above
    ``coarse_threshold`` pixels) are convolved on a grid ``coarse_factor``
    times coarser and spread back uniformly, which conserves dose.
    """

    def __init__(
        self,
        model: PsfModel,
        pixel: float,
        shape: tuple[int, int],
        *,
        coarse_factor: int = 8,
        coarse_threshold: float = 256.0,
        range_sigmas: float = 3.0,
        fft_pad: int | None = None,
    ):
        if pixel > model.sigma_min * (1 + 1e-12):
            warnings.warn(f"pixel {pixel} nm exceeds the narrowest PSF sigma {model.sigma_min} nm", stacklevel=2)
        self.model = model
        self.pixel = pixel
        self.shape = tuple(shape)
        fine = [t for t in model.terms if not (t.is_gaussian and t.sigma >= coarse_threshold * pixel)]
        coarse = [t for t in model.terms if t not in fine]
        self.plans = []
        for terms, factor in ((fine, 1), (coarse, coarse_factor)):
            if not terms:
                continue
            px = pixel * factor
            radius = max(range_sigmas * max(t.sigma for t in terms), model.cutoff, px)
            kern = psf_kernel(model, terms, px, radius)
            rpx = kern.shape[0] // 2
            ny = -(-self.shape[0] // factor)
            nx = -(-self.shape[1] // factor)
            pad = rpx if fft_pad is None else fft_pad // factor
            if pad < rpx:
                raise PaddingError(
                    f"fft padding of {pad} px per side is below the kernel radius {rpx} px; "
                    "the convolution would wrap around"
                )
            fshape = (scipy.fft.next_fast_len(ny + 2 * pad, real=True), scipy.fft.next_fast_len(nx + 2 * pad, real=True))
            kfft = scipy.fft.rfft2(kern, fshape, workers=FFT_WORKERS)
            self.plans.append(_KernelPlan(kern, factor, rpx, fshape, kfft))

    @property
    def kernel_mass(self) -> float:
        return float(sum(p.kernel.sum() for p in self.plans))

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        if values.shape != self.shape:
            raise PecError(f"map shape {values.shape} does not match convolver shape {self.shape}")
        ny, nx = self.shape
        out = np.zeros(self.shape)
        for plan in self.plans:
            f = plan.factor
            if f == 1:
                src = values
            else:
                cy, cx = -(-ny // f), -(-nx // f)
                padded = np.zeros((cy * f, cx * f))
                padded[:ny, :nx] = values
                src = padded.reshape(cy, f, cx, f).mean(axis=(1, 3))
            full = scipy.fft.irfft2(
                scipy.fft.rfft2(src, plan.fft_shape, workers=FFT_WORKERS) * plan.kernel_fft,
                plan.fft_shape,
                workers=FFT_WORKERS,
            )
            r = plan.radius_px
            res = full[r : r + src.shape[0], r : r + src.shape[1]]
            if f != 1:
                res = np.repeat(np.repeat(res, f, axis=0), f, axis=1)[:ny, :nx]
            out += res
        return out


def convolve_dose(written: DoseMap, model: PsfModel, **kwargs) -> DoseMap:
    """Deposited dose for a written dose map (linear, non-circular convolution).

    Dose scattered past the map edge is dropped; keep exposed features at least
    ``3 * sigma`` of the relevant terms away from the edge when totals matter.
    """
    conv = DoseConvolver(model, written.pixel, written.shape, **kwargs)
    return written.with_values(np.maximum(conv(written.values), 0.0))


@dataclass
class CorrectionResult:
    dose: DoseMap
    residual: float
    iterations: int
    converged: bool
    history: list[float]


def correct_dose(
    target: DoseMap,
    model: PsfModel,
    iters: int = 200,
    tol: float = 1e-3,
    damping: float = 1.0,
    convolver: DoseConvolver | None = None,
    threshold: float = 0.5,
) -> CorrectionResult:
    """Written dose whose deposited dose matches ``target`` on exposed pixels.

    Damped fixed-point iteration ``d <- max(0, d + damping (target - PSF * d))``
    restricted to exposed pixels, starting from ``d = target``. A pixel is
    exposed when its target reaches ``threshold``; thin antialiased slivers
    below it cannot be matched with a non-negative dose and are left unwritten.
    ``iterations`` counts forward convolutions. On non-convergence the best
    iterate is returned with ``converged=False`` and a warning.
    """
    t = target.values
    if np.any(t > 1.0 + 1e-12):
        raise PecError("target dose must lie in [0, 1]")
    if not 0 < damping <= 2:
        raise PecError("damping must be in (0, 2]")
    if not 0 < threshold <= 1:
        raise PecError("threshold must be in (0, 1]")
    exposed = t >= threshold
    if not exposed.any():
        raise PecError("target has no exposed pixels")
    conv = convolver or DoseConvolver(model, target.pixel, target.shape)
    d = np.where(exposed, t, 0.0)
    best_d, best_res = d, math.inf
    history = []
    for it in range(1, iters + 1):
        resid = np.where(exposed, t - conv(d), 0.0)
        res = float(np.abs(resid).max())
        history.append(res)
        if res < best_res:
            best_d, best_res = d, res
        if res <= tol:
            return CorrectionResult(target.with_values(d), res, it, True, history)
        d = np.where(exposed, np.maximum(0.0, d + damping * resid), 0.0)
    warnings.warn(f"dose correction stopped after {iters} iterations with residual {best_res:.3e}", stacklevel=2)
    return CorrectionResult(target.with_values(best_d), best_res, iters, False, history)
