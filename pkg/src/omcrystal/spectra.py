"""Calibrated thermal-spectroscopy model and the inverse g_om extraction pipeline.

All rates are angular (rad/s). Trace files and RBW are in Hz; conversions
happen at the boundary. The transduction factor (called ``transduction``)
is the opaque overall gain that cancels between the thermal peak and the
calibration tone.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import optimize
from scipy.constants import hbar, k as k_B

TWO_PI = 2.0 * math.pi
MAX_BG_ORDER = 5
WINDOWS = ("gaussian", "flattop")


class SpectraError(ValueError):
    """Invalid spectral model input or failed fit."""


class ToneNotFoundError(SpectraError):
    """No calibration tone above the noise at the expected frequency."""


# ---------------------------------------------------------------------------
# model types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpticalResonance:
    omega_o: float
    gamma_o0: float
    gamma_owg: float

    def __post_init__(self):
        if not (self.omega_o > 0 and self.gamma_o0 > 0 and self.gamma_owg >= 0):
            raise SpectraError("optical resonance needs omega_o, gamma_o0 > 0 and gamma_owg >= 0")

    @property
    def gamma_o(self) -> float:
        return self.gamma_o0 + 2.0 * self.gamma_owg

    @property
    def q_loaded(self) -> float:
        return self.omega_o / self.gamma_o

    @property
    def q_intrinsic(self) -> float:
        return self.omega_o / self.gamma_o0

    @classmethod
    def from_q(cls, f_o_hz: float, q_loaded: float, q_intrinsic: float) -> "OpticalResonance":
        if not q_intrinsic > q_loaded > 0:
            raise SpectraError("need q_intrinsic > q_loaded > 0")
        w = TWO_PI * f_o_hz
        g0 = w / q_intrinsic
        return cls(w, g0, 0.5 * (w / q_loaded - g0))


@dataclass(frozen=True)
class MechanicalMode:
    omega_m: float
    gamma_m: float
    temperature: float

    def __post_init__(self):
        if not (self.omega_m > 0 and self.gamma_m > 0 and self.temperature > 0):
            raise SpectraError("mechanical mode needs omega_m, gamma_m and temperature > 0")

    @property
    def q_m(self) -> float:
        return self.omega_m / self.gamma_m

    @property
    def n_thermal(self) -> float:
        return thermal_occupation(self.temperature, self.omega_m)

    @classmethod
    def from_q(cls, f_m_hz: float, q_m: float, temperature: float) -> "MechanicalMode":
        w = TWO_PI * f_m_hz
        return cls(w, w / q_m, temperature)


@dataclass(frozen=True)
class CalibrationTone:
    omega_phi: float
    depth: float

    def __post_init__(self):
        if not (self.omega_phi > 0 and self.depth > 0):
            raise SpectraError("tone needs omega_phi > 0 and depth > 0")
        if self.depth > 0.1:
            warnings.warn(f"phase-modulation depth {self.depth} is not small; the leading-order model assumes depth << 1", stacklevel=3)

    @property
    def peak_factor(self) -> float:
        """``A^2 omega^2 / 2``: SA peak power of the tone per unit transduction."""
        return 0.5 * self.depth**2 * self.omega_phi**2


@dataclass(frozen=True)
class ToneLine:
    """A spectral delta line ``weight * delta(omega - omega)``."""

    omega: float
    weight: float


def s21_sq(omega, res: OpticalResonance):
    """Power transmission through the two-port resonance."""
    omega = np.asarray(omega, dtype=float)
    return res.gamma_owg**2 / ((omega - res.omega_o) ** 2 + (0.5 * res.gamma_o) ** 2)


def thermal_occupation(temperature: float, omega_m: float) -> float:
    """Classical occupation ``k_B T / (hbar omega_m)``."""
    if not (temperature > 0 and omega_m > 0):
        raise SpectraError("temperature and omega_m must be > 0")
    return k_B * temperature / (hbar * omega_m)


def lorentzian_density(omega, mech: MechanicalMode, g_om: float, transduction: float = 1.0):
    omega = np.asarray(omega, dtype=float)
    return transduction * g_om**2 * mech.n_thermal * mech.gamma_m / ((omega - mech.omega_m) ** 2 + (0.5 * mech.gamma_m) ** 2)


def psd_model(omega, mech: MechanicalMode, g_om: float, tone: CalibrationTone | None = None, transduction: float = 1.0):
    """Thermal density at ``omega`` and the tone's delta line (or ``None``)."""
    if np.any(np.asarray(omega) <= 0):
        raise SpectraError("psd_model is defined for omega > 0")
    line = None
    if tone is not None:
        line = ToneLine(tone.omega_phi, transduction * 0.25 * tone.depth**2 * tone.omega_phi**2 * TWO_PI)
    return lorentzian_density(omega, mech, g_om, transduction), line


def window(omega_sa, rbw_hz: float, centre: float, kind: str = "gaussian"):
    """SA filter image of a line at ``centre``: peak 1, FWHM equal to the RBW."""
    d = (np.asarray(omega_sa, dtype=float) - centre) / (TWO_PI * rbw_hz)
    if kind == "gaussian":
        return np.exp(-4.0 * math.log(2.0) * d**2)
    if kind == "flattop":
        return np.exp(-math.log(2.0) * (2.0 * d) ** 8)
    raise SpectraError(f"unknown window {kind!r}; choose from {WINDOWS}")


def poly_background(omega, coeffs, centre: float, scale: float):
    """Polynomial in ``u = (omega - centre) / scale`` with ``coeffs`` lowest order first."""
    u = (np.asarray(omega, dtype=float) - centre) / scale
    return np.polynomial.polynomial.polyval(u, np.asarray(coeffs, dtype=float)) if len(coeffs) else np.zeros_like(u)


@dataclass(frozen=True)
class MeasurementModel:
    """Everything needed to predict an SA trace. ``bg`` coefficients are per unit transduction,
    in powers of the offset from ``omega_m`` measured in units of ``gamma_m``."""

    mech: MechanicalMode
    g_om: float
    tone: CalibrationTone | None = None
    transduction: float = 1.0
    bg: tuple[float, ...] = ()
    dither_hz: float = 0.0
    dither_fraction: float = 0.0


def check_sampling(freq_hz, rbw_hz: float, gamma_m: float | None = None) -> list[str]:
    """Messages for violations of ``step << RBW << gamma_m / 2 pi``."""
    msgs = []
    freq_hz = np.asarray(freq_hz, dtype=float)
    if len(freq_hz) > 1:
        step = float(np.max(np.diff(freq_hz)))
        if step > 0.5 * rbw_hz:
            msgs.append(f"frequency step {step:.4g} Hz is not small against the RBW {rbw_hz:.4g} Hz")
    if gamma_m is not None and rbw_hz > 0.2 * gamma_m / TWO_PI:
        msgs.append(f"RBW {rbw_hz:.4g} Hz is not small against the linewidth {gamma_m / TWO_PI:.4g} Hz")
    return msgs


def sa_power(omega_sa, model: MeasurementModel, rbw_hz: float, window_kind: str = "gaussian", check: bool = True):
    """Measured SA power: RBW-scaled thermal Lorentzian, the tone's window image and a background."""
    omega_sa = np.asarray(omega_sa, dtype=float)
    if check:
        for msg in check_sampling(omega_sa / TWO_PI, rbw_hz, model.mech.gamma_m):
            warnings.warn(msg, stacklevel=2)
    noise_like, tone_part = _sa_parts(omega_sa, model, rbw_hz, window_kind)
    return noise_like + tone_part


def _sa_parts(omega_sa, model: MeasurementModel, rbw_hz, window_kind):
    mech = model.mech
    dens = lorentzian_density(omega_sa, mech, model.g_om)
    if model.dither_fraction:
        wd = TWO_PI * model.dither_hz
        side = lorentzian_density(omega_sa - wd, mech, model.g_om) + lorentzian_density(omega_sa + wd, mech, model.g_om)
        dens = (1.0 - 2.0 * model.dither_fraction) * dens + model.dither_fraction * side
    thermal = 2.0 * rbw_hz * dens
    bg = poly_background(omega_sa, model.bg, mech.omega_m, mech.gamma_m)
    tone = np.zeros_like(omega_sa)
    if model.tone is not None:
        tone = model.tone.peak_factor * window(omega_sa, rbw_hz, model.tone.omega_phi, window_kind)
    return model.transduction * (thermal + bg), model.transduction * tone


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------


DETUNINGS = ("blue", "red", "peak")


@dataclass
class SpectrumTrace:
    freq_hz: np.ndarray
    power: np.ndarray
    rbw_hz: float
    input_power_w: float = 1e-3
    scan_id: int = 0
    detuning: str = "blue"
    unit: str = "W"

    def __post_init__(self):
        self.freq_hz = np.asarray(self.freq_hz, dtype=float)
        self.power = np.asarray(self.power, dtype=float)
        if self.freq_hz.shape != self.power.shape or self.freq_hz.ndim != 1:
            raise SpectraError("frequency and power must be 1-D arrays of equal length")
        if len(self.freq_hz) < 2 or np.any(np.diff(self.freq_hz) <= 0):
            raise SpectraError("frequencies must be strictly increasing")
        if self.unit not in ("W", "dBm"):
            raise SpectraError(f"unit must be 'W' or 'dBm', got {self.unit!r}")
        if self.detuning not in DETUNINGS:
            raise SpectraError(f"detuning must be one of {DETUNINGS}")
        if not self.rbw_hz > 0:
            raise SpectraError("RBW must be > 0")

    @property
    def omega(self) -> np.ndarray:
        return TWO_PI * self.freq_hz

    def power_w(self) -> np.ndarray:
        return 1e-3 * 10.0 ** (self.power / 10.0) if self.unit == "dBm" else self.power

    def in_watts(self) -> "SpectrumTrace":
        return replace(self, power=self.power_w(), unit="W")

    def in_dbm(self) -> "SpectrumTrace":
        p = self.power_w()
        if np.any(p <= 0):
            raise SpectraError("cannot express non-positive powers in dBm")
        return replace(self, power=10.0 * np.log10(p / 1e-3), unit="dBm")

    def scaled(self, factor: float) -> "SpectrumTrace":
        return replace(self.in_watts(), power=self.power_w() * factor)

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(f"# rbw_hz,{self.rbw_hz!r}\n")
            fh.write(f"# input_power_w,{self.input_power_w!r}\n")
            fh.write(f"# detuning,{self.detuning}\n")
            fh.write(f"# scan_id,{self.scan_id}\n")
            fh.write(f"# unit,{self.unit}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frequency_hz", f"power_{self.unit}"])
            for f, p in zip(self.freq_hz, self.power):
                w.writerow([repr(float(f)), repr(float(p))])

    @classmethod
    def load_csv(cls, path) -> "SpectrumTrace":
        meta, rows = {}, []
        with open(path, newline="") as fh:
            for line in fh:
                if line.startswith("#"):
                    key, _, val = line[1:].strip().partition(",")
                    meta[key.strip()] = val.strip()
                    continue
                break
            reader = csv.reader(fh)
            for row in reader:
                if row:
                    rows.append((float(row[0]), float(row[1])))
        for key in ("rbw_hz", "unit"):
            if key not in meta:
                raise SpectraError(f"{path}: missing header row {key!r}")
        data = np.array(rows, dtype=float).reshape(-1, 2)
        return cls(
            data[:, 0],
            data[:, 1],
            float(meta["rbw_hz"]),
            float(meta.get("input_power_w", 1e-3)),
            int(meta.get("scan_id", 0)),
            meta.get("detuning", "blue"),
            meta["unit"],
        )


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScanParams:
    """Truth and instrument settings for synthetic SA scans (frequencies in Hz, g_om as g/2pi)."""

    g_om_hz: float = 649e3
    f_m_hz: float = 4.488e9
    q_m: float = 600.0
    temperature: float = 295.3
    tone_offset_hz: float = 15e6
    tone_depth: float = 0.01
    rbw_hz: float = 500e3
    span_hz: float = 80e6
    step_hz: float = 100e3
    input_power_w: float = 1e-3
    transduction_per_w2: float = 1e-21
    detuning: str = "blue"
    red_factor: float = 0.8
    bg: tuple[float, ...] = (10.0, -0.3, 0.05)
    noise_rel: float = 0.0
    noise_floor_w: float = 0.0
    gain_jitter: float = 0.0
    detector_p2: bool = True
    window: str = "gaussian"
    dither_hz: float = 0.0
    dither_fraction: float = 0.0

    def mechanical_mode(self) -> MechanicalMode:
        return MechanicalMode.from_q(self.f_m_hz, self.q_m, self.temperature)

    def tone(self) -> CalibrationTone:
        return CalibrationTone(TWO_PI * (self.f_m_hz + self.tone_offset_hz), self.tone_depth)

    def transduction(self) -> float:
        t = self.transduction_per_w2 * (self.input_power_w**2 if self.detector_p2 else 1e-6)
        return t * (self.red_factor if self.detuning == "red" else 1.0)

    def thermal_peak(self) -> float:
        """Peak of the RBW-scaled thermal term per unit transduction."""
        mech = self.mechanical_mode()
        g = TWO_PI * self.g_om_hz
        return 8.0 * self.rbw_hz * g**2 * mech.n_thermal / mech.gamma_m

    def model(self) -> MeasurementModel:
        # background coefficients are given in units of the thermal peak
        bg = tuple(c * self.thermal_peak() for c in self.bg)
        return MeasurementModel(
            self.mechanical_mode(),
            TWO_PI * self.g_om_hz,
            self.tone(),
            self.transduction(),
            bg,
            self.dither_hz,
            self.dither_fraction,
        )

    def frequencies(self) -> np.ndarray:
        n = int(round(self.span_hz / self.step_hz))
        return self.f_m_hz - 0.5 * self.span_hz + self.step_hz * np.arange(n + 1)


def simulate_scan(params: ScanParams, seed=None, scan_id: int = 0) -> SpectrumTrace:
    """One synthetic SA trace.

    The thermal peak and background fluctuate multiplicatively (relative
    std ``noise_rel``); the coherent tone does not. ``noise_floor_w`` adds
    white detector noise. ``gain_jitter`` is the log-normal std of the
    transduction seen by the tone relative to the thermal sweep (slow drift
    between the two parts of a scan). With ``detector_p2`` the transduction
    scales as the input power squared.
    """
    if params.detuning not in DETUNINGS:
        raise SpectraError(f"detuning must be one of {DETUNINGS}")
    f = params.frequencies()
    model = params.model()
    noise_like, tone = _sa_parts(TWO_PI * f, model, params.rbw_hz, params.window)
    rng = np.random.default_rng(seed)
    gain = math.exp(params.gain_jitter * rng.standard_normal()) if params.gain_jitter else 1.0
    power = noise_like * (1.0 + params.noise_rel * rng.standard_normal(f.size)) + gain * tone
    if params.noise_floor_w:
        power = power + params.noise_floor_w * rng.standard_normal(f.size)
    return SpectrumTrace(f, power, params.rbw_hz, params.input_power_w, scan_id, params.detuning, "W")


def simulate_scans(params: ScanParams, n: int, seed=None) -> list[SpectrumTrace]:
    """``n`` independent scans from one seed (spawned child streams)."""
    children = np.random.SeedSequence(seed).spawn(n)
    return [simulate_scan(params, np.random.default_rng(c), scan_id=i) for i, c in enumerate(children)]


# ---------------------------------------------------------------------------
# background
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Background:
    coeffs: np.ndarray
    centre: float
    scale: float

    def __call__(self, omega):
        return poly_background(omega, self.coeffs, self.centre, self.scale)


def _band_mask(omega, bands) -> np.ndarray:
    mask = np.zeros(len(omega), dtype=bool)
    for centre, half in bands:
        mask |= np.abs(omega - centre) <= half
    return mask


def remove_background(trace: SpectrumTrace, order: int = 2, exclude=(), mask=None):
    """Subtract a polynomial fitted outside the excluded bands.

    ``exclude`` is a list of ``(centre_hz, halfwidth_hz)`` pairs; ``mask``
    (True = excluded) may be given instead. Returns the corrected trace (W)
    and the fitted :class:`Background`.
    """
    if not isinstance(order, (int, np.integer)) or not 0 <= order <= MAX_BG_ORDER:
        raise SpectraError(f"background order must be an integer in 0..{MAX_BG_ORDER}, got {order!r}")
    w = trace.omega
    excluded = _band_mask(w, [(TWO_PI * c, TWO_PI * h) for c, h in exclude]) if mask is None else np.asarray(mask, bool)
    keep = ~excluded
    if keep.sum() < 10 * (order + 1):
        raise SpectraError(f"background fit under-determined: {int(keep.sum())} samples for order {order}")
    centre = 0.5 * (w[0] + w[-1])
    scale = 0.5 * (w[-1] - w[0])
    u = (w[keep] - centre) / scale
    p = trace.power_w()
    vander = np.polynomial.polynomial.polyvander(u, order)
    coeffs, *_ = np.linalg.lstsq(vander, p[keep], rcond=None)
    bg = Background(coeffs, centre, scale)
    return replace(trace, power=p - bg(w), unit="W"), bg


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------


@dataclass
class LorentzianFit:
    amplitude: float  # A = 2 T g^2 n gamma
    omega_m: float
    gamma_m: float
    baseline: np.ndarray  # residual polynomial, data units
    covariance: np.ndarray  # over (amplitude, omega_m, gamma_m)
    rbw_hz: float
    residual_std: float
    bg_centre: float = 0.0
    bg_scale: float = 1.0

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    height_error: float = math.inf

    @property
    def height(self) -> float:
        """Fitted peak height of the thermal term (data units)."""
        return 4.0 * self.rbw_hz * self.amplitude / self.gamma_m**2

    @property
    def snr(self) -> float:
        """Peak height over its standard error."""
        return self.height / self.height_error

    def thermal(self, omega):
        return self.rbw_hz * self.amplitude / ((np.asarray(omega) - self.omega_m) ** 2 + (0.5 * self.gamma_m) ** 2)

    def __call__(self, omega):
        return self.thermal(omega) + poly_background(omega, self.baseline, self.bg_centre, self.bg_scale)


def _smooth(y, n):
    if n < 2:
        return y
    kern = np.ones(n) / n
    return np.convolve(np.pad(y, (n // 2, n - 1 - n // 2), mode="edge"), kern, mode="valid")


def _initial_peak(w, y, u, order, passes: int = 3):
    # alternate a polynomial baseline (peak masked) with a half-maximum width estimate
    n = w.size
    excluded = np.zeros(n, dtype=bool)
    for _ in range(passes):
        vander = np.polynomial.polynomial.polyvander(u[~excluded], order)
        coeffs, *_ = np.linalg.lstsq(vander, y[~excluded], rcond=None)
        r = _smooth(y - np.polynomial.polynomial.polyval(u, coeffs), max(3, n // 100))
        k = int(np.argmax(r))
        height = float(r[k])
        if height <= 0:
            raise SpectraError("no peak found")
        lo, hi = k, k
        while lo > 0 and r[lo - 1] > 0.5 * height:
            lo -= 1
        while hi < n - 1 and r[hi + 1] > 0.5 * height:
            hi += 1
        width = max(float(w[hi] - w[lo]), 4.0 * float(w[1] - w[0]))
        new = np.abs(w - w[k]) < 3.0 * width
        if (~new).sum() < 2 * (order + 1) or np.array_equal(new, excluded):
            break
        excluded = new
    return float(w[k]), width, height, coeffs


def fit_lorentzian(
    trace: SpectrumTrace,
    exclude=(),
    baseline_order: int = 0,
    guess: tuple[float, float, float] | None = None,
    min_snr: float = 3.0,
    sigma=None,
) -> LorentzianFit:
    """Least-squares fit of ``RBW * A / ((omega - omega_m)^2 + (gamma_m/2)^2)`` plus a polynomial baseline.

    ``exclude`` bands (Hz) are left out, typically the calibration tone. The
    fit works on data scaled by its largest magnitude, so it is equivariant
    under an overall gain. ``sigma`` (one value per trace sample, any scale)
    gives relative per-sample noise levels for a weighted fit. Covariance is
    ``s^2 (J^T J)^-1`` with the residual variance ``s^2``.
    """
    if not 0 <= baseline_order <= MAX_BG_ORDER:
        raise SpectraError(f"baseline order must be in 0..{MAX_BG_ORDER}")
    w_all = trace.omega
    keep = ~_band_mask(w_all, [(TWO_PI * c, TWO_PI * h) for c, h in exclude])
    w = w_all[keep]
    y_raw = trace.power_w()[keep]
    n_par = 3 + baseline_order + 1
    if w.size <= n_par + 5:
        raise SpectraError("too few samples for a Lorentzian fit")
    ys = float(np.max(np.abs(y_raw)))
    if ys == 0:
        raise SpectraError("trace is identically zero")
    y = y_raw / ys
    if sigma is None:
        wt = np.ones_like(y)
    else:
        sig = np.abs(np.asarray(sigma, dtype=float))
        if sig.shape != w_all.shape or not np.all(sig > 0):
            raise SpectraError("sigma must be positive with one value per sample")
        sig = sig[keep]
        wt = np.median(sig) / sig
    centre = 0.5 * (w_all[0] + w_all[-1])
    scale = 0.5 * (w_all[-1] - w_all[0])
    u = (w - centre) / scale

    if guess is None:
        w0, width0, height0, base_coeffs = _initial_peak(w, y, u, baseline_order)
    else:
        a_g, w0, width0 = guess
        height0 = a_g * trace.rbw_hz * 4.0 / width0**2 / ys
        base_coeffs = np.zeros(baseline_order + 1)

    # parameters: height, centre offset / width0, width / width0, baseline coefficients
    def model(x):
        h, dc, gw = x[0], x[1], x[2]
        wc = w0 + dc * width0
        g = gw * width0
        lor = h / (1.0 + ((w - wc) / (0.5 * g)) ** 2)
        return lor + np.polynomial.polynomial.polyval(u, x[3:])

    vander = np.polynomial.polynomial.polyvander(u, baseline_order)

    def jac(x):
        h, dc, gw = x[0], x[1], x[2]
        z = (w - (w0 + dc * width0)) / (0.5 * gw * width0)
        q = 1.0 / (1.0 + z * z)
        cols = [q, 2.0 * h * z * q * q / (0.5 * gw), 2.0 * h * z * z * q * q / gw]
        return wt[:, None] * np.column_stack(cols + [vander])

    x0 = np.concatenate([[height0, 0.0, 1.0], base_coeffs])
    # the SA cannot resolve a line narrower than its RBW; the span caps the other end
    g_lo = TWO_PI * trace.rbw_hz / width0
    g_hi = max((w_all[-1] - w_all[0]) / width0, 2.0 * g_lo)
    x0[2] = min(max(x0[2], 1.01 * g_lo), 0.99 * g_hi)
    lower = np.full(x0.size, -np.inf)
    upper = np.full(x0.size, np.inf)
    lower[1], upper[1] = (w_all[0] - w0) / width0, (w_all[-1] - w0) / width0
    lower[2], upper[2] = g_lo, g_hi
    sol = optimize.least_squares(
        lambda x: wt * (model(x) - y),
        x0,
        jac=jac,
        bounds=(lower, upper),
        method="trf",
        x_scale="jac",
        xtol=1e-15,
        ftol=1e-15,
        gtol=1e-15,
        max_nfev=20000,
    )
    if not sol.success:
        raise SpectraError(f"Lorentzian fit did not converge: {sol.message}")
    # trf stops short of full precision; Gauss-Newton steps finish an interior optimum
    x = sol.x
    if np.all(sol.active_mask == 0):
        for _ in range(4):
            step = np.linalg.lstsq(jac(x), -wt * (model(x) - y), rcond=None)[0]
            xn = x + step
            if np.any(xn < lower) or np.any(xn > upper):
                break
            x = xn
        sol.x, sol.fun, sol.jac = x, wt * (model(x) - y), jac(x)
    h, dc, gw = sol.x[:3]
    gamma = abs(gw) * width0
    wc = w0 + dc * width0
    resid = sol.fun
    dof = max(w.size - n_par, 1)
    s2 = float(resid @ resid) / dof
    jac = sol.jac
    try:
        cov_x = s2 * np.linalg.inv(jac.T @ jac)
    except np.linalg.LinAlgError:
        raise SpectraError("singular Jacobian in Lorentzian fit") from None
    # map (h, dc, gw) -> (A, omega_m, gamma); A = h ys gamma^2 / (4 RBW)
    amp = h * ys * gamma**2 / (4.0 * trace.rbw_hz)
    jmap = np.array(
        [
            [amp / h, 0.0, 2.0 * amp / gw],
            [0.0, width0, 0.0],
            [0.0, 0.0, width0 * np.sign(gw)],
        ]
    )
    cov = jmap @ cov_x[:3, :3] @ jmap.T
    fit = LorentzianFit(
        float(amp),
        float(wc),
        float(gamma),
        sol.x[3:] * ys,
        cov,
        trace.rbw_hz,
        math.sqrt(s2) * ys,
        centre,
        scale,
        math.sqrt(max(cov_x[0, 0], 0.0)) * ys,
    )
    if not amp > 0 or not fit.snr > min_snr:
        raise SpectraError(f"thermal peak SNR {fit.snr:.2f} is below {min_snr}")
    return fit


@dataclass
class ToneFit:
    peak: float  # P_f_phi = T A^2 omega^2 / 2
    omega: float
    peak_error: float
    baseline: tuple[float, float]


def fit_tone(
    trace: SpectrumTrace,
    tone_freq_hz: float,
    window_kind: str = "gaussian",
    lorentzian: LorentzianFit | None = None,
    half_band_rbw: float = 4.0,
    min_snr: float = 5.0,
) -> ToneFit:
    """Fit the SA window image of the calibration tone; returns its peak power.

    Works in a band of ``half_band_rbw`` RBWs around the expected frequency with
    a local linear baseline. A fitted Lorentzian, if given, is subtracted first
    so a tone on the thermal shoulder is separated from it.
    """
    w_t = TWO_PI * tone_freq_hz
    rbw_w = TWO_PI * trace.rbw_hz
    sel = np.abs(trace.omega - w_t) <= half_band_rbw * rbw_w
    if sel.sum() < 6:
        raise ToneNotFoundError(f"fewer than 6 samples within {half_band_rbw} RBW of {tone_freq_hz:.6g} Hz")
    w = trace.omega[sel]
    y_raw = trace.power_w()[sel]
    if lorentzian is not None:
        y_raw = y_raw - lorentzian(w)
    ys = float(np.max(np.abs(y_raw))) or 1.0
    y = y_raw / ys
    d = (w - w_t) / rbw_w

    def model(x):
        return x[0] * window(w, trace.rbw_hz, w_t + x[1] * rbw_w, window_kind) + x[2] + x[3] * d

    def jac(x):
        win = window(w, trace.rbw_hz, w_t + x[1] * rbw_w, window_kind)
        dd = d - x[1]
        if window_kind == "gaussian":
            dwin = win * 8.0 * math.log(2.0) * dd
        else:
            dwin = win * 16.0 * math.log(2.0) * (2.0 * dd) ** 7
        return np.column_stack([win, x[0] * dwin, np.ones_like(d), d])

    edge = np.abs(d) > 0.6 * half_band_rbw
    base0 = float(np.median(y[edge])) if edge.any() else 0.0
    x0 = np.array([float(y[np.argmin(np.abs(d))]) - base0, 0.0, base0, 0.0])
    sol = optimize.least_squares(lambda x: model(x) - y, x0, jac=jac, method="lm", xtol=1e-15, ftol=1e-15, gtol=1e-15, max_nfev=20000)
    for _ in range(3):
        sol.x = sol.x + np.linalg.lstsq(jac(sol.x), y - model(sol.x), rcond=None)[0]
    sol.fun, sol.jac = model(sol.x) - y, jac(sol.x)
    dof = max(w.size - 4, 1)
    s2 = float(sol.fun @ sol.fun) / dof
    try:
        cov = s2 * np.linalg.inv(sol.jac.T @ sol.jac)
        err = math.sqrt(max(cov[0, 0], 0.0)) * ys
    except np.linalg.LinAlgError:
        err = math.inf
    peak = float(sol.x[0]) * ys
    noise = max(math.sqrt(s2) * ys, err)
    if not sol.success or peak <= 0 or abs(sol.x[1]) > 1.0 or peak < min_snr * noise:
        raise ToneNotFoundError(f"no calibration tone above the noise near {tone_freq_hz:.6g} Hz")
    return ToneFit(peak, float(w_t + sol.x[1] * rbw_w), err, (float(sol.x[2] * ys), float(sol.x[3] * ys)))


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


@dataclass
class ScanFit:
    lorentzian: LorentzianFit
    tone: ToneFit
    scan_id: int = 0
    detuning: str = "blue"

    @property
    def factor(self) -> float:
        """``sqrt(omega_m A / (4 gamma_m P_tone))`` for this scan."""
        lz = self.lorentzian
        return math.sqrt(lz.omega_m * lz.amplitude / (4.0 * lz.gamma_m * self.tone.peak))

    @property
    def factor_rel_error(self) -> float:
        lz = self.lorentzian
        # d ln F = (d ln w_m + d ln A - d ln gamma - d ln P) / 2
        grad = np.array([1.0 / lz.amplitude, 1.0 / lz.omega_m, -1.0 / lz.gamma_m])
        var = float(grad @ lz.covariance @ grad) + (self.tone.peak_error / self.tone.peak) ** 2
        return 0.5 * math.sqrt(max(var, 0.0))


@dataclass
class ExtractionResult:
    g_om: float  # rad/s
    stat_error: float
    sys_error: float
    factor: float
    chi2_red: float
    amplitude: np.ndarray
    omega_m: np.ndarray
    gamma_m: np.ndarray
    tone_peak: np.ndarray
    g_per_scan: np.ndarray
    rel_error_per_scan: np.ndarray
    scan_ids: list = field(default_factory=list)
    detunings: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def total_error(self) -> float:
        return math.hypot(self.stat_error, self.sys_error)

    def to_dict(self) -> dict:
        k = 1.0 / TWO_PI
        return {
            "g_om_hz": self.g_om * k,
            "stat_error_hz": self.stat_error * k,
            "sys_error_hz": self.sys_error * k,
            "total_error_hz": self.total_error * k,
            "chi2_red": self.chi2_red,
            "n_scans": int(len(self.g_per_scan)),
            "skipped_scans": [int(i) for i in self.skipped],
            "scans": [
                {
                    "scan_id": int(sid),
                    "detuning": det,
                    "g_om_hz": float(g * k),
                    "rel_error": float(r),
                    "amplitude": float(a),
                    "f_m_hz": float(wm * k),
                    "gamma_m_hz": float(gm * k),
                    "tone_peak_w": float(p),
                }
                for sid, det, g, r, a, wm, gm, p in zip(
                    self.scan_ids,
                    self.detunings,
                    self.g_per_scan,
                    self.rel_error_per_scan,
                    self.amplitude,
                    self.omega_m,
                    self.gamma_m,
                    self.tone_peak,
                )
            ],
        }


def gom_prefactor(tone: CalibrationTone, temperature: float) -> float:
    return tone.omega_phi * tone.depth / math.sqrt(k_B * temperature / hbar)


def extract_gom(
    fits: list[ScanFit],
    tone: CalibrationTone,
    temperature: float,
    temperature_error: float = 3.0,
    depth_error: float = 0.0,
) -> ExtractionResult:
    """Combine per-scan factors into g_om with statistical and systematic errors.

    The ensemble value is an inverse-variance weighted mean. Each scan's
    weight uses its relative fit error applied to the ensemble median, so
    scans that fluctuate high are not down-weighted for being high. The
    statistical error is inflated by ``sqrt(chi2_red)`` when the scatter
    exceeds the fit errors. Temperature and tone depth enter as systematics
    (``dg/g = dT/2T`` and ``dA/A``) added in quadrature.
    """
    if not fits:
        raise SpectraError("no scans to combine")
    for f in fits:
        lz = f.lorentzian
        if not (lz.amplitude > 0 and lz.gamma_m > 0 and lz.omega_m > 0 and f.tone.peak > 0):
            raise SpectraError(f"scan {f.scan_id}: fitted parameters must be positive")
    factors = np.array([f.factor for f in fits])
    rel = np.array([f.factor_rel_error for f in fits])
    pref = gom_prefactor(tone, temperature)
    if len(fits) == 1:
        mean, err, chi2 = factors[0], rel[0] * factors[0], 1.0
    else:
        sigma = rel * np.median(factors)
        wts = 1.0 / sigma**2
        mean = float(np.sum(wts * factors) / np.sum(wts))
        err = 1.0 / math.sqrt(float(np.sum(wts)))
        chi2 = float(np.sum(wts * (factors - mean) ** 2) / (len(fits) - 1))
        if chi2 > 1.0:
            err *= math.sqrt(chi2)
    g = pref * mean
    sys_rel = math.hypot(0.5 * temperature_error / temperature, depth_error / tone.depth)
    return ExtractionResult(
        g_om=g,
        stat_error=pref * err,
        sys_error=abs(g) * sys_rel,
        factor=mean,
        chi2_red=chi2,
        amplitude=np.array([f.lorentzian.amplitude for f in fits]),
        omega_m=np.array([f.lorentzian.omega_m for f in fits]),
        gamma_m=np.array([f.lorentzian.gamma_m for f in fits]),
        tone_peak=np.array([f.tone.peak for f in fits]),
        g_per_scan=pref * factors,
        rel_error_per_scan=rel,
        scan_ids=[f.scan_id for f in fits],
        detunings=[f.detuning for f in fits],
    )


@dataclass(frozen=True)
class PipelineSettings:
    bg_order: int = 2
    peak_halfwidths: float = 3.0  # excluded around the peak for the background fit, in linewidth units
    tone_half_band_rbw: float = 4.0
    window: str = "gaussian"
    weighted: bool = True  # noise proportional to the local power level


def fit_scan(trace: SpectrumTrace, tone_freq_hz: float, settings: PipelineSettings = PipelineSettings()) -> ScanFit:
    """Background removal, Lorentzian fit (tone band excluded) and tone fit for one trace."""
    trace = trace.in_watts()
    tone_band = [(tone_freq_hz, settings.tone_half_band_rbw * trace.rbw_hz)]
    # a first pass locates the peak; the background is then fitted away from it
    first = fit_lorentzian(trace, exclude=tone_band, baseline_order=settings.bg_order, min_snr=0.0)
    peak_band = (first.omega_m / TWO_PI, settings.peak_halfwidths * first.gamma_m / TWO_PI)
    corrected, _ = remove_background(trace, settings.bg_order, exclude=tone_band + [peak_band])
    sigma = None
    if settings.weighted:
        level = np.abs(first(trace.omega))
        sigma = np.maximum(level, 1e-3 * float(np.max(level)))
    # the residual baseline absorbs the Lorentzian tails the background fit saw
    lz = fit_lorentzian(
        corrected,
        exclude=tone_band,
        baseline_order=settings.bg_order,
        guess=(first.amplitude, first.omega_m, first.gamma_m),
        sigma=sigma,
    )
    tone = fit_tone(corrected, tone_freq_hz, settings.window, lz, settings.tone_half_band_rbw)
    return ScanFit(lz, tone, trace.scan_id, trace.detuning)


def analyze_scans(
    traces: list[SpectrumTrace],
    tone: CalibrationTone,
    temperature: float,
    settings: PipelineSettings = PipelineSettings(),
    temperature_error: float = 3.0,
    depth_error: float = 0.0,
    strict: bool = False,
) -> ExtractionResult:
    """Full pipeline over an ensemble of traces.

    Scans whose fits fail (no resolvable peak or tone) are skipped with a
    warning and listed in ``skipped``; with ``strict`` the first failure raises.
    """
    fits, skipped = [], []
    for t in traces:
        try:
            fits.append(fit_scan(t, tone.omega_phi / TWO_PI, settings))
        except SpectraError as exc:
            if strict:
                raise
            warnings.warn(f"scan {t.scan_id} skipped: {exc}", RuntimeWarning, stacklevel=2)
            skipped.append(t.scan_id)
    if not fits:
        raise SpectraError("every scan failed to fit")
    res = extract_gom(fits, tone, temperature, temperature_error, depth_error)
    res.skipped = skipped
    return res


def scan_params_dict(params: ScanParams) -> dict:
    d = asdict(params)
    d["bg"] = list(params.bg)
    return d
