"""Dither-lock simulation: drifting Lorentzian plant, lock-in demodulation and PID control.

The laser is set in wavelength; the resonance is Lorentzian in angular
frequency. Detunings reported by the simulation are angular,
``delta = omega_laser - omega_o``, and the two inflection points sit at
``delta = +-gamma_o / (2 sqrt 3)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import signal as sps
from scipy.constants import c as C_LIGHT

from .spectra import OpticalResonance

TWO_PI = 2.0 * math.pi
INFLECTION = 1.0 / (2.0 * math.sqrt(3.0))  # inflection offset in units of gamma_o
MODES = ("dither", "side")


class LockError(ValueError):
    pass


def omega_of_lambda(lam_nm):
    return TWO_PI * C_LIGHT / (np.asarray(lam_nm, dtype=float) * 1e-9)


def lambda_of_omega(omega):
    return TWO_PI * C_LIGHT / np.asarray(omega, dtype=float) * 1e9


# ---------------------------------------------------------------------------
# plant
# ---------------------------------------------------------------------------


def _ou_path(n: int, dt: float, std: float, corr_time: float, rng) -> np.ndarray:
    """Stationary Ornstein-Uhlenbeck samples (bounded random walk), zero at t = 0."""
    if std == 0 or n == 0:
        return np.zeros(n)
    a = math.exp(-dt / corr_time)
    kick = std * math.sqrt(1.0 - a * a) * rng.standard_normal(n)
    kick[0] = 0.0
    return sps.lfilter([1.0], [1.0, -a], kick)


@dataclass(frozen=True)
class PlantState:
    """Resonance plus slow drifts of its centre wavelength and of the global efficiency ``eta``.

    Centre: ``lambda_o(t) = lambda_o + rate t + OU``. Efficiency:
    ``eta(t) = eta (1 + rate t) exp(OU)`` times ``step_factor`` after ``step_time``.
    """

    resonance: OpticalResonance
    center_rate_nm_s: float = 0.0
    center_walk_nm: float = 0.0
    center_walk_time_s: float = 1.0
    eta: float = 1.0
    eta_rate_per_s: float = 0.0
    eta_walk: float = 0.0
    eta_walk_time_s: float = 1.0
    eta_step_time_s: float = math.inf
    eta_step_factor: float = 1.0

    def __post_init__(self):
        vals = (self.center_rate_nm_s, self.center_walk_nm, self.eta_rate_per_s, self.eta_walk)
        if not all(math.isfinite(v) for v in vals):
            raise LockError("drift rates must be finite")
        if not (self.eta > 0 and self.eta_step_factor > 0):
            raise LockError("efficiency must stay positive")
        if not (self.center_walk_time_s > 0 and self.eta_walk_time_s > 0):
            raise LockError("random-walk correlation times must be > 0")

    @classmethod
    def from_q(cls, lambda_nm: float = 1550.0, q_loaded: float = 4300.0, q_intrinsic: float = 8600.0, **drift) -> "PlantState":
        return cls(OpticalResonance.from_q(C_LIGHT / (lambda_nm * 1e-9), q_loaded, q_intrinsic), **drift)

    @property
    def lambda_o(self) -> float:
        return float(lambda_of_omega(self.resonance.omega_o))

    @property
    def gamma_o(self) -> float:
        return self.resonance.gamma_o

    @property
    def gamma_lambda_nm(self) -> float:
        """Linewidth expressed in wavelength at the nominal centre."""
        return self.lambda_o * self.gamma_o / self.resonance.omega_o

    def peak_transmission(self) -> float:
        r = self.resonance
        return (2.0 * r.gamma_owg / r.gamma_o) ** 2

    def center(self, t, walk=None):
        lam = self.lambda_o + self.center_rate_nm_s * np.asarray(t, dtype=float)
        return lam if walk is None else lam + walk

    def efficiency(self, t, walk=None):
        t = np.asarray(t, dtype=float)
        eta = self.eta * (1.0 + self.eta_rate_per_s * t) * np.where(t >= self.eta_step_time_s, self.eta_step_factor, 1.0)
        if walk is not None:
            eta = eta * np.exp(walk)
        if np.any(eta <= 0):
            raise LockError("efficiency drift drove eta to zero")
        return eta

    def drift_path(self, t, rng=None):
        """Centre wavelength and efficiency at sample times ``t`` (uniform grid) with seeded random walks."""
        t = np.asarray(t, dtype=float)
        rng = np.random.default_rng(rng)
        dt = float(t[1] - t[0]) if t.size > 1 else 1.0
        cw = _ou_path(t.size, dt, self.center_walk_nm, self.center_walk_time_s, rng)
        ew = _ou_path(t.size, dt, self.eta_walk, self.eta_walk_time_s, rng)
        return self.center(t, cw), self.efficiency(t, ew)


def plant_transmission(state: PlantState, lambda_nm, t, center_nm=None, eta=None):
    """``eta(t) |S21|^2`` at laser wavelength ``lambda_nm`` for the resonance centred at ``lambda_o(t)``.

    ``center_nm`` and ``eta`` override the deterministic drift (for realized random walks).
    """
    center_nm = state.center(t) if center_nm is None else center_nm
    eta = state.efficiency(t) if eta is None else eta
    r = state.resonance
    d = omega_of_lambda(lambda_nm) - omega_of_lambda(center_nm)
    return eta * r.gamma_owg**2 / (d * d + (0.5 * r.gamma_o) ** 2)


# ---------------------------------------------------------------------------
# lock-in and controller
# ---------------------------------------------------------------------------


def harmonic_gain(amplitude: float, n: int) -> float:
    """Leading-order demod output per unit n-th derivative: ``a^n / (2^(n-1) n!)``."""
    return amplitude**n / (2.0 ** (n - 1) * math.factorial(n))


def lockin_demod(stream, fs: float, f_dither: float, n: int, time_constant: float, t0: float = 0.0, sync: bool = True):
    """Demodulate ``stream`` at the n-th harmonic of a cosine dither.

    The input is mixed with ``2 cos(2 pi n f t)``, averaged over one dither
    period (``sync``; rejects every dither harmonic exactly when the period is
    an integer number of samples) and passed through a single-pole low-pass.
    For a small dither ``a cos(2 pi f t)`` about ``x`` the settled output is
    ``a^n / (2^(n-1) n!) T^(n)(x)``.
    """
    if not (isinstance(n, (int, np.integer)) and n >= 1):
        raise LockError(f"harmonic must be an integer >= 1, got {n!r}")
    if not (time_constant > 0 and f_dither > 0):
        raise LockError("time constant and dither frequency must be > 0")
    if fs < 20 * n * f_dither:
        raise LockError(f"stream sampled at {fs:g} Hz; need >= {20 * n * f_dither:g} Hz for harmonic {n}")
    x = np.asarray(stream, dtype=float)
    t = t0 + np.arange(x.size) / fs
    mixed = 2.0 * x * np.cos(TWO_PI * n * f_dither * t)
    if sync:
        per = int(round(fs / f_dither))
        mixed = sps.lfilter(np.full(per, 1.0 / per), [1.0], mixed)
    alpha = -math.expm1(-1.0 / (fs * time_constant))
    return sps.lfilter([alpha], [1.0, alpha - 1.0], mixed)


@dataclass
class PID:
    """Positional PID with a clamped integrator (anti-windup)."""

    kp: float
    ki: float
    kd: float
    dt: float
    i_limit: float = math.inf
    integral: float = 0.0
    prev_error: float | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise LockError("PID step dt must be > 0")

    def reset(self) -> None:
        self.integral, self.prev_error = 0.0, None

    def step(self, error: float) -> float:
        self.integral = min(max(self.integral + error * self.dt, -self.i_limit), self.i_limit)
        deriv = 0.0 if self.prev_error is None else (error - self.prev_error) / self.dt
        self.prev_error = error
        return self.kp * error + self.ki * self.integral + self.kd * deriv


def pid_step(pid: PID, error: float) -> float:
    return pid.step(error)


# ---------------------------------------------------------------------------
# closed loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LockConfig:
    """Loop settings. Dither amplitude and wavelengths in nm.

    The error fed to the PID is the demod output divided by the period-mean
    transmission and by ``harmonic_gain``, so it estimates ``T^(n) / T`` and
    the loop gain does not depend on ``eta``. In ``side`` mode the error is
    ``T / set point - 1``. Gains act on the wavelength in nm.
    """

    f_dither_hz: float = 100.0
    dither_nm: float = 0.01
    harmonic: int = 2
    time_constant_s: float = 0.05
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    setpoint: float = 0.0
    samples_per_period: int = 64
    mode: str = "dither"
    side: int = 0  # +1 / -1 picks the inflection in omega; 0 follows the starting offset
    side_setpoint: float = 0.75  # side mode: transmission set point as a fraction of the peak
    i_limit: float = math.inf
    loss_width: float = 1.0  # lock counts as lost beyond this many gamma_o from the target

    def __post_init__(self):
        errs = self.validate()
        if errs:
            raise LockError("; ".join(errs))

    def validate(self) -> list[str]:
        errs = []
        if not self.f_dither_hz > 0:
            errs.append("f_dither_hz must be > 0")
        if not self.time_constant_s > 0:
            errs.append("time_constant_s must be > 0")
        if self.mode not in MODES:
            errs.append(f"mode must be one of {MODES}")
        if self.mode == "dither":
            if self.harmonic not in (1, 2):
                errs.append("harmonic must be 1 (peak lock) or 2 (inflection lock)")
            if not self.dither_nm > 0:
                errs.append("dither_nm must be > 0")
        if self.samples_per_period < 20 * max(self.harmonic, 1):
            errs.append("samples_per_period must be >= 20 x harmonic")
        if self.side not in (-1, 0, 1):
            errs.append("side must be -1, 0 or +1")
        if not 0 < self.side_setpoint < 1:
            errs.append("side_setpoint must be in (0, 1)")
        if self.f_dither_hz > 0 and self.time_constant_s > 0 and self.time_constant_s < 2.0 / self.f_dither_hz:
            errs.append("time_constant_s must span several dither periods")
        return errs

    @property
    def period(self) -> float:
        return 1.0 / self.f_dither_hz

    @property
    def dt(self) -> float:
        return self.period / self.samples_per_period

    @classmethod
    def tuned(cls, plant: PlantState, harmonic: int = 2, mode: str = "dither", **kw) -> "LockConfig":
        """Gains scaled to the plant's linewidth for a well-damped acquisition.

        Integral gain puts the per-period loop gain at 0.08 and proportional
        gain at 0.01, against the single-pole filter's per-period weight of
        about 0.18. A step response on the static plant then settles to 1% in
        about 30 periods with under 2% overshoot.
        """
        base = cls(harmonic=harmonic, mode=mode, **kw)
        slope = _lock_slope(plant, base)
        ki = 0.08 / (base.period * slope)
        return replace(base, ki=ki, kp=0.01 / slope)


def _lock_slope(plant: PlantState, cfg: LockConfig) -> float:
    """|d error / d lambda| at the lock point, per nm, for the normalized error."""
    x2 = 2.0 / plant.gamma_lambda_nm
    if cfg.mode == "side":
        x = math.sqrt(1.0 / cfg.side_setpoint - 1.0)
        return 2.0 * x / (1.0 + x * x) * x2
    if cfg.harmonic == 1:
        return 2.0 * x2**2  # f''(0)/f(0) with f = 1/(1+x^2)
    x = 1.0 / math.sqrt(3.0)
    return 24.0 * x * (1 - x * x) / (1 + x * x) ** 3 * x2**3


def target_offset(cfg: LockConfig, side: int) -> float:
    """Lock point detuning in units of gamma_o."""
    if cfg.mode == "side":
        return side * 0.5 * math.sqrt(1.0 / cfg.side_setpoint - 1.0)
    return 0.0 if cfg.harmonic == 1 else side * INFLECTION


@dataclass
class LockTrajectory:
    t: np.ndarray  # end of each dither period, s
    lambda_nm: np.ndarray  # control wavelength (dither centre)
    demod: np.ndarray  # normalized error
    transmission: np.ndarray  # period-mean transmission
    offset: np.ndarray  # (omega_laser - omega_o) / gamma_o
    locked: np.ndarray
    target: float
    lost_at: float | None = None
    meta: dict = field(default_factory=dict)

    def converged(self, tol: float = 0.01, tail: float = 0.2) -> bool:
        """|offset - target| < ``tol`` gamma_o over the last ``tail`` fraction of the run."""
        k = int(math.floor((1.0 - tail) * len(self.t)))
        return bool(self.lost_at is None and np.all(np.abs(self.offset[k:] - self.target) < tol))

    def tail_offset(self, tail: float = 0.2) -> float:
        k = int(math.floor((1.0 - tail) * len(self.t)))
        return float(np.mean(self.offset[k:]))

    def save_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "lambda_nm", "demod", "transmission", "locked"])
            for row in zip(self.t, self.lambda_nm, self.demod, self.transmission, self.locked):
                w.writerow([repr(float(row[0])), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4])])


def run_lock(plant: PlantState, cfg: LockConfig, duration: float, seed=None, start_offset: float = 0.3) -> LockTrajectory:
    """Closed-loop simulation.

    The laser starts ``start_offset`` linewidths (angular, from the centre at
    t = 0) away from resonance. Each dither period the lock-in output is read,
    normalized and fed to the PID, which sets the next period's wavelength.
    Lock loss (offset further than ``loss_width`` from the target) stops the
    loop and is reported through ``lost_at``.
    """
    if not duration > 0:
        raise LockError("duration must be > 0")
    n_per = int(round(duration * cfg.f_dither_hz))
    spp = cfg.samples_per_period
    fs = spp * cfg.f_dither_hz
    # mid-interval sample times keep each period symmetric, so a linear drift leaves no in-phase harmonic
    t_all = (np.arange(n_per * spp) + 0.5) / fs
    center, eta = plant.drift_path(t_all, seed)
    gamma, w_o = plant.gamma_o, plant.resonance.omega_o

    side = cfg.side or (1 if start_offset >= 0 else -1)
    target = target_offset(cfg, side)
    # loop polarity: the lock point must be a stable zero of the normalized error
    lam_side = -side  # +omega detuning is the short-wavelength side
    if cfg.mode == "side":
        polarity = float(lam_side)
        set_value = cfg.side_setpoint * plant.peak_transmission() * plant.efficiency(0.0)
    else:
        polarity = 1.0 if cfg.harmonic == 1 else -float(lam_side)
    lam0 = float(lambda_of_omega(w_o + start_offset * gamma))
    pid = PID(cfg.kp, cfg.ki, cfg.kd, cfg.period, cfg.i_limit)

    phase = np.cos(TWO_PI * cfg.f_dither_hz * t_all[:spp])
    ref = 2.0 * np.cos(TWO_PI * cfg.harmonic * cfg.f_dither_hz * t_all[:spp])
    alpha = -math.expm1(-cfg.period / cfg.time_constant_s)
    gain = harmonic_gain(cfg.dither_nm, cfg.harmonic)

    out_t, out_lam, out_err, out_tr, out_off, out_lock = [], [], [], [], [], []
    lam, filt, lost_at = lam0, 0.0, None
    for k in range(n_per):
        sl = slice(k * spp, (k + 1) * spp)
        dither = cfg.dither_nm * phase if cfg.mode == "dither" else 0.0
        tr = plant_transmission(plant, lam + dither, t_all[sl], center[sl], eta[sl])
        mean_tr = float(np.mean(tr))
        if cfg.mode == "dither":
            raw = float(np.mean(tr * ref)) / (mean_tr * gain)
        else:
            raw = mean_tr / set_value - 1.0
        filt += alpha * (raw - filt)
        offset = float((omega_of_lambda(lam) - omega_of_lambda(center[sl.stop - 1])) / gamma)
        ok = abs(offset - target) <= cfg.loss_width
        out_t.append((k + 1) * cfg.period)
        out_lam.append(lam)
        out_err.append(filt)
        out_tr.append(mean_tr)
        out_off.append(offset)
        out_lock.append(ok)
        if not ok:
            lost_at = out_t[-1]
            break
        lam = lam0 + polarity * pid.step(filt - cfg.setpoint)
    return LockTrajectory(
        np.array(out_t),
        np.array(out_lam),
        np.array(out_err),
        np.array(out_tr),
        np.array(out_off),
        np.array(out_lock, dtype=bool),
        target,
        lost_at,
        {"config": asdict(cfg), "seed": seed, "start_offset": start_offset},
    )


def loop_bandwidth_hz(plant: PlantState, cfg: LockConfig) -> float:
    """Small-signal closed-loop bandwidth from the integral gain and filter pole."""
    slope = _lock_slope(plant, cfg)
    return cfg.ki * slope / TWO_PI
