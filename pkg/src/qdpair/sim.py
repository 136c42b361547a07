"""Monte-Carlo time-tag generator for a pulsed XX-X cascade source.

Per laser pulse k at t_k = k / rep_rate:

* the biexciton is prepared with probability sin^2((pi/2) sqrt(P / P_pi));
* XX is emitted after Exp(T1_XX), X after a further Exp(T1_X) = tau;
* each arm is projected on its analyzer basis; the joint pass/block outcome
  is drawn from <b a|rho(tau)|b a> over {b, b_perp} x {a, a_perp};
* transmitted photons survive detection with the (possibly drifting) arm
  efficiency and get Gaussian timing jitter;
* uniform Poissonian dark counts are added on both channels.

Channel 0 carries XX photons, channel 1 X photons.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy import integrate, optimize, special

from .quantum import (
    BASIS_LABELS,
    FWHM_TO_SIGMA,
    CascadeModelParams,
    _rotation,
    basis_state,
)
from .timetag import DARK_FLAG, RECORD_DTYPE, TimeTagStream

CH_XX = 0
CH_X = 1

_MAX_TS = 2**63 - 1


@dataclass(frozen=True)
class DriftProfile:
    """Slow multiplicative modulation of both arm efficiencies.

    ``sinusoidal``: 1 + amplitude * sin(2 pi t / period_or_slope)
    ``linear``:     1 + period_or_slope * t   (slope in 1/s; amplitude unused)
    """

    kind: str = "none"
    amplitude: float = 0.0
    period_or_slope: float = 0.0

    def __post_init__(self):
        if self.kind not in ("none", "sinusoidal", "linear"):
            raise ValueError(f"unknown drift kind {self.kind!r}")
        if not 0.0 <= self.amplitude < 1.0:
            raise ValueError("drift amplitude must lie in [0, 1)")
        if self.kind == "sinusoidal" and self.period_or_slope <= 0:
            raise ValueError("sinusoidal drift needs a positive period")

    def factor(self, t_seconds):
        t = np.asarray(t_seconds, dtype=float)
        if self.kind == "sinusoidal":
            return 1.0 + self.amplitude * np.sin(2.0 * np.pi * t / self.period_or_slope)
        if self.kind == "linear":
            return np.clip(1.0 + self.period_or_slope * t, 0.0, None)
        return np.ones_like(t)


@dataclass(frozen=True)
class SimConfig:
    """Source, analyzer and detector settings.

    Units: rep_rate GHz, powers uW, jitters ps FWHM, dark rates Hz,
    start_time s (lab time of the first pulse, used for drift only).
    The per-channel timing spread is the quadrature sum of detector and
    electronics jitter; the defaults combine to 50 ps FWHM on the two-photon
    delay.
    """

    rep_rate: float = 1.0
    pulse_count: int = 1_000_000
    excitation_power: float = 9.0
    pi_pulse_power: float = 9.0
    cascade: CascadeModelParams = field(default_factory=CascadeModelParams)
    efficiency_x: float = 0.5
    efficiency_xx: float = 0.5
    detector_jitter_fwhm: float = 20.0
    electronics_jitter_fwhm: float = math.sqrt(50.0**2 / 2 - 20.0**2)
    dark_rate_x: float = 0.0
    dark_rate_xx: float = 0.0
    basis_xx: str = "H"
    basis_x: str = "H"
    seed: int = 0
    drift: DriftProfile | None = None
    start_time: float = 0.0

    def __post_init__(self):
        if not self.rep_rate > 0:
            raise ValueError("rep_rate must be positive")
        if self.pulse_count < 0:
            raise ValueError("pulse_count must be non-negative")
        if self.excitation_power < 0 or not self.pi_pulse_power > 0:
            raise ValueError("powers must be non-negative and P_pi positive")
        for name in ("efficiency_x", "efficiency_xx"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.detector_jitter_fwhm < 0 or self.electronics_jitter_fwhm < 0:
            raise ValueError("jitter must be non-negative")
        if self.dark_rate_x < 0 or self.dark_rate_xx < 0:
            raise ValueError("dark rates must be non-negative")
        basis_state(self.basis_xx)
        basis_state(self.basis_x)
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def period_ps(self) -> float:
        return 1e3 / self.rep_rate

    @property
    def duration(self) -> float:
        """Run length in seconds."""
        return self.pulse_count / (self.rep_rate * 1e9)

    @property
    def excitation_probability(self) -> float:
        return excitation_probability(self.excitation_power, self.pi_pulse_power)

    @property
    def channel_jitter_fwhm(self) -> float:
        return math.hypot(self.detector_jitter_fwhm, self.electronics_jitter_fwhm)

    @property
    def two_photon_jitter_fwhm(self) -> float:
        return math.sqrt(2.0) * self.channel_jitter_fwhm

    @property
    def basis_label(self) -> str:
        return f"{self.basis_xx}{self.basis_x}"


def excitation_probability(power: float, pi_power: float) -> float:
    """Biexciton preparation probability sin^2((pi/2) sqrt(P/P_pi)), clamped to [0, 1]."""
    p = math.sin(0.5 * math.pi * math.sqrt(max(power, 0.0) / pi_power)) ** 2
    return min(1.0, max(0.0, p))


def _lab_kets(label: str, rotation_deg: float) -> tuple[np.ndarray, np.ndarray]:
    """Analyzer ket and its orthogonal complement expressed in the dot eigenbasis."""
    b = basis_state(label)
    u = _rotation(rotation_deg)
    return u.conj().T @ b.ket, u.conj().T @ b.orthogonal.ket


def joint_outcome_probabilities(tau, config: SimConfig) -> np.ndarray:
    """Probabilities of (pass/block XX) x (pass/block X) for emission delays ``tau``.

    Columns are ordered (pass,pass), (pass,block), (block,pass), (block,block).
    """
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    phase = np.exp(1j * config.cascade.omega * tau)
    rot = config.cascade.basis_rotation
    bxx, bxx_perp = _lab_kets(config.basis_xx, rot)
    bx, bx_perp = _lab_kets(config.basis_x, rot)
    out = np.empty((len(tau), 4))
    k = 0
    for u in (bxx, bxx_perp):
        for v in (bx, bx_perp):
            amp = (np.conj(u[0]) * np.conj(v[0]) + phase * np.conj(u[1]) * np.conj(v[1])) / math.sqrt(2.0)
            out[:, k] = np.abs(amp) ** 2
            k += 1
    return out


def _check_range(config: SimConfig) -> None:
    span = config.pulse_count * config.period_ps
    # generous margin for emission delays and jitter past the last pulse
    if span + 1e9 > _MAX_TS or not math.isfinite(span):
        raise OverflowError(
            f"{config.pulse_count} pulses at {config.rep_rate} GHz overflow the 64-bit ps timestamp range"
        )


def simulate_pair_stream(config: SimConfig) -> TimeTagStream:
    """Simulate one analyzer setting; deterministic for a given config and seed."""
    _check_range(config)
    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed)))
    n = int(config.pulse_count)
    cp = config.cascade
    period = config.period_ps

    excited = np.flatnonzero(rng.random(n) < config.excitation_probability)
    m = len(excited)
    t_pulse = excited.astype(np.float64) * period
    d_xx = rng.exponential(cp.t1_xx, m)
    tau = rng.exponential(cp.t1_x, m)
    probs = joint_outcome_probabilities(tau, config)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(m)[:, None]
    outcome = np.minimum((u >= cdf).sum(axis=1), 3)
    pass_xx = outcome < 2
    pass_x = (outcome % 2) == 0

    if config.drift is not None and config.drift.kind != "none":
        f = config.drift.factor(config.start_time + t_pulse * 1e-12)
    else:
        f = np.ones(m)
    eta_xx = np.clip(config.efficiency_xx * f, 0.0, 1.0)
    eta_x = np.clip(config.efficiency_x * f, 0.0, 1.0)
    det_xx = pass_xx & (rng.random(m) < eta_xx)
    det_x = pass_x & (rng.random(m) < eta_x)

    sig = config.channel_jitter_fwhm * FWHM_TO_SIGMA
    t_xx = t_pulse + d_xx + rng.normal(0.0, 1.0, m) * sig
    t_x = t_pulse + d_xx + tau + rng.normal(0.0, 1.0, m) * sig
    sig_ts = [np.rint(t_xx[det_xx]), np.rint(t_x[det_x])]

    span_ps = n * period
    darks = []
    for rate in (config.dark_rate_xx, config.dark_rate_x):
        k = rng.poisson(rate * config.duration) if rate > 0 else 0
        darks.append(np.floor(rng.random(k) * span_ps))

    ts = np.concatenate([sig_ts[0], sig_ts[1], darks[0], darks[1]])
    ch = np.concatenate([
        np.full(len(sig_ts[0]), CH_XX), np.full(len(sig_ts[1]), CH_X),
        np.full(len(darks[0]), CH_XX), np.full(len(darks[1]), CH_X),
    ]).astype(np.uint16)
    fl = np.concatenate([
        np.zeros(len(sig_ts[0]) + len(sig_ts[1]), dtype=np.uint16),
        np.full(len(darks[0]) + len(darks[1]), DARK_FLAG, dtype=np.uint16),
    ])
    # events jittered before the epoch were never recorded
    keep = ts >= 0
    ts, ch, fl = ts[keep].astype(np.int64), ch[keep], fl[keep]
    order = np.lexsort((fl, ch, ts))
    rec = np.zeros(len(order), dtype=RECORD_DTYPE)
    rec["timestamp"] = ts[order]
    rec["channel"] = ch[order]
    rec["flags"] = fl[order]
    return TimeTagStream(rec, channel_count=2, basis_label=config.basis_label, duration=config.duration)


def combination_seed(master_seed: int, index: int) -> int:
    """Deterministic 64-bit sub-seed for combination ``index``."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(index),))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def tomography_combinations() -> list[tuple[str, str]]:
    return [(a, b) for a in BASIS_LABELS for b in BASIS_LABELS]


def tomography_configs(
    config: SimConfig,
    seconds_per_combination: float | None = None,
    iteration: int = 0,
) -> list[tuple[str, SimConfig]]:
    """Per-combination configs of one tomography iteration, keyed by label such as ``"HV"``.

    With ``seconds_per_combination`` the pulse count is rep_rate * seconds;
    otherwise ``config.pulse_count`` is used. Combination ``i`` of iteration
    ``j`` gets sub-seed index 36 j + i and starts at lab time
    start_time + (36 j + i) * duration, which only matters for drift.
    """
    if seconds_per_combination is not None:
        if seconds_per_combination < 0:
            raise ValueError("seconds per combination must be non-negative")
        pulses = int(round(seconds_per_combination * config.rep_rate * 1e9))
        config = replace(config, pulse_count=pulses)
    out = []
    for i, (bxx, bx) in enumerate(tomography_combinations()):
        idx = iteration * 36 + i
        cfg = replace(
            config,
            basis_xx=bxx,
            basis_x=bx,
            seed=combination_seed(config.seed, idx),
            start_time=config.start_time + idx * config.duration,
        )
        out.append((bxx + bx, cfg))
    return out


def simulate_tomography_run(
    config: SimConfig,
    seconds_per_combination: float | None = None,
    iteration: int = 0,
) -> dict[str, TimeTagStream]:
    """All 36 analyzer settings of one iteration; see :func:`tomography_configs`."""
    return {
        label: simulate_pair_stream(cfg)
        for label, cfg in tomography_configs(config, seconds_per_combination, iteration)
    }


def simulate_rabi_scan(
    config: SimConfig, powers: Sequence[float], pulses_per_point: int
) -> list[tuple[float, int]]:
    """Detected XX-arm counts per excitation power with binomial shot noise and dark counts."""
    if any(p < 0 for p in powers):
        raise ValueError("powers must be non-negative")
    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed)))
    duration = pulses_per_point / (config.rep_rate * 1e9)
    out = []
    for p in powers:
        prob = excitation_probability(p, config.pi_pulse_power) * config.efficiency_xx
        counts = int(rng.binomial(pulses_per_point, prob))
        if config.dark_rate_xx > 0:
            counts += int(rng.poisson(config.dark_rate_xx * duration))
        out.append((float(p), counts))
    return out


def efficiency_for_rate(target_rate_hz: float, config: SimConfig, marginal: float = 0.5) -> float:
    """Equal per-arm efficiency giving ``target_rate_hz`` combined (XX + X) signal rate.

    ``marginal`` is the single-arm analyzer transmission (1/2 for any basis on
    a maximally entangled pair).
    """
    per_pulse = config.rep_rate * 1e9 * config.excitation_probability * marginal * 2.0
    eta = target_rate_hz / per_pulse
    if not 0.0 <= eta <= 1.0:
        raise ValueError(f"rate {target_rate_hz} Hz needs efficiency {eta:.3g}, outside [0, 1]")
    return eta


def _laplace_gauss_mass(lo: float, hi: float, scale: float, sigma: float) -> float:
    """P(lo <= X < hi) for X = Laplace(0, scale) + Normal(0, sigma)."""
    if sigma == 0:
        def cdf(x):
            return 0.5 * math.exp(x / scale) if x < 0 else 1.0 - 0.5 * math.exp(-x / scale)
        return cdf(hi) - cdf(lo)

    def pdf(x):
        # Laplace density is a 50/50 mixture of +-Exp(scale); each convolves to an EMG
        a = np.exp(sigma**2 / (2 * scale**2))
        pos = np.exp(-x / scale) * special.erfc((sigma / scale - x / sigma) / math.sqrt(2))
        neg = np.exp(x / scale) * special.erfc((sigma / scale + x / sigma) / math.sqrt(2))
        return 0.25 / scale * a * (pos + neg)

    val, _ = integrate.quad(pdf, lo, hi, limit=200)
    return float(val)


def expected_autocorrelation_g2(
    config: SimConfig, background_rate_hz: float, peak_halfwidth: float, n_side_peaks: int
) -> float:
    """Expected g2(0) estimate of the XX-arm autocorrelation under the simulator's model.

    Signal photons occur at most once per pulse with probability p; the
    delay between signal photons of pulses i and j is (j - i) T plus a
    Laplace(T1_XX) emission difference plus Gaussian jitter. Background is
    uniform at ``background_rate_hz``. Peak areas follow g2_from_histogram.
    """
    p = config.excitation_probability * config.efficiency_xx * 0.5
    T = config.period_ps
    h = peak_halfwidth
    b = background_rate_hz * 1e-12
    sig = math.sqrt(2.0) * config.channel_jitter_fwhm * FWHM_TO_SIGMA
    scale = config.cascade.t1_xx
    reach = n_side_peaks + 8

    def area(k):
        # ordered pairs per pulse landing in [kT - h, kT + h)
        ss = sum(
            _laplace_gauss_mass((k - j) * T - h, (k - j) * T + h, scale, sig)
            for j in range(-reach, reach + 1)
            if j != 0
        )
        return p * p * ss + 2.0 * p * b * 2 * h + b * b * 2 * h * T

    center = area(0)
    side = np.mean([area(k) for k in range(-n_side_peaks, n_side_peaks + 1) if k != 0])
    return float(center / side)


def background_rate_for_purity(
    config: SimConfig, g2_target: float, peak_halfwidth: float, n_side_peaks: int = 4
) -> float:
    """Uniform XX-arm background rate (Hz) whose expected autocorrelation g2(0) equals ``g2_target``."""
    base = expected_autocorrelation_g2(config, 0.0, peak_halfwidth, n_side_peaks)
    if g2_target <= base:
        raise ValueError(f"target g2 {g2_target} below the signal-only floor {base:.2e}")

    def f(rate):
        return expected_autocorrelation_g2(config, rate, peak_halfwidth, n_side_peaks) - g2_target

    hi = 1.0
    while f(hi) < 0:
        hi *= 2.0
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-9, rtol=1e-12))
