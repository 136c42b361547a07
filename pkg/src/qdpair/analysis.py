"""Fits and derived quantities: exciton lifetime, fine-structure splitting,
Rabi oscillation, lifetime-weighted negativity and long-run stability."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy import optimize, special

from .correlate import CoincidenceHistogram, cross_correlate
from .quantum import FWHM_TO_SIGMA
from .timetag import iter_chunks
from .tomography import COMBINATIONS, LABELS, TomographyDataset, combine_datasets, reconstruct_window

MAX_NFEV = 500
XTOL = 1e-8


class FitError(RuntimeError):
    pass


@dataclass
class FitResult:
    params: dict[str, float]
    sigmas: dict[str, float]
    reduced_chi2: float
    converged: bool
    model_curve: list[tuple[float, float]]
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "params": dict(self.params),
            "sigmas": dict(self.sigmas),
            "reduced_chi2": self.reduced_chi2,
            "converged": self.converged,
            "flags": list(self.flags),
        }


def _covariance(jac: np.ndarray) -> np.ndarray:
    jtj = jac.T @ jac
    try:
        return np.linalg.inv(jtj)
    except np.linalg.LinAlgError:
        return np.linalg.pinv(jtj)


# lifetime --------------------------------------------------------------------

def emg(u, t1: float, sigma: float):
    """Density of Exp(t1) + N(0, sigma^2) evaluated at ``u``.

    Uses the erfcx form where the plain exp * erfc product would overflow.
    """
    u = np.asarray(u, dtype=float)
    if sigma <= 0:
        return np.where(u >= 0, np.exp(-np.clip(u, 0, None) / t1) / t1, 0.0)
    z = (sigma / t1 - u / sigma) / math.sqrt(2.0)
    with np.errstate(over="ignore", under="ignore", invalid="ignore"):
        direct = np.exp(sigma**2 / (2 * t1**2) - u / t1) * special.erfc(z)
        scaled = np.exp(-(u**2) / (2 * sigma**2)) * special.erfcx(z)
    return 0.5 / t1 * np.where(z > 0, scaled, direct)


def emission_side(hist: CoincidenceHistogram, reach: float = 500.0) -> int:
    """-1 when the decay tail extends toward negative delay, +1 otherwise."""
    c = hist.centers
    peak = c[np.argmax(hist.counts * ((c > -reach) & (c < reach)))]
    left = hist.counts[(c >= peak - reach) & (c < peak)].sum()
    right = hist.counts[(c > peak) & (c <= peak + reach)].sum()
    return -1 if left > right else 1


def fit_lifetime(
    hist: CoincidenceHistogram,
    jitter_fwhm: float = 50.0,
    fit_range: tuple[float, float] | None = None,
    side: int | None = None,
) -> FitResult:
    """Fit A * w * EMG(side * (tau - t0); T1, sigma) + B to a coincidence histogram.

    ``A`` is the peak area in counts and ``B`` a flat level per bin. sigma is
    fixed from ``jitter_fwhm``; A, B, T1 and t0 are free. Poisson weights with
    variance max(count, 1); Levenberg-Marquardt; T1 sigma from the covariance.
    ``side`` (+1 or -1) orients the decay tail and is inferred when omitted.
    Without ``fit_range`` the fit spans 600 ps on the tail side and 150 ps on
    the rising side of the peak.
    """
    if side is None:
        side = emission_side(hist)
    if side not in (1, -1):
        raise ValueError("side must be +1 or -1")
    c = hist.centers.astype(float)
    y = hist.counts.astype(float)
    if fit_range is None:
        pk = c[np.argmax(y * (np.abs(c) < 500))]
        fit_range = (pk - 600, pk + 150) if side < 0 else (pk - 150, pk + 600)
    lo, hi = fit_range
    if not hi > lo:
        raise ValueError(f"degenerate fit range {fit_range}")
    sel = (c >= lo) & (c < hi)
    x, y = c[sel], y[sel]
    if np.count_nonzero(y) < 20:
        raise FitError(f"only {np.count_nonzero(y)} nonzero bins in {fit_range}; need 20")
    sigma = jitter_fwhm * FWHM_TO_SIGMA
    w = hist.bin_width
    err = np.sqrt(np.maximum(y, 1.0))

    def model(p, xx):
        a, b, t1, t0 = p
        return a * w * emg(side * (xx - t0), t1, sigma) + b

    def resid(p):
        return (model(p, x) - y) / err

    b0 = float(np.percentile(y, 10))
    a0 = max(float(y.sum() - b0 * len(y)), 1.0)
    t0 = float(x[np.argmax(y)]) - side * 0.5 * sigma
    # crude slope on the tail for T1
    tail = side * (x - x[np.argmax(y)])
    m = (tail > 2 * sigma) & (y > b0 + 3)
    t1_0 = 150.0
    if m.sum() >= 3:
        s = np.polyfit(tail[m], np.log(y[m] - b0), 1)[0]
        if s < 0:
            t1_0 = float(np.clip(-1.0 / s, 5.0, 5000.0))
    p0 = np.array([a0, b0, t1_0, t0])
    res = optimize.least_squares(resid, p0, method="lm", xtol=XTOL, max_nfev=MAX_NFEV)
    p = res.x
    dof = max(len(x) - 4, 1)
    chi2 = float(np.sum(res.fun**2)) / dof
    cov = _covariance(res.jac)
    sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    names = ("amplitude", "offset", "T1", "t0")
    flags = [] if res.status > 0 else ["max_iterations"]
    converged = res.status > 0 and p[2] > 0
    return FitResult(
        params={k: float(v) for k, v in zip(names, p)} | {"sigma_jitter": float(sigma), "side": float(side)},
        sigmas={k: float(v) for k, v in zip(names, sig)},
        reduced_chi2=chi2,
        converged=bool(converged),
        model_curve=list(zip(x.tolist(), model(p, x).tolist())),
        flags=flags,
    )


# fine-structure splitting ------------------------------------------------------

def fit_fss(samples: Sequence[tuple[float, float]]) -> FitResult:
    """Fit E(theta) = E0 + (Delta/2) cos(4 theta + phi), theta = HWP angle in degrees.

    The model is linear in (E0, a, b) with a cos + b sin, so the least-squares
    optimum is exact; Delta = 2 sqrt(a^2 + b^2) >= 0. Flags ``ambiguous_phase``
    when Delta / sigma_Delta < 3.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[1] != 2:
        raise ValueError("samples must be (angle, energy) pairs")
    th, e = s[:, 0], s[:, 1]
    if len(th) < 8:
        raise FitError(f"need at least 8 samples, got {len(th)}")
    if th.max() - th.min() < 90.0:
        raise FitError("samples must span at least 90 degrees of HWP angle")
    ang = np.deg2rad(4.0 * th)
    X = np.column_stack([np.ones_like(ang), np.cos(ang), np.sin(ang)])
    coef, *_ = np.linalg.lstsq(X, e, rcond=None)
    e0, a, b = coef
    r = math.hypot(a, b)
    delta = 2.0 * r
    phi = math.atan2(-b, a)
    fitted = X @ coef
    dof = max(len(e) - 3, 1)
    rss = float(np.sum((e - fitted) ** 2))
    s2 = rss / dof
    cov = s2 * np.linalg.inv(X.T @ X)
    if r > 0:
        g = np.array([0.0, 2 * a / r, 2 * b / r])
        sd = math.sqrt(max(g @ cov @ g, 0.0))
        gp = np.array([0.0, b / r**2, -a / r**2])
        sphi = math.sqrt(max(gp @ cov @ gp, 0.0))
    else:
        sd = 2.0 * math.sqrt(max(0.5 * (cov[1, 1] + cov[2, 2]), 0.0))
        sphi = math.pi
    flags = []
    if sd > 0 and delta / sd < 3 or delta == 0:
        flags.append("ambiguous_phase")
    return FitResult(
        params={"E0": float(e0), "delta_fss": float(delta), "phase": float(phi)},
        sigmas={"E0": float(math.sqrt(cov[0, 0])), "delta_fss": float(sd), "phase": float(sphi)},
        reduced_chi2=s2,
        converged=True,
        model_curve=list(zip(th.tolist(), fitted.tolist())),
        flags=flags,
    )


def fss_model(theta_deg, e0: float, delta: float, phase: float):
    return e0 + 0.5 * delta * np.cos(np.deg2rad(4.0 * np.asarray(theta_deg, dtype=float)) + phase)


# Rabi -----------------------------------------------------------------------

def rabi_model(power, amplitude: float, p_pi: float, gamma: float, offset: float):
    """A sin^2((pi/2) sqrt(P/P_pi)) exp(-gamma sqrt(P/P_pi)) + C."""
    r = np.sqrt(np.clip(np.asarray(power, dtype=float), 0, None) / p_pi)
    return amplitude * np.sin(0.5 * np.pi * r) ** 2 * np.exp(-gamma * r) + offset


def _first_maximum(p: np.ndarray, y: np.ndarray) -> int:
    k = np.ones(3) / 3.0
    sm = np.convolve(np.pad(y, 1, mode="edge"), k, mode="valid") if len(y) >= 3 else y
    for i in range(1, len(sm) - 1):
        if sm[i] >= sm[i - 1] and sm[i] > sm[i + 1]:
            # the raw maximum next to the smoothed one
            lo, hi = max(i - 1, 0), min(i + 2, len(y))
            return lo + int(np.argmax(y[lo:hi]))
    raise FitError("no interior maximum in the Rabi scan")


def fit_rabi(samples: Sequence[tuple[float, float]], sigma=None) -> FitResult:
    """Damped Rabi fit; P_pi starts at the first local maximum of the smoothed scan.

    Unweighted unless per-point ``sigma`` is given, so P_pi is invariant
    under rescaling the counts. gamma is constrained to be non-negative.
    """
    s = np.asarray(samples, dtype=float)
    if s.ndim != 2 or s.shape[1] != 2:
        raise ValueError("samples must be (power, counts) pairs")
    order = np.argsort(s[:, 0], kind="stable")
    p, y = s[order, 0], s[order, 1]
    if np.any(p < 0):
        raise ValueError("powers must be non-negative")
    if len(p) < 6:
        raise FitError(f"need at least 6 samples, got {len(p)}")
    i = _first_maximum(p, y)
    if p[i] <= 0:
        raise FitError("first maximum at zero power")
    err = np.ones_like(y) if sigma is None else np.asarray(sigma, dtype=float)[order]
    scale = float(np.max(np.abs(y))) or 1.0
    yn, en = y / scale, err / scale if sigma is not None else err

    def resid(q):
        return (rabi_model(p, q[0], q[1], q[2], q[3]) - yn) / en

    c0 = float(yn[p == p.min()].mean())
    q0 = np.array([max(yn[i] - c0, 1e-3), p[i], 0.05, c0])
    lb = [0.0, 1e-9 * p.max(), 0.0, -np.inf]
    res = optimize.least_squares(resid, q0, bounds=(lb, np.inf), method="trf",
                                 xtol=XTOL, ftol=1e-12, gtol=1e-12, max_nfev=MAX_NFEV, x_scale="jac")
    q = res.x
    dof = max(len(p) - 4, 1)
    rss = float(np.sum(res.fun**2))
    cov = _covariance(res.jac)
    if sigma is None:
        cov = cov * rss / dof
    sig = np.sqrt(np.clip(np.diag(cov), 0, None))
    unit = np.array([scale, 1.0, 1.0, scale])
    q_out, sig_out = q * unit, sig * unit
    names = ("amplitude", "P_pi", "gamma", "offset")
    flags = [] if res.status > 0 else ["max_iterations"]
    return FitResult(
        params={k: float(v) for k, v in zip(names, q_out)},
        sigmas={k: float(v) for k, v in zip(names, sig_out)},
        reduced_chi2=rss / dof,
        converged=bool(res.status > 0),
        model_curve=list(zip(p.tolist(), rabi_model(p, *q_out).tolist())),
        flags=flags,
    )


# negativity averages ----------------------------------------------------------

def t1_weighted_negativity(series: Sequence[Sequence[float]], t1: float) -> tuple[float, float]:
    """Count-weighted mean of 2n over bins with centers in [0, t1].

    Entries are (tau, 2n, counts) or (tau, 2n, counts, sigma). The returned
    sigma propagates per-bin sigmas and is nan when none are given.
    """
    rows = [tuple(r) for r in series]
    sel = [r for r in rows if 0.0 <= r[0] <= t1]
    if not sel:
        raise ValueError(f"no bins with centers in [0, {t1}] ps")
    n2 = np.array([r[1] for r in sel], dtype=float)
    w = np.array([r[2] for r in sel], dtype=float)
    if w.sum() <= 0:
        raise ValueError("window holds no counts")
    val = float(np.sum(w * n2) / w.sum())
    if all(len(r) > 3 and r[3] is not None for r in sel):
        s = np.array([r[3] for r in sel], dtype=float)
        sig = float(math.sqrt(np.sum((w * s) ** 2)) / w.sum())
    else:
        sig = float("nan")
    return val, sig


# stability --------------------------------------------------------------------

@dataclass
class IterationRecord:
    """One tomography iteration: 36 streams recorded back to back from ``start_time`` (s).

    ``durations`` gives each combination's length in seconds, in the standard
    combination order; the streams may be paths or in-memory streams.
    """

    start_time: float
    streams: Mapping[str, object]
    durations: Sequence[float]

    def __post_init__(self):
        missing = [lab for lab in LABELS if lab not in self.streams]
        if missing:
            raise ValueError("iteration lacks combinations: " + ", ".join(missing))
        if len(self.durations) != 36:
            raise ValueError("need one duration per combination")


@dataclass
class StabilityReport:
    window: float
    rate_series: dict[str, list[tuple[float, float]]]
    negativity_series: list[tuple[float, float, float]]
    mean_rate: float
    max_rate: float
    fluctuation: float
    fluctuation_std: float
    min_2n: float
    mean_2n: float
    pairing: int = 2

    def to_dict(self) -> dict:
        return {
            "window_s": self.window,
            "pairing": self.pairing,
            "mean_rate_hz": self.mean_rate,
            "max_rate_hz": self.max_rate,
            "fluctuation_peak_to_peak": self.fluctuation,
            "fluctuation_std": self.fluctuation_std,
            "min_2n": self.min_2n,
            "mean_2n": self.mean_2n,
            "negativity_series": [list(map(float, r)) for r in self.negativity_series],
            "rate_series": {k: [list(map(float, r)) for r in v] for k, v in self.rate_series.items()},
        }


def _iteration_dataset(it: IterationRecord, ch_xx, ch_x, bin_width, corr_window) -> TomographyDataset:
    hists = {}
    for (bxx, bx), d in zip(COMBINATIONS, it.durations):
        h = cross_correlate(it.streams[bxx + bx], ch_xx, ch_x, bin_width, corr_window, duration=d)
        hists[(bxx, bx)] = h
    return TomographyDataset(hists)


def _run_rates(iterations: Sequence[IterationRecord], ch_xx, ch_x, window) -> dict[str, list]:
    """Rates in windows on the lab clock of the whole run, spanning combination boundaries.

    Only windows lying entirely inside the run are kept. Gaps between
    iterations count as dead time, so windows there report zero rate.
    """
    t0 = iterations[0].start_time
    end = max(it.start_time + sum(it.durations) for it in iterations)
    n = int(math.floor((end - t0) / window + 1e-9))
    counts = {k: np.zeros(n, dtype=np.int64) for k in ("xx", "x", "combined")}
    for it in iterations:
        t = it.start_time - t0
        for lab, d in zip(LABELS, it.durations):
            for chunk in iter_chunks(it.streams[lab]):
                if len(chunk) == 0:
                    continue
                idx = np.floor((t + chunk["timestamp"] * 1e-12) / window).astype(np.int64)
                ok = idx < n
                for key, sel in (("xx", chunk["channel"] == ch_xx), ("x", chunk["channel"] == ch_x),
                                 ("combined", np.ones(len(chunk), dtype=bool))):
                    counts[key] += np.bincount(idx[ok & sel], minlength=n)[:n]
            t += d
    mids = t0 + (np.arange(n) + 0.5) * window
    return {k: [(float(m), float(c) / window) for m, c in zip(mids, v)] for k, v in counts.items()}


def stability_report(
    iterations: Sequence[IterationRecord],
    window: float,
    pairing: int = 2,
    t1: float = 162.0,
    ch_xx: int = 0,
    ch_x: int = 1,
    bin_width: int = 8,
    corr_window: int = 2000,
    rep_period: float | None = None,
    background="auto",
    bootstrap: int = 100,
    seed: int = 0,
) -> StabilityReport:
    """Rate series over the whole run and 2n per group of ``pairing`` consecutive iterations.

    Each group's 36 histograms are summed and reconstructed once from the
    coincidences inside the first exciton lifetime after emission (a window of
    width ``t1`` on the emission side of zero delay). Groups are consecutive
    and non-overlapping; a trailing incomplete group is dropped.
    """
    if pairing < 1:
        raise ValueError("pairing must be positive")
    if len(iterations) < pairing:
        raise ValueError(f"{len(iterations)} iterations cannot form a group of {pairing}")
    datasets = [_iteration_dataset(it, ch_xx, ch_x, bin_width, corr_window) for it in iterations]
    ref = datasets[0].reference
    for d in datasets[1:]:
        if not d.reference.same_grid(ref):
            raise ValueError("iterations use different histogram grids")

    rates = _run_rates(iterations, ch_xx, ch_x, window)
    comb = np.array([r for _, r in rates["combined"]], dtype=float)
    if len(comb) == 0:
        raise ValueError("run is shorter than one rate window")
    mean_rate = float(comb.mean())

    neg = []
    for g in range(len(datasets) // pairing):
        grp = datasets[g * pairing:(g + 1) * pairing]
        its = iterations[g * pairing:(g + 1) * pairing]
        ds = combine_datasets(grp)
        side = ds.emission_sign()
        tau = (-t1, 0.0) if side < 0 else (0.0, t1)
        r = reconstruct_window(ds, tau, background=background, rep_period=rep_period,
                               bootstrap=bootstrap, seed=seed + g)
        t_mid = 0.5 * (its[0].start_time + its[-1].start_time + sum(its[-1].durations))
        neg.append((t_mid, r.negativity_2n, r.sigma_2n if r.sigma_2n is not None else float("nan")))
    n2 = np.array([v for _, v, _ in neg])
    return StabilityReport(
        window=window,
        rate_series=rates,
        negativity_series=neg,
        mean_rate=mean_rate,
        max_rate=float(comb.max()),
        fluctuation=float((comb.max() - comb.min()) / mean_rate) if mean_rate > 0 else 0.0,
        fluctuation_std=float(comb.std() / mean_rate) if mean_rate > 0 else 0.0,
        min_2n=float(n2.min()),
        mean_2n=float(n2.mean()),
        pairing=pairing,
    )
