"""Maximum-likelihood two-photon state tomography from 36 coincidence histograms.

The state is parametrized as rho = T^dagger T / tr(T^dagger T) with T lower
triangular (4 real diagonal + 6 complex off-diagonal entries), so every
estimate is positive semidefinite with unit trace. Counts are Poisson with
mean N * e_i * p_i, p_i = <psi_i|rho|psi_i>, e_i the relative exposure of
setting i and N a single shared scale, which is profiled out analytically.
"""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy import optimize

from .correlate import CoincidenceHistogram, cross_correlate
from .quantum import BASIS_LABELS, DensityMatrix, bell_state, fidelity_to, negativity_2n, product_ket

log = logging.getLogger(__name__)

COMBINATIONS: tuple[tuple[str, str], ...] = tuple((a, b) for a in BASIS_LABELS for b in BASIS_LABELS)
LABELS: tuple[str, ...] = tuple(a + b for a, b in COMBINATIONS)
KETS = np.array([product_ket(a, b) for a, b in COMBINATIONS])  # (36, 4)

RESULT_SCHEMA = "qdpair-tomography"
RESULT_SCHEMA_VERSION = 1

_LOWER = [(1, 0), (2, 0), (2, 1), (3, 0), (3, 1), (3, 2)]
_ROWS = np.array([r for r, _ in _LOWER])
_COLS = np.array([c for _, c in _LOWER])


class DatasetError(ValueError):
    pass


@dataclass
class ReconstructionResult:
    rho: DensityMatrix
    tau_bin: tuple[float, float] | None
    nll: float
    iterations: int
    converged: bool
    negativity_2n: float
    sigma_2n: float | None = None
    scale: float = 0.0
    counts_total: float = 0.0
    params: np.ndarray = field(default=None, repr=False)

    def to_dict(self) -> dict:
        m = self.rho.matrix
        return {
            "tau_lo_ps": None if self.tau_bin is None else float(self.tau_bin[0]),
            "tau_hi_ps": None if self.tau_bin is None else float(self.tau_bin[1]),
            "rho": [[float(z.real), float(z.imag)] for z in m.ravel()],
            "negativity_2n": self.negativity_2n,
            "sigma_2n": self.sigma_2n,
            "nll": self.nll,
            "iterations": self.iterations,
            "converged": self.converged,
            "counts": self.counts_total,
        }


def t_from_params(t: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4), dtype=complex)
    T[np.arange(4), np.arange(4)] = t[:4]
    T[_ROWS, _COLS] = t[4::2] + 1j * t[5::2]
    return T


def params_from_t(T: np.ndarray) -> np.ndarray:
    t = np.empty(16)
    t[:4] = np.diag(T).real
    lo = T[_ROWS, _COLS]
    t[4::2] = lo.real
    t[5::2] = lo.imag
    return t


def rho_from_params(t: np.ndarray) -> np.ndarray:
    T = t_from_params(t)
    a = T.conj().T @ T
    a = 0.5 * (a + a.conj().T)
    return a / np.trace(a).real


def t_from_rho(rho: np.ndarray, ridge: float = 1e-6) -> np.ndarray:
    """Lower-triangular T with T^dagger T = rho (after a small ridge for strict positivity)."""
    m = np.asarray(rho, dtype=complex)
    m = 0.5 * (m + m.conj().T) + ridge * np.eye(4)
    j = np.eye(4)[::-1]
    low = np.linalg.cholesky(j @ m @ j)
    return j @ low.conj().T @ j


def _exposure(exposure, n=36) -> np.ndarray:
    if exposure is None:
        return np.ones(n)
    e = np.broadcast_to(np.asarray(exposure, dtype=float), (n,)).copy()
    if np.any(e <= 0):
        raise ValueError("exposures must be positive")
    return e


def probabilities(rho) -> np.ndarray:
    m = rho.matrix if isinstance(rho, DensityMatrix) else np.asarray(rho)
    return np.einsum("ij,jk,ik->i", KETS.conj(), m, KETS).real


def poisson_nll(rho, counts, exposure=None) -> tuple[float, float]:
    """Full Poisson NLL sum(mu - n ln mu) at the best shared scale; returns (nll, scale)."""
    n = np.asarray(counts, dtype=float)
    e = _exposure(exposure)
    p = np.clip(probabilities(rho), 0.0, None)
    ep = e * p
    scale = n.sum() / ep.sum()
    mu = scale * ep
    pos = n > 0
    nll = mu.sum() - np.sum(n[pos] * np.log(np.maximum(mu[pos], 1e-300)))
    return float(nll), float(scale)


class _Objective:
    """Profiled NLL (per count) with a trace penalty fixing the scale of T."""

    def __init__(self, counts, exposure):
        self.n = np.asarray(counts, dtype=float)
        self.ntot = self.n.sum()
        self.w = self.n / self.ntot
        self.e = exposure
        self.kc = KETS.conj()
        self.M = (KETS.T * exposure) @ KETS.conj()  # sum_i e_i |psi_i><psi_i|

    def __call__(self, t):
        T = t_from_params(t)
        Y = T @ KETS.T  # columns T psi_i
        q = np.einsum("ij,ij->j", Y.conj(), Y).real
        qm = float(np.sum(self.e * q))
        qs = np.maximum(q, 1e-300)
        trA = float(np.sum(np.abs(T) ** 2))
        pen = (trA - 1.0) ** 2
        f = math.log(qm) - float(np.sum(self.w * np.log(qs))) + pen
        # gradient w.r.t. real and imaginary parts of T: 2 (T G) with G the Hermitian dg/dA
        TG = (T @ self.M) / qm - (Y * (self.w / qs)) @ self.kc
        D = 2.0 * TG + 4.0 * (trA - 1.0) * T
        g = np.empty(16)
        g[:4] = np.diag(D).real
        lo = D[_ROWS, _COLS]
        g[4::2] = lo.real
        g[5::2] = lo.imag
        return f, g


def linear_inversion(counts, exposure=None) -> tuple[np.ndarray, bool]:
    """Least-squares Hermitian estimate; returns (matrix, is_physical).

    The raw matrix may have negative eigenvalues and is then flagged; it is
    only used as a starting point, never stored as a state.
    """
    n = np.asarray(counts, dtype=float)
    e = _exposure(exposure)
    freq = n / e
    # projector set sums to 9 I, so sum_i tr(P_i rho) = 9 for unit trace
    norm = freq.sum() / 9.0 if freq.sum() > 0 else 1.0
    y = freq / norm
    paulis = [np.eye(2), np.array([[0, 1], [1, 0]]), np.array([[0, -1j], [1j, 0]]), np.diag([1.0, -1.0])]
    basis = [np.kron(a, b) / 4.0 for a in paulis for b in paulis]
    B = np.array([[np.vdot(k, s @ k).real for s in basis] for k in KETS])
    coef, *_ = np.linalg.lstsq(B, y, rcond=None)
    m = sum(c * s for c, s in zip(coef, basis))
    m = 0.5 * (m + m.conj().T)
    tr = np.trace(m).real
    if tr > 0:
        m = m / tr
    physical = bool(np.linalg.eigvalsh(m)[0] >= -1e-9)
    return m, physical


def _project_psd(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.conj().T))
    w = np.clip(w, 0.0, None)
    if w.sum() <= 0:
        return np.eye(4) / 4.0
    out = (v * w) @ v.conj().T
    return out / np.trace(out).real


def _run_start(obj: _Objective, t0: np.ndarray, max_iter: int):
    path = [t0.copy()]
    fvals = [obj(t0)[0]]

    def cb(xk):
        path.append(xk.copy())
        fvals.append(obj(xk)[0])

    res = optimize.minimize(obj, t0, jac=True, method="BFGS", callback=cb,
                            options={"maxiter": max_iter, "gtol": 1e-10})
    x = res.x
    if not np.all(np.isfinite(x)) or not np.isfinite(res.fun):
        res = optimize.minimize(lambda z: obj(z)[0], t0, method="Nelder-Mead",
                                options={"maxiter": max_iter * 20, "xatol": 1e-9, "fatol": 1e-12})
        x = res.x
        return x, int(res.nit), bool(res.success)
    if len(path) >= 2:
        df = abs(fvals[-2] - fvals[-1]) * obj.ntot
        dx = float(np.max(np.abs(path[-1] - path[-2])))
        small = df < 1e-9 and dx < 1e-8
    else:
        small = True
    converged = bool(res.success or small or (res.status == 2 and np.max(np.abs(res.jac)) < 1e-6))
    return x, int(res.nit), converged


def reconstruct_mle(
    counts: Sequence[float],
    exposure: Sequence[float] | float | None = None,
    seed: int = 0,
    max_iter: int = 2000,
    starts: Iterable[np.ndarray] | None = None,
    tau_bin: tuple[float, float] | None = None,
) -> ReconstructionResult:
    """Maximum-likelihood density matrix from the 36 counts of one delay bin.

    ``counts`` follow COMBINATIONS order (XX basis major, H V D A R L).
    Starts: maximally mixed, projected linear inversion and one seeded random
    point (plus any ``starts`` given as T-parameter vectors). The lowest NLL
    wins; ties go to the lexicographically smallest parameter vector.
    """
    n = np.asarray(counts, dtype=float)
    if n.shape != (36,):
        raise ValueError(f"expected 36 counts, got shape {n.shape}")
    if np.any(n < 0) or not np.all(np.isfinite(n)):
        raise ValueError("counts must be finite and non-negative")
    if n.sum() <= 0:
        raise ValueError("at least one nonzero count is required")
    e = _exposure(exposure)
    obj = _Objective(n, e)

    rng = np.random.default_rng(seed)
    lin, _ = linear_inversion(n, e)
    cand = [
        params_from_t(np.eye(4) / 2.0),
        params_from_t(t_from_rho(_project_psd(lin), ridge=1e-3)),
        rng.normal(0.0, 0.5, 16),
    ]
    if starts is not None:
        cand.extend(np.asarray(s, dtype=float) for s in starts)

    best = None
    for t0 in cand:
        x, nit, conv = _run_start(obj, t0, max_iter)
        rho = rho_from_params(x)
        nll, scale = poisson_nll(rho, n, e)
        # canonical scale so the tie-break compares like with like
        x = x / math.sqrt(np.sum(x * x))
        key = (round(nll, 9), tuple(np.round(x, 12)))
        if best is None or key < best[0]:
            best = (key, x, nit, conv, rho, nll, scale)
    _, x, nit, conv, rho, nll, scale = best
    dm = DensityMatrix(rho)
    return ReconstructionResult(
        rho=dm,
        tau_bin=tau_bin,
        nll=nll,
        iterations=nit,
        converged=conv,
        negativity_2n=negativity_2n(dm),
        scale=scale,
        counts_total=float(n.sum()),
        params=x,
    )


def bootstrap_uncertainty(
    counts,
    n_resamples: int = 200,
    seed: int = 0,
    exposure=None,
    target=None,
    max_iter: int = 2000,
) -> dict[str, float]:
    """Standard deviations of 2n and fidelity over Poisson resamples of ``counts``.

    Each resample is reconstructed with a warm start at the full-data
    estimate plus the maximally mixed start. ``target`` is the pure state for
    the fidelity metric (phi+ by default).
    """
    if n_resamples < 100:
        raise ValueError("use at least 100 resamples")
    n = np.asarray(counts, dtype=float)
    e = _exposure(exposure)
    tgt = bell_state("phi+") if target is None else target
    base = reconstruct_mle(n, e, seed=seed, max_iter=max_iter)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xB007]))
    negs, fids = [], []
    for _ in range(n_resamples):
        sample = rng.poisson(n).astype(float)
        if sample.sum() == 0:
            continue
        obj = _Objective(sample, e)
        best = None
        for t0 in (base.params, params_from_t(np.eye(4) / 2.0)):
            x, _, _ = _run_start(obj, t0, max_iter)
            rho = rho_from_params(x)
            nll, _ = poisson_nll(rho, sample, e)
            if best is None or nll < best[0]:
                best = (nll, rho)
        dm = DensityMatrix(best[1])
        negs.append(negativity_2n(dm))
        fids.append(fidelity_to(dm, tgt))
    return {
        "negativity_2n": float(np.std(negs, ddof=1)),
        "fidelity": float(np.std(fids, ddof=1)),
        "n_resamples": len(negs),
    }


@dataclass
class TomographyDataset:
    """36 histograms keyed by (XX basis, X basis) on one common delay grid."""

    histograms: dict[tuple[str, str], CoincidenceHistogram]

    def __post_init__(self):
        keys = set(self.histograms)
        missing = [k for k in COMBINATIONS if k not in keys]
        extra = sorted(k for k in keys if k not in set(COMBINATIONS))
        if missing:
            raise DatasetError("missing basis combinations: " + ", ".join(a + b for a, b in missing))
        if extra:
            raise DatasetError("unknown basis combinations: " + ", ".join(map(str, extra)))
        ref = self.histograms[COMBINATIONS[0]]
        for k in COMBINATIONS:
            h = self.histograms[k]
            if not h.same_grid(ref):
                raise DatasetError(f"inconsistent binning for {''.join(k)}")
            if h.duration != ref.duration:
                raise DatasetError(f"inconsistent duration for {''.join(k)}: {h.duration} vs {ref.duration}")

    @property
    def reference(self) -> CoincidenceHistogram:
        return self.histograms[COMBINATIONS[0]]

    def __getitem__(self, key) -> CoincidenceHistogram:
        if isinstance(key, str):
            key = (key[0], key[1])
        return self.histograms[key]

    def __add__(self, other: "TomographyDataset") -> "TomographyDataset":
        return TomographyDataset({k: self.histograms[k] + other.histograms[k] for k in COMBINATIONS})

    def count_matrix(self) -> np.ndarray:
        """(36, nbins) array of counts in COMBINATIONS order."""
        return np.array([self.histograms[k].counts for k in COMBINATIONS], dtype=float)

    def emission_sign(self, reach: float = 500.0) -> int:
        """-1 if correlated pairs sit at negative delay (a = XX, b = X convention), else +1."""
        c = self.reference.centers
        tot = self.count_matrix().sum(axis=0)
        neg = tot[(c < 0) & (c > -reach)].sum()
        pos = tot[(c > 0) & (c < reach)].sum()
        return -1 if neg > pos else 1


def combine_datasets(datasets: Sequence[TomographyDataset]) -> TomographyDataset:
    if not datasets:
        raise DatasetError("no datasets to combine")
    out = datasets[0]
    for d in datasets[1:]:
        out = out + d
    return out


def _label_key(label: str) -> tuple[str, str]:
    if len(label) != 2 or label[0] not in BASIS_LABELS or label[1] not in BASIS_LABELS:
        raise DatasetError(f"bad basis label {label!r}")
    return label[0], label[1]


def assemble_dataset(
    source,
    ch_a: int = 0,
    ch_b: int = 1,
    bin_width: int = 8,
    window: int = 25_000,
) -> TomographyDataset:
    """Build a dataset from a directory or a mapping.

    A directory may hold ``<XX><X>.csv`` histograms (preferred) or
    ``<XX><X>.qtt`` streams, which are correlated with the given channels,
    bin and window. A mapping may hold histograms or streams keyed by label.
    Keys are taken from the stream header basis label when available.
    """
    hists: dict[tuple[str, str], CoincidenceHistogram] = {}

    def add(key, h):
        if key in hists:
            raise DatasetError(f"duplicate basis combination {''.join(key)}")
        hists[key] = h

    if isinstance(source, (str, os.PathLike)):
        d = Path(source)
        if not d.is_dir():
            raise DatasetError(f"{d} is not a directory")
        csvs = sorted(p for p in d.glob("*.csv") if len(p.stem) == 2)
        if csvs:
            for p in csvs:
                add(_label_key(p.stem), CoincidenceHistogram.from_csv(p))
        else:
            for p in sorted(d.glob("*.qtt")):
                h = cross_correlate(p, ch_a, ch_b, bin_width, window)
                label = h.basis_label if h.basis_label != "--" else p.stem
                add(_label_key(label), h)
    else:
        for label, item in dict(source).items():
            key = label if isinstance(label, tuple) else _label_key(label)
            if isinstance(item, CoincidenceHistogram):
                add(key, item)
            else:
                add(key, cross_correlate(item, ch_a, ch_b, bin_width, window))
    return TomographyDataset(hists)


def _gap_mids(hist: CoincidenceHistogram, rep_period: float, reach: float) -> list[float]:
    lo, hi = hist.tau_min, hist.tau_max
    kmax = int((max(-lo, hi)) // rep_period) + 1
    mids = [(k + 0.5) * rep_period for k in range(-kmax - 1, kmax + 1)]
    inside = [m for m in mids if lo <= m - reach and m + reach <= hi]
    outer = [m for m in inside if abs(m) > rep_period]
    return outer or inside


def _gap_mean(hist: CoincidenceHistogram, mids, r_lo: float, r_hi: float) -> tuple[float, int]:
    c = hist.centers
    sel = np.zeros(len(c), dtype=bool)
    for m in mids:
        d = np.abs(c - m)
        sel |= (d >= r_lo) & (d < r_hi)
    if not sel.any():
        return 0.0, 0
    return float(hist.counts[sel].mean()), int(sel.sum())


def background_level(hist: CoincidenceHistogram, rep_period: float, guard: float | None = None) -> float:
    """Flat accidental level per bin from the gaps between pulse peaks.

    Averages bins centred within ``guard`` of the mid-points (k + 1/2) T,
    skipping the two gaps adjacent to zero delay (they hold the tail of the
    correlated peak) unless no other gap is inside the histogram.
    """
    if guard is None:
        guard = 0.1 * rep_period
    mids = _gap_mids(hist, rep_period, guard)
    return _gap_mean(hist, mids, 0.0, guard)[0] if mids else 0.0


def gaps_are_flat(hist: CoincidenceHistogram, rep_period: float, tolerance: float = 0.1) -> bool:
    """True when the inter-peak gaps look like a flat floor rather than overlapping peak tails.

    Compares the mean level within 0.05 T of the gap mid-points with the mean
    0.10-0.15 T away. Overlapping neighbour peaks make the outer ring rise well
    above the centre; a flat floor keeps them equal within ``tolerance``
    (relative) plus three standard errors. Histograms without a full gap
    are reported as not flat.
    """
    mids = _gap_mids(hist, rep_period, 0.15 * rep_period)
    if not mids:
        return False
    inner, n_in = _gap_mean(hist, mids, 0.0, 0.05 * rep_period)
    ring, n_out = _gap_mean(hist, mids, 0.10 * rep_period, 0.15 * rep_period)
    if n_in == 0 or n_out == 0:
        return False
    se = math.sqrt(inner / n_in + ring / n_out)
    return ring - inner <= tolerance * inner + 3.0 * se


def _bin_groups(ref: CoincidenceHistogram, tau_range, bin_ps: int):
    if bin_ps % ref.bin_width:
        raise ValueError(f"tau bin {bin_ps} ps is not a multiple of the histogram bin {ref.bin_width} ps")
    lo, hi = tau_range
    if not hi > lo:
        raise ValueError("empty tau range")
    f = bin_ps // ref.bin_width
    e = ref.edges
    first = int(np.searchsorted(e, lo, side="left"))
    groups = []
    i = first
    while i + f < len(e) and e[i + f] <= hi:
        groups.append((i, i + f))
        i += f
    if not groups:
        raise ValueError(f"tau range {tau_range} holds no complete {bin_ps} ps bin")
    return groups


def subtracted_counts(
    dataset: TomographyDataset, background="auto", rep_period: float | None = None
) -> np.ndarray:
    """(36, nbins) counts with the per-histogram flat background removed and floored at zero.

    With "auto" the gap levels are only subtracted when the summed
    histogram's gaps pass :func:`gaps_are_flat`; at high repetition rates the
    gaps hold tails of the neighbouring peaks, which are absent under the
    correlated peak, and subtracting them would inflate the entanglement.
    """
    counts = dataset.count_matrix()
    if background is None or (background == "auto" and rep_period is None):
        return counts
    if background == "auto":
        ref = dataset.reference
        total = CoincidenceHistogram(ref.bin_width, ref.tau_min, counts.sum(axis=0))
        if not gaps_are_flat(total, rep_period):
            log.info("inter-peak gaps are not flat at %g ps period; no background subtracted", rep_period)
            return counts
        levels = np.array([background_level(dataset.histograms[k], rep_period) for k in COMBINATIONS])
    else:
        levels = np.broadcast_to(np.asarray(background, dtype=float), (36,))
    return np.clip(counts - levels[:, None], 0.0, None)


def reconstruct_time_resolved(
    dataset: TomographyDataset,
    tau_range: tuple[float, float],
    bin_ps: int,
    background="auto",
    rep_period: float | None = None,
    count_floor: float = 200,
    exposure=None,
    bootstrap: int = 0,
    seed: int = 0,
    threads: int | None = None,
) -> tuple[list[ReconstructionResult], list[tuple[float, float]]]:
    """One MLE per delay bin; returns (results, skipped bins).

    Bins whose background-subtracted total is below ``count_floor`` are
    skipped and reported. ``background`` is "auto" (gap estimate, needs
    ``rep_period``), None, or explicit per-histogram levels per source bin.
    """
    ref = dataset.reference
    groups = _bin_groups(ref, tau_range, int(bin_ps))
    counts = subtracted_counts(dataset, background, rep_period)
    edges = ref.edges
    jobs, skipped = [], []
    for a, b in groups:
        c = counts[:, a:b].sum(axis=1)
        tb = (float(edges[a]), float(edges[b]))
        if c.sum() < count_floor:
            skipped.append(tb)
        else:
            jobs.append((tb, c))
    if skipped:
        log.info("skipped %d delay bins below %g counts", len(skipped), count_floor)

    def work(job):
        tb, c = job
        r = reconstruct_mle(c, exposure, seed=seed, tau_bin=tb)
        if bootstrap:
            r.sigma_2n = bootstrap_uncertainty(c, bootstrap, seed, exposure)["negativity_2n"]
        return r

    workers = threads or int(os.environ.get("QDPAIR_THREADS", "1"))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(work, jobs))
    else:
        results = [work(j) for j in jobs]
    return results, skipped


def reconstruct_window(
    dataset: TomographyDataset,
    tau_range: tuple[float, float],
    background="auto",
    rep_period: float | None = None,
    exposure=None,
    bootstrap: int = 0,
    seed: int = 0,
) -> ReconstructionResult:
    """Single MLE from counts summed over every source bin inside ``tau_range``."""
    ref = dataset.reference
    sel = (ref.edges[:-1] >= tau_range[0]) & (ref.edges[1:] <= tau_range[1])
    if not sel.any():
        raise ValueError(f"tau range {tau_range} holds no histogram bin")
    c = subtracted_counts(dataset, background, rep_period)[:, sel].sum(axis=1)
    idx = np.flatnonzero(sel)
    r = reconstruct_mle(c, exposure, seed=seed, tau_bin=(float(ref.edges[idx[0]]), float(ref.edges[idx[-1] + 1])))
    if bootstrap:
        r.sigma_2n = bootstrap_uncertainty(c, bootstrap, seed, exposure)["negativity_2n"]
    return r


def results_to_json(
    results: Sequence[ReconstructionResult],
    path=None,
    skipped: Sequence[tuple[float, float]] = (),
    extra: Mapping | None = None,
    bootstrap: int = 0,
) -> dict:
    doc = {
        "schema": RESULT_SCHEMA,
        "schema_version": RESULT_SCHEMA_VERSION,
        "bootstrap_resamples": int(bootstrap),
        "sigmas_available": bool(bootstrap),
        "tau_bins": [r.to_dict() for r in results],
        "skipped_bins": [[float(a), float(b)] for a, b in skipped],
    }
    if extra:
        doc.update(extra)
    if path is not None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(doc, indent=2, sort_keys=True))
        os.replace(tmp, path)
    return doc


def rho_from_json(entry: Mapping) -> DensityMatrix:
    vals = np.array([complex(re, im) for re, im in entry["rho"]]).reshape(4, 4)
    return DensityMatrix(vals)
