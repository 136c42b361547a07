"""Command-line front end.

Exit status: 0 success, 1 usage or configuration error, 2 data error,
3 fit or reconstruction did not converge (outputs are still written).
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import FitError, IterationRecord, fit_fss, fit_lifetime, fit_rabi, stability_report, t1_weighted_negativity
from .config import SCHEMA_VERSION, ConfigError, RunConfig, load_config
from .correlate import CoincidenceHistogram, CorrelationError, cross_correlate
from .quantum import CascadeModelParams, model_negativity_curve
from .sim import simulate_pair_stream, tomography_configs
from .timetag import VERSION as FORMAT_VERSION
from .timetag import FormatError, StreamHeader, write_stream
from .tomography import LABELS, DatasetError, assemble_dataset, reconstruct_time_resolved, results_to_json

log = logging.getLogger("qdpair")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NOCONV = 0, 1, 2, 3
MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict) -> None:
    _atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])
    _atomic_write(path, buf.getvalue())


def _stamp(doc: dict) -> dict:
    doc.setdefault("config_schema_version", SCHEMA_VERSION)
    doc.setdefault("tool_version", __version__)
    return doc


def _read_manifest(d: Path) -> dict | None:
    p = d / MANIFEST
    if not p.exists():
        return None
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise DataError(f"{p}: {e}") from e


def _config_or_default(path) -> RunConfig:
    return load_config(path) if path else RunConfig()


# simulate ---------------------------------------------------------------------

def cmd_simulate(args) -> int:
    cfg = load_config(args.config)
    out = Path(args.out or cfg.output_dir)
    sim = cfg.sim_config()
    n_it = cfg.simulation.iterations
    threads = int(os.environ.get("QDPAIR_THREADS", "1"))
    iter_dirs = []
    for j in range(n_it):
        d = out if n_it == 1 else out / f"iter_{j:03d}"
        d.mkdir(parents=True, exist_ok=True)
        jobs = tomography_configs(sim, iteration=j)

        def run(job):
            label, c = job
            s = simulate_pair_stream(c)
            write_stream(d / f"{label}.qtt", StreamHeader(2, label), s.records)
            return {
                "label": label,
                "file": f"{label}.qtt",
                "seed": c.seed,
                "start_time_s": c.start_time,
                "duration_s": c.duration,
                "records": len(s.records),
            }

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                entries = list(pool.map(run, jobs))
        else:
            entries = [run(job) for job in jobs]
        _write_json(d / MANIFEST, _stamp({
            "kind": "iteration",
            "format_version": FORMAT_VERSION,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "iteration": j,
            "rep_rate_ghz": sim.rep_rate,
            "pulse_count": sim.pulse_count,
            "start_time_s": entries[0]["start_time_s"],
            "combinations": entries,
            "config": cfg.to_dict(),
        }))
        iter_dirs.append(d.name if n_it > 1 else ".")
        print(f"iteration {j}: 36 streams, {sum(e['records'] for e in entries)} records -> {d}")
    if n_it > 1:
        _write_json(out / MANIFEST, _stamp({
            "kind": "run",
            "format_version": FORMAT_VERSION,
            "config_sha256": cfg.digest(),
            "seed": cfg.seed,
            "iterations": iter_dirs,
            "config": cfg.to_dict(),
        }))
    return EXIT_OK


# correlate --------------------------------------------------------------------

def _durations(manifest: dict | None) -> dict[str, float]:
    if not manifest or "combinations" not in manifest:
        return {}
    return {e["file"]: e["duration_s"] for e in manifest["combinations"]}


def cmd_correlate(args) -> int:
    src = Path(args.in_dir)
    files = sorted(src.glob("*.qtt"))
    if not files:
        raise DataError(f"no .qtt files in {src}")
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    durations = _durations(_read_manifest(src))
    rows = []
    for f in files:
        h = cross_correlate(f, args.a_channel, args.b_channel, args.bin, args.window,
                            duration=durations.get(f.name))
        label = h.basis_label if h.basis_label != "--" else f.stem
        h.to_csv(out / f"{label}.csv")
        dur = h.duration or float("nan")
        rows.append([label, h.total_singles_a, h.total_singles_b, int(h.total), dur,
                     h.total_singles_a / dur, h.total_singles_b / dur,
                     (h.total_singles_a + h.total_singles_b) / dur])
    _write_csv(out / "singles.csv",
               ["label", "singles_a", "singles_b", "coincidences", "duration_s",
                "rate_a_hz", "rate_b_hz", "rate_combined_hz"], rows)
    print(f"{len(files)} histograms -> {out}")
    return EXIT_OK


# tomo -------------------------------------------------------------------------

def _background(value: str):
    if value == "auto":
        return "auto"
    if value == "none":
        return None
    try:
        return float(value)
    except ValueError:
        raise UsageError(f"--background must be auto, none or a number, got {value!r}") from None


def cmd_tomo(args) -> int:
    src = Path(args.in_dir)
    cfg = _config_or_default(args.config)
    tc = cfg.tomography
    tau_min = tc.tau_min if args.tau_min is None else args.tau_min
    tau_max = tc.tau_max if args.tau_max is None else args.tau_max
    tau_bin = tc.tau_bin if args.tau_bin is None else args.tau_bin
    boot = tc.bootstrap if args.bootstrap is None else args.bootstrap
    bg = _background(args.background) if args.background is not None else (
        None if tc.background == "none" else tc.background)
    t1 = cfg.cascade.t1_x if args.t1 is None else args.t1
    if boot and boot < 100:
        raise UsageError("--bootstrap must be 0 or at least 100")
    ds = assemble_dataset(src, args.a_channel, args.b_channel, args.bin, args.window)
    if tau_bin % ds.reference.bin_width:
        raise UsageError(f"--tau-bin {tau_bin} is not a multiple of the histogram bin {ds.reference.bin_width} ps")
    rep = args.rep_period
    man = _read_manifest(src)
    if rep is None and man and "rep_rate_ghz" in man:
        rep = 1e3 / man["rep_rate_ghz"]
    results, skipped = reconstruct_time_resolved(
        ds, (tau_min, tau_max), tau_bin, background=bg, rep_period=rep,
        count_floor=tc.count_floor, bootstrap=boot, seed=cfg.seed)
    if not results:
        raise DataError("every delay bin is below the count floor")
    sign = ds.emission_sign()
    model = CascadeModelParams(**{**cfg.to_dict()["cascade"], "t1_x": t1})
    rows, series = [], []
    for r in results:
        lo, hi = r.tau_bin
        tau = sign * 0.5 * (lo + hi)
        series.append((tau, r.negativity_2n, r.counts_total, r.sigma_2n))
        rows.append([lo, hi, tau, tau / t1, r.negativity_2n,
                     "" if r.sigma_2n is None else r.sigma_2n, r.counts_total, int(r.converged)])
    best = max(results, key=lambda r: r.negativity_2n)
    try:
        wavg, wsig = t1_weighted_negativity(series, t1)
    except ValueError:
        wavg, wsig = None, None
    extra = _stamp({
        "emission_sign": sign,
        "t1_ps": t1,
        "max_2n": best.negativity_2n,
        "max_2n_tau_bin": list(best.tau_bin),
        "t1_weighted_2n": wavg,
        "t1_weighted_sigma": None if wsig is None or math.isnan(wsig) else wsig,
        "background": bg if bg is None or isinstance(bg, str) else float(bg),
        "rep_period_ps": rep,
    })
    out = Path(args.out) if args.out else src
    out.mkdir(parents=True, exist_ok=True)
    results_to_json(results, out / "tomography.json", skipped, extra, boot)
    tau_sorted = sorted(series, key=lambda s: s[0])
    model_curve = dict(model_negativity_curve(model, [s[0] for s in tau_sorted]))
    rows = [r + [model_curve[r[2]]] for r in rows]
    _write_csv(out / "fig4b.csv",
               ["delta_lo_ps", "delta_hi_ps", "tau_ps", "tau_over_t1", "negativity_2n",
                "sigma_2n", "counts", "converged", "model_2n"], rows)
    m = best.rho.matrix
    _write_csv(out / "fig4a.csv", ["row", "col", "re", "im"],
               [[i, j, m[i, j].real, m[i, j].imag] for i in range(4) for j in range(4)])
    print(f"{len(results)} bins reconstructed, {len(skipped)} skipped")
    print(f"max 2n = {best.negativity_2n:.4f} in delay bin [{best.tau_bin[0]:g}, {best.tau_bin[1]:g}) ps")
    if wavg is not None:
        print(f"T1-weighted 2n over [0, {t1:g}] ps = {wavg:.4f}")
    if not all(r.converged for r in results):
        print("warning: some delay bins did not converge", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


# fit --------------------------------------------------------------------------

def _read_pairs(path: Path) -> list[tuple[float, float]]:
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        try:
            out.append((float(parts[0]), float(parts[1])))
        except (ValueError, IndexError):
            if out:
                raise DataError(f"{path}: malformed line {line!r}") from None
            # first non-numeric line is a column header
    if not out:
        raise DataError(f"{path}: no data rows")
    return out


def cmd_fit(args) -> int:
    path = Path(args.in_file)
    if not path.exists():
        raise DataError(f"{path} does not exist")
    if args.kind == "lifetime":
        hist = CoincidenceHistogram.from_csv(path)
        rng = None
        if args.fit_min is not None or args.fit_max is not None:
            if args.fit_min is None or args.fit_max is None:
                raise UsageError("--fit-min and --fit-max go together")
            rng = (args.fit_min, args.fit_max)
        res = fit_lifetime(hist, args.jitter, rng, args.side)
        header = ["tau_ps", "model_counts"]
    elif args.kind == "fss":
        res = fit_fss(_read_pairs(path))
        header = ["hwp_angle_deg", "model_energy_uev"]
    else:
        res = fit_rabi(_read_pairs(path))
        header = ["power_uw", "model_counts"]
    prefix = Path(args.out) if args.out else path.with_name(f"{path.stem}_{args.kind}")
    _write_json(prefix.with_name(prefix.name + ".json"), _stamp({"kind": args.kind, "input": path.name, **res.to_dict()}))
    _write_csv(prefix.with_name(prefix.name + "_curve.csv"), header, res.model_curve)
    for k, v in res.params.items():
        s = res.sigmas.get(k)
        print(f"{k:>14} = {v:.6g}" + (f" +- {s:.3g}" if s is not None else ""))
    print(f"{'reduced chi2':>14} = {res.reduced_chi2:.4g}")
    if not res.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return EXIT_NOCONV
    return EXIT_OK


# report -----------------------------------------------------------------------

def _iteration_dirs(run: Path) -> list[Path]:
    dirs = []
    for d in sorted(p for p in run.iterdir() if p.is_dir()):
        man = _read_manifest(d)
        if man and man.get("kind") == "iteration":
            dirs.append(d)
    return dirs


def cmd_report(args) -> int:
    run = Path(args.run_dir)
    if not run.is_dir():
        raise DataError(f"{run} is not a directory")
    cfg = _config_or_default(args.config)
    dirs = _iteration_dirs(run)
    if not dirs:
        raise DataError(f"no iteration directories with a {MANIFEST} under {run}")
    pairing = cfg.analysis.pairing if args.pairing is None else args.pairing
    if len(dirs) < pairing:
        raise DataError(f"{len(dirs)} iteration(s) found; pairing {pairing} needs at least {pairing}")
    its, rep = [], None
    for d in dirs:
        man = _read_manifest(d)
        combos = {e["label"]: e for e in man["combinations"]}
        missing = [lab for lab in LABELS if lab not in combos]
        if missing:
            raise DataError(f"{d}: manifest lacks {', '.join(missing)}")
        its.append(IterationRecord(
            start_time=combos[LABELS[0]]["start_time_s"],
            streams={lab: d / combos[lab]["file"] for lab in LABELS},
            durations=[combos[lab]["duration_s"] for lab in LABELS],
        ))
        rep = 1e3 / man["rep_rate_ghz"]
    window = cfg.analysis.rate_window if args.window is None else args.window
    boot = cfg.analysis.bootstrap if args.bootstrap is None else args.bootstrap
    t1 = cfg.cascade.t1_x if args.t1 is None else args.t1
    rpt = stability_report(its, window, pairing, t1=t1, ch_xx=args.a_channel, ch_x=args.b_channel,
                           bin_width=args.bin, corr_window=args.corr_window, rep_period=rep,
                           bootstrap=boot, seed=cfg.seed)
    out = Path(args.out) if args.out else run
    _write_json(out / "stability.json", _stamp({"iterations": [d.name for d in dirs], **rpt.to_dict()}))
    r = rpt.rate_series
    _write_csv(out / "fig5a.csv", ["t_s", "rate_xx_hz", "rate_x_hz", "rate_combined_hz"],
               [[a[0], a[1], b[1], c[1]] for a, b, c in zip(r["xx"], r["x"], r["combined"])])
    _write_csv(out / "fig5b.csv", ["t_s", "negativity_2n", "sigma_2n"], rpt.negativity_series)
    print(f"{'iterations':>22}  {len(dirs)} (pairing {pairing})")
    print(f"{'mean rate [kHz]':>22}  {rpt.mean_rate / 1e3:.1f}")
    print(f"{'max rate [kHz]':>22}  {rpt.max_rate / 1e3:.1f}")
    print(f"{'fluctuation p-p':>22}  {100 * rpt.fluctuation:.2f} %")
    print(f"{'fluctuation std':>22}  {100 * rpt.fluctuation_std:.2f} %")
    print(f"{'min 2n':>22}  {rpt.min_2n:.4f}")
    print(f"{'mean 2n':>22}  {rpt.mean_2n:.4f}")
    return EXIT_OK


# model-curve ------------------------------------------------------------------

def cmd_model_curve(args) -> int:
    cfg = _config_or_default(args.config)
    kw = cfg.to_dict()["cascade"]
    for key, val in (("fss_energy", args.fss), ("t1_x", args.t1), ("jitter_fwhm_2ph", args.jitter)):
        if val is not None:
            kw[key] = val
    params = CascadeModelParams(**kw)
    tau_max = 5 * params.t1_x if args.tau_max is None else args.tau_max
    if args.step <= 0 or tau_max < args.tau_min:
        raise UsageError("need --step > 0 and --tau-max >= --tau-min")
    n = int(math.floor((tau_max - args.tau_min) / args.step + 1e-9)) + 1
    grid = args.tau_min + args.step * np.arange(n)
    curve = model_negativity_curve(params, grid)
    out = Path(args.out)
    _write_csv(out, ["tau_ps", "tau_over_t1", "negativity_2n"],
               [[t, t / params.t1_x, v] for t, v in curve])
    print(f"{len(curve)} points -> {out}")
    return EXIT_OK


# parser -----------------------------------------------------------------------

def _add_channels(p):
    p.add_argument("--a-channel", type=int, default=0, help="channel of the first (XX) photon, delay = t_a - t_b (default 0)")
    p.add_argument("--b-channel", type=int, default=1, help="channel of the second (X) photon (default 1)")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qdpair", description=__doc__.splitlines()[0] if __doc__ else None,
                epilog="Exit status: 0 ok, 1 usage/config, 2 data error, 3 non-convergence. "
                       "QDPAIR_THREADS sets the default worker count.")
    p.add_argument("--version", action="version", version=f"qdpair {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate the 36 tomography streams of every iteration")
    s.add_argument("config", help="YAML run configuration")
    s.add_argument("--out", help="output directory (default: output_dir from the config)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("correlate", help="coincidence histograms for every .qtt stream in a directory")
    s.add_argument("in_dir", help="directory holding .qtt streams")
    s.add_argument("--bin", type=int, default=8, help="histogram bin width in ps (default 8)")
    s.add_argument("--window", type=int, default=25_000, help="coincidence window |delay| <= W in ps (default 25000)")
    _add_channels(s)
    s.add_argument("--out", help="output directory (default: the input directory)")
    s.set_defaults(func=cmd_correlate)

    s = sub.add_parser("tomo", help="time-resolved maximum-likelihood tomography")
    s.add_argument("in_dir", help="directory with <XX><X>.csv histograms or .qtt streams")
    s.add_argument("--config", help="YAML run configuration supplying defaults")
    s.add_argument("--tau-min", type=float, help="lower delay edge in ps (default from config, -1000)")
    s.add_argument("--tau-max", type=float, help="upper delay edge in ps (default from config, 200)")
    s.add_argument("--tau-bin", type=int, help="reconstruction bin in ps, a multiple of the histogram bin (default 8)")
    s.add_argument("--bootstrap", type=int, help="Poisson resamples per bin, 0 or >= 100 (default 0: no sigmas)")
    s.add_argument("--background", help="accidental level: auto (between pulse peaks), none, or counts per histogram bin")
    s.add_argument("--rep-period", type=float, help="pulse period in ps (default from the manifest)")
    s.add_argument("--t1", type=float, help="exciton lifetime in ps for the weighted average (default 162)")
    s.add_argument("--bin", type=int, default=8, help="histogram bin when correlating .qtt input (default 8)")
    s.add_argument("--window", type=int, default=25_000, help="window when correlating .qtt input (default 25000)")
    _add_channels(s)
    s.add_argument("--out", help="output directory (default: the input directory)")
    s.set_defaults(func=cmd_tomo)

    s = sub.add_parser("fit", help="lifetime, fine-structure or Rabi fit")
    s.add_argument("kind", choices=("lifetime", "fss", "rabi"), help="model to fit")
    s.add_argument("in_file", help="histogram CSV (lifetime) or two-column CSV: angle_deg,energy_uev (fss) or power_uw,counts (rabi)")
    s.add_argument("--jitter", type=float, default=50.0, help="two-photon jitter FWHM in ps (lifetime, default 50)")
    s.add_argument("--fit-min", type=float, help="lower delay of the lifetime fit range in ps")
    s.add_argument("--fit-max", type=float, help="upper delay of the lifetime fit range in ps")
    s.add_argument("--side", type=int, choices=(-1, 1), help="decay tail toward negative (-1) or positive (+1) delay (default: inferred)")
    s.add_argument("--out", help="output prefix; writes PREFIX.json and PREFIX_curve.csv")
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("report", help="stability report over simulated or recorded iterations")
    s.add_argument("run_dir", help="directory of iteration subdirectories, each with a manifest")
    s.add_argument("--config", help="YAML run configuration supplying defaults")
    s.add_argument("--window", type=float, help="rate window in s (default 1)")
    s.add_argument("--pairing", type=int, help="consecutive iterations per 2n point (default 2)")
    s.add_argument("--bootstrap", type=int, help="resamples for the 2n sigma (default 100)")
    s.add_argument("--t1", type=float, help="exciton lifetime in ps: width of the 2n delay window (default 162)")
    s.add_argument("--bin", type=int, default=8, help="histogram bin in ps (default 8)")
    s.add_argument("--corr-window", type=int, default=2000, help="coincidence window in ps (default 2000)")
    _add_channels(s)
    s.add_argument("--out", help="output directory (default: the run directory)")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("model-curve", help="theory 2n versus emission delay")
    s.add_argument("--config", help="YAML run configuration supplying the cascade parameters")
    s.add_argument("--fss", type=float, help="fine-structure splitting in ueV (default 2.54)")
    s.add_argument("--t1", type=float, help="exciton lifetime in ps (default 162)")
    s.add_argument("--jitter", type=float, help="two-photon jitter FWHM in ps (default 50)")
    s.add_argument("--tau-min", type=float, default=0.0, help="first delay in ps (default 0)")
    s.add_argument("--tau-max", type=float, help="last delay in ps (default 5 T1)")
    s.add_argument("--step", type=float, default=1.0, help="delay step in ps (default 1)")
    s.add_argument("--out", default="fig4b_model.csv", help="output CSV (default fig4b_model.csv)")
    s.set_defaults(func=cmd_model_curve)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"qdpair: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FitError as e:
        print(f"qdpair: error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, DatasetError, FormatError, CorrelationError, OSError, ValueError) as e:
        print(f"qdpair: error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
