"""Command line: ``tiltedwalk run CONFIG``, ``tiltedwalk describe TAG``, ``tiltedwalk list``.

Configs are INI files::

    [experiment]
    tag = eigen-convergence
    seed = 1
    output = eigen            ; relative to $TILTEDWALK_OUTPUT_ROOT (default: cwd)
    dump_paths = false        ; eta-good only: also write the sampled bridge paths

    [kernel]
    kind = lazy-nn
    a = 0.25

    [potential]
    kind = linear

    [parameters]
    lambdas = 1e-2, 1e-3, 1e-4, 1e-5

    [tolerances]
    rel_err = 0.05

Exit status: 0 all checks passed, 1 a tolerance failed, 2 bad config, 3 crash.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import difflib
import hashlib
import io
import json
import math
import os
import sys
import traceback
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from . import __version__
from . import harness
from .chain import save_path
from .model import make_kernel, make_potential, solve_scale

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_CRASH = 0, 1, 2, 3
OUTPUT_ROOT_ENV = "TILTEDWALK_OUTPUT_ROOT"


class ConfigError(ValueError):
    pass


# --- field parsers --------------------------------------------------------------

def _float(text):
    return float(text)


def _int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _floats(text):
    return [float(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _ints(text):
    return [_int(t) for t in text.replace(";", ",").split(",") if t.strip()]


def _pairs(text):
    out = []
    for item in text.replace(";", ",").split(","):
        if item.strip():
            a, _, b = item.strip().partition(":")
            out.append((_int(a), _int(b)))
    return out


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _words(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


@dataclass
class Field:
    parse: Callable
    required: bool = True
    default: object = None


@dataclass
class Experiment:
    tag: str
    harness_op: str
    runner: Callable
    claim: str
    fields: dict
    tolerances: dict
    metrics: tuple
    uses_potential: bool = True


def _run_eigen(kernel, potential, p, seed, tol, dump=False):
    return harness.eigen_convergence(kernel, potential, p["lambdas"], n_grid=p["n_grid"],
                                     M_override=p["M"], tolerances=tol)


def _run_fdd(kernel, potential, p, seed, tol, dump=False):
    return harness.fdd_compare(kernel, potential, p["lambdas"], p["times"], p["n_samples"], seed,
                               dt=p["dt"], n_bins=p["n_bins"], r_max=p["r_max"],
                               sources=p["sources"], bridge_N_factor=p["bridge_N_factor"],
                               binning=p["binning"], tolerances=tol)


def _run_tightness(kernel, potential, p, seed, tol, dump=False):
    return harness.tightness_probe(kernel, potential, p["lambdas"], p["eps"], p["deltas"],
                                   p["n_samples"], seed,
                                   check_point=(p["check_eps"], p["check_delta"]),
                                   tolerances=tol)


def _run_tv(kernel, potential, p, seed, tol, dump=False):
    return harness.tv_window(kernel, potential, p["lambda"], p["T"], p["N_grid"], p["uv_pairs"],
                             p["n_samples"], seed, C=p["C"], n_bins=p["n_bins"],
                             r_max=p["r_max"], tolerances=tol)


def _run_stay(kernel, potential, p, seed, tol, dump=False):
    return harness.stay_positive_scaling(kernel, p["n_grid"], p["x"], p["y"], p["eta"],
                                         m_fracs=p["m_fracs"], tolerances=tol)


def _run_meeting(kernel, potential, p, seed, tol, dump=False):
    x, y, z, w = p["endpoints"]
    return harness.meeting_probability(kernel, p["n_grid"], x, y, z, w, p["eta"],
                                       p["n_samples"], seed, alpha=p["alpha"], tolerances=tol)


def _run_eta(kernel, potential, p, seed, tol, dump=False):
    seeds = harness.substream_seeds(seed, p["replicas"])
    return harness.eta_good_experiment(kernel, potential, p["lambda"], p["N_factor"], p["eta"],
                                       seeds, uv=tuple(p["uv"]), tolerances=tol,
                                       keep_paths=dump)


def _fdd_metrics():
    names = ["fs_ks_t0", "fs_escapes"]
    for s in ("chain", "bridge"):
        names += [f"{s}_ks_t0_smallest", f"{s}_pair_tv_smallest", f"{s}_ks_improves",
                  f"{s}_tv_improves"]
    return tuple(names)


CATALOGUE: dict[str, Experiment] = {
    "eigen-convergence": Experiment(
        "eigen-convergence", "eigen_convergence", _run_eigen,
        "rescaled principal eigenvalue, cell-projected ground state and c/h approach "
        "their continuum counterparts as lambda decreases",
        {"lambdas": Field(_floats), "n_grid": Field(_int, False, 8000),
         "M": Field(_int, False, None)},
        {"rel_err": 0.05, "phi_dist": 0.05, "c_over_h": 0.05},
        ("e0_continuum", "rel_err_smallest", "phi_dist_smallest", "c_over_h_smallest",
         "err_decreasing", "phi_dist_decreasing")),
    "fdd": Experiment(
        "fdd", "fdd_compare", _run_fdd,
        "one- and two-time laws of the rescaled stationary chain (or of a long bridge) "
        "approach those of the Ferrari-Spohn diffusion",
        {"lambdas": Field(_floats), "times": Field(_floats), "n_samples": Field(_int),
         "dt": Field(_float, False, 1e-4), "n_bins": Field(_int, False, 30),
         "r_max": Field(_float, False, 4.0), "sources": Field(_words, False, ("chain",)),
         "bridge_N_factor": Field(_float, False, 8.0),
         "binning": Field(str, False, "fixed")},
        {"ks": 0.02, "tv": 0.08},
        _fdd_metrics()),
    "tightness": Experiment(
        "tightness", "tightness_probe", _run_tightness,
        "short-time oscillation probabilities of the rescaled chain are bounded by a "
        "multiple of delta uniformly in lambda",
        {"lambdas": Field(_floats), "eps": Field(_floats), "deltas": Field(_floats),
         "n_samples": Field(_int), "check_eps": Field(_float, False, 0.5),
         "check_delta": Field(_float, False, 0.05)},
        {"uniformity": 3.0},
        ("monotone_in_delta", "rate_spread", "max_estimate_eps_ge_10")),
    "tv-window": Experiment(
        "tv-window", "tv_window", _run_tv,
        "the window law of a long tilted bridge approaches the stationary chain law "
        "exponentially in N/H^2, uniformly in boundary heights up to C*H",
        {"lambda": Field(_float), "T": Field(_float), "N_grid": Field(_ints),
         "uv_pairs": Field(_pairs), "n_samples": Field(_int), "C": Field(_float, False, 2.0),
         "n_bins": Field(_int, False, 20), "r_max": Field(_float, False, 4.0)},
        {"refinement": 0.01, "uniformity": 0.05},
        ("tv_decreases", "coarse_minus_fine_max", "uv_uniformity_tv", "decay_rate")),
    "stay-positive": Experiment(
        "stay-positive", "stay_positive_scaling", _run_stay,
        "probability that a walk bridge stays in a tube above zero scales like "
        "x*y/n^(3/2)",
        {"n_grid": Field(_ints), "x": Field(_int), "y": Field(_int), "eta": Field(_float),
         "m_fracs": Field(_floats, False, [1.0, 1 / 3])},
        {"band": 2.0},
        ("ratio_band", "c_lower", "c_upper", "cap_effect_max", "cap_effect_min"),
        uses_potential=False),
    "meeting": Experiment(
        "meeting", "meeting_probability", _run_meeting,
        "two independent confined bridges meet with probability bounded below; the "
        "intersection count has first moment of order sqrt(n) and second of order n",
        {"n_grid": Field(_ints), "endpoints": Field(_ints), "eta": Field(_float),
         "n_samples": Field(_int), "alpha": Field(_float, False, 0.5)},
        {"band": 2.0},
        ("EN_over_sqrt_n_min", "EN_band", "EN2_over_n_max", "EN2_band", "meet_minus_pz_min",
         "exact_vs_mc_z_max"),
        uses_potential=False),
    "eta-good": Experiment(
        "eta-good", "eta_good_experiment", _run_eta,
        "a positive fraction of H^2-blocks is eta-good for two independent tilted bridges",
        {"lambda": Field(_float), "N_factor": Field(_float), "eta": Field(_float),
         "replicas": Field(_int), "uv": Field(_ints, False, [1, 1])},
        {"rho": 0.0},
        ("rho_min", "rho_max")),
}


def declared_metrics(entry: Experiment, params: dict) -> list[str]:
    """Metric names a run of ``entry`` with ``params`` must report."""
    if entry.tag != "fdd":
        return list(entry.metrics)
    sources = params.get("sources") or ()
    return [m for m in entry.metrics
            if m.startswith("fs_") or any(m.startswith(f"{s}_") for s in sources)]


# --- config ------------------------------------------------------------------------

@dataclass
class RunConfig:
    tag: str
    seed: int
    output: Path
    kernel: object
    potential: object
    parameters: dict
    tolerances: dict
    source_text: str
    dump_paths: bool = False


def _suggest(tag):
    close = difflib.get_close_matches(tag, CATALOGUE, n=1)
    hint = f" (did you mean {close[0]!r}?)" if close else ""
    return f"unknown experiment {tag!r}{hint}; valid tags: {', '.join(CATALOGUE)}"


def _section_dict(cp, name):
    return dict(cp[name]) if cp.has_section(name) else {}


def _kernel_from(section):
    if not section:
        raise ConfigError("[kernel] section is required")
    spec = dict(section)
    kind = spec.get("kind")
    if kind == "lazy-nn":
        return make_kernel({"kind": kind, "a": float(spec.get("a", 0.25))})
    if kind == "truncated-geometric":
        d = {"kind": kind, "rho": float(spec["rho"])}
        if "R" in spec:
            d["R"] = int(spec["R"])
        return make_kernel(d)
    if kind in ("symmetric", "weights", "custom"):
        table = {}
        for item in spec.get("weights", "").split(","):
            if item.strip():
                z, _, w = item.partition(":")
                table[int(z)] = float(w)
        return make_kernel({"kind": kind, "weights": table})
    raise ConfigError(f"[kernel] kind: unknown kernel {kind!r}")


def _potential_from(section):
    kind = section.get("kind", "")
    if kind == "linear":
        return make_potential("linear")
    if kind == "power":
        return make_potential({"kind": "power", "alpha": float(section["alpha"])})
    raise ConfigError(f"[potential] kind: unknown or missing potential {kind!r}")


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str  # field names are case-sensitive (T, N_grid, C)
    try:
        cp.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    exp = _section_dict(cp, "experiment")
    tag = exp.get("tag")
    if not tag:
        raise ConfigError(f"{path}: [experiment] tag is required")
    if tag not in CATALOGUE:
        raise ConfigError(f"{path}: [experiment] tag: {_suggest(tag)}")
    if "seed" not in exp:
        raise ConfigError(f"{path}: [experiment] seed is required (no default seed)")
    try:
        seed = _int(exp["seed"])
    except ValueError as exc:
        raise ConfigError(f"{path}: [experiment] seed: {exc}") from None
    entry = CATALOGUE[tag]
    try:
        kernel = _kernel_from(_section_dict(cp, "kernel"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"{path}: [kernel]: {exc}") from None
    potential = None
    if entry.uses_potential:
        try:
            potential = _potential_from(_section_dict(cp, "potential"))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: [potential]: {exc}") from None
    raw = _section_dict(cp, "parameters")
    unknown = sorted(set(raw) - set(entry.fields))
    if unknown:
        raise ConfigError(f"{path}: [parameters] unknown field(s) {unknown} for {tag}; "
                          f"expected {sorted(entry.fields)}")
    params = {}
    for name, fld in entry.fields.items():
        if name not in raw:
            if fld.required:
                raise ConfigError(f"{path}: [parameters] {name} is required for {tag}")
            params[name] = fld.default
            continue
        try:
            params[name] = fld.parse(raw[name])
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path}: [parameters] {name}: {exc}") from None
    for key in ("lambda",):
        if key in params and not params[key] > 0:
            raise ConfigError(f"{path}: [parameters] {key} must be positive")
    if "lambdas" in params and not all(v > 0 for v in params["lambdas"]):
        raise ConfigError(f"{path}: [parameters] lambdas must be positive")
    tolerances = dict(entry.tolerances)
    for name, value in _section_dict(cp, "tolerances").items():
        if name not in entry.tolerances:
            raise ConfigError(f"{path}: [tolerances] unknown tolerance {name!r} for {tag}; "
                              f"expected {sorted(entry.tolerances)}")
        try:
            tolerances[name] = float(value)
        except ValueError as exc:
            raise ConfigError(f"{path}: [tolerances] {name}: {exc}") from None
    try:
        dump = _bool(exp.get("dump_paths", "false"))
    except ValueError as exc:
        raise ConfigError(f"{path}: [experiment] dump_paths: {exc}") from None
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
    output = root / exp.get("output", tag)
    return RunConfig(tag=tag, seed=seed, output=output, kernel=kernel, potential=potential,
                     parameters=params, tolerances=tolerances, source_text=text,
                     dump_paths=dump)


# --- output --------------------------------------------------------------------------

def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value) if math.isfinite(value) else ("nan" if math.isnan(value) else
                                                         ("inf" if value > 0 else "-inf"))
    if hasattr(value, "item"):
        return _fmt(value.item())
    return str(value)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "item"):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return _fmt(obj)
    return obj


def write_report(report: harness.ExperimentReport, cfg: RunConfig) -> list[Path]:
    cfg.output.mkdir(parents=True, exist_ok=True)
    written = []
    for name, (columns, rows) in sorted(report.tables.items()):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
        path = cfg.output / f"{name}.csv"
        _atomic_write(path, buf.getvalue())
        written.append(path)
    if cfg.dump_paths and report.paths:
        scale = solve_scale(cfg.potential, cfg.parameters["lambda"])
        path_dir = cfg.output / "paths"
        path_dir.mkdir(exist_ok=True)
        for name, lattice_path in sorted(report.paths.items()):
            target = path_dir / f"{name}.tsv"
            tmp = target.with_name(target.name + ".tmp")
            save_path(lattice_path, scale, tmp)
            os.replace(tmp, target)
            written.append(target)
    manifest = report.manifest()
    manifest["config_sha256"] = hashlib.sha256(cfg.source_text.encode()).hexdigest()
    manifest["tolerances"] = cfg.tolerances
    manifest["outputs"] = sorted(str(p.relative_to(cfg.output)) for p in written)
    path = cfg.output / "manifest.json"
    _atomic_write(path, json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")
    written.append(path)
    return written


def run_config(path, out=None) -> int:
    out = out or sys.stdout
    try:
        cfg = load_config(path)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    entry = CATALOGUE[cfg.tag]
    try:
        report = entry.runner(cfg.kernel, cfg.potential, cfg.parameters, cfg.seed,
                              cfg.tolerances, dump=cfg.dump_paths)
    except ValueError as exc:
        # harness preconditions (sample floors, N > T*H^2, ...) are parameter errors
        print(f"config error: {path}: [parameters] {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception:
        traceback.print_exc()
        return EXIT_CRASH
    try:
        report.validate(declared_metrics(entry, cfg.parameters))
        write_report(report, cfg)
    except Exception:
        traceback.print_exc()
        return EXIT_CRASH
    for c in report.checks:
        status = "PASS" if c.passed else "FAIL"
        print(f"{status} {cfg.tag}:{c.name} = {c.value:.6g} ({c.op} {c.threshold:g})", file=out)
    print(f"wrote {cfg.output}", file=out)
    return EXIT_OK if report.passed else EXIT_FAIL


def describe(tag: str, out=None) -> int:
    out = out or sys.stdout
    if tag not in CATALOGUE:
        print(_suggest(tag), file=sys.stderr)
        return EXIT_CONFIG
    e = CATALOGUE[tag]
    print(f"{e.tag}: {e.claim}", file=out)
    print(f"harness operation: {e.harness_op}", file=out)
    print("parameters:", file=out)
    for name, fld in e.fields.items():
        req = "required" if fld.required else f"default {fld.default!r}"
        print(f"  {name:16s} {req}", file=out)
    print("tolerances:", file=out)
    for name, value in e.tolerances.items():
        print(f"  {name:16s} {value:g}", file=out)
    print("metrics: " + ", ".join(e.metrics), file=out)
    return EXIT_OK


def list_experiments(out=None) -> int:
    out = out or sys.stdout
    for e in CATALOGUE.values():
        print(f"{e.tag:18s} {e.claim}", file=out)
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tiltedwalk", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="verb", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config", nargs="?")
    p_run.add_argument("--list", action="store_true", help="print the experiment catalogue")
    p_desc = sub.add_parser("describe", help="explain an experiment and its pass criteria")
    p_desc.add_argument("tag")
    sub.add_parser("list", help="print the experiment catalogue")
    args = parser.parse_args(argv)
    if args.verb == "list" or (args.verb == "run" and args.list):
        return list_experiments()
    if args.verb == "describe":
        return describe(args.tag)
    if not args.config:
        parser.error("run needs a config path (or --list)")
    return run_config(args.config)


if __name__ == "__main__":
    sys.exit(main())
