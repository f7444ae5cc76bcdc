"""Command-line interface.

Configuration comes from an optional INI file plus ``--set section.key=value``
overrides; every parameter has a dotted key such as ``acquisition.t_p`` or
``unmix.tau_sp``. Unknown keys are rejected.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import formats
from .estimation import PmlParams, depth_pml, reflectivity_pml
from .experiments import (CLUSTER_HEADER, SWEEP_HEADER, THRESHOLD_HEADER, SweepSpec,
                          mc_cluster_validation, mc_depth_threshold, mse_db, rmse_m, threshold_config,
                          run_sweep, to_csv)
from .model import AcquisitionConfig, ModelError, NclTable, Scene
from .simulator import SimulationSpec, constant_scene, piecewise_scene, simulate
from .solver import SolverError
from .unmixing import UnmixParams, unmix_image

log = logging.getLogger("photon_unmix")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


class ConfigError(Exception):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _optional_float(text):
    return None if str(text).strip().lower() in ("", "none", "auto") else float(text)


# dotted key -> (parser, default)
SCHEMA = {
    "acquisition.t_r": (float, 100_000.0),
    "acquisition.t_p": (float, 270.0),
    "acquisition.pulse_sigma": (_optional_float, None),
    "acquisition.t_wind": (_optional_float, None),
    "acquisition.n_r": (int, 1000),
    "acquisition.eta": (float, 0.35),
    "acquisition.s_total": (float, 0.002 / 0.35),
    "acquisition.b_total": (float, 0.0),
    "simulation.ppp": (float, 2.0),
    "simulation.sbr": (float, math.inf),
    "scene.kind": (str, "piecewise"),
    "scene.height": (int, 128),
    "scene.width": (int, 128),
    "scene.alpha": (float, 0.5),
    "scene.depth": (float, 5.0),
    "scene.alpha_path": (str, ""),
    "scene.depth_path": (str, ""),
    "scene.z_offset": (float, 0.0),
    "scene.z_scale": (float, 1.0),
    "scene.z_max": (float, 14.5),
    "unmix.tau_fa": (float, 0.01),
    "unmix.tau_sp": (float, 0.05),
    "unmix.d_sp_max": (int, 3),
    "unmix.tie_break": (str, "random"),
    "pml.beta_alpha": (float, PmlParams.beta_alpha),
    "pml.beta_z": (float, PmlParams.beta_z),
    "pml.max_iters": (int, PmlParams.max_iters),
    "pml.rel_tol": (float, PmlParams.rel_tol),
    "pml.depth_grid_step": (float, PmlParams.depth_grid_step),
    "ncl.max_rate": (float, 100.0),
    "mc.rates": (_floats, [1.0, 2.0, 5.0, 10.0, 20.0]),
    "mc.n_cls": (_ints, [2, 3, 4, 5, 6]),
    "mc.trials": (int, 100_000),
    "mc.alpha_min": (float, 0.01),
    "mc.alpha_max": (float, 1.0),
    "mc.alpha_points": (int, 9),
    "mc.sbrs": (_floats, [0.04, 0.2, 1.0]),
    "mc.threshold_trials": (int, 1000),
    "mc.threshold_n_r": (int, 40000),
    "sweep.sbr_values": (_floats, SweepSpec().sbr_values),
    "sweep.ppp_values": (_floats, SweepSpec().ppp_values),
    "sweep.trials": (int, SweepSpec().trials),
    "sweep.beta_alpha_grid": (_floats, SweepSpec().beta_alpha_grid),
    "sweep.beta_z_grid": (_floats, SweepSpec().beta_z_grid),
    "sweep.max_iters": (int, SweepSpec().max_iters),
}


def load_config(path=None, overrides=()) -> dict:
    """Merge defaults, an INI file and ``key=value`` overrides into typed values."""
    raw = {}
    if path:
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        for section in parser.sections():
            for key, value in parser.items(section):
                raw[f"{section}.{key}"] = value
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    cfg = {k: d for k, (_, d) in SCHEMA.items()}
    for key, value in raw.items():
        try:
            cfg[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
    return cfg


def _section(cfg, name):
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def acquisition(cfg) -> AcquisitionConfig:
    return AcquisitionConfig(**_section(cfg, "acquisition"))


def unmix_params(cfg, seed) -> UnmixParams:
    return UnmixParams(seed=seed, **_section(cfg, "unmix"))


def pml_params(cfg) -> PmlParams:
    return PmlParams(**_section(cfg, "pml"))


def build_scene(cfg) -> Scene:
    s = _section(cfg, "scene")
    if s["kind"] == "piecewise":
        return piecewise_scene(s["height"], s["width"], s["z_max"])
    if s["kind"] == "constant":
        return constant_scene(s["height"], s["width"], s["alpha"], s["depth"], s["z_max"])
    if s["kind"] == "files":
        if not s["alpha_path"] or not s["depth_path"]:
            raise ConfigError("scene.kind=files needs scene.alpha_path and scene.depth_path")
        return formats.load_scene(s["alpha_path"], s["depth_path"], s["z_offset"], s["z_scale"], s["z_max"])
    raise ConfigError(f"unknown scene.kind {s['kind']!r}")


def _check_inputs(*paths):
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"input file not found: {p}")


def _check_outputs(*paths):
    for p in paths:
        if p is not None and not Path(p).resolve().parent.is_dir():
            raise ConfigError(f"output directory does not exist: {Path(p).parent}")


def _write_image(path, values, unit, lo=None, hi=None):
    """Float grid at ``path`` with a viewable PGM next to it."""
    formats.write_grid(path, values, unit)
    formats.write_pgm(Path(path).with_suffix(".pgm"), values, lo, hi)


# --------------------------------------------------------------- commands

def cmd_simulate(args, cfg):
    _check_outputs(args.out, args.labels, args.truth and args.truth + "_alpha.fgrd")
    scene = build_scene(cfg)
    spec = SimulationSpec(scene, acquisition(cfg), cfg["simulation.ppp"], cfg["simulation.sbr"], args.seed)
    det, labels = simulate(spec, threads=args.threads, with_labels=True)
    formats.write_detections(args.out, det)
    if args.labels:
        formats.write_labels(args.labels, det, labels)
    if args.truth:
        _write_image(args.truth + "_alpha.fgrd", scene.alpha, formats.UNIT_NONE, 0.0)
        _write_image(args.truth + "_depth.fgrd", scene.depth, formats.UNIT_METER, 0.0, scene.z_max)
    log.info("simulated %d detections over %dx%d pixels", det.times.size, det.width, det.height)


def cmd_ncl_table(args, cfg):
    _check_outputs(args.out)
    acq = acquisition(cfg)
    table = NclTable(cfg["unmix.tau_fa"], acq.t_wind_over_t_r)
    rates = np.arange(0.0, cfg["ncl.max_rate"] + 1e-9, table.step)
    table.fill(rates)
    formats.write_text_atomic(args.out, table.to_csv())


def cmd_unmix(args, cfg):
    _check_inputs(args.detections)
    _check_outputs(args.out, args.alpha, args.diagnostics)
    det = formats.read_detections(args.detections, acquisition(cfg))
    res = unmix_image(det, unmix_params(cfg, args.seed), pml=pml_params(cfg))
    formats.write_unmix(args.out, res)
    if args.alpha:
        _write_image(args.alpha, res.alpha, formats.UNIT_NONE, 0.0)
    if args.diagnostics:
        formats.write_text_atomic(args.diagnostics, res.diagnostics_csv())


def cmd_estimate(args, cfg):
    _check_inputs(args.result)
    _check_outputs(args.alpha, args.depth, args.trace)
    res = formats.read_unmix(args.result)
    params = pml_params(cfg)
    trace = []
    g = res.windows
    alpha = reflectivity_pml(g.k_max.reshape(g.shape), g.n_sp.reshape(g.shape), res.config, params, trace)
    depth = depth_pml(g, res.config, params, trace)
    _write_image(args.alpha, alpha, formats.UNIT_NONE, 0.0)
    _write_image(args.depth, depth, formats.UNIT_METER, 0.0, res.config.z_max)
    if args.trace:
        formats.write_text_atomic(args.trace, to_csv(("iter", "objective", "step"), trace))


def _read_image(path):
    buf = Path(path).read_bytes()
    if buf[:4] == b"FGRD":
        return formats.decode_grid(buf)[0]
    return formats.pgm_values(buf)


def cmd_evaluate(args, cfg):
    _check_inputs(args.truth_alpha, args.truth_depth, args.alpha, args.depth)
    _check_outputs(args.out)
    rows = []
    if args.truth_alpha and args.alpha:
        rows.append(("alpha", "mse_db", mse_db(_read_image(args.truth_alpha), _read_image(args.alpha))))
    if args.truth_depth and args.depth:
        rows.append(("depth", "rmse_m", rmse_m(_read_image(args.truth_depth), _read_image(args.depth))))
    if not rows:
        raise ConfigError("evaluate needs a truth/estimate pair for alpha or depth")
    formats.write_text_atomic(args.out, to_csv(("image", "metric", "value"), rows))


def cmd_mc(args, cfg):
    _check_outputs(args.out)
    if args.kind == "cluster":
        rows = mc_cluster_validation(cfg["mc.rates"], cfg["mc.n_cls"], cfg["mc.trials"], acquisition(cfg),
                                     args.seed, threads=args.threads)
        text = to_csv(CLUSTER_HEADER, rows)
    else:
        alphas = np.logspace(np.log10(cfg["mc.alpha_min"]), np.log10(cfg["mc.alpha_max"]), cfg["mc.alpha_points"])
        base = threshold_config(cfg["mc.threshold_n_r"])
        rows = mc_depth_threshold(alphas, cfg["mc.sbrs"], cfg["mc.threshold_trials"], base,
                                  seed=args.seed, depth_grid_step=cfg["pml.depth_grid_step"],
                                  threads=args.threads)
        text = to_csv(THRESHOLD_HEADER, rows)
    formats.write_text_atomic(args.out, text)


def cmd_sweep(args, cfg):
    _check_outputs(args.out)
    s = _section(cfg, "sweep")
    spec = SweepSpec(s["sbr_values"], s["ppp_values"], s["trials"], s["beta_alpha_grid"], s["beta_z_grid"],
                     args.seed, acquisition(cfg), unmix_params(cfg, args.seed), s["max_iters"])
    rows, violations = run_sweep(spec, build_scene(cfg), threads=args.threads, dump_dir=args.dump_dir)
    formats.write_text_atomic(args.out, to_csv(SWEEP_HEADER, rows))
    if violations:
        log.warning("%d trial(s) where the oracle lost to unmixing", len(violations))


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI configuration file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one dotted configuration key")
    common.add_argument("--seed", type=int, default=0, help="global random seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads; never changes results")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="photon-unmix", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", parents=[common], help="simulate detections from a scene")
    s.add_argument("--out", required=True, help="PECD output")
    s.add_argument("--labels", help="PECL label sidecar output")
    s.add_argument("--truth", metavar="PREFIX", help="write PREFIX_alpha.fgrd and PREFIX_depth.fgrd")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("ncl-table", parents=[common], help="tabulate the minimum cluster size rule")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ncl_table)

    s = sub.add_parser("unmix", parents=[common], help="censor background by windowing and superpixels")
    s.add_argument("detections")
    s.add_argument("--out", required=True, help="window-result output")
    s.add_argument("--alpha", help="reflectivity image output (FGRD)")
    s.add_argument("--diagnostics", help="per-iteration CSV output")
    s.set_defaults(func=cmd_unmix)

    s = sub.add_parser("estimate", parents=[common], help="penalized reflectivity and depth images")
    s.add_argument("result")
    s.add_argument("--alpha", required=True)
    s.add_argument("--depth", required=True)
    s.add_argument("--trace", help="solver trace CSV output")
    s.set_defaults(func=cmd_estimate)

    s = sub.add_parser("evaluate", parents=[common], help="error metrics against ground truth")
    s.add_argument("--truth-alpha")
    s.add_argument("--truth-depth")
    s.add_argument("--alpha")
    s.add_argument("--depth")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("mc", parents=[common], help="Monte Carlo studies")
    s.add_argument("--kind", choices=("cluster", "threshold"), default="cluster")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_mc)

    s = sub.add_parser("sweep", parents=[common], help="SBR and ppp sweep over all methods")
    s.add_argument("--out", required=True)
    s.add_argument("--dump-dir", help="write PGM images of every cell here")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be at least 1")
        cfg = load_config(args.config, args.set)
        try:
            acquisition(cfg)
            unmix_params(cfg, args.seed)
            pml_params(cfg)
        except ModelError as exc:
            raise ConfigError(str(exc)) from exc
        args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SolverError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ModelError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
