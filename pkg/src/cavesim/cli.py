"""Command-line entry point.

Exit codes: 0 all pass, 1 any failure (including an unobservable
calibration), 2 only inconclusive results, 64 usage or configuration error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys

from . import __version__, io
from .errors import ConfigurationError, UnobservableError
from .geom import Pose
from .rig import FaultSet, Scene, Trajectory, cave, simulate

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_USAGE = 0, 1, 2, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_rig(path):
    return io.rig_from_dict(io.load_json(path)) if path else cave()


def _load_faults(path):
    return io.faults_from_dict(io.load_json(path)) if path else FaultSet()


class _Outputs:
    """Collects atomically written outputs for the run manifest."""

    def __init__(self, out_dir, args, command):
        self.dir = out_dir
        self.files = {}
        self.meta = {
            "command": command,
            "tool_version": __version__,
            "seed": getattr(args, "seed", None),
            "config": getattr(args, "config", None),
            "faults": getattr(args, "faults", None),
            "parameters": {k: v for k, v in vars(args).items()
                           if k not in ("func", "config", "faults", "seed", "out")},
        }

    def write(self, name, data: bytes):
        io.write_atomic(os.path.join(self.dir, name), data)
        self.files[name] = io.sha256_hex(data)

    def finish(self):
        manifest = dict(self.meta, output_dir=self.dir, files=self.files)
        io.write_atomic(os.path.join(self.dir, "manifest.json"), io.dump_json(manifest))


def cmd_pattern(args):
    from .pattern import PatternSpec, generate_pattern, simulate_capture, write_ppm

    rig = _load_rig(args.config)
    faults = _load_faults(args.faults) if args.faults else None
    spec = PatternSpec(grid_spacing=args.spacing)
    out = _Outputs(args.out, args, "pattern")
    for s in rig.screens:
        imgs = {eye: generate_pattern(s, spec, eye) for eye in ("left", "right")}
        for eye, img in imgs.items():
            out.write(f"{s.name}_{eye}.ppm", write_ppm(img))
        if faults is not None:
            seen = simulate_capture(imgs["left"], imgs["right"], faults.for_screen(s.name), s)
            for eye, img in zip(("left", "right"), seen):
                out.write(f"{s.name}_{eye}_seen.ppm", write_ppm(img))
    out.finish()
    print(f"wrote {len(out.files)} images to {args.out}")
    return EXIT_PASS


def cmd_diagnose(args):
    from .diagnostics import FAIL, INCONCLUSIVE, run_suite

    rig = _load_rig(args.config)
    faults = _load_faults(args.faults)
    faults.validate_against(rig)
    digests = (io.digest_rig(rig), io.digest_faults(faults) if args.faults else None)
    report = run_suite(rig, faults, seed=args.seed, digests=digests)
    doc = report.to_dict()
    io.validate_report(doc)
    out = _Outputs(args.out, args, "diagnose")
    out.write("report.json", io.dump_json(doc))
    out.finish()
    for f in report.findings:
        where = f"[{f.screen}]" if f.screen else ""
        print(f"{f.status:13s} {f.test_name}{where}")
        if args.format == "text":
            for e in f.evidence:
                print(f"    {e}")
    counts = report.status_counts()
    if counts[FAIL]:
        return EXIT_FAIL
    if counts[INCONCLUSIVE]:
        return EXIT_INCONCLUSIVE
    return EXIT_PASS


def _survey_config(path):
    from .survey import SurveyConfig, lattice

    if not path:
        return SurveyConfig()
    doc = io.load_json(path)
    scale = io.unit_scale(doc)
    io._check_keys(doc, ("unit", "stations", "lattice", "targets", "viewpoints", "spread",
                         "resolution", "bounds"), "stations")
    kw = {}
    if "stations" in doc:
        kw["stations"] = [io._length3({"p": p}, "p", scale, f"stations[{i}].")
                          for i, p in enumerate(doc["stations"])]
    elif "lattice" in doc:
        lat = doc["lattice"]
        try:
            kw["stations"] = lattice(*([float(v) * scale for v in lat[a]] for a in "xyz"))
        except (KeyError, TypeError, ValueError):
            raise ConfigurationError("expected {x: [...], y: [...], z: [...]}", "lattice") from None
    if "targets" in doc:
        kw["targets"] = {k: io._length3({k: v}, k, scale, "targets.")
                         for k, v in doc["targets"].items()}
    if "viewpoints" in doc:
        v = doc["viewpoints"]
        if isinstance(v, bool) or not isinstance(v, int) or v < 1:
            raise ConfigurationError("expected a positive integer", "viewpoints")
        kw["viewpoints"] = v
    if "spread" in doc:
        kw["spread"] = io._number(doc, "spread", "", 0.15, scale)
    if "resolution" in doc:
        kw["resolution"] = tuple(int(n) for n in doc["resolution"])
    if "bounds" in doc:
        b = doc["bounds"]
        kw["bounds"] = (io._length3(b, "min", scale, "bounds."), io._length3(b, "max", scale, "bounds."))
    return SurveyConfig(**kw)


def cmd_calibrate(args):
    from .survey import calibrate

    rig = _load_rig(args.config)
    faults = _load_faults(args.faults)
    cfg = _survey_config(args.stations)
    try:
        grid, results, summary = calibrate(rig, faults, cfg, seed=args.seed)
    except UnobservableError as exc:
        print(f"calibration failed: station geometry leaves direction "
              f"{list(exc.direction)} unobservable", file=sys.stderr)
        return EXIT_FAIL
    except ValueError as exc:
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    summary = dict(summary, seed=args.seed, stations_detail=[
        {"station": r.station.tolist(), "position": r.position.tolist(),
         "offset": r.solve.offset.tolist(), "residual": r.solve.residual,
         "observations": r.n_observations} for r in results])
    out = _Outputs(args.out, args, "calibrate")
    out.write("correction_grid.json", io.dump_json(grid.to_dict()))
    out.write("calibration_summary.json", io.dump_json(summary))
    out.finish()
    print(f"fixed-marker error before {summary['fixed_marker_error_before_m']:.6f} m, "
          f"after {summary['fixed_marker_error_after_m']:.6f} m")
    return EXIT_PASS


def cmd_simulate(args):
    rig = _load_rig(args.config)
    faults = _load_faults(args.faults)
    faults.validate_against(rig)
    scene = io.scene_from_dict(io.load_json(args.scene)) if args.scene else Scene(wand_marker=True)
    if args.trajectory:
        traj = io.trajectory_from_dict(io.load_json(args.trajectory))
    else:
        traj = Trajectory.static(Pose(rig.interior_point))
    duration = args.duration if args.duration is not None else traj.duration
    if not duration > 0:
        raise ConfigurationError("must be positive", "duration")
    frames = simulate(rig, faults, scene, traj, duration, seed=args.seed)
    lines = [json.dumps(dict(fr.to_dict(), seed=args.seed), sort_keys=True,
                        separators=(",", ":")) for fr in frames]
    out = _Outputs(args.out, args, "simulate")
    out.write("frames.jsonl", ("\n".join(lines) + "\n").encode("utf-8"))
    out.finish()
    print(f"wrote {len(frames)} frames to {args.out}")
    return EXIT_PASS


def build_parser():
    p = _Parser(prog="cavesim", description="Projection VR display simulator and diagnostics.")
    p.add_argument("--version", action="version", version=f"cavesim {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, faults=True):
        sp.add_argument("--config", help="rig JSON (default: 3 m four-screen CAVE)")
        if faults:
            sp.add_argument("--faults", help="fault JSON (default: no faults)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("pattern", help="write test-pattern PPMs per screen and eye")
    common(sp)
    sp.add_argument("--spacing", type=float, default=0.1524, help="grid spacing in metres")
    sp.add_argument("--format", choices=["ppm"], default="ppm")
    sp.set_defaults(func=cmd_pattern)

    sp = sub.add_parser("diagnose", help="run the diagnostic suite")
    common(sp)
    sp.add_argument("--format", choices=["json", "text"], default="json",
                    help="console detail; the report file is always JSON")
    sp.set_defaults(func=cmd_diagnose)

    sp = sub.add_parser("calibrate", help="line-of-sight survey and correction table")
    common(sp)
    sp.add_argument("--stations", help="survey JSON (default: 3x3x3 lattice)")
    sp.add_argument("--format", choices=["json"], default="json")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("simulate", help="dump displayed frames as JSON lines")
    common(sp)
    sp.add_argument("--scene", help="scene JSON (default: wand marker only)")
    sp.add_argument("--trajectory", help="trajectory JSON (default: static at rig centre)")
    sp.add_argument("--duration", type=float, help="seconds (default: trajectory duration)")
    sp.add_argument("--format", choices=["jsonl"], default="jsonl")
    sp.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
