#!/usr/bin/env python3
"""Inject each canonical fault alone, run the full suite, and print the
status of every test as a matrix (F fail, . pass, ? inconclusive)."""
import argparse
import json
import time

from cavesim.catalog import CANONICAL_FAULTS
from cavesim.diagnostics import SUITE_ORDER, run_suite
from cavesim.rig import FaultSet, cave

MARK = {"fail": "F", "pass": ".", "inconclusive": "?"}
SHORT = {
    "test_parallax_orientation": "parallax", "test_shrink": "shrink", "test_horizon": "horizon",
    "test_line_bend": "bend", "test_fixed_marker": "marker", "test_stereo_phase": "stereo",
    "locate_projection_plane": "locate", "estimate_latency_phase": "latency",
    "test_wand_attachment": "wand", "estimate_jitter": "jitter", "test_edge_match": "edges",
}


def row_marks(report):
    marks = {}
    for f in report.findings:
        marks[f.test_name] = marks.get(f.test_name, "") + MARK[f.status]
    return marks


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--json", help="also write the matrix to this file")
    args = ap.parse_args()

    rig = cave()
    cases = [("none", FaultSet(), None)] + [(c.name, c.make(), c) for c in CANONICAL_FAULTS]
    widths = [max(len(SHORT[t]), 4) for t in SUITE_ORDER]
    print(f"{'fault':16s} " + " ".join(f"{SHORT[t]:>{w}s}" for t, w in zip(SUITE_ORDER, widths))
          + "  estimate")
    out = {}
    t0 = time.perf_counter()
    for name, faults, cf in cases:
        report = run_suite(rig, faults, seed=args.seed)
        marks = row_marks(report)
        est = ""
        if cf is not None:
            d = next(f for f in report.findings if f.test_name == cf.designated
                     and (cf.screen is None or f.screen == cf.screen))
            v = cf.magnitude(d)
            est = f"{cf.estimate}={v:.5g} (want {cf.expected:g} +/- {cf.tolerance:g})"
        print(f"{name:16s} " + " ".join(f"{marks.get(t, '-'):>{w}s}"
                                        for t, w in zip(SUITE_ORDER, widths)) + f"  {est}")
        out[name] = {"marks": marks, "failed": report.failed_tests(), "estimate": est}
    print(f"\n{len(cases)} suites in {time.perf_counter() - t0:.1f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(out, fh, indent=2)


if __name__ == "__main__":
    main()
