#!/usr/bin/env python3
"""Compare the wagging (phase-opposition) latency estimate with the
cross-correlation lag over a range of injected latencies."""
import argparse

from cavesim.diagnostics import estimate_latency_phase
from cavesim.rig import FaultSet, cave


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("latencies", nargs="*", type=float, default=[0.025, 0.05, 0.1, 0.2, 0.4],
                    help="injected latencies in seconds")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    rig = cave()
    frame = 1.0 / rig.frame_rate_hz
    print(f"{'L (ms)':>8s} {'f* (Hz)':>9s} {'phase (ms)':>11s} {'xcorr (ms)':>11s} "
          f"{'err %':>7s} {'agree':>6s}  status")
    for lat in args.latencies:
        f = estimate_latency_phase(rig, FaultSet(latency_s=lat), seed=args.seed)
        est = f.value("latency") if "latency" in f.estimates else float("nan")
        xc = f.value("latency_xcorr") if "latency_xcorr" in f.estimates else float("nan")
        fstar = f.value("antiphase_frequency") if "antiphase_frequency" in f.estimates else float("nan")
        err = 100 * (est - lat) / lat if lat else float("nan")
        agree = abs(est - xc) <= frame
        print(f"{lat * 1000:8.1f} {fstar:9.4f} {est * 1000:11.3f} {xc * 1000:11.3f} "
              f"{err:7.2f} {str(agree):>6s}  {f.status}")


if __name__ == "__main__":
    main()
