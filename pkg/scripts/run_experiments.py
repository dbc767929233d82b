"""Run the full experiment battery in dependency order.

bias-report and landscape read checkpoints written by compare-losses, so the
order below is load-bearing. Each stage shells through the normal CLI entry
point; pass --assert to turn the recorded directional checks into hard exits.
"""

import argparse
import sys
from pathlib import Path

from ctrlab.cli import main as ctrlab_main

STAGES = [
    ("gradcheck", "configs/gradcheck.yaml"),
    ("sweep-beta", "configs/sweep_beta.yaml"),
    ("sweep-alpha", "configs/sweep_alpha.yaml"),
    ("compare-losses", "configs/compare_losses.yaml"),
    ("focal", "configs/focal.yaml"),
    ("negsample", "configs/negsample.yaml"),
    ("bias-report", "configs/bias_report.yaml"),
    ("landscape", "configs/landscape.yaml"),
]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--only", nargs="*", metavar="CMD",
                        help="subset of stages to run (default: all)")
    parser.add_argument("--seeds", default=None, help="override seeds, e.g. 1,2,3")
    parser.add_argument("--assert", dest="assert_checks", action="store_true",
                        help="fail (exit 2) when a directional check fails")
    args = parser.parse_args()

    root = Path(__file__).resolve().parent.parent
    worst = 0
    for name, config in STAGES:
        if args.only and name not in args.only:
            continue
        argv = [name, "--config", str(root / config)]
        if args.seeds:
            argv += ["--seeds", args.seeds]
        if args.assert_checks:
            argv.append("--assert")
        print(f"== {name} ({config})", flush=True)
        code = ctrlab_main(argv)
        print(f"== {name} exit {code}", flush=True)
        worst = max(worst, code)
        if code == 1:
            break  # hard error; later stages would inherit the mess
    return worst


if __name__ == "__main__":
    sys.exit(main())
