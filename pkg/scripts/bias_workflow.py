"""Train the loss-comparison models, then audit their calibration bias.

Convenience wrapper for the two-step flow: compare-losses writes per-kind
checkpoints, bias-report scores the BCE and combined_pair ones over pCTR
buckets on the test split.
"""

import argparse
import sys
from pathlib import Path

from ctrlab.cli import main as ctrlab_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default=None, help="override seeds, e.g. 1,2,3")
    parser.add_argument("--assert", dest="assert_checks", action="store_true")
    parser.add_argument("--skip-train", action="store_true",
                        help="reuse existing checkpoints under runs/compare_losses")
    args = parser.parse_args()

    root = Path(__file__).resolve().parent.parent
    extra = []
    if args.seeds:
        extra += ["--seeds", args.seeds]
    if args.assert_checks:
        extra.append("--assert")

    if not args.skip_train:
        code = ctrlab_main(["compare-losses", "--config",
                            str(root / "configs/compare_losses.yaml")] + extra)
        if code:
            return code
    return ctrlab_main(["bias-report", "--config",
                        str(root / "configs/bias_report.yaml")] + extra)


if __name__ == "__main__":
    sys.exit(main())
