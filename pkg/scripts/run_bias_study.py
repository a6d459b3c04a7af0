#!/usr/bin/env python3
"""Sample-size bias experiment (three-year design, l = 20).

Simulates and refits many datasets per sample size and prints per-parameter
relative-bias summaries.  The full study uses 100 replicates at
n = 100, 200, 400; the default here is a lighter 20 replicates, so bump
--replicates for the complete run.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ctrecap.cli import main as cli_main


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seed", type=int, default=808)
    parser.add_argument("--replicates", type=int, default=20)
    parser.add_argument("--n", default="100,200,400")
    parser.add_argument("--threads", type=int, default=2)
    parser.add_argument("--out", default="bias_study_out")
    args = parser.parse_args()

    config = Path(__file__).resolve().parents[1] / "configs" / "sim_3yr_recovery.toml"
    return cli_main([
        "--seed", str(args.seed), "--threads", str(args.threads),
        "bias-study", "--config", str(config),
        "--replicates", str(args.replicates), "--n", args.n,
        "--l", "20", "--out", args.out,
    ])


if __name__ == "__main__":
    sys.exit(main())
