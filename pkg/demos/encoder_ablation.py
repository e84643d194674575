"""Add encoder groups one at a time and compare final losses.

Writes one run directory per cell plus summary.json / summary.txt under
runs/encoder_ablation.
"""

import sys

from moec_hga.cli.config import loads_config
from moec_hga.cli.runner import format_table, run_ablation_matrix

ORDER = ["siglip", "convnext", "clip", "dinov2"]


def main(out_dir="runs/encoder_ablation", steps=200):
    base = loads_config("").with_overrides({"token_scale": 20, "steps": steps, "out_dir": out_dir})
    subsets = [ORDER[:i] for i in range(1, len(ORDER) + 1)]
    rows = run_ablation_matrix(base, {"encoders": subsets})
    print(format_table(rows))


if __name__ == "__main__":
    main(*sys.argv[1:2])
