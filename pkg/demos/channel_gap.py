"""Correlation across a land strip as the gap through it closes.

Builds the 10 x 10 water square with a horizontal land strip, then prints the
correlation between two probes on either side of the strip for the
stationary, Barrier and Neumann models. The stationary model ignores the land,
so its value does not change with the gap.

Run with ``python demos/channel_gap.py [out_dir]``; with an output directory,
correlation heatmaps (CSV and PGM) are written there as well.
"""
import sys

from barrierfield.experiments import ChannelConfig, run_channel


def main(out_dir=None):
    cfg = ChannelConfig()
    rows = run_channel(cfg, out_dir, heatmaps=out_dir is not None)
    print(f"range {cfg.range}, probes {cfg.probes}, mesh spacing {cfg.spacing}")
    print(f"{'model':5s} {'gap':>5s} {'across':>8s} {'same side':>10s}")
    for r in rows:
        gap = "-" if r["gap_width"] != r["gap_width"] else f"{r['gap_width']:.1f}"
        print(f"{r['model']:5s} {gap:>5s} {r['cross_corr']:8.4f} {r['same_side_corr']:10.4f}")


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else None)
