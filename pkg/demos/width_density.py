"""Width density from the generating function against GUE Monte Carlo widths.

Writes ``width_density.svg`` in the current directory and prints the
Kolmogorov distance of the two width distributions.

    python3 demos/width_density.py [--samples 1000] [--gamma 0.5]
"""

import argparse

import numpy as np

from sigmaband.acceptance import (WIDTH_GRID, kolmogorov_distance, mc_widths,
                                  width_cdf_from_density)
from sigmaband.ensemble import semicircle_density
from sigmaband.sigma_model import density_from_z
from sigmaband.svg import svg_plot


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=1000)
    ap.add_argument("--gamma", type=float, default=0.5)
    ap.add_argument("--N", type=int, default=200)
    ap.add_argument("--seed", type=int, default=12)
    args = ap.parse_args()

    y = WIDTH_GRID[WIDTH_GRID <= 8.0]
    rho = np.array([pt.rho for pt in density_from_z(0.0, y, (args.gamma,))])
    yy, cdf = width_cdf_from_density(y, rho)
    widths, _ = mc_widths(args.N, args.gamma, args.samples, args.seed)
    ks = kolmogorov_distance(widths, yy, cdf)
    edges = np.linspace(0.0, 8.0, 33)
    counts, _ = np.histogram(widths, bins=edges)
    hist = counts / len(widths) / np.diff(edges)
    svg_plot("width_density.svg",
             [{"x": y, "y": rho / semicircle_density(0.0), "label": "from Z"},
              {"x": edges, "y": hist, "kind": "step", "label": "GUE Monte Carlo"}],
             title=f"widths, gamma={args.gamma}", xlabel="y = N Im z", ylabel="density")
    print(f"{len(widths)} widths, KS distance {ks:.4f}; plot in width_density.svg")


if __name__ == "__main__":
    main()
