"""Convergence of the three routes to the generating function at one parameter point.

Prints the ensemble Monte Carlo estimate for growing band width W next to the
single-site sigma-model value, then the transfer-operator chain for growing
coupling next to the matching single-supermatrix value.

    python3 demos/convergence_trends.py [--samples 4000]
"""

import argparse

from sigmaband.ensemble import BlockBandModel, SpectralParams, mc_generating_function
from sigmaband.sigma_model import gue_limit_z, integrate_sigma_model
from sigmaband.transfer import MIRROR_SIGNS, RotatedParams, z_via_transfer


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--samples", type=int, default=4000)
    ap.add_argument("--seed", type=int, default=11)
    args = ap.parse_args()

    p = SpectralParams(E=0.0, x1=0.0, y1=1.0, x2=0.0, y2=2.0, kappa=1.0, gammas=(0.5,))
    z_sigma = integrate_sigma_model(p, 1, 1.0)
    print(f"sigma model (n=1): {z_sigma.value.real:.5f} +- {z_sigma.error:.1e}")
    for W in (16, 32, 64):
        est = mc_generating_function(BlockBandModel(1, W), p, args.samples, seed=args.seed)
        gap = abs(est.estimate - z_sigma.value)
        print(f"  MC W={W:4d}: {est.estimate.real:.5f} +- {est.se:.4f}   gap {gap:.4f}")

    ref = gue_limit_z(p, deformation_signs=MIRROR_SIGNS).value
    rp = RotatedParams.from_spectral(p)
    print(f"single supermatrix (transfer orientation): {ref.real:.5f}")
    for bt in (1e2, 1e3):
        z = z_via_transfer(rp, p.E, p.gammas, 4, bt)
        print(f"  transfer n=4 beta~={bt:g}: {z.real:.5f}   gap {abs(z - ref):.5f}")


if __name__ == "__main__":
    main()
