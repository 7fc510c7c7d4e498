"""Render analytic surfaces, recover them with the shape-from-shading solver, report the error."""
import argparse
import time

import numpy as np

from polypfcn.sfs import CameraModel, SfSConfig, lax_friedrichs_solve, render_lambertian
from polypfcn.surfaces import SURFACES, surface


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--focal", type=float, default=64.0)
    p.add_argument("--boundary", default="outflow", choices=["outflow", "fixed-value"])
    p.add_argument("--border", type=int, default=4, help="pixels ignored at each edge when scoring")
    args = p.parse_args()
    cam = CameraModel(f=args.focal)
    inner = (slice(args.border, -args.border),) * 2
    print(f"{'surface':<11} {'conv':>4} {'groups':>6} {'residual':>9} {'rmse/range':>10} {'max rel':>8} {'s':>5}")
    for name in SURFACES:
        depth, grad = surface(name, cam)
        image = render_lambertian(depth, cam, rho=1.0, grad_v=grad)
        t0 = time.perf_counter()
        field = lax_friedrichs_solve(image, cam, SfSConfig(albedo=1.0, boundary=args.boundary))
        dt = time.perf_counter() - t0
        d, r = depth[inner], field.depth[inner]
        span = d.max() - d.min()
        rmse = np.sqrt(np.mean((r - d) ** 2)) / span if span > 0 else float("nan")
        rel = np.abs(r / d - 1).max()
        print(f"{name:<11} {int(field.converged):>4} {field.sweeps:>6} {field.residual:>9.2e} "
              f"{rmse:>10.4f} {rel:>8.4f} {dt:>5.1f}")


if __name__ == "__main__":
    main()
