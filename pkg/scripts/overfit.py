"""Overfit the mini FCN on the synthetic blob set, with and without batch norm.

Prints training-set IU and the 20-iteration running-mean loss as training
goes, then the iterations each variant needed.
"""
import argparse

from polypfcn.experiments import OverfitSettings, overfit


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--max-iterations", type=int, default=2000)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    settings = OverfitSettings(max_iterations=args.max_iterations, lr=args.lr, seed=args.seed)
    for bn in (False, True):
        out = overfit(settings, batchnorm=bn, stop_on="both", log=print)
        name = "batch norm" if bn else "plain"
        print(f"{name}: IU {out.iu:.3f}; IU >= {settings.target_iu} at {out.iu_iteration}; "
              f"loss <= {settings.loss_threshold} at {out.loss_iteration}; {out.seconds:.0f} s\n")


if __name__ == "__main__":
    main()
