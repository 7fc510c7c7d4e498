"""Train rgb and rgbd networks on scenes that only depth can disambiguate."""
import argparse

from polypfcn.experiments import DepthSettings, depth_mechanism


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--iterations", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    settings = DepthSettings(iterations=args.iterations, seed=args.seed)
    for mode in ("rgb", "rgbd"):
        out = depth_mechanism(mode, settings)
        print(f"{mode:>4}: train IU {out.train_iu:.3f}  held-out IU {out.test_iu:.3f}  ({out.seconds:.0f} s)")


if __name__ == "__main__":
    main()
