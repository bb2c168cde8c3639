"""Rank the ten corruptions by the low-frequency bias of their perturbation spectra."""
import argparse

from jafr.corruptions import KINDS, corruption_bias
from jafr.data import load_dataset


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="natural:32")
    p.add_argument("--images", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()

    images = load_dataset(args.data, n=args.images).images
    bias = {kind: corruption_bias(images, kind, seed=args.seed) for kind in KINDS}
    for kind in sorted(bias, key=bias.get, reverse=True):
        print(f"{kind:16s} {bias[kind]:10.3f}")


if __name__ == "__main__":
    main()
