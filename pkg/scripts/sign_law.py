"""Train small CNNs at lambda in {-0.01, 0, 0.01} and tabulate the trained-model B_low per seed."""
import argparse
import csv
import sys

from jafr.data import load_dataset, split_dataset
from jafr.evaluator import low_quartile_mass, model_profile
from jafr.models import ModelSpec
from jafr.trainer import TrainConfig, train

LAMBDAS = (-0.01, 0.0, 0.01)


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="digits")
    p.add_argument("--n-test", type=int, default=300)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    args = p.parse_args()

    tr, te = split_dataset(load_dataset(args.data), args.n_test, seed=0)
    spec = ModelSpec(input_shape=tr.image_shape, num_classes=tr.num_classes)
    out = csv.writer(sys.stdout)
    out.writerow(["seed", "lambda", "bias_low", "low_quartile_mass"])
    ordered = 0
    for seed in range(args.seeds):
        b = []
        for lam in LAMBDAS:
            model = train(spec, tr, TrainConfig(lambda_freq=lam, seed=seed, epochs=args.epochs))[0]
            prof = model_profile(model, te)
            b.append(prof.bias_low)
            out.writerow([seed, lam, repr(prof.bias_low), repr(low_quartile_mass(prof.spectrum))])
        ordered += b[0] < b[1] < b[2]
    print(f"# ordered in {ordered}/{args.seeds} seeds", file=sys.stderr)


if __name__ == "__main__":
    main()
