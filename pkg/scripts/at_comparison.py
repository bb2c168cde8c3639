"""FGSM adversarial training with and without frequency regularization, scored by PGD accuracy."""
import argparse

from jafr.attacks import AttackConfig
from jafr.data import load_dataset, split_dataset
from jafr.evaluator import accuracy, adversarial_accuracy
from jafr.models import ModelSpec
from jafr.trainer import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data", default="digits")
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--lam", type=float, default=0.001)
    p.add_argument("--eps", type=float, default=8 / 255)
    p.add_argument("--workers", type=int, default=1)
    args = p.parse_args()

    tr, te = split_dataset(load_dataset(args.data), args.n_test, seed=0)
    spec = ModelSpec(input_shape=tr.image_shape, num_classes=tr.num_classes)
    train_atk = AttackConfig(epsilon=args.eps, step=args.eps, iters=1, restarts=1, random_init=False)
    eval_atk = AttackConfig.evaluation(args.eps)
    print("seed  lambda   clean   fgsm    pgd")
    for seed in range(args.seeds):
        for lam in (0.0, args.lam):
            cfg = TrainConfig(lambda_freq=lam, at_mode="fgsm", attack=train_atk, seed=seed, epochs=args.epochs)
            model = train(spec, tr, cfg)[0]
            clean = accuracy(model, te.images, te.labels)
            fg = adversarial_accuracy(model, te, "fgsm", eval_atk, workers=args.workers)
            pg = adversarial_accuracy(model, te, "pgd", eval_atk, seed=seed, workers=args.workers)
            print(f"{seed:4d}  {lam:6.3f}  {clean:.3f}  {fg:.3f}  {pg:.3f}", flush=True)


if __name__ == "__main__":
    main()
