"""Clean, adversarial and corruption accuracy, mCE and Jacobian spectra."""
from __future__ import annotations

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, fgsm, loss_and_input_grad, pgd
from .corruptions import KINDS, SEVERITIES, corrupt_batch
from .data import Dataset
from .freqbias import BiasConfig, IndexMode, bias_of_mean_spectrum, mean_spectrum
from .models import Model, one_hot, predict
from .spectral import to_minmax_pgm_bytes, write_spectrum_csv, write_spectrum_pgm


def parallel_map(fn, items, workers: int = 1) -> list:
    """``[fn(*it) for it in items]``, optionally across processes; order is kept."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, *zip(*items)))


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predict(model, images) == labels)) if len(labels) else float("nan")


def _adv_batch_correct(model, xb, yb, labels, attack, cfg, seed, b) -> int:
    if attack == "fgsm":
        adv = fgsm(model, xb, yb, cfg.epsilon)
    else:
        adv = pgd(model, xb, yb, cfg, np.random.default_rng([seed, b]))
    return int(np.sum(predict(model, adv) == labels))


def adversarial_accuracy(model: Model, data: Dataset, attack: str, cfg: AttackConfig,
                         seed: int = 0, batch_size: int = 250, workers: int = 1) -> float:
    """Accuracy on adversarial examples crafted batch by batch.

    Batch ``b`` draws its restarts from ``default_rng([seed, b])`` so the
    result does not depend on ``workers``.
    """
    if attack not in ("fgsm", "pgd"):
        raise ValueError(f"unknown attack {attack!r}")
    y = one_hot(data.labels, data.num_classes)
    tasks = [(model, data.images[lo:lo + batch_size], y[lo:lo + batch_size], data.labels[lo:lo + batch_size],
              attack, cfg, seed, b) for b, lo in enumerate(range(0, len(data), batch_size))]
    return sum(parallel_map(_adv_batch_correct, tasks, workers)) / len(data)


def _corrupted_accuracy(model, images, labels, kind, severity, seed, params) -> float:
    return accuracy(model, corrupt_batch(images, kind, severity, seed, params), labels)


def corruption_table(model: Model, data: Dataset, kind: str, seed: int = 0,
                     params: dict | None = None, severities=SEVERITIES, workers: int = 1) -> list[float]:
    """Accuracy at each requested severity (all five by default)."""
    tasks = [(model, data.images, data.labels, kind, s, seed, params) for s in severities]
    return parallel_map(_corrupted_accuracy, tasks, workers)


def corruption_accuracy(model: Model, data: Dataset, kind: str, seed: int = 0,
                        params: dict | None = None) -> float:
    """Mean accuracy over the five severities."""
    return float(np.mean(corruption_table(model, data, kind, seed, params)))


def mce(model_table: dict[str, list[float]], baseline_table: dict[str, list[float]]) -> float:
    """Mean corruption error relative to a baseline (baseline scores 100).

    Both arguments map corruption kind to per-severity accuracies.  Returns
    NaN when the baseline has zero error on some kind.
    """
    if set(model_table) != set(baseline_table):
        raise ValueError("reports cover different corruption kinds")
    ratios = []
    for kind in sorted(model_table):
        m, b = model_table[kind], baseline_table[kind]
        if len(m) != len(b):
            raise ValueError(f"{kind}: severity counts differ")
        base_err = sum(1.0 - a for a in b)
        if base_err == 0.0:
            return float("nan")
        ratios.append(sum(1.0 - a for a in m) / base_err)
    return 100.0 * (sum(ratios) / len(ratios))


def input_jacobians(model: Model, images: np.ndarray, labels: np.ndarray, num_classes: int,
                    batch_size: int = 250) -> np.ndarray:
    y = one_hot(labels, num_classes)
    out = [loss_and_input_grad(model, images[lo:lo + batch_size], y[lo:lo + batch_size])[2]
           for lo in range(0, len(images), batch_size)]
    return np.concatenate(out)


@dataclass
class ModelProfile:
    bias_low: float
    spectrum: np.ndarray
    jacobians: np.ndarray  # a few example Jacobians, (m, c, h, w)


def model_profile(model: Model, data: Dataset, cfg: BiasConfig = BiasConfig(), examples: int = 4) -> ModelProfile:
    """``E[|F(J)|]`` over ``data`` and its low-frequency bias."""
    J = input_jacobians(model, data.images, data.labels, data.num_classes)
    spec = mean_spectrum(J)
    return ModelProfile(bias_of_mean_spectrum(J, cfg), spec, J[:examples])


def low_quartile_mass(spectrum: np.ndarray, index_mode: IndexMode | str = IndexMode.RAW_DFT) -> float:
    """Fraction of spectrum mass in the lowest quarter of frequencies on both axes.

    ``raw-dft`` reads the unshifted index as the frequency (the top-left
    ``l/4`` block, the same reading the bias schedule uses); ``folded-frequency``
    uses ``min(i, l - i)`` so both conjugate halves count as low.
    """
    h, w = spectrum.shape
    if IndexMode(index_mode) is IndexMode.RAW_DFT:
        low = (np.arange(h)[:, None] < h / 4) & (np.arange(w)[None, :] < w / 4)
    else:
        fy = np.minimum(np.arange(h), h - np.arange(h))[:, None] / (h / 2)
        fx = np.minimum(np.arange(w), w - np.arange(w))[None, :] / (w / 2)
        low = np.maximum(fy, fx) <= 0.25
    return float(spectrum[low].sum() / spectrum.sum())


@dataclass
class EvalReport:
    tag: str = "model"
    seed: int = 0
    clean_acc: float = float("nan")
    fgsm_acc: float = float("nan")
    pgd_acc: float = float("nan")
    corruption: dict[str, list[float]] = field(default_factory=dict)
    mce: float = float("nan")
    mce_baseline: str = ""
    model_bias: float = float("nan")
    spectrum: np.ndarray | None = None

    def rows(self) -> list[tuple[str, str]]:
        rows = [("clean_acc", self.clean_acc), ("fgsm_acc", self.fgsm_acc), ("pgd_acc", self.pgd_acc)]
        for kind in sorted(self.corruption):
            for s, a in zip(SEVERITIES, self.corruption[kind]):
                rows.append((f"corruption:{kind}:{s}", a))
            rows.append((f"corruption:{kind}:mean", float(np.mean(self.corruption[kind]))))
        rows.append(("mce", self.mce))
        rows.append(("model_bias", self.model_bias))
        return [(k, _fmt(v)) for k, v in rows]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "value"])
            w.writerow(["tag", self.tag])
            w.writerow(["seed", str(self.seed)])
            w.writerow(["mce_baseline", self.mce_baseline])
            w.writerows(self.rows())

    @classmethod
    def read_csv(cls, path) -> "EvalReport":
        with open(path, newline="") as fh:
            rows = dict(r for r in list(csv.reader(fh))[1:])
        rep = cls(tag=rows.pop("tag"), seed=int(rows.pop("seed")), mce_baseline=rows.pop("mce_baseline"))
        table: dict[str, dict[int, float]] = {}
        for key, val in rows.items():
            v = float(val) if val != "undefined" else float("nan")
            if key.startswith("corruption:"):
                _, kind, sev = key.split(":")
                if sev != "mean":
                    table.setdefault(kind, {})[int(sev)] = v
            else:
                setattr(rep, key, v)
        rep.corruption = {k: [d[s] for s in SEVERITIES] for k, d in table.items()}
        return rep


def _fmt(v: float) -> str:
    return "undefined" if isinstance(v, float) and math.isnan(v) else repr(float(v))


def export_profile(out_dir, tag: str, seed: int, profile: ModelProfile) -> list[Path]:
    """PGM/CSV spectrum plus min-max rendered example Jacobians (channel mean)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [out_dir / f"{tag}_spectrum_seed{seed}.pgm", out_dir / f"{tag}_spectrum_seed{seed}.csv"]
    write_spectrum_pgm(paths[0], profile.spectrum)
    write_spectrum_csv(paths[1], profile.spectrum)
    for i, J in enumerate(profile.jacobians):
        p = out_dir / f"{tag}_jacobian{i}_seed{seed}.pgm"
        p.write_bytes(to_minmax_pgm_bytes(J.mean(axis=0)))
        paths.append(p)
    return paths


def evaluate(model: Model, data: Dataset, tag: str = "model", seed: int = 0,
             attack: AttackConfig | None = None, kinds=KINDS, adversarial: bool = True,
             profile: bool = True, baseline: EvalReport | None = None,
             corruption_params: dict | None = None, workers: int = 1) -> EvalReport:
    rep = EvalReport(tag=tag, seed=seed)
    rep.clean_acc = accuracy(model, data.images, data.labels)
    if adversarial:
        attack = attack or AttackConfig.evaluation()
        rep.fgsm_acc = adversarial_accuracy(model, data, "fgsm", attack, seed, workers=workers)
        rep.pgd_acc = adversarial_accuracy(model, data, "pgd", attack, seed, workers=workers)
    for kind in kinds:
        rep.corruption[kind] = corruption_table(model, data, kind, seed, corruption_params, workers=workers)
    if baseline is not None:
        rep.mce = mce(rep.corruption, baseline.corruption)
        rep.mce_baseline = baseline.tag
    if profile:
        prof = model_profile(model, data)
        rep.model_bias = prof.bias_low
        rep.spectrum = prof.spectrum
    return rep
