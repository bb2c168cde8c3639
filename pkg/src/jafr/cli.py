"""``jafr`` command line: train, attack/corruption evaluation, profiles, report.

Configuration precedence, lowest to highest: built-in defaults, the
``--config`` JSON file (a previous run's ``manifest.json`` is accepted too),
``--set section.key=value`` overrides, then dedicated flags such as
``--seed`` or ``--eps``.  Every run writes ``manifest.json`` holding the
fully resolved config and SHA-256 hashes of its inputs and artifacts, so
``jafr <verb> --config out/manifest.json --out other`` repeats the run.

Failures print one line ``jafr: error {json}`` to stderr and exit with 2
(config), 3 (data) or 4 (numerical abort).
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .attacks import AttackConfig
from .autodiff import ContractViolation, Tensor, no_grad
from .corruptions import KINDS, SEVERITIES, corruption_spectrum
from .data import DataError, load_dataset, split_dataset
from .evaluator import (accuracy, adversarial_accuracy, corruption_table, export_profile,
                        low_quartile_mass, mce, model_profile, parallel_map)
from .freqbias import BiasConfig, bias_low
from .models import ModelSpec, load_checkpoint, save_checkpoint
from .spectral import write_spectrum_pgm
from .trainer import NumericalAbort, TrainConfig, train

log = logging.getLogger(__name__)

VERBS = ("train", "eval-adv", "eval-corrupt", "profile-model", "profile-corruptions", "report")
REGIMES = ("Standard", "JaFR", "FGSM AT+JaFR(-)", "FGSM AT", "FGSM AT+JaFR", "PGD AT")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL = 2, 3, 4


class ConfigError(Exception):
    pass


def default_config() -> dict:
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    ev = asdict(AttackConfig.evaluation())
    ev["step"] = None  # resolved to epsilon / 4
    return {
        "seed": 0,
        "data": "blobs",
        "data_seed": 0,
        "n": None,
        "n_test": 200,
        "tag": "model",
        "checkpoint": None,
        "model": {**asdict(ModelSpec()), "input_shape": None, "num_classes": None},
        "train": train_cfg,
        "attack": {"kind": "both", **ev},
        "corruptions": list(KINDS),
        "severities": list(SEVERITIES),
        "baseline": None,
        "images": 100,
        "reports": {},
    }


def _merge(base: dict, over: dict, where: str = "") -> dict:
    for key, val in over.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where + key!r}")
        if isinstance(base[key], dict) and isinstance(val, dict) and key != "reports":
            _merge(base[key], val, f"{where}{key}.")
        else:
            base[key] = val
    return base


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _set(cfg: dict, dotted: str, value) -> None:
    *path, last = dotted.split(".")
    node = cfg
    for part in path:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if last not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[last] = value


def resolve_config(verb: str, args: argparse.Namespace) -> dict:
    cfg = default_config()
    if args.config:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        if "artifacts" in loaded and "config" in loaded:
            if loaded.get("verb") != verb:
                raise ConfigError(f"manifest is for verb {loaded.get('verb')!r}, not {verb!r}")
            loaded = loaded["config"]
        _merge(cfg, loaded)
    for item in args.set or []:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        _set(cfg, key.strip(), _parse_value(val))
    attack_section = cfg["train"]["attack"] if verb == "train" else cfg["attack"]
    flags = {
        "seed": (cfg, "seed"), "data": (cfg, "data"), "checkpoint": (cfg, "checkpoint"),
        "attack": (cfg["attack"], "kind"), "eps": (attack_section, "epsilon"),
        "step": (attack_section, "step"), "iters": (attack_section, "iters"),
        "restarts": (attack_section, "restarts"), "lambda_freq": (cfg["train"], "lambda_freq"),
        "at": (cfg["train"], "at_mode"), "epochs": (cfg["train"], "epochs"),
        "baseline": (cfg, "baseline"),
    }
    for name, (node, key) in flags.items():
        val = getattr(args, name, None)
        if val is not None:
            node[key] = val
    if args.corruption:
        cfg["corruptions"] = args.corruption
    if args.severity:
        cfg["severities"] = args.severity
    if cfg["attack"]["step"] is None:
        cfg["attack"]["step"] = cfg["attack"]["epsilon"] / 4
    return cfg


def _check_config(cfg: dict) -> None:
    """Build every typed object once so bad values fail as config errors."""
    try:
        TrainConfig(seed=cfg["seed"], **cfg["train"])
        atk = dict(cfg["attack"])
        if atk.pop("kind") not in ("fgsm", "pgd", "both"):
            raise ConfigError("attack.kind must be fgsm, pgd or both")
        AttackConfig(**atk)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    unknown = [k for k in cfg["corruptions"] if k not in KINDS]
    if unknown:
        raise ConfigError(f"unknown corruption kinds {unknown}")
    bad = [s for s in cfg["severities"] if s not in SEVERITIES]
    if bad:
        raise ConfigError(f"severities must be within 1..5, got {bad}")
    extra = [r for r in cfg["reports"] if r not in REGIMES]
    if extra:
        raise ConfigError(f"unknown report columns {extra}; expected a subset of {list(REGIMES)}")


# -- helpers -----------------------------------------------------------------

def sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", "value"])
        for key, val in rows:
            w.writerow([key, _fmt(val)])


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    v = float(v)
    return "undefined" if np.isnan(v) else repr(v)


def _read_metrics(path: Path) -> dict[str, float]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["metric", "value"]:
        raise DataError(f"{path}: not a metric,value CSV")
    return {k: (float("nan") if v == "undefined" else float(v)) for k, v in rows[1:]}


def _read_corruption_csv(path: Path) -> dict[str, dict[int, float]]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["kind", "severity", "accuracy"]:
        raise DataError(f"{path}: not a kind,severity,accuracy CSV")
    table: dict[str, dict[int, float]] = {}
    for kind, sev, acc in rows[1:]:
        table.setdefault(kind, {})[int(sev)] = float(acc)
    return table


def _full_tables(table: dict[str, dict[int, float]]) -> dict[str, list[float]]:
    return {k: [d[s] for s in SEVERITIES] for k, d in table.items() if set(d) == set(SEVERITIES)}


def _data_splits(cfg: dict):
    try:
        ds = load_dataset(cfg["data"], seed=cfg["data_seed"], n=cfg["n"])
    except DataError:
        raise
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if cfg["n_test"] >= len(ds):
        raise ConfigError(f"n_test={cfg['n_test']} leaves no training data ({len(ds)} images)")
    return ds, *split_dataset(ds, cfg["n_test"], seed=cfg["data_seed"])


def _load_model(cfg: dict):
    if not cfg["checkpoint"]:
        raise ConfigError("this verb needs a checkpoint (--checkpoint or config 'checkpoint')")
    try:
        return load_checkpoint(cfg["checkpoint"])
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {cfg['checkpoint']}") from exc
    except (ValueError, OSError) as exc:
        raise DataError(str(exc)) from exc


def _eval_attack(cfg: dict) -> AttackConfig:
    atk = dict(cfg["attack"])
    atk.pop("kind")
    return AttackConfig(**atk)


# -- verbs ---------------------------------------------------------------------

def cmd_train(cfg: dict, out: Path, workers: int) -> list[Path]:
    _, tr, te = _data_splits(cfg)
    mcfg = dict(cfg["model"])
    mcfg["input_shape"] = mcfg["input_shape"] or list(tr.image_shape)
    mcfg["num_classes"] = mcfg["num_classes"] or tr.num_classes
    cfg["model"] = {**mcfg, "input_shape": list(mcfg["input_shape"]),
                    "hidden": list(mcfg["hidden"]), "conv_channels": list(mcfg["conv_channels"])}
    spec = ModelSpec.from_dict(mcfg)
    tcfg = TrainConfig(seed=cfg["seed"], **cfg["train"])
    model, tlog = train(spec, tr, tcfg)
    paths = [out / "model.ckpt", out / "train_log.csv", out / "epoch_log.csv", out / "metrics.csv"]
    save_checkpoint(model, paths[0])
    tlog.write_csv(paths[1])
    tlog.write_epoch_csv(paths[2])
    _write_metrics(paths[3], [("train_acc", tlog.epoch_acc[-1]),
                              ("test_acc", accuracy(model, te.images, te.labels))])
    return paths


def cmd_eval_adv(cfg: dict, out: Path, workers: int) -> list[Path]:
    model = _load_model(cfg)
    _, _, te = _data_splits(cfg)
    atk = _eval_attack(cfg)
    kind = cfg["attack"]["kind"]
    rows = [("clean_acc", accuracy(model, te.images, te.labels))]
    for name in ("fgsm", "pgd"):
        val = (adversarial_accuracy(model, te, name, atk, cfg["seed"], workers=workers)
               if kind in (name, "both") else float("nan"))
        rows.append((f"{name}_acc", val))
    path = out / "adv.csv"
    _write_metrics(path, rows)
    return [path]


def cmd_eval_corrupt(cfg: dict, out: Path, workers: int) -> list[Path]:
    model = _load_model(cfg)
    _, _, te = _data_splits(cfg)
    sevs = list(cfg["severities"])
    table = {kind: dict(zip(sevs, corruption_table(model, te, kind, cfg["seed"], severities=sevs,
                                                   workers=workers)))
             for kind in cfg["corruptions"]}
    paths = [out / "corruption.csv", out / "corruption_summary.csv"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "severity", "accuracy"])
        for kind in cfg["corruptions"]:
            for s in sevs:
                w.writerow([kind, s, repr(table[kind][s])])
    rows = [("clean_acc", accuracy(model, te.images, te.labels))]
    rows += [(f"corruption:{k}", float(np.mean(list(table[k].values())))) for k in cfg["corruptions"]]
    if cfg["baseline"]:
        try:
            base = _read_corruption_csv(Path(cfg["baseline"]))
        except FileNotFoundError as exc:
            raise DataError(f"baseline not found: {cfg['baseline']}") from exc
        mine, theirs = _full_tables(table), _full_tables(base)
        if set(mine) != set(theirs) or not mine:
            raise ConfigError("mCE needs full five-severity tables over the same kinds in both reports")
        rows.append(("mce", mce(mine, theirs)))
    _write_metrics(paths[1], rows)
    return paths


def cmd_profile_model(cfg: dict, out: Path, workers: int) -> list[Path]:
    model = _load_model(cfg)
    _, _, te = _data_splits(cfg)
    bias_cfg = BiasConfig(**cfg["train"]["bias"])
    prof = model_profile(model, te, bias_cfg)
    path = out / "profile.csv"
    _write_metrics(path, [("bias_low", prof.bias_low),
                          ("low_quartile_mass", low_quartile_mass(prof.spectrum, bias_cfg.index_mode))])
    return [path, *export_profile(out, cfg["tag"], cfg["seed"], prof)]


def _kind_profile(images, kind, seed, bias_cfg):
    spec = corruption_spectrum(images, kind, seed)
    with no_grad():
        return bias_low(Tensor(spec), bias_cfg).item(), spec


def cmd_profile_corruptions(cfg: dict, out: Path, workers: int) -> list[Path]:
    try:
        ds = load_dataset(cfg["data"], seed=cfg["data_seed"], n=cfg["images"])
    except DataError:
        raise
    except OSError as exc:
        raise DataError(str(exc)) from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    bias_cfg = BiasConfig(**cfg["train"]["bias"])
    kinds = list(cfg["corruptions"])
    results = parallel_map(_kind_profile, [(ds.images, k, cfg["seed"], bias_cfg) for k in kinds], workers)
    paths = [out / "corruption_profile.csv"]
    # stable sort: equal biases keep the canonical kind order
    order = sorted(range(len(kinds)), key=lambda i: -results[i][0])
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "bias_low"])
        for i in order:
            w.writerow([kinds[i], repr(results[i][0])])
    for kind, (_, spec) in zip(kinds, results):
        p = out / f"spectrum_{kind}.pgm"
        write_spectrum_pgm(p, spec)
        paths.append(p)
    return paths


def cmd_report(cfg: dict, out: Path, workers: int) -> list[Path]:
    if not cfg["reports"]:
        raise ConfigError("report needs 'reports': {column: [csv, ...]}")
    metrics: dict[str, dict[str, float]] = {}
    tables: dict[str, dict[str, list[float]]] = {}
    for regime in REGIMES:
        files = cfg["reports"].get(regime, [])
        files = [files] if isinstance(files, str) else files
        merged: dict[str, float] = {}
        for f in files:
            try:
                with open(f, newline="") as fh:
                    head = fh.readline().strip()
            except FileNotFoundError as exc:
                raise DataError(f"report input not found: {f}") from exc
            if head == "kind,severity,accuracy":
                table = _read_corruption_csv(Path(f))
                tables[regime] = _full_tables(table)
                merged.update({f"corruption:{k}": float(np.mean(list(d.values()))) for k, d in table.items()})
            else:
                merged.update(_read_metrics(Path(f)))
        metrics[regime] = merged
    base = tables.get("Standard")
    for regime, tab in tables.items():
        if base and set(tab) == set(base):
            metrics[regime]["mce"] = mce(tab, base)
    names = ["clean_acc", "fgsm_acc", "pgd_acc"]
    names += [f"corruption:{k}" for k in KINDS if any(f"corruption:{k}" in m for m in metrics.values())]
    names += [n for n in ("mce", "bias_low") if any(n in m for m in metrics.values())]
    paths = [out / "table.csv", out / "table.md"]
    with open(paths[0], "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["metric", *REGIMES])
        for n in names:
            w.writerow([n, *(_fmt(metrics[r].get(n, float("nan"))) for r in REGIMES)])
    lines = ["| metric | " + " | ".join(REGIMES) + " |", "|---" * (len(REGIMES) + 1) + "|"]
    for n in names:
        cells = []
        for r in REGIMES:
            v = metrics[r].get(n, float("nan"))
            cells.append("" if np.isnan(v) else f"{v:.4g}")
        lines.append(f"| {n} | " + " | ".join(cells) + " |")
    paths[1].write_text("\n".join(lines) + "\n")
    return paths


COMMANDS = {
    "train": cmd_train, "eval-adv": cmd_eval_adv, "eval-corrupt": cmd_eval_corrupt,
    "profile-model": cmd_profile_model, "profile-corruptions": cmd_profile_corruptions,
    "report": cmd_report,
}


def _inputs(cfg: dict) -> dict[str, str]:
    paths = []
    if cfg.get("checkpoint"):
        paths.append(cfg["checkpoint"])
    if cfg.get("baseline"):
        paths.append(cfg["baseline"])
    for files in cfg.get("reports", {}).values():
        paths.extend([files] if isinstance(files, str) else files)
    kind, _, arg = str(cfg["data"]).partition(":")
    if kind in ("cifar", "idx"):
        paths.extend(p for p in arg.split(",") if p)
    return {str(p): sha256(Path(p)) for p in paths if Path(p).is_file()}


def write_manifest(out: Path, verb: str, cfg: dict, artifacts: list[Path]) -> Path:
    manifest = {
        "verb": verb,
        "config": cfg,
        "inputs": _inputs(cfg),
        "artifacts": {p.relative_to(out).as_posix(): sha256(p) for p in sorted(artifacts)},
        "versions": {"numpy": np.__version__, "python": sys.version.split()[0]},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jafr", description="Jacobian frequency experiments.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="JSON config file or a previous manifest.json")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.lambda_freq=0.01 (value parsed as JSON)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--data", help="cifar:<files>, idx:<images>[,<labels>], blobs[:k], digits, natural[:size]")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", help="baseline corruption.csv for mCE")
    p.add_argument("--lambda", dest="lambda_freq", type=float)
    p.add_argument("--at", choices=("none", "fgsm", "pgd"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--attack", choices=("fgsm", "pgd", "both"))
    p.add_argument("--eps", type=float)
    p.add_argument("--step", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--restarts", type=int)
    p.add_argument("--corruption", action="append", metavar="KIND")
    p.add_argument("--severity", action="append", type=int)
    p.add_argument("--workers", type=int, default=None, help="parallel evaluation processes (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(code: int, kind: str, message: str) -> int:
    print("jafr: error " + json.dumps({"code": code, "kind": kind, "message": message}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    workers = args.workers or len(os.sched_getaffinity(0))
    try:
        cfg = resolve_config(args.verb, args)
        _check_config(cfg)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        resolved = copy.deepcopy(cfg)
        artifacts = COMMANDS[args.verb](resolved, out, workers)
        write_manifest(out, args.verb, resolved, artifacts)
    except (ConfigError, ContractViolation) as exc:
        return _fail(EXIT_CONFIG, "config", str(exc))
    except DataError as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except (NumericalAbort, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", str(exc))
    return 0


if __name__ == "__main__":
    sys.exit(main())
