"""Command-line entry point: fetch data, train, attack, sweep, reproduce."""

from __future__ import annotations

import argparse
import configparser
import os
import sys
from pathlib import Path

import numpy as np

from . import harness, mlp
from .attack import AttackSpec, attack_accuracy
from .crossbar import DeviceRange, IdealRealization
from .data import DataError, default_manifest, fetch_dataset, load_dataset, parse_manifest
from .mlp import TrainConfig

DATASETS = ("fashion-mnist", "mnist")


def _load_config(path: str | None) -> configparser.ConfigParser:
    cfg = configparser.ConfigParser()
    if path:
        if not Path(path).exists():
            raise DataError(f"config file not found: {path}")
        cfg.read(path)
    return cfg


def _train_config(args, cfg: configparser.ConfigParser) -> TrainConfig:
    """Precedence: built-in defaults < config file < command-line flags."""
    def pick(flag_val, section, key, cast, fallback):
        if flag_val is not None:
            return flag_val
        if cfg.has_option(section, key):
            return cast(cfg.get(section, key))
        return fallback

    dev = DeviceRange(
        g_off=pick(getattr(args, "g_off", None), "device", "g_off", float, 1.0),
        g_on=pick(getattr(args, "g_on", None), "device", "g_on", float, 5.0),
    )
    return TrainConfig(
        epochs=pick(getattr(args, "epochs", None), "train", "epochs", int, 10),
        batch=pick(getattr(args, "batch", None), "train", "batch", int, 64),
        lr=pick(getattr(args, "lr", None), "train", "lr", float, 1e-3),
        optimizer=pick(getattr(args, "optimizer", None), "train", "optimizer", str, "adam"),
        activation=pick(getattr(args, "activation", None), "train", "activation", str, "relu"),
        seed=pick(getattr(args, "seed", None), "train", "seed", int, 0),
        p_train=pick(getattr(args, "p_train", None), "train", "p_train", float, 0.0),
        device_range=dev,
        bias_on_crossbar=pick(
            None, "device", "bias_on_crossbar",
            lambda v: v.strip().lower() in ("1", "true", "yes", "on"), True,
        ),
    )


def cmd_fetch(args, cfg) -> int:
    manifest = (
        parse_manifest(args.manifest, dataset=args.dataset)
        if args.manifest
        else default_manifest(args.dataset, args.out)
    )
    before = [Path(e.path) for e in manifest.entries.values()]
    if all(p.exists() for p in before):
        fetch_dataset(manifest)
        print("up to date")
    else:
        for p in fetch_dataset(manifest):
            print(p)
    return 0


def cmd_train(args, cfg) -> int:
    tc = _train_config(args, cfg)
    train_set, test_set = load_dataset(args.dataset, args.data_dir)

    def log_fn(epoch, loss):
        print(f"epoch {epoch + 1}/{tc.epochs}: mean training loss {loss:.4f}")

    params = mlp.train(train_set, tc, log_fn=log_fn)
    mlp.save_model(args.out, params)
    acc = mlp.evaluate(params, IdealRealization(), test_set, activation=tc.activation)
    print(f"model written to {args.out}")
    print(f"clean test accuracy: {acc:.4f}")
    return 0


def cmd_attack(args, cfg) -> int:
    if args.epsilon < 0:
        raise DataError("epsilon must be >= 0")
    params = mlp.load_model(args.model)
    _, test_set = load_dataset(args.dataset, args.data_dir)
    tc = _train_config(args, cfg)
    if args.p_inf > 0:
        rng = np.random.default_rng(args.seed if args.seed is not None else 0)
        deployed = mlp.sample_realization(
            params, args.p_inf, rng, device_range=tc.device_range, freeze_w_max=True
        )
    else:
        deployed = IdealRealization()
    clean = mlp.evaluate(params, deployed, test_set, activation=tc.activation)
    spec = AttackSpec(args.epsilon, params, IdealRealization(), activation=tc.activation)
    adv = attack_accuracy(params, deployed, spec, test_set)
    print(f"clean accuracy: {clean:.4f}")
    print(f"adversarial accuracy (epsilon={args.epsilon:g}): {adv:.4f}")
    return 0


def cmd_sweep(args, cfg) -> int:
    tc = _train_config(args, cfg)
    scenario = harness.Scenario(
        dataset=args.dataset,
        p_train=tc.p_train,
        p_inf=args.p_inf,
        epsilons=tuple(float(e) for e in args.epsilons.split(",")),
        n_realizations=args.realizations,
        seed=args.seed if args.seed is not None else 0,
    )
    train_set, test_set = load_dataset(args.dataset, args.data_dir)
    cache = harness.ModelCache(args.cache_dir)
    records = harness.run_scenario(
        scenario, train_set, test_set, cache=cache, base_cfg=tc, workers=args.workers
    )
    harness.write_csv(
        records, args.out,
        comments=[f"scenario {scenario.canonical()}", f"git={harness.git_describe()}"],
    )
    print(args.out)
    return 0


def cmd_reproduce(args, cfg) -> int:
    tc = _train_config(args, cfg)
    paths = harness.reproduce(
        figure=f"fig{args.figure}",
        dataset=args.dataset,
        out_root=args.out,
        data_dir=args.data_dir,
        seed=args.seed if args.seed is not None else 0,
        n_realizations=args.realizations,
        workers=args.workers,
        base_cfg=tc,
        cache=harness.ModelCache(args.cache_dir),
    )
    for p in paths.values():
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stucknet",
        description="Train MLPs, simulate stuck-device crossbar faults, run FGSM robustness sweeps.",
    )
    parser.add_argument("--config", help="key = value config file; flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        if data:
            p.add_argument("--dataset", choices=DATASETS, default="fashion-mnist")
            p.add_argument("--data-dir", default="data")
        p.add_argument("--seed", type=int, default=None)

    p = sub.add_parser("fetch", help="download and verify a dataset")
    p.add_argument("--dataset", choices=DATASETS, required=True)
    p.add_argument("--out", default="data")
    p.add_argument("--manifest", help="explicit manifest file (name url sha256 path lines)")
    p.set_defaults(fn=cmd_fetch)

    def train_flags(p):
        p.add_argument("--p-train", type=float, default=None,
                       help="fraction of stuck devices assumed during training")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--optimizer", choices=("adam", "sgd"), default=None)
        p.add_argument("--activation", choices=("relu", "tanh", "sigmoid"), default=None)
        p.add_argument("--g-off", type=float, default=None)
        p.add_argument("--g-on", type=float, default=None)

    p = sub.add_parser("train", help="train a network, optionally nonideality-aware")
    common(p)
    train_flags(p)
    p.add_argument("--out", default="model.mnna")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("attack", help="single-realization FGSM report for a saved model")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--p-inf", type=float, default=0.0)
    p.set_defaults(fn=cmd_attack)

    p = sub.add_parser("sweep", help="run one scenario and write a CSV")
    common(p)
    train_flags(p)
    p.add_argument("--p-inf", type=float, default=0.0)
    p.add_argument("--epsilons", default=",".join(str(e) for e in harness.DEFAULT_EPS_GRID))
    p.add_argument("--realizations", type=int, default=harness.DEFAULT_REALIZATIONS)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", default="sweep.csv")
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("reproduce", help="run a full accuracy-vs-epsilon study")
    common(p)
    train_flags(p)
    p.add_argument("--figure", choices=("3", "4", "5"), required=True)
    p.add_argument("--realizations", type=int, default=harness.DEFAULT_REALIZATIONS)
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
    p.add_argument("--cache-dir", default=None)
    p.add_argument("--out", default="results")
    p.set_defaults(fn=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config)
        return args.fn(args, cfg)
    except (DataError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
