"""Command-line entry points for the experiment harness.

Subcommands: train, noise-suite, msharp-sweep, spectrum, sharpness, bound.
A JSON config (--config) provides defaults; explicit flags supersede it.
The SHARPMIN_SEED environment variable overrides the base seed.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from pathlib import Path

from . import analysis, harness
from .errors import DivergenceError, SharpminError
from .optim import SamConfig, TrainConfig


def _parse_pnorm(text: str) -> float:
    return float("inf") if text in ("inf", "Inf", "infinity") else float(text)


def _float_list(text: str):
    return [float(v) for v in text.split(",") if v != ""]


def _int_list(text: str):
    return [int(v) for v in text.split(",") if v != ""]


def _add_experiment_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--outdir", type=Path, required=True)
    # dataset
    p.add_argument("--dataset", choices=("moons", "blobs", "spiral"))
    p.add_argument("--data-path", type=Path, help="CSV or IDX dataset file")
    p.add_argument("--n", type=int, help="synthetic dataset size")
    p.add_argument("--data-noise", type=float, help="feature noise sigma")
    p.add_argument("--data-seed", type=int)
    p.add_argument("--label-noise", type=float, help="train label flip rate")
    # model
    p.add_argument("--layers", type=_int_list, help="e.g. 2,16,2")
    p.add_argument("--activation", choices=("tanh", "relu"))
    p.add_argument("--loss", choices=("xent", "mse"))
    p.add_argument("--label-smoothing", type=float)
    # training
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--schedule", choices=("constant", "cosine"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, help="base seed (env SHARPMIN_SEED wins)")
    # method
    p.add_argument("--method", choices=("sgd", "sam"))
    p.add_argument("--rho", type=float)
    p.add_argument("--p-norm", type=_parse_pnorm)
    p.add_argument("--m", type=int, help="m-sharpness sub-batch size (0 = batch)")
    p.add_argument("--ascent-steps", type=int)
    p.add_argument("--second-order", action="store_true", default=None)
    p.add_argument("--random-perturbation", action="store_true", default=None)
    # harness
    p.add_argument("--replicas", type=int)
    p.add_argument("--rho-grid", type=_float_list, help="e.g. 0.01,0.05,0.1")
    p.add_argument("--analyses", type=lambda s: s.split(","),
                   help="subset of spectrum,sharpness,bound,cosine")
    p.add_argument("--parallel-subbatches", action="store_true", default=None)


def _build_config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config) if args.config else harness.ExperimentConfig()

    ds = dict(
        kind=args.dataset,
        n=args.n,
        noise=args.data_noise,
        seed=args.data_seed,
        path=str(args.data_path) if args.data_path else None,
        label_noise=args.label_noise,
    )
    ds = {k: v for k, v in ds.items() if v is not None}
    if ds:
        cfg = dataclasses.replace(cfg, dataset=dataclasses.replace(cfg.dataset, **ds))

    ms = dict(
        layers=tuple(args.layers) if args.layers else None,
        activation=args.activation,
        loss_kind=args.loss,
        label_smoothing=args.label_smoothing,
    )
    ms = {k: v for k, v in ms.items() if v is not None}
    if ms:
        cfg = dataclasses.replace(cfg, model=dataclasses.replace(cfg.model, **ms))

    ts = dict(lr=args.lr, momentum=args.momentum, weight_decay=args.weight_decay,
              schedule=args.schedule, epochs=args.epochs,
              batch_size=args.batch_size, seed=args.seed)
    ts = {k: v for k, v in ts.items() if v is not None}
    if ts:
        cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, **ts))

    method = args.method
    if method is None and cfg.sam is None and any(
        getattr(args, k) is not None
        for k in ("rho", "p_norm", "m", "ascent_steps", "second_order",
                  "random_perturbation")
    ):
        method = "sam"
    if method == "sgd":
        cfg = dataclasses.replace(cfg, sam=None)
    elif method == "sam" or cfg.sam is not None:
        sam = cfg.sam if cfg.sam is not None else SamConfig()
        ss = dict(rho=args.rho, p_norm=args.p_norm, m=args.m,
                  ascent_steps=args.ascent_steps, second_order=args.second_order,
                  random_perturbation=args.random_perturbation)
        ss = {k: v for k, v in ss.items() if v is not None}
        if ss:
            sam = dataclasses.replace(sam, **ss)
        cfg = dataclasses.replace(cfg, sam=sam)

    hs = dict(replicas=args.replicas,
              rho_grid=tuple(args.rho_grid) if args.rho_grid else None,
              analyses=tuple(args.analyses) if args.analyses else None,
              parallel_subbatches=args.parallel_subbatches)
    hs = {k: v for k, v in hs.items() if v is not None}
    if hs:
        cfg = dataclasses.replace(cfg, **hs)
    return cfg


def main(argv=None) -> int:
    top = argparse.ArgumentParser(prog="sharpmin", description=__doc__)
    sub = top.add_subparsers(dest="command", required=True)

    for name in ("train", "spectrum", "sharpness"):
        p = sub.add_parser(name)
        _add_experiment_flags(p)

    p = sub.add_parser("noise-suite")
    _add_experiment_flags(p)
    p.add_argument("--rates", type=_float_list, default=[0.2, 0.4])

    p = sub.add_parser("msharp-sweep")
    _add_experiment_flags(p)
    p.add_argument("--m-values", type=_int_list, required=True)

    p = sub.add_parser("bound")
    p.add_argument("--max-loss", type=float, required=True)
    p.add_argument("--w-norm-sq", type=float, required=True)
    p.add_argument("--rho", type=float, required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--outdir", type=Path)

    args = top.parse_args(argv)

    try:
        if args.command == "bound":
            report = analysis.pac_bayes_bound(
                args.max_loss, args.w_norm_sq, args.rho, args.k, args.n, args.delta
            )
            payload = report.to_json_dict()
            print(json.dumps(payload, indent=2, sort_keys=True))
            if args.outdir:
                harness.write_json(payload, args.outdir / "bound.json")
            return 0

        cfg = _build_config(args)
        if args.command == "train":
            summary = harness.run_experiment(cfg, args.outdir)
            print(f"test_err_mean={summary['test_err_mean']!r} "
                  f"ci_halfwidth={summary['test_err_ci_halfwidth']!r}")
        elif args.command == "spectrum":
            cfg = dataclasses.replace(
                cfg, analyses=tuple(sorted(set(cfg.analyses) | {"spectrum"}))
            )
            summary = harness.run_experiment(cfg, args.outdir)
            top_val = summary["spectrum"][0]["lambda_max"]
            print(f"lambda_max={top_val!r}")
        elif args.command == "sharpness":
            cfg = dataclasses.replace(
                cfg, analyses=tuple(sorted(set(cfg.analyses) | {"sharpness"}))
            )
            summary = harness.run_experiment(cfg, args.outdir)
            print(json.dumps(summary["sharpness"], sort_keys=True))
        elif args.command == "noise-suite":
            summary = harness.run_noise_suite(cfg, args.rates, args.outdir)
            print(json.dumps(summary["accuracy"], indent=2, sort_keys=True))
        elif args.command == "msharp-sweep":
            summary = harness.run_msharpness_sweep(cfg, args.m_values, args.outdir)
            print(json.dumps(summary["test_err"], indent=2, sort_keys=True))
        return 0
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except SharpminError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
