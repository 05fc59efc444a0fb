"""Reproducible experiment orchestration.

Seeded replicated runs, rho grid search on the validation split, protocol
suites (label noise, m-sharpness sweep), post-hoc analyses, and
deterministic CSV/JSON report emission. Identical config plus seed gives
byte-identical artifacts.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import analysis
from .data import NoiseSpec, Splits, bootstrap_relabel, inject_label_noise, \
    load_idx_or_csv, make_synthetic
from .errors import ConfigError, DivergenceError
from .models import make_mlp
from .optim import MetricsLog, SamConfig, TrainConfig, train

METRICS_HEADER = "step,epoch,train_loss,train_err,val_err,test_err,lr,grad_evals"
RHO_GRID_DEFAULT = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
SEED_ENV_VAR = "SHARPMIN_SEED"
ANALYSIS_KINDS = ("spectrum", "sharpness", "bound", "cosine")


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "moons"  # moons | blobs | spiral, or ignored when path is set
    n: int = 1000
    noise: float = 0.2
    seed: int = 0
    path: str | None = None
    label_noise: float = 0.0
    label_noise_seed: int = 0


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple = (2, 16, 2)
    activation: str = "tanh"
    loss_kind: str = "xent"
    label_smoothing: float = 0.0


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    sam: SamConfig | None = None  # None marks the SGD baseline
    replicas: int = 1
    rho_grid: tuple | None = None
    analyses: tuple = ()
    parallel_subbatches: bool = False

    def __post_init__(self):
        if self.replicas < 1:
            raise ConfigError("replicas must be >= 1")
        for a in self.analyses:
            if a not in ANALYSIS_KINDS:
                raise ConfigError(f"unknown analysis {a!r}")

    @property
    def base_seed(self) -> int:
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            return int(env)
        return self.train.seed


def _encode(obj):
    if isinstance(obj, float) and math.isinf(obj):
        return "inf"
    if dataclasses.is_dataclass(obj):
        return {k: _encode(v) for k, v in dataclasses.asdict(obj).items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _encode(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return _encode(cfg)


def config_from_dict(raw: dict) -> ExperimentConfig:
    def pnorm(v):
        return float("inf") if v in ("inf", "Infinity") else float(v)

    sam = None
    if raw.get("sam") is not None:
        s = dict(raw["sam"])
        if "p_norm" in s:
            s["p_norm"] = pnorm(s["p_norm"])
        sam = SamConfig(**s)
    return ExperimentConfig(
        dataset=DatasetSpec(**raw.get("dataset", {})),
        model=ModelSpec(layers=tuple(raw.get("model", {}).get("layers", (2, 16, 2))),
                        **{k: v for k, v in raw.get("model", {}).items()
                           if k != "layers"}),
        train=TrainConfig(**raw.get("train", {})),
        sam=sam,
        replicas=raw.get("replicas", 1),
        rho_grid=tuple(raw["rho_grid"]) if raw.get("rho_grid") else None,
        analyses=tuple(raw.get("analyses", ())),
        parallel_subbatches=raw.get("parallel_subbatches", False),
    )


def load_config(path) -> ExperimentConfig:
    return config_from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# deterministic serialization


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(log: MetricsLog, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [METRICS_HEADER]
    for r in log.rows:
        lines.append(
            ",".join(
                _fmt(v)
                for v in (r.step, r.epoch, r.train_loss, r.train_err, r.val_err,
                          r.test_err, r.lr, r.grad_evals)
            )
        )
    path.write_text("\n".join(lines) + "\n")


def write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_encode(obj), indent=2, sort_keys=True) + "\n")


def mean_and_ci(values) -> tuple:
    """(mean, 95% CI half-width) with half-width 1.96*stddev/sqrt(r)."""
    vals = np.asarray(values, dtype=np.float64)
    mean = float(vals.mean())
    if len(vals) < 2:
        return mean, 0.0
    hw = 1.96 * float(vals.std(ddof=1)) / math.sqrt(len(vals))
    return mean, hw


# ---------------------------------------------------------------------------
# dataset / model assembly


def build_splits(spec: DatasetSpec) -> Splits:
    if spec.path is not None:
        loaded = load_idx_or_csv(spec.path, split="train")
        # file-backed data arrives as a single split; carve 80/10/10 by index
        n = len(loaded)
        n_val = n_test = n // 10
        rng = np.random.default_rng(spec.seed)
        idx = rng.permutation(n)

        def take(sl, tag):
            return dataclasses.replace(loaded, x=loaded.x[sl], y=loaded.y[sl],
                                       split=tag)

        splits = Splits(
            take(idx[n_val + n_test :], "train"),
            take(idx[:n_val], "val"),
            take(idx[n_val : n_val + n_test], "test"),
        )
    else:
        splits = make_synthetic(spec.kind, spec.n, spec.noise, spec.seed)
    if spec.label_noise > 0.0:
        noisy, _ = inject_label_noise(
            splits.train, NoiseSpec(spec.label_noise, spec.label_noise_seed)
        )
        splits = Splits(noisy, splits.val, splits.test)
    return splits


def build_model(spec: ModelSpec, seed: int):
    return make_mlp(
        list(spec.layers),
        activation=spec.activation,
        seed=seed,
        loss_kind=spec.loss_kind,
        label_smoothing=spec.label_smoothing,
    )


# ---------------------------------------------------------------------------
# run_experiment


def _run_one(cfg: ExperimentConfig, splits, seed: int, scfg: SamConfig | None):
    model = build_model(cfg.model, seed)
    tcfg = dataclasses.replace(cfg.train, seed=seed)
    params, log = train(
        model, splits, tcfg, scfg,
        parallel_subbatches=cfg.parallel_subbatches,
    )
    return model, params, log


def _rho_candidates(cfg: ExperimentConfig):
    if cfg.sam is None:
        return [None]
    if cfg.rho_grid:
        return list(cfg.rho_grid)
    return [cfg.sam.rho]


def run_experiment(cfg: ExperimentConfig, outdir) -> dict:
    """Replicated, seeded training with optional rho grid search.

    Writes metrics.csv per run (at the top level when there is a single
    run, under runs/ otherwise), summary.json, and any requested analysis
    reports. Returns the summary dict.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    splits = build_splits(cfg.dataset)
    rhos = _rho_candidates(cfg)
    single = cfg.replicas == 1 and len(rhos) == 1
    replica_rows = []
    analysis_out = {kind: [] for kind in cfg.analyses}

    try:
        for i in range(cfg.replicas):
            seed = cfg.base_seed + i
            candidates = []
            for rho in rhos:
                scfg = None
                if cfg.sam is not None:
                    scfg = dataclasses.replace(cfg.sam, rho=rho)
                tag = f"rep{i:02d}" + (f"_rho{rho}" if rho is not None else "")
                csv_path = (
                    outdir / "metrics.csv" if single else outdir / "runs" / tag / "metrics.csv"
                )
                try:
                    model, params, log = _run_one(cfg, splits, seed, scfg)
                except DivergenceError as exc:
                    if exc.metrics is not None:
                        write_metrics_csv(exc.metrics, csv_path)
                    raise
                write_metrics_csv(log, csv_path)
                candidates.append(
                    {"rho": rho, "tag": tag, "model": model, "params": params,
                     "final": log.final}
                )
            chosen = min(
                range(len(candidates)),
                key=lambda j: (candidates[j]["final"].val_err, j),
            )
            pick = candidates[chosen]
            replica_rows.append(
                {
                    "replica": i,
                    "seed": seed,
                    "chosen_rho": pick["rho"],
                    "run": pick["tag"],
                    "train_loss": pick["final"].train_loss,
                    "train_err": pick["final"].train_err,
                    "val_err": pick["final"].val_err,
                    "test_err": pick["final"].test_err,
                    "grad_evals": pick["final"].grad_evals,
                }
            )
            _run_analyses(cfg, pick, splits, seed, analysis_out)
    except DivergenceError:
        write_json(
            {"config": config_to_dict(cfg), "error": "divergence",
             "replicas": replica_rows},
            outdir / "summary.json",
        )
        raise

    test_mean, test_hw = mean_and_ci([r["test_err"] for r in replica_rows])
    summary = {
        "config": config_to_dict(cfg),
        "replicas": replica_rows,
        "test_err_mean": test_mean,
        "test_err_ci_halfwidth": test_hw,
    }
    for kind, reports in analysis_out.items():
        summary[kind] = reports
    write_json(summary, outdir / "summary.json")
    if "spectrum" in cfg.analyses:
        write_json({"replicas": analysis_out["spectrum"]}, outdir / "spectrum.json")
    if "bound" in cfg.analyses:
        write_json({"replicas": analysis_out["bound"]}, outdir / "bound.json")
    return summary


def _run_analyses(cfg, pick, splits, seed, out):
    model, params = pick["model"], pick["params"]
    scfg = cfg.sam if cfg.sam is not None else SamConfig()
    if "spectrum" in out:
        k = min(60, params.dim)
        rep = analysis.lanczos_spectrum(model, params, splits, k, seed)
        out["spectrum"].append(rep.to_json_dict())
    if "sharpness" in out:
        dl, de = analysis.sharpness_deltas(
            model, params, splits, scfg.rho, scfg.p_norm, scfg.ascent_steps
        )
        out["sharpness"].append({"loss_delta": dl, "error_delta": de})
    if "bound" in out:
        base = pick["final"].train_loss
        sharp = analysis.estimate_sharpness(
            model, params, splits, scfg.rho, scfg.p_norm, scfg.ascent_steps
        )
        rep = analysis.pac_bayes_bound(
            max_loss=base + sharp,
            w_norm_sq=params.norm2() ** 2,
            rho=scfg.rho,
            k=params.dim,
            n=len(splits.train),
            delta=0.05,
        )
        out["bound"].append(rep.to_json_dict())
    if "cosine" in out:
        batch = splits.train.batch()
        sim = analysis.update_cosine_similarity(model, params, batch, scfg)
        out["cosine"].append({"cosine_similarity": sim})


# ---------------------------------------------------------------------------
# noise suite (SGD vs SAM vs bootstrap+SAM across label-noise rates)

NOISE_METHODS = ("sgd", "sam", "bootstrap_sam")


def run_noise_suite(cfg: ExperimentConfig, rates, outdir) -> dict:
    """Train SGD, SAM, and bootstrap+SAM at each label-noise rate.

    The SGD baseline runs at both the standard and the doubled epoch count
    (matching SAM's two-gradient budget) and keeps the better clean-test
    score. Test labels are never corrupted. Emits a method x rate accuracy
    table plus half-widths; every per-run log lands under runs/.
    """
    if cfg.sam is None:
        raise ConfigError("noise suite needs a sam config for the SAM arms")
    if any(not 0.0 <= r <= 1.0 for r in rates):
        raise ConfigError("noise rates must lie in [0, 1]")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    base_splits = build_splits(dataclasses.replace(cfg.dataset, label_noise=0.0))
    acc = {m: {} for m in NOISE_METHODS}
    hws = {m: {} for m in NOISE_METHODS}
    detail = []

    def run_logged(splits, seed, scfg, tag, epochs=None):
        tcfg = dataclasses.replace(cfg.train, seed=seed,
                                   epochs=epochs or cfg.train.epochs)
        model = build_model(cfg.model, seed)
        params, log = train(model, splits, tcfg, scfg,
                            parallel_subbatches=cfg.parallel_subbatches)
        write_metrics_csv(log, outdir / "runs" / tag / "metrics.csv")
        return model, params, log

    for rate in rates:
        if rate > 0.0:
            noisy, _ = inject_label_noise(
                base_splits.train, NoiseSpec(rate, cfg.dataset.label_noise_seed)
            )
            splits = Splits(noisy, base_splits.val, base_splits.test)
        else:
            splits = base_splits
        per_method = {m: [] for m in NOISE_METHODS}
        for i in range(cfg.replicas):
            seed = cfg.base_seed + i
            stem = f"rate{rate}_rep{i:02d}"
            _, _, log_a = run_logged(splits, seed, None, f"{stem}_sgd")
            _, _, log_b = run_logged(
                splits, seed, None, f"{stem}_sgd2x", epochs=2 * cfg.train.epochs
            )
            per_method["sgd"].append(
                1.0 - min(log_a.final.test_err, log_b.final.test_err)
            )

            model_s, params_s, log_s = run_logged(splits, seed, cfg.sam, f"{stem}_sam")
            per_method["sam"].append(1.0 - log_s.final.test_err)

            relabeled = bootstrap_relabel(model_s, params_s, splits.train)
            boot_splits = Splits(relabeled, splits.val, splits.test)
            _, _, log_r = run_logged(boot_splits, seed, cfg.sam, f"{stem}_boot")
            per_method["bootstrap_sam"].append(1.0 - log_r.final.test_err)
        for m in NOISE_METHODS:
            acc[m][rate], hws[m][rate] = mean_and_ci(per_method[m])
        detail.append({"rate": rate, "accuracies": per_method})

    header = "method," + ",".join(f"rate_{r}" for r in rates)
    rows = [header]
    ci_rows = [header]
    for m in NOISE_METHODS:
        rows.append(m + "," + ",".join(repr(acc[m][r]) for r in rates))
        ci_rows.append(m + "," + ",".join(repr(hws[m][r]) for r in rates))
    (outdir / "noise_suite.csv").write_text("\n".join(rows) + "\n")
    (outdir / "noise_suite_ci.csv").write_text("\n".join(ci_rows) + "\n")
    summary = {
        "config": config_to_dict(cfg),
        "rates": list(rates),
        "accuracy": {m: {repr(r): acc[m][r] for r in rates} for m in NOISE_METHODS},
        "ci_halfwidth": {m: {repr(r): hws[m][r] for r in rates} for m in NOISE_METHODS},
        "detail": detail,
    }
    write_json(summary, outdir / "summary.json")
    return summary


# ---------------------------------------------------------------------------
# m-sharpness sweep


def run_msharpness_sweep(cfg: ExperimentConfig, m_values, outdir) -> dict:
    """Mean test error for each (m, rho) pair, emitted as a rows=m CSV."""
    if cfg.sam is None:
        raise ConfigError("m-sharpness sweep needs a sam config")
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for m in m_values:
        if m != 0 and cfg.train.batch_size % m != 0:
            raise ConfigError(f"m={m} does not divide batch size {cfg.train.batch_size}")
    splits = build_splits(cfg.dataset)
    rhos = cfg.rho_grid if cfg.rho_grid else [cfg.sam.rho]
    table = {}
    hw_table = {}
    for m in m_values:
        for rho in rhos:
            scfg = dataclasses.replace(cfg.sam, m=m, rho=rho)
            errs = []
            for i in range(cfg.replicas):
                seed = cfg.base_seed + i
                _, _, log = _run_one(cfg, splits, seed, scfg)
                write_metrics_csv(
                    log, outdir / "runs" / f"m{m}_rho{rho}_rep{i:02d}" / "metrics.csv"
                )
                errs.append(log.final.test_err)
            table[(m, rho)], hw_table[(m, rho)] = mean_and_ci(errs)

    header = "m," + ",".join(f"rho_{r}" for r in rhos)
    rows = [header]
    for m in m_values:
        rows.append(str(m) + "," + ",".join(repr(table[(m, r)]) for r in rhos))
    (outdir / "msharpness.csv").write_text("\n".join(rows) + "\n")
    summary = {
        "config": config_to_dict(cfg),
        "m_values": list(m_values),
        "rho_grid": list(rhos),
        "test_err": {f"m={m},rho={r}": table[(m, r)] for m in m_values for r in rhos},
        "ci_halfwidth": {
            f"m={m},rho={r}": hw_table[(m, r)] for m in m_values for r in rhos
        },
    }
    write_json(summary, outdir / "summary.json")
    return summary
