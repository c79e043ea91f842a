"""Single-run and sweep drivers shared by the CLI and the acceptance tests."""

from __future__ import annotations

import concurrent.futures as cf
import csv
import hashlib
import itertools
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone

import numpy as np

from . import datagen
from .evaluation import mean_and_se, model_metrics
from .networks import ArchConfig, CevaeModel, CfQueryConfig
from .propensity import build_index, estimate_propensity, importance_weights
from .training import ObjectiveKind, TrainConfig, train

logger = logging.getLogger(__name__)

SYNTHETIC_EPS_GRID = (0.5, 1.0, 1.5, 2.0)
IHDP_EPS_GRID = (2.0, 2.5, 3.0, 3.5, 4.0, 5.0)

LONG_COLUMNS = ["dataset", "objective", "seed", "n", "alpha", "replicate", "epsilon", "selected",
                "val_elbo", "ate_pred", "ate_true", "ate_err", "pehe", "runtime_s", "config_hash", "error"]


@dataclass
class RunSpec:
    """One (dataset, objective, epsilon, seed) cell."""
    dataset: str = "synthetic"  # "synthetic" or a path to IHDP replicate files / synthetic CSV
    objective: str = "cevae"
    epsilon: float | None = None
    seed: int = 0
    n: int = 4000
    alpha: float = 0.75
    n_val: int = 1000
    n_test: int = 1000
    replicate: int = 1
    variance_form: str = "mixture"
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    elbo_mc_samples: int = 1
    z_dim: int | None = None
    hidden_layers: int = 3
    hidden_units: int = 200
    arm_layers: int = 1
    activation: str = "elu"
    mc_samples: int = 100
    smoothing: float = 1.0
    clip_lo: float = 0.05
    clip_hi: float = 0.95
    checkpoint: str | None = None

    def __post_init__(self):
        ObjectiveKind(self.objective)
        if self.epsilon is not None and not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")

    @property
    def kind(self):
        return ObjectiveKind(self.objective)

    def resolved(self):
        d = asdict(self)
        d.pop("checkpoint")
        if not self.kind.weighted:
            d["epsilon"] = None
        return d


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def prepare_data(spec):
    """(train, val, eval) datasets, normalised with training statistics.

    Synthetic: ``n + n_val + n_test`` rows, evaluation on the test split.
    IHDP: 70/30 train/val split; evaluation over every row of the replicate.
    """
    if spec.dataset == "synthetic":
        cfg = datagen.SyntheticConfig(n=spec.n + spec.n_val + spec.n_test, alpha=spec.alpha,
                                      seed=spec.seed, variance_form=spec.variance_form)
        full = datagen.gen_synthetic(cfg)
        split = datagen.SplitSpec(spec.n, spec.n_val, spec.n_test, seed=spec.seed)
        tr, va, te = datagen.split(full, split)
    elif spec.dataset.endswith(".csv") and _is_synthetic_csv(spec.dataset):
        full = datagen.read_synthetic_csv(spec.dataset)
        n = len(full)
        n_eval = min(spec.n_val, n // 5), min(spec.n_test, n // 5)
        split = datagen.SplitSpec(n - sum(n_eval), *n_eval, seed=spec.seed)
        tr, va, te = datagen.split(full, split)
    else:
        full = datagen.load_ihdp(spec.dataset, spec.replicate)
        split = datagen.SplitSpec(0.7, 0.3, 0.0, replicate=spec.replicate, seed=spec.seed)
        tr, va, _ = datagen.split(full, split)
        te = full
    norm = datagen.Normalizer.fit(tr)
    return norm.apply(tr), norm.apply(va), norm.apply(te)


def _is_synthetic_csv(path):
    with open(path) as fh:
        return fh.readline().strip().split(",") == datagen.SYNTHETIC_COLUMNS


def make_arch(spec, ds):
    z_dim = spec.z_dim
    if z_dim is None:
        z_dim = 5 if ds.y_type == "binary" else 20
    return ArchConfig(x_dim=ds.X.shape[1], x_binary_mask=ds.x_binary_mask, z_dim=z_dim,
                      hidden_layers=spec.hidden_layers, hidden_units=spec.hidden_units,
                      arm_layers=spec.arm_layers, y_is_binary=ds.y_type == "binary",
                      activation=spec.activation)


def train_weights(spec, tr):
    """Importance weights for the training split (None for CEVAE)."""
    if not spec.kind.weighted:
        return None, None
    if spec.epsilon is None:
        raise ValueError(f"{spec.objective} needs --epsilon")
    index = build_index(tr.X)
    est = estimate_propensity(index, tr.T.astype(np.int64), spec.epsilon, spec.smoothing,
                              spec.clip_lo, spec.clip_hi)
    return importance_weights(est, tr.T), est


def run_cell(spec, data=None):
    """Train and evaluate one cell; returns a RunRecord dict."""
    started = _now()
    t0 = time.perf_counter()
    tr, va, te = data if data is not None else prepare_data(spec)
    weights, est = train_weights(spec, tr)
    model = CevaeModel(make_arch(spec, tr), seed=spec.seed)
    tcfg = TrainConfig(epochs=spec.epochs, batch_size=spec.batch_size, lr=spec.lr, seed=spec.seed,
                       elbo_mc_samples=spec.elbo_mc_samples, objective=spec.kind)
    report = train(model, tr, va, weights, tcfg)
    if spec.checkpoint:
        model.save(spec.checkpoint)
        report.checkpoint = spec.checkpoint
    ate, pehe = model_metrics(model, te, CfQueryConfig(spec.mc_samples),
                              np.random.default_rng([spec.seed, 2]))
    resolved = spec.resolved()
    record = {
        "config": resolved,
        "config_hash": config_hash(resolved),
        "seed": spec.seed,
        "metrics": {"ate_pred": ate.ate_pred, "ate_true": ate.ate_true, "ate_err": ate.abs_err,
                    "pehe": pehe.pehe, "val_elbo": report.epochs[-1]["val_elbo"],
                    "final_train_elbo": report.epochs[-1]["train_elbo"]},
        "checkpoint": spec.checkpoint,
        "started": started,
        "finished": _now(),
        "runtime_s": time.perf_counter() - t0,
    }
    if est is not None:
        record["propensity"] = {"epsilon": est.epsilon, "n_clipped": int(np.sum((est.e <= spec.clip_lo) |
                                                                                  (est.e >= spec.clip_hi))),
                                "w_min": float(weights.w.min()), "w_max": float(weights.w.max())}
    return record, report, model


# ------------------------------------------------------------------ sweep

@dataclass
class SweepConfig:
    base: RunSpec = field(default_factory=RunSpec)
    objectives: tuple = ("cevae", "utvae")
    epsilons: tuple = SYNTHETIC_EPS_GRID
    seeds: tuple = tuple(range(30))
    ns: tuple = ()
    alphas: tuple = ()
    replicates: tuple = ()
    workers: int = 1
    select: str = "val_elbo"  # or "all"

    def __post_init__(self):
        if not self.objectives:
            raise ValueError("objective list is empty")
        if any(not e > 0 for e in self.epsilons):
            raise ValueError("every epsilon must be > 0")
        if self.select not in ("val_elbo", "all"):
            raise ValueError("select must be 'val_elbo' or 'all'")

    def cells(self):
        ns = self.ns or (self.base.n,)
        alphas = self.alphas or (self.base.alpha,)
        reps = self.replicates or (self.base.replicate,)
        for obj, n, alpha, rep, seed in itertools.product(self.objectives, ns, alphas, reps, self.seeds):
            eps_list = self.epsilons if ObjectiveKind(obj).weighted else (None,)
            for eps in eps_list:
                d = asdict(self.base)
                d.update(objective=obj, n=n, alpha=alpha, replicate=rep, seed=seed, epsilon=eps, checkpoint=None)
                yield RunSpec(**d)


def _row(spec, record=None, error=""):
    m = record["metrics"] if record else {}
    nan = float("nan")
    return {
        "dataset": "synthetic" if spec.dataset == "synthetic" else os.path.basename(os.path.normpath(spec.dataset)),
        "objective": spec.objective,
        "seed": spec.seed,
        "n": spec.n,
        "alpha": spec.alpha,
        "replicate": spec.replicate,
        "epsilon": "" if spec.epsilon is None else spec.epsilon,
        "selected": 0,
        "val_elbo": m.get("val_elbo", nan),
        "ate_pred": m.get("ate_pred", nan),
        "ate_true": m.get("ate_true", nan),
        "ate_err": m.get("ate_err", nan),
        "pehe": m.get("pehe", nan),
        "runtime_s": record["runtime_s"] if record else nan,
        "config_hash": config_hash(spec.resolved()),
        "error": error,
    }


def _run_cell_safe(spec):
    try:
        record, _, _ = run_cell(spec)
        return _row(spec, record)
    except Exception as exc:  # a failed cell is recorded, siblings continue
        logger.error("cell %s failed: %s", config_hash(spec.resolved()), exc)
        return _row(spec, error=f"{type(exc).__name__}: {exc}".replace("\n", " "))


def mark_selected(rows):
    """Flag, per (objective, n, alpha, replicate, seed), the epsilon with the best val ELBO."""
    groups = {}
    for r in rows:
        key = (r["dataset"], r["objective"], r["n"], r["alpha"], r["replicate"], r["seed"])
        groups.setdefault(key, []).append(r)
    for members in groups.values():
        ok = [r for r in members if not r["error"] and np.isfinite(r["val_elbo"])]
        if ok:
            max(ok, key=lambda r: r["val_elbo"])["selected"] = 1
    return rows


def run_sweep(cfg, progress=None):
    cells = list(cfg.cells())
    rows = []
    if cfg.workers > 1:
        with cf.ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for row in pool.map(_run_cell_safe, cells):
                rows.append(row)
                if progress:
                    progress(row)
    else:
        for spec in cells:
            row = _run_cell_safe(spec)
            rows.append(row)
            if progress:
                progress(row)
    return mark_selected(rows)


def summarize(rows, select="val_elbo"):
    """Mean and standard error of ate_err / pehe per cell group."""
    groups = {}
    for r in rows:
        if r["error"]:
            continue
        if select == "val_elbo" and not int(r["selected"]):
            continue
        eps = r["epsilon"] if select == "all" else ""
        key = (r["dataset"], r["objective"], r["n"], r["alpha"], eps)
        groups.setdefault(key, []).append(r)
    out = []
    for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
        members = groups[key]
        ate_m, ate_se = mean_and_se([float(r["ate_err"]) for r in members])
        pehe_m, pehe_se = mean_and_se([float(r["pehe"]) for r in members])
        out.append({"dataset": key[0], "objective": key[1], "n": key[2], "alpha": key[3], "epsilon": key[4],
                    "runs": len(members), "ate_err_mean": ate_m, "ate_err_se": ate_se,
                    "pehe_mean": pehe_m, "pehe_se": pehe_se})
    return out


def write_csv(path, rows, columns):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items() if k in columns})
    os.replace(tmp, path)


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
