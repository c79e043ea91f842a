"""Command-line harness: gen, train, eval, sweep, ipw.

Exit codes: 0 success, 1 validation error, 2 runtime failure.

Config files (``--config``) are INI-style: ``[section]`` headers followed by
``key = value`` lines, ``#`` comments.  Keys are flag names without the
leading dashes (``-`` and ``_`` are interchangeable); sections are only for
grouping and are merged in file order.  Flags given on the command line win.
List-valued keys (objective, epsilon, alpha, n in ``sweep``) take
comma-separated values.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import datagen
from .evaluation import ipw_ate, model_metrics, naive_ate
from .experiment import (IHDP_EPS_GRID, LONG_COLUMNS, SYNTHETIC_EPS_GRID, RunSpec, SweepConfig,
                         config_hash, prepare_data, run_cell, run_sweep, summarize, write_csv)
from .networks import CevaeModel, CfQueryConfig
from .propensity import build_index, estimate_propensity

logger = logging.getLogger("utvae")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2

DEFAULTS = {
    "dataset": "synthetic",
    "objective": "cevae",
    "epsilon": None,
    "alpha": 0.75,
    "n": 4000,
    "seed": 0,
    "epochs": 100,
    "lr": 1e-3,
    "batch": 256,
    "latent_dim": None,
    "mc_samples": 100,
    "hidden_layers": 3,
    "hidden_units": 200,
    "workers": 1,
    "seeds": 30,
    "replicates": 8,
    "select": "val_elbo",
    "variance_form": "mixture",
    "propensity": "both",
    "smoothing": 1.0,
    "clip_lo": 0.05,
    "clip_hi": 0.95,
    "n_val": 1000,
    "n_test": 1000,
    "checkpoint": None,
}


class ValidationError(ValueError):
    pass


def _write_json(path, obj):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    os.replace(tmp, path)


def load_config(path):
    cp = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not cp.read(path):
        raise ValidationError(f"cannot read config file {path}")
    out = {}
    for section in cp.sections():
        for key, value in cp.items(section):
            out[key.replace("-", "_")] = value
    return out


class Options:
    """Flags, then config file, then built-in defaults."""

    def __init__(self, args):
        self.args = vars(args)
        self.conf = load_config(args.config) if getattr(args, "config", None) else {}

    def get(self, key, cast=None):
        v = self.args.get(key)
        if v is None:
            v = self.conf.get(key)
        if v is None:
            v = DEFAULTS.get(key)
        if v is None or cast is None:
            return v
        try:
            return cast(v)
        except (TypeError, ValueError) as exc:
            raise ValidationError(f"bad value for {key}: {v!r}") from exc

    def get_list(self, key, cast, default=()):
        v = self.args.get(key)
        if v is None:
            v = self.conf.get(key)
        if v is None:
            return tuple(default)
        items = v if isinstance(v, (list, tuple)) else str(v).split(",")
        try:
            return tuple(cast(str(s).strip()) for s in items if str(s).strip())
        except ValueError as exc:
            raise ValidationError(f"bad list for {key}: {v!r}") from exc

    def out_dir(self):
        d = self.args.get("out_dir") or self.conf.get("out_dir") or os.environ.get("UTVAE_OUT_DIR") or "runs"
        os.makedirs(d, exist_ok=True)
        return d


def _check_alpha(alpha):
    if not 0.0 < alpha < 1.0:
        raise ValidationError(f"--alpha must lie in the open interval (0, 1), got {alpha}")
    return alpha


def _run_spec(opts, objective=None, epsilon=None, alpha=None, n=None):
    objective = objective or opts.get("objective")
    if objective not in ("cevae", "utvae", "utvae_gen", "utvae_inf"):
        raise ValidationError(f"unknown objective {objective!r}")
    if epsilon is None and objective != "cevae":
        epsilon = opts.get("epsilon", float)
    if objective == "cevae" and opts.get("epsilon") is not None and opts.args.get("command") != "sweep":
        logger.warning("--epsilon is ignored for the cevae objective")
        epsilon = None
    if epsilon is not None and not epsilon > 0:
        raise ValidationError("--epsilon must be > 0")
    dataset = opts.get("dataset")
    if dataset != "synthetic" and not os.path.exists(datagen.ihdp_path(dataset, opts.get("replicate", int) or 1)):
        raise ValidationError(f"dataset {dataset!r} not found")
    hidden_units = opts.get("hidden_units", int)
    return RunSpec(
        dataset=dataset, objective=objective, epsilon=epsilon, seed=opts.get("seed", int),
        n=n if n is not None else opts.get("n", int),
        alpha=_check_alpha(alpha if alpha is not None else opts.get("alpha", float)),
        n_val=opts.get("n_val", int), n_test=opts.get("n_test", int),
        replicate=opts.get("replicate", int) or 1, variance_form=opts.get("variance_form"),
        epochs=opts.get("epochs", int), batch_size=opts.get("batch", int), lr=opts.get("lr", float),
        z_dim=opts.get("latent_dim", int), hidden_layers=opts.get("hidden_layers", int),
        hidden_units=hidden_units, mc_samples=opts.get("mc_samples", int),
        smoothing=opts.get("smoothing", float), clip_lo=opts.get("clip_lo", float),
        clip_hi=opts.get("clip_hi", float),
    )


# --------------------------------------------------------------- commands

def cmd_gen(opts):
    n = opts.get("n", int)
    alpha = _check_alpha(opts.get("alpha", float))
    seed = opts.get("seed", int)
    if n < 1:
        raise ValidationError("--n must be >= 1")
    cfg = datagen.SyntheticConfig(n=n, alpha=alpha, seed=seed, variance_form=opts.get("variance_form"))
    ds = datagen.gen_synthetic(cfg)
    out = opts.out_dir()
    stem = os.path.join(out, f"synthetic_n{n}_a{alpha:g}_s{seed}")
    datagen.write_synthetic_csv(ds, stem + ".csv")
    manifest = {"kind": "synthetic", "n": n, "alpha": alpha, "seed": seed, "rho_z1": cfg.rho_z1,
                "rho_z0": cfg.rho_z0, "variance_form": cfg.variance_form, "csv": os.path.basename(stem + ".csv"),
                "columns": datagen.SYNTHETIC_COLUMNS, "closed_form_ate": datagen.closed_form_ate()}
    _write_json(stem + ".manifest.json", manifest)
    print(stem + ".csv")
    return manifest


def cmd_train(opts):
    spec = _run_spec(opts)
    out = opts.out_dir()
    tag = f"{spec.objective}_s{spec.seed}_{config_hash(spec.resolved())}"
    spec.checkpoint = opts.get("checkpoint") or os.path.join(out, tag + ".ckpt")
    record, report, _ = run_cell(spec)
    report.to_csv(os.path.join(out, tag + ".train.csv"))
    _write_json(os.path.join(out, tag + ".run.json"), record)
    m = record["metrics"]
    print(f"{spec.objective} seed={spec.seed} eps={spec.epsilon} ate_err={m['ate_err']:.6f} pehe={m['pehe']:.6f}")
    return record


def cmd_eval(opts):
    ckpt = opts.get("checkpoint")
    if not ckpt or not os.path.exists(ckpt):
        raise ValidationError("--checkpoint must name an existing checkpoint file")
    spec = _run_spec(opts)
    _, _, te = prepare_data(spec)
    model = CevaeModel.load(ckpt)
    ate, pehe = model_metrics(model, te, CfQueryConfig(spec.mc_samples), np.random.default_rng([spec.seed, 2]))
    row = {"dataset": spec.dataset, "objective": spec.objective, "seed": spec.seed,
           "epsilon": spec.epsilon, "ate_err": ate.abs_err, "pehe": pehe.pehe, "runtime_s": 0.0}
    path = os.path.join(opts.out_dir(), "eval_metrics.csv")
    write_csv(path, [row], list(row))
    print(f"ate_pred={ate.ate_pred:.6f} ate_true={ate.ate_true:.6f} ate_err={ate.abs_err:.6f} pehe={pehe.pehe:.6f}")
    return row


def sweep_config(opts):
    alphas = tuple(_check_alpha(a) for a in opts.get_list("alpha", float))
    ns = opts.get_list("n", int)
    base = _run_spec(opts, objective="cevae", alpha=alphas[0] if alphas else None, n=ns[0] if ns else None)
    synthetic = base.dataset == "synthetic"
    objectives = opts.get_list("objective", str, ("cevae", "utvae", "utvae_inf", "utvae_gen"))
    for o in objectives:
        if o not in ("cevae", "utvae", "utvae_gen", "utvae_inf"):
            raise ValidationError(f"unknown objective {o!r}")
    eps = opts.get_list("epsilon", float, SYNTHETIC_EPS_GRID if synthetic else IHDP_EPS_GRID)
    if any(not e > 0 for e in eps):
        raise ValidationError("every epsilon must be > 0")
    n_seeds = opts.get("seeds", int)
    reps = () if synthetic else tuple(range(1, opts.get("replicates", int) + 1))
    select = opts.get("select")
    if select not in ("val_elbo", "all"):
        raise ValidationError("--select must be val_elbo or all")
    return SweepConfig(base=base, objectives=objectives, epsilons=eps, seeds=tuple(range(n_seeds)), ns=ns,
                       alphas=alphas, replicates=reps, workers=opts.get("workers", int), select=select)


def cmd_sweep(opts):
    cfg = sweep_config(opts)
    out = opts.out_dir()
    rows = run_sweep(cfg, progress=lambda r: logger.info("cell %s %s seed=%s eps=%s ate_err=%s %s", r["objective"],
                                                         r["n"], r["seed"], r["epsilon"], r["ate_err"], r["error"]))
    write_csv(os.path.join(out, "sweep_long.csv"), rows, LONG_COLUMNS)
    summary = summarize(rows, cfg.select)
    cols = ["dataset", "objective", "n", "alpha", "epsilon", "runs", "ate_err_mean", "ate_err_se",
            "pehe_mean", "pehe_se"]
    write_csv(os.path.join(out, "sweep_summary.csv"), summary, cols)
    for s in summary:
        print(f"{s['objective']:>10} n={s['n']} alpha={s['alpha']} eps={s['epsilon']!s:>4} runs={s['runs']:>3} "
              f"ate_err={s['ate_err_mean']:.4f}±{s['ate_err_se']:.4f} pehe={s['pehe_mean']:.4f}±{s['pehe_se']:.4f}")
    failed = sum(1 for r in rows if r["error"])
    if failed:
        logger.warning("%d of %d cells failed; see the error column", failed, len(rows))
    return rows, summary


def ipw_rows(ds, label, alpha, eps_grid, mode, smoothing, clip, latent=None):
    rows = []
    ate_true = float(np.mean(ds.ite)) if ds.has_oracle else float("nan")

    def add(source, eps, e):
        r = ipw_ate(ds, e, source)
        clipped = int(np.sum((e <= clip[0]) | (e >= clip[1])))
        rows.append({"dataset": label, "source": source, "epsilon": "" if eps is None else eps,
                     "mu1_hat": r.mu1_hat, "mu0_hat": r.mu0_hat, "ate_hat": r.ate_hat, "ate_true": ate_true,
                     "ate_err": abs(r.ate_hat - ate_true), "n_clipped": clipped})

    if mode in ("oracle", "both") and alpha is not None:
        cfg = datagen.SyntheticConfig(n=len(ds), alpha=alpha)
        add("oracle_x", None, datagen.oracle_propensity_x(ds.X[:, 0], cfg))
        if latent is not None:
            add("oracle_z", None, datagen.oracle_propensity_z(latent, alpha))
    if mode in ("estimated", "both"):
        Xn, _ = datagen.normalize(ds)
        index = build_index(Xn.X)
        for eps in eps_grid:
            est = estimate_propensity(index, ds.T.astype(np.int64), eps, smoothing, *clip)
            add("estimated", eps, est.e)
    rows.append({"dataset": label, "source": "naive", "epsilon": "", "mu1_hat": float("nan"),
                 "mu0_hat": float("nan"), "ate_hat": naive_ate(ds), "ate_true": ate_true,
                 "ate_err": abs(naive_ate(ds) - ate_true), "n_clipped": 0})
    return rows


def cmd_ipw(opts):
    mode = opts.get("propensity")
    if mode not in ("oracle", "estimated", "both"):
        raise ValidationError("--propensity must be oracle, estimated or both")
    dataset = opts.get("dataset")
    smoothing = opts.get("smoothing", float)
    clip = (opts.get("clip_lo", float), opts.get("clip_hi", float))
    if dataset == "synthetic":
        alpha = _check_alpha(opts.get("alpha", float))
        cfg = datagen.SyntheticConfig(n=opts.get("n", int), alpha=alpha, seed=opts.get("seed", int),
                                      variance_form=opts.get("variance_form"))
        ds = datagen.gen_synthetic(cfg)
        eps = opts.get_list("epsilon", float, SYNTHETIC_EPS_GRID)
        rows = ipw_rows(ds, "synthetic", alpha, eps, mode, smoothing, clip, latent=ds.extras["z"])
    else:
        eps = opts.get_list("epsilon", float, IHDP_EPS_GRID)
        reps = opts.get("replicates", int)
        rows = []
        for rep in range(1, reps + 1):
            path = datagen.ihdp_path(dataset, rep)
            if not os.path.exists(path):
                raise ValidationError(f"missing IHDP replicate file {path}")
            ds = datagen.load_ihdp(dataset, rep)
            rows += ipw_rows(ds, f"ihdp{rep}", None, eps, "estimated", smoothing, clip)
    path = os.path.join(opts.out_dir(), "ipw.csv")
    write_csv(path, rows, list(rows[0]))
    for r in rows:
        print(f"{r['dataset']:>10} {r['source']:>10} eps={r['epsilon']!s:>4} ate={r['ate_hat']:.4f} "
              f"err={r['ate_err']:.4f} clipped={r['n_clipped']}")
    return rows


# ------------------------------------------------------------------ parser

def build_parser():
    p = argparse.ArgumentParser(prog="utvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config")
        sp.add_argument("--dataset", help="'synthetic', a synthetic CSV, or an IHDP file/directory")
        sp.add_argument("--alpha", type=str)
        sp.add_argument("--n", type=str)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out-dir", dest="out_dir")
        sp.add_argument("--variance-form", dest="variance_form", choices=["mixture", "literal"])
        sp.add_argument("--replicate", type=int)
        return sp

    def model_flags(sp):
        sp.add_argument("--objective")
        sp.add_argument("--epsilon", type=str)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--lr", type=float)
        sp.add_argument("--batch", type=int)
        sp.add_argument("--latent-dim", dest="latent_dim", type=int)
        sp.add_argument("--mc-samples", dest="mc_samples", type=int)
        sp.add_argument("--hidden-layers", dest="hidden_layers", type=int)
        sp.add_argument("--hidden-units", dest="hidden_units", type=int)
        sp.add_argument("--smoothing", type=float)
        sp.add_argument("--clip-lo", dest="clip_lo", type=float)
        sp.add_argument("--clip-hi", dest="clip_hi", type=float)
        return sp

    common(sub.add_parser("gen", help="generate a synthetic dataset"))
    tr = model_flags(common(sub.add_parser("train", help="train one objective/epsilon/seed cell")))
    tr.add_argument("--checkpoint")
    ev = model_flags(common(sub.add_parser("eval", help="evaluate a checkpoint")))
    ev.add_argument("--checkpoint")
    sw = model_flags(common(sub.add_parser("sweep", help="run an experiment grid")))
    sw.add_argument("--workers", type=int)
    sw.add_argument("--seeds", type=int, help="number of seeds per cell")
    sw.add_argument("--replicates", type=int)
    sw.add_argument("--select", choices=["val_elbo", "all"])
    ip = common(sub.add_parser("ipw", help="inverse-probability-weighting baseline"))
    ip.add_argument("--epsilon", type=str)
    ip.add_argument("--propensity", choices=["oracle", "estimated", "both"])
    ip.add_argument("--replicates", type=int)
    ip.add_argument("--smoothing", type=float)
    ip.add_argument("--clip-lo", dest="clip_lo", type=float)
    ip.add_argument("--clip-hi", dest="clip_hi", type=float)
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep, "ipw": cmd_ipw}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # single-valued commands read scalar flags; sweep/ipw parse lists themselves
        if args.command in ("gen", "train", "eval"):
            for key in ("epsilon", "alpha", "n"):
                v = getattr(args, key, None)
                if v is not None and "," in str(v):
                    raise ValidationError(f"--{key} takes a single value for {args.command}")
        opts = Options(args)
        COMMANDS[args.command](opts)
    except (ValidationError, datagen.DataFormatError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
