"""Training objectives (CEVAE, UTVAE, UTVAE-GEN, UTVAE-INF) and the minibatch loop."""

from __future__ import annotations

import csv
import enum
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .dists import kl_to_std_normal

logger = logging.getLogger(__name__)

THETA, PHI, VARPHI = dc.Group.GENERATIVE, dc.Group.INFERENCE, dc.Group.AUXILIARY


class ObjectiveKind(enum.Enum):
    CEVAE = "cevae"
    UTVAE = "utvae"
    UTVAE_GEN = "utvae_gen"
    UTVAE_INF = "utvae_inf"

    @property
    def weighted(self):
        return self is not ObjectiveKind.CEVAE


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    seed: int = 0
    elbo_mc_samples: int = 1
    objective: ObjectiveKind = ObjectiveKind.CEVAE
    val_mc_samples: int = 1

    def __post_init__(self):
        self.objective = ObjectiveKind(self.objective)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.elbo_mc_samples < 1:
            raise ValueError("elbo_mc_samples must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)  # dicts: epoch, train_elbo, val_elbo, aux_ll
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def column(self, key):
        return [row[key] for row in self.epochs]

    def to_csv(self, path):
        tmp = f"{path}.tmp{os.getpid()}"
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_elbo", "val_elbo", "aux_ll"])
            for r in self.epochs:
                w.writerow([r["epoch"], repr(r["train_elbo"]), repr(r["val_elbo"]), repr(r["aux_ll"])])
        os.replace(tmp, path)


@dataclass
class Batch:
    x: np.ndarray
    t: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.x.shape[0]


def batch_from(ds, rows=None, y_loc=0.0, y_scale=1.0):
    rows = slice(None) if rows is None else rows
    y = ds.Y[rows]
    if ds.y_type != "binary":
        y = (y - y_loc) / y_scale
    return Batch(ds.X[rows], ds.T[rows].reshape(-1, 1), y.reshape(-1, 1))


def draw_noise(rng, n, z_dim, S=1):
    return rng.standard_normal((S, n, z_dim))


# -------------------------------------------------------------- objectives

def elbo_per_sample(model, batch, noise, tape=None):
    """Unreduced ELBO: (1/S) sum_s log p(x,t,y|z_s) - KL(q(z|x,t,y) || N(0, I)).

    ``noise`` has shape (S, B, z_dim); z_s = mean + std * noise[s].
    """
    noise = np.asarray(noise, dtype=np.float64)
    if noise.ndim == 2:
        noise = noise[None]
    S, B, d = noise.shape
    if B != len(batch) or d != model.arch.z_dim:
        raise dc.ShapeError(f"noise shape {noise.shape} does not match batch {len(batch)} / z_dim {model.arch.z_dim}")
    q = model.inference_posterior(batch.x, batch.t, batch.y, tape)
    if S == 1:
        z = q.mean + q.std * noise[0]
        recon = model.generative_log_prob(z, batch.x, batch.t, batch.y, tape)
    else:
        rep = np.tile(np.arange(B), S)
        z = dc.take(q.mean, rep) + dc.take(q.std, rep) * noise.reshape(S * B, d)
        lp = model.generative_log_prob(z, batch.x[rep], batch.t[rep], batch.y[rep], tape)
        recon = dc.mean(dc.reshape(lp, (S, B)), axis=0)
    return recon - kl_to_std_normal(q)


def aux_loss(model, batch, tape=None):
    """log q(t|x) + log q(y|x,t) per sample (always unweighted)."""
    lt = model.aux_treatment(batch.x, tape).log_prob(batch.t)
    ly = model.aux_outcome(batch.x, batch.t, tape).log_prob(batch.y)
    return lt + ly


def _check_weights(kind, weights, n):
    kind = ObjectiveKind(kind)
    if kind.weighted:
        if weights is None:
            raise ValueError(f"{kind.value} needs importance weights")
        w = np.asarray(getattr(weights, "w", weights), dtype=np.float64).reshape(-1)
        if w.shape[0] != n:
            raise ValueError(f"{w.shape[0]} weights for a batch of {n}")
        return kind, w
    if weights is not None:
        raise ValueError("cevae must not receive importance weights")
    return kind, None


def _loss_pass(model, batch, noise, w, scale=1.0):
    """One forward/backward of -(mean[w * elbo] + mean[aux]).

    Returns (gradient map, per-sample elbo values, per-sample aux values).
    """
    tape = dc.Tape()
    for p in model.params.values():
        tape.watch(p)
    elbo = elbo_per_sample(model, batch, noise, tape)
    aux = aux_loss(model, batch, tape)
    fit = elbo if w is None else elbo * w.reshape(elbo.shape)
    if scale != 1.0:
        fit = fit * scale
    loss = -(dc.mean(fit) + dc.mean(aux))
    if not np.isfinite(loss.value):
        raise TrainingError("non-finite loss")
    return tape.backward(loss), elbo.value, aux.value


def _harvest(model, grads, group):
    return {pid: grads[pid] for pid in model.group_ids(group)}


def objective_gradients(model, batch, weights, kind, noise, half_scales=(1.0, 1.0), return_values=False):
    """Gradient map of the loss (negated objective) for ``kind``.

    UTVAE-GEN takes theta's gradient from the weighted pass and phi's from
    the unweighted pass; UTVAE-INF the reverse.  Each pass is a separate
    forward/backward on the same noise, so the other group's parameters act
    as constants.  ``half_scales`` multiplies the (weighted, unweighted)
    pass objectives; it exists for testing the blocking.
    """
    kind, w = _check_weights(kind, weights, len(batch))
    if kind is ObjectiveKind.CEVAE:
        grads, elbo, aux = _loss_pass(model, batch, noise, None)
    elif kind is ObjectiveKind.UTVAE:
        grads, elbo, aux = _loss_pass(model, batch, noise, w)
    else:
        g_w, _, _ = _loss_pass(model, batch, noise, w, half_scales[0])
        g_u, elbo, aux = _loss_pass(model, batch, noise, None, half_scales[1])
        weighted_group = THETA if kind is ObjectiveKind.UTVAE_GEN else PHI
        plain_group = PHI if kind is ObjectiveKind.UTVAE_GEN else THETA
        grads = {}
        grads.update(_harvest(model, g_w, weighted_group))
        grads.update(_harvest(model, g_u, plain_group))
        grads.update(_harvest(model, g_u, VARPHI))
    if return_values:
        return grads, elbo, aux
    return grads


# ------------------------------------------------------------------ loop

def evaluate_elbo(model, ds, rng, S=1, chunk=4096):
    """Mean unweighted ELBO over a dataset (no tape)."""
    if ds is None or len(ds) == 0:
        return float("nan")
    total = 0.0
    for lo in range(0, len(ds), chunk):
        rows = np.arange(lo, min(lo + chunk, len(ds)))
        b = batch_from(ds, rows, model.y_loc, model.y_scale)
        e = elbo_per_sample(model, b, draw_noise(rng, len(b), model.arch.z_dim, S))
        total += float(e.value.sum())
    return total / len(ds)


def train(model, train_data, val_data=None, weights=None, cfg=None, progress=None):
    """Fit ``model`` in place with Adam; returns a :class:`TrainReport`."""
    cfg = cfg or TrainConfig()
    kind = cfg.objective
    n = len(train_data)
    w_all = None
    if kind.weighted:
        if weights is None:
            raise ValueError(f"{kind.value} needs importance weights")
        w_all = np.asarray(getattr(weights, "w", weights), dtype=np.float64)
        if w_all.shape != (n,):
            raise ValueError("weights must align with the training rows")
    elif weights is not None:
        raise ValueError("cevae must not receive importance weights")

    stats = train_data.normalization or {}
    if train_data.y_type != "binary":
        model.y_loc = float(stats.get("y_mean", 0.0))
        model.y_scale = float(stats.get("y_std", 1.0))

    rng = np.random.default_rng([cfg.seed, 0])
    val_rng = np.random.default_rng([cfg.seed, 1])
    opt = dc.AdamState(lr=cfg.lr)
    report = TrainReport()
    started = time.perf_counter()
    n_steps = math.ceil(n / cfg.batch_size)
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        elbo_sum = aux_sum = 0.0
        for step in range(n_steps):
            rows = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            b = batch_from(train_data, rows, model.y_loc, model.y_scale)
            noise = draw_noise(rng, len(rows), model.arch.z_dim, cfg.elbo_mc_samples)
            bw = None if w_all is None else w_all[rows]
            try:
                grads, elbo, aux = objective_gradients(model, b, bw, kind, noise, return_values=True)
                opt.update(model.params, grads)
            except (TrainingError, dc.NonFiniteGradientError) as exc:
                raise TrainingError(f"epoch {epoch} step {step}: {exc}") from exc
            elbo_sum += float(elbo.sum())
            aux_sum += float(aux.sum())
        row = {
            "epoch": epoch,
            "train_elbo": elbo_sum / n,
            "val_elbo": evaluate_elbo(model, val_data, val_rng, cfg.val_mc_samples),
            "aux_ll": aux_sum / n,
        }
        report.epochs.append(row)
        if progress is not None:
            progress(row)
        logger.debug("epoch %d train_elbo=%.4f val_elbo=%.4f aux=%.4f", epoch, row["train_elbo"],
                     row["val_elbo"], row["aux_ll"])
    report.wall_clock = time.perf_counter() - started
    model.trained = True
    return report
