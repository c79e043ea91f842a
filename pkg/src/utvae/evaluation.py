"""Treatment-effect metrics and the inverse-probability-weighting baseline."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .networks import CfQueryConfig


class MissingOracleError(ValueError):
    pass


@dataclass
class AteResult:
    ate_pred: float
    ate_true: float

    @property
    def abs_err(self):
        return abs(self.ate_pred - self.ate_true)


@dataclass
class PeheResult:
    pehe: float


@dataclass
class IpwResult:
    mu1_hat: float
    mu0_hat: float
    source: str = "estimated"

    @property
    def ate_hat(self):
        return self.mu1_hat - self.mu0_hat


def _oracle_ite(ds):
    if not ds.has_oracle:
        raise MissingOracleError("evaluation dataset has no oracle potential-outcome means")
    return ds.mu1 - ds.mu0


def predicted_ite(model, X, cfg=None, rng=None):
    mu0, mu1 = model.counterfactual_outcomes(X, cfg or CfQueryConfig(), rng)
    return mu1 - mu0


def ate_from_ite(ite_pred, ite_true):
    return AteResult(float(np.mean(ite_pred)), float(np.mean(ite_true)))


def pehe_from_ite(ite_pred, ite_true):
    d = np.asarray(ite_pred, dtype=np.float64) - np.asarray(ite_true, dtype=np.float64)
    return PeheResult(float(np.sqrt(np.mean(d * d))))


def model_ate(model, eval_ds, cfg=None, rng=None):
    true = _oracle_ite(eval_ds)
    return ate_from_ite(predicted_ite(model, eval_ds.X, cfg, rng), true)


def model_pehe(model, eval_ds, cfg=None, rng=None):
    true = _oracle_ite(eval_ds)
    return pehe_from_ite(predicted_ite(model, eval_ds.X, cfg, rng), true)


def model_metrics(model, eval_ds, cfg=None, rng=None):
    """ATE and PEHE from a single counterfactual query pass."""
    true = _oracle_ite(eval_ds)
    pred = predicted_ite(model, eval_ds.X, cfg, rng)
    return ate_from_ite(pred, true), pehe_from_ite(pred, true)


def ipw_ate(ds, e, source="estimated"):
    """Horvitz-Thompson estimate: mean(T*Y/e) - mean((1-T)*Y/(1-e))."""
    e = np.asarray(getattr(e, "e", e), dtype=np.float64).reshape(-1)
    if e.shape[0] != len(ds):
        raise ValueError("propensities do not align with the dataset")
    if np.any((e <= 0.0) | (e >= 1.0)):
        raise ValueError("propensities must lie strictly inside (0, 1)")
    t, y = ds.T, ds.Y
    return IpwResult(float(np.mean(t * y / e)), float(np.mean((1 - t) * y / (1 - e))), source)


def naive_ate(ds):
    """Unadjusted difference in group means."""
    t, y = ds.T, ds.Y
    return float(y[t == 1].mean() - y[t == 0].mean())


def enumerate_ipw_world(world):
    """Exact IPW expectations over a finite world, as ``Fraction`` values.

    ``world`` lists ``(p_x, e_x, y0, y1)``: T given X is Bernoulli(e_x) and the
    potential outcomes are deterministic given X.  Each (x, t) cell has
    probability ``p_x * P(T=t | x)``.  Returns
    ``(E[1[T=1] Y / e(X)], E[1[T=0] Y / (1 - e(X))])``.
    """
    ipw1 = Fraction(0)
    ipw0 = Fraction(0)
    for px, ex, y0, y1 in world:
        for t in (0, 1):
            p = px * (ex if t else 1 - ex)
            y = y1 if t else y0
            if t:
                ipw1 += p * y / ex
            else:
                ipw0 += p * y / (1 - ex)
    return ipw1, ipw0


def mean_and_se(values):
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    se = float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se
