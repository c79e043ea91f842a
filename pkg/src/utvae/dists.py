"""Diagonal Gaussian and Bernoulli heads with differentiable log-densities."""

from __future__ import annotations

import math

import numpy as np

from . import diffcore as dc

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
STD_FLOOR = 1e-6


class GaussianDiag:
    """Diagonal Gaussian over the last axis.

    Build from an unconstrained pre-activation with :meth:`from_raw`, which
    applies ``softplus(raw) + STD_FLOOR`` so the std is strictly positive.
    """

    def __init__(self, mean, std):
        mean, std = dc.as_tensor(mean), dc.as_tensor(std)
        if mean.shape != std.shape:
            raise dc.ShapeError(f"mean {mean.shape} and std {std.shape} differ")
        if np.any(std.value <= 0.0):
            raise dc.DomainError("Gaussian std must be strictly positive")
        self.mean = mean
        self.std = std

    @classmethod
    def from_raw(cls, mean, raw_std):
        return cls(mean, dc.softplus(raw_std) + STD_FLOOR)

    @property
    def dim(self):
        return self.mean.shape[-1]

    def log_prob(self, x):
        return gaussian_log_prob(self, x)


class BernoulliP:
    """Bernoulli parameterised by its logit."""

    def __init__(self, logit):
        self.logit = dc.as_tensor(logit)

    @property
    def prob(self):
        return dc.sigmoid(self.logit)

    def log_prob(self, y):
        return bernoulli_log_prob(self, y)


class StdNormalPrior:
    def __init__(self, dim):
        self.dim = int(dim)

    def log_prob(self, z):
        z = dc.as_tensor(z)
        return dc.sum(-0.5 * dc.square(z) - HALF_LOG_2PI, axis=-1)


def gaussian_log_prob(g, x):
    """Per-sample log density, summed over the last axis."""
    x = dc.as_tensor(x)
    if x.shape[-1] != g.mean.shape[-1]:
        raise dc.ShapeError(f"x has dim {x.shape[-1]}, distribution has {g.mean.shape[-1]}")
    resid = (x - g.mean) / g.std
    lp = -HALF_LOG_2PI - dc.log(g.std) - 0.5 * dc.square(resid)
    return dc.sum(lp, axis=-1)


def bernoulli_log_prob(b, y):
    """``y*log p + (1-y)*log(1-p)`` as ``y*logit - softplus(logit)``, summed over the last axis."""
    yv = np.asarray(y.value if isinstance(y, dc.Tensor) else y, dtype=np.float64)
    if not np.all((yv == 0.0) | (yv == 1.0)):
        raise dc.DomainError("Bernoulli targets must be 0 or 1")
    if yv.shape[-1:] != b.logit.shape[-1:]:
        raise dc.ShapeError(f"y {yv.shape} does not match logits {b.logit.shape}")
    return dc.sum(b.logit * yv - dc.softplus(b.logit), axis=-1)


def kl_to_std_normal(g):
    """Closed-form KL(g || N(0, I)) per sample."""
    mu, sd = g.mean, g.std
    return 0.5 * dc.sum(dc.square(mu) + dc.square(sd) - 1.0 - 2.0 * dc.log(sd), axis=-1)


def reparam_sample(g, noise):
    """``mean + std * noise``; the noise is a constant drawn by the caller."""
    noise = np.asarray(noise.value if isinstance(noise, dc.Tensor) else noise, dtype=np.float64)
    if noise.shape[-1] != g.dim:
        raise dc.ShapeError(f"noise dim {noise.shape[-1]} != latent dim {g.dim}")
    return g.mean + g.std * noise
