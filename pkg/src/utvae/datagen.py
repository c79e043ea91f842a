"""Synthetic hidden-confounder data, the IHDP CSV loader, normalisation and splits."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import norm

logger = logging.getLogger(__name__)

IHDP_COLUMNS = ["t", "y_factual", "y_cfactual", "mu0", "mu1"] + [f"x{i}" for i in range(1, 26)]
SYNTHETIC_COLUMNS = ["z", "t", "x", "y", "mu0", "mu1"]


class DataFormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n: int = 4000
    alpha: float = 0.75
    rho_z1: float = 3.0
    rho_z0: float = 5.0
    seed: int = 0
    variance_form: str = "mixture"  # or "literal"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.rho_z1 <= 0 or self.rho_z0 <= 0:
            raise ValueError("rho values must be positive")
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.variance_form not in ("mixture", "literal"):
            raise ValueError(f"unknown variance_form {self.variance_form!r}")

    def proxy_std(self):
        """(std of x | z=0, std of x | z=1)."""
        if self.variance_form == "mixture":
            return self.rho_z0, self.rho_z1
        # rho_z1^2 + rho_z0^2 (1 - z), read literally
        return float(np.hypot(self.rho_z1, self.rho_z0)), self.rho_z1


@dataclass
class Dataset:
    X: np.ndarray
    T: np.ndarray
    Y: np.ndarray
    y_type: str = "binary"
    mu0: np.ndarray | None = None
    mu1: np.ndarray | None = None
    x_binary_mask: list = field(default_factory=list)
    normalization: dict | None = None
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        if self.X.ndim == 1:
            self.X = self.X[:, None]
        self.T = np.asarray(self.T, dtype=np.float64).reshape(-1)
        self.Y = np.asarray(self.Y, dtype=np.float64).reshape(-1)
        n = self.X.shape[0]
        if self.T.shape[0] != n or self.Y.shape[0] != n:
            raise ValueError("X, T, Y row counts differ")
        if not np.all((self.T == 0) | (self.T == 1)):
            raise DataFormatError("treatment must be binary")
        if self.y_type == "binary" and not np.all((self.Y == 0) | (self.Y == 1)):
            raise DataFormatError("binary outcome column contains values other than 0/1")
        if not self.x_binary_mask:
            self.x_binary_mask = [False] * self.X.shape[1]

    def __len__(self):
        return self.X.shape[0]

    @property
    def has_oracle(self):
        return self.mu0 is not None and self.mu1 is not None

    @property
    def ite(self):
        if not self.has_oracle:
            raise ValueError("dataset has no oracle potential-outcome means")
        return self.mu1 - self.mu0

    def subset(self, rows):
        rows = np.asarray(rows)
        pick = lambda a: None if a is None else a[rows]
        extras = {k: (v[rows] if isinstance(v, np.ndarray) and v.shape[:1] == (len(self),) else v)
                  for k, v in self.extras.items()}
        return replace(self, X=self.X[rows], T=self.T[rows], Y=self.Y[rows],
                       mu0=pick(self.mu0), mu1=pick(self.mu1), extras=extras)


# ------------------------------------------------------------- synthetic

def outcome_prob(t, z):
    return expit(3.0 * (z + 2.0 * (2.0 * t - 1.0)))


def posterior_z1(x, cfg):
    """p(z=1 | x) by Bayes rule with p(z=1) = 1/2."""
    s0, s1 = cfg.proxy_std()
    l1 = norm.logpdf(x, loc=1.0, scale=s1)
    l0 = norm.logpdf(x, loc=0.0, scale=s0)
    return expit(l1 - l0)


def oracle_means(x, cfg):
    p1 = posterior_z1(x, cfg)
    mu0 = p1 * outcome_prob(0, 1) + (1 - p1) * outcome_prob(0, 0)
    mu1 = p1 * outcome_prob(1, 1) + (1 - p1) * outcome_prob(1, 0)
    return mu0, mu1


def oracle_propensity_x(x, cfg):
    """p(T=1 | x): the assignment rule marginalised over p(z | x)."""
    p1 = posterior_z1(x, cfg)
    return cfg.alpha * p1 + (1 - cfg.alpha) * (1 - p1)


def oracle_propensity_z(z, alpha):
    """p(T=1 | z), the actual assignment mechanism."""
    z = np.asarray(z, dtype=np.float64)
    return alpha * z + (1 - alpha) * (1 - z)


def closed_form_ate():
    """Population ATE of the synthetic process by enumerating z in {0, 1}."""
    return float(sum(0.5 * (outcome_prob(1, z) - outcome_prob(0, z)) for z in (0, 1)))


def gen_synthetic(cfg):
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n
    z = rng.binomial(1, 0.5, n).astype(np.float64)
    t = (rng.random(n) < oracle_propensity_z(z, cfg.alpha)).astype(np.float64)
    s0, s1 = cfg.proxy_std()
    x = z + np.where(z == 1, s1, s0) * rng.standard_normal(n)
    y = (rng.random(n) < outcome_prob(t, z)).astype(np.float64)
    mu0, mu1 = oracle_means(x, cfg)
    return Dataset(x[:, None], t, y, "binary", mu0, mu1, [False],
                   extras={"z": z, "config": cfg})


def write_synthetic_csv(ds, path):
    z = ds.extras.get("z")
    if z is None:
        raise ValueError("dataset carries no latent z column")
    rows = zip(z, ds.T, ds.X[:, 0], ds.Y, ds.mu0, ds.mu1)
    _atomic_csv(path, SYNTHETIC_COLUMNS,
                [[int(a), int(b), repr(float(c)), int(d), repr(float(e)), repr(float(f))]
                 for a, b, c, d, e, f in rows])


def read_synthetic_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != SYNTHETIC_COLUMNS:
            raise DataFormatError(f"{path}: expected header {SYNTHETIC_COLUMNS}, got {header}")
        rows = [[float(v) for v in r] for r in reader if r]
    a = np.array(rows).reshape(-1, len(SYNTHETIC_COLUMNS))
    return Dataset(a[:, 2:3], a[:, 1], a[:, 3], "binary", a[:, 4], a[:, 5], [False], extras={"z": a[:, 0]})


def _atomic_csv(path, header, rows):
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    os.replace(tmp, path)


# ------------------------------------------------------------------ IHDP

def ihdp_path(path, replicate):
    """Resolve a replicate file: ``path`` itself, or ``ihdp_npci_{replicate}.csv`` inside it."""
    if os.path.isdir(path):
        return os.path.join(path, f"ihdp_npci_{replicate}.csv")
    return path


def load_ihdp(path, replicate=1):
    """Load one IHDP replicate.

    Layout: ``t, y_factual, y_cfactual, mu0, mu1, x1..x25``, with or
    without a header row.  Two-valued covariate columns become 0/1 and are
    modelled as Bernoulli; the rest are Gaussian.
    """
    fname = ihdp_path(path, replicate)
    with open(fname, newline="") as fh:
        raw = [r for r in csv.reader(fh) if r]
    if not raw:
        raise DataFormatError(f"{fname}: empty file")
    if raw[0][0].strip().lower() == "t":
        header = [h.strip() for h in raw[0]]
        if header != IHDP_COLUMNS:
            raise DataFormatError(f"{fname}: unexpected header {header}")
        raw = raw[1:]
    data = []
    for lineno, row in enumerate(raw, 1):
        if len(row) != len(IHDP_COLUMNS):
            raise DataFormatError(f"{fname}: row {lineno} has {len(row)} columns, expected {len(IHDP_COLUMNS)}")
        try:
            data.append([float(v) for v in row])
        except ValueError as exc:
            raise DataFormatError(f"{fname}: row {lineno}: {exc}") from None
    a = np.array(data)
    t = a[:, 0]
    if not np.all((t == 0) | (t == 1)):
        raise DataFormatError(f"{fname}: treatment column must be 0/1")
    X = a[:, 5:].copy()
    mask = []
    for j in range(X.shape[1]):
        vals = np.unique(X[:, j])
        binary = len(vals) == 2
        if binary:
            X[:, j] = (X[:, j] == vals[1]).astype(np.float64)
        mask.append(binary)
    return Dataset(X, t, a[:, 1], "continuous", a[:, 3], a[:, 4], mask,
                   extras={"y_cfactual": a[:, 2], "replicate": replicate})


def remove_treated(ds, fraction, rng):
    """Drop a uniformly chosen ``fraction`` of the treated rows."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("fraction must lie in [0, 1)")
    treated = np.flatnonzero(ds.T == 1)
    drop = rng.choice(treated, size=int(round(fraction * len(treated))), replace=False)
    keep = np.setdiff1d(np.arange(len(ds)), drop)
    return ds.subset(keep)


# ---------------------------------------------------------- normalisation

@dataclass
class Normalizer:
    cont_cols: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    keep_cols: np.ndarray
    y_mean: float = 0.0
    y_std: float = 1.0

    @classmethod
    def fit(cls, ds, scale_y=None):
        mask = np.asarray(ds.x_binary_mask, dtype=bool)
        cont = np.flatnonzero(~mask)
        mean = ds.X[:, cont].mean(axis=0) if len(cont) else np.zeros(0)
        std = ds.X[:, cont].std(axis=0) if len(cont) else np.zeros(0)
        dead = cont[std <= 1e-12]
        for j in dead:
            logger.warning("dropping constant covariate column %d", j)
        keep = np.setdiff1d(np.arange(ds.X.shape[1]), dead)
        live = std > 1e-12
        if scale_y is None:
            scale_y = ds.y_type == "continuous"
        y_mean, y_std = (float(ds.Y.mean()), float(ds.Y.std())) if scale_y else (0.0, 1.0)
        if y_std <= 1e-12:
            y_mean, y_std = 0.0, 1.0
        return cls(cont[live], mean[live], std[live], keep, y_mean, y_std)

    def apply(self, ds):
        X = ds.X.copy()
        X[:, self.cont_cols] = (X[:, self.cont_cols] - self.mean) / self.std
        X = X[:, self.keep_cols]
        mask = [ds.x_binary_mask[j] for j in self.keep_cols]
        stats = {"cont_cols": self.cont_cols.tolist(), "mean": self.mean.tolist(),
                 "std": self.std.tolist(), "y_mean": self.y_mean, "y_std": self.y_std}
        return replace(ds, X=X, x_binary_mask=mask, normalization=stats)


def normalize(ds, stats_from=None):
    """Standardise continuous covariates with statistics from ``stats_from``
    (defaults to ``ds`` itself); binary columns are left untouched.  Returns
    the transformed dataset and the fitted :class:`Normalizer`."""
    norm_ = Normalizer.fit(ds if stats_from is None else stats_from)
    return norm_.apply(ds), norm_


# ----------------------------------------------------------------- splits

@dataclass
class SplitSpec:
    train: float | int = 0.7
    val: float | int = 0.15
    test: float | int = 0.15
    replicate: int = 0
    seed: int = 0

    def counts(self, n):
        parts = (self.train, self.val, self.test)
        if all(isinstance(p, (int, np.integer)) and not isinstance(p, bool) for p in parts):
            if sum(parts) != n:
                raise ValueError(f"split counts {parts} do not sum to {n}")
            return tuple(int(p) for p in parts)
        if any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ValueError(f"split fractions {parts} must be non-negative and sum to 1")
        n_train = int(round(parts[0] * n))
        n_val = int(round(parts[1] * n))
        if n_train + n_val > n:
            raise ValueError("infeasible split")
        return n_train, n_val, n - n_train - n_val


def split_indices(n, spec, rng=None):
    counts = spec.counts(n)
    if any(c < 0 for c in counts):
        raise ValueError(f"infeasible split counts {counts}")
    rng = rng if rng is not None else np.random.default_rng([spec.seed, spec.replicate])
    perm = rng.permutation(n)
    a, b = counts[0], counts[0] + counts[1]
    return perm[:a], perm[a:b], perm[b:]


def split(ds, spec, rng=None):
    return tuple(ds.subset(np.sort(ix)) for ix in split_indices(len(ds), spec, rng))
