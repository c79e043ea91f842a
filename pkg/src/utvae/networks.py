"""CEVAE networks: generative p(x|z), p(t|z), p(y|t,z); inference q(z|x,t,y);
auxiliary q(t|x), q(y|x,t); and the counterfactual outcome query.

Every treatment-conditioned network is two-armed: a shared trunk followed
by one head per treatment value, the factual head picked by ``t``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import diffcore as dc
from .dists import BernoulliP, GaussianDiag

CKPT_MAGIC = "UTVAE-CKPT-1"


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class ArchConfig:
    x_dim: int
    x_binary_mask: list = field(default_factory=list)
    z_dim: int = 5
    hidden_layers: int = 3
    hidden_units: int = 200
    arm_layers: int = 1
    y_is_binary: bool = True
    activation: str = "elu"

    def __post_init__(self):
        self.x_binary_mask = [bool(b) for b in self.x_binary_mask] or [False] * self.x_dim
        if len(self.x_binary_mask) != self.x_dim:
            raise ValueError(f"x_binary_mask has length {len(self.x_binary_mask)}, expected {self.x_dim}")
        if self.z_dim < 1:
            raise ValueError("z_dim must be >= 1")
        if self.hidden_layers < 1:
            raise ValueError("hidden_layers must be >= 1")
        if self.hidden_units < 0 or self.arm_layers < 0:
            raise ValueError("hidden_units and arm_layers must be non-negative")
        if self.activation not in dc.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def bin_idx(self):
        return np.flatnonzero(self.x_binary_mask)

    @property
    def cont_idx(self):
        return np.flatnonzero(~np.asarray(self.x_binary_mask, dtype=bool))


@dataclass
class CfQueryConfig:
    mc_samples: int = 100
    max_rows: int = 20000  # cap on tiled rows per forward chunk

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples (L) must be >= 1")


def _check_t(t):
    t = np.asarray(t, dtype=np.float64).reshape(-1, 1)
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("treatment must be 0 or 1")
    return t


class _Dense:
    """Stack of affine layers; activation between layers, none after the last."""

    def __init__(self, model, name, sizes, group, rng):
        self.names = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            scale = np.sqrt(2.0 / max(fan_in + fan_out, 1))
            w = model.add(f"{name}.W{i}", rng.normal(0.0, scale, (fan_in, fan_out)), group)
            b = model.add(f"{name}.b{i}", np.zeros((1, fan_out)), group)
            self.names.append((w.id, b.id))

    def __call__(self, model, tape, h, final_activation=False):
        last = len(self.names) - 1
        for i, (wid, bid) in enumerate(self.names):
            h = dc.matmul(h, model.tensor(tape, wid)) + model.tensor(tape, bid)
            if i < last or final_activation:
                h = dc.rectifier(h, model.arch.activation)
        return h


class _TwoArm:
    """Shared trunk + one head per treatment arm; output of the factual arm."""

    def __init__(self, model, name, in_dim, out_dim, group, rng):
        a = model.arch
        width = [a.hidden_units] * a.hidden_layers
        self.trunk = _Dense(model, f"{name}.trunk", [in_dim] + width, group, rng)
        head = [width[-1]] + [a.hidden_units] * a.arm_layers + [out_dim]
        self.arms = [_Dense(model, f"{name}.arm{k}", head, group, rng) for k in (0, 1)]

    def final_layer_ids(self, arm):
        return list(self.arms[arm].names[-1])

    def both(self, model, tape, inp):
        h = self.trunk(model, tape, inp, final_activation=True)
        return self.arms[0](model, tape, h), self.arms[1](model, tape, h)

    def __call__(self, model, tape, inp, t):
        h0, h1 = self.both(model, tape, inp)
        return h1 * t + h0 * (1.0 - t)


class CevaeModel:
    """Parameter store plus the six CEVAE networks.

    Parameters are plain arrays held in ``self.params``; a forward pass on a
    :class:`~utvae.diffcore.Tape` watches them, a forward pass with
    ``tape=None`` treats them as constants.
    """

    def __init__(self, arch, seed=0, rng=None):
        self.arch = arch
        self.params = {}
        self.trained = False
        self.y_loc = 0.0
        self.y_scale = 1.0
        rng = rng if rng is not None else np.random.default_rng(seed)
        a = arch
        G, I, A = dc.Group.GENERATIVE, dc.Group.INFERENCE, dc.Group.AUXILIARY
        width = [a.hidden_units] * a.hidden_layers
        nb, nc = len(a.bin_idx), len(a.cont_idx)
        y_out = 1 if a.y_is_binary else 2
        # generative (theta)
        self.px = _Dense(self, "px", [a.z_dim] + width + [nb + 2 * nc], G, rng)
        self.pt = _Dense(self, "pt", [a.z_dim] + width + [1], G, rng)
        self.py = _TwoArm(self, "py", a.z_dim, y_out, G, rng)
        # inference (phi)
        self.qz = _TwoArm(self, "qz", a.x_dim + 1, 2 * a.z_dim, I, rng)
        # auxiliary (varphi)
        self.qt = _Dense(self, "qt", [a.x_dim] + width + [1], A, rng)
        self.qy = _TwoArm(self, "qy", a.x_dim, y_out, A, rng)

    # ---------------------------------------------------------- parameters
    def add(self, pid, value, group):
        if pid in self.params:
            raise ValueError(f"duplicate parameter id {pid}")
        p = dc.Parameter(pid, value, group)
        self.params[pid] = p
        return p

    def tensor(self, tape, pid):
        p = self.params[pid]
        return dc.Tensor(p.value) if tape is None else tape.watch(p)

    def group(self, group):
        group = dc.Group(group)
        return {k: p for k, p in self.params.items() if p.group is group}

    def group_ids(self, group):
        return set(self.group(group))

    def copy(self):
        other = CevaeModel.__new__(CevaeModel)
        other.__dict__.update(self.__dict__)
        other.params = {k: dc.Parameter(k, p.value.copy(), p.group) for k, p in self.params.items()}
        return other

    def swap_outcome_arms(self):
        """Exchange the two p(y|t,z) heads in place (negates every ITE)."""
        for (w0, b0), (w1, b1) in zip(self.py.arms[0].names, self.py.arms[1].names):
            for a, b in ((w0, w1), (b0, b1)):
                self.params[a].value, self.params[b].value = self.params[b].value, self.params[a].value

    # ------------------------------------------------------------ networks
    def _y_head(self, out):
        if self.arch.y_is_binary:
            return BernoulliP(out)
        return GaussianDiag.from_raw(dc.slice_cols(out, 0, 1), dc.slice_cols(out, 1, 2))

    def generative_log_prob(self, z, x, t, y, tape=None):
        """log p(x|z) + log p(t|z) + log p(y|t,z) per row."""
        a = self.arch
        t = _check_t(t)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        z = dc.as_tensor(z)
        nb, nc = len(a.bin_idx), len(a.cont_idx)
        out = self.px(self, tape, z)
        lp = 0.0
        if nb:
            lp = BernoulliP(dc.slice_cols(out, 0, nb)).log_prob(x[:, a.bin_idx])
        if nc:
            g = GaussianDiag.from_raw(dc.slice_cols(out, nb, nb + nc), dc.slice_cols(out, nb + nc, nb + 2 * nc))
            lp = lp + g.log_prob(x[:, a.cont_idx])
        lp = lp + BernoulliP(self.pt(self, tape, z)).log_prob(t)
        lp = lp + self._y_head(self.py(self, tape, z, t)).log_prob(y)
        return lp

    def inference_posterior(self, x, t, y, tape=None):
        t = _check_t(t)
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64).reshape(-1, 1)
        out = self.qz(self, tape, np.concatenate([x, y], axis=1), t)
        d = self.arch.z_dim
        return GaussianDiag.from_raw(dc.slice_cols(out, 0, d), dc.slice_cols(out, d, 2 * d))

    def aux_treatment(self, x, tape=None):
        return BernoulliP(self.qt(self, tape, np.asarray(x, dtype=np.float64)))

    def aux_outcome(self, x, t, tape=None):
        t = _check_t(t)
        return self._y_head(self.qy(self, tape, np.asarray(x, dtype=np.float64), t))

    def outcome_means(self, z):
        """E[y | z, t=0] and E[y | z, t=1] (model units, no rescaling), constant mode."""
        h0, h1 = self.py.both(self, None, dc.as_tensor(z))
        if self.arch.y_is_binary:
            return dc._sigmoid(h0.value[:, 0]), dc._sigmoid(h1.value[:, 0])
        return h0.value[:, 0], h1.value[:, 0]

    # ---------------------------------------------------- counterfactuals
    def counterfactual_outcomes(self, x, cfg=None, rng=None):
        """Monte Carlo estimate of (mu0(x), mu1(x)) for each row of ``x``.

        For each of L draws: t ~ q(t|x), y = mean of q(y|x,t),
        z ~ q(z|x,t,y); the outcome means of p(y|t,z) for both arms are
        averaged over the draws.  Returned in data units.
        """
        cfg = cfg or CfQueryConfig()
        if not self.trained:
            raise UntrainedModelError("model has not been trained (set model.trained to override)")
        rng = rng if rng is not None else np.random.default_rng(0)
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        n = x.shape[0]
        L = cfg.mc_samples
        acc0 = np.zeros(n)
        acc1 = np.zeros(n)
        per_chunk = max(1, cfg.max_rows // max(n, 1))
        done = 0
        while done < L:
            k = min(per_chunk, L - done)
            xr = np.tile(x, (k, 1))
            pt = self.aux_treatment(xr).prob.value[:, 0]
            t = (rng.random(pt.shape) < pt).astype(np.float64)
            yh = self.aux_outcome(xr, t)
            y = yh.prob.value if self.arch.y_is_binary else yh.mean.value
            q = self.inference_posterior(xr, t, y)
            z = q.mean.value + q.std.value * rng.standard_normal(q.mean.shape)
            m0, m1 = self.outcome_means(z)
            acc0 += m0.reshape(k, n).sum(axis=0)
            acc1 += m1.reshape(k, n).sum(axis=0)
            done += k
        mu0 = acc0 / L * self.y_scale + self.y_loc
        mu1 = acc1 / L * self.y_scale + self.y_loc
        return mu0, mu1

    # ---------------------------------------------------------- checkpoint
    def save(self, path):
        lines = [CKPT_MAGIC, "arch " + json.dumps(asdict(self.arch), sort_keys=True)]
        lines.append(f"meta {json.dumps({'trained': self.trained, 'y_loc': self.y_loc, 'y_scale': self.y_scale})}")
        for pid, p in self.params.items():
            shape = ",".join(str(s) for s in p.value.shape)
            vals = " ".join(repr(float(v)) for v in p.value.ravel())
            lines.append(f"param {pid} {p.group.value} {shape} {vals}")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a {CKPT_MAGIC} checkpoint")
        arch = meta = None
        values = {}
        for line in lines[1:]:
            kind, _, rest = line.partition(" ")
            if kind == "arch":
                arch = ArchConfig(**json.loads(rest))
            elif kind == "meta":
                meta = json.loads(rest)
            elif kind == "param":
                pid, group, shape, *vals = rest.split(" ")
                shape = tuple(int(s) for s in shape.split(",") if s)
                values[pid] = (dc.Group(group), np.array([float(v) for v in vals]).reshape(shape))
        if arch is None:
            raise ValueError(f"{path}: missing arch record")
        model = cls(arch, seed=0)
        if set(values) != set(model.params):
            raise ValueError(f"{path}: parameter ids do not match the architecture")
        for pid, (group, val) in values.items():
            if model.params[pid].group is not group or model.params[pid].shape != val.shape:
                raise ValueError(f"{path}: parameter {pid} group/shape mismatch")
            model.params[pid].value = val
        if meta:
            model.trained = bool(meta.get("trained", False))
            model.y_loc = float(meta.get("y_loc", 0.0))
            model.y_scale = float(meta.get("y_scale", 1.0))
        return model
