import numpy as np
import pytest

from utvae.networks import ArchConfig, CevaeModel


def small_arch(**kw):
    base = dict(x_dim=3, x_binary_mask=[True, False, True], z_dim=2, hidden_layers=2, hidden_units=8,
                arm_layers=1, y_is_binary=True)
    base.update(kw)
    return ArchConfig(**base)


@pytest.fixture
def small_model():
    return CevaeModel(small_arch(), seed=3)


@pytest.fixture
def small_batch():
    rng = np.random.default_rng(0)
    n = 12
    x = np.column_stack([rng.integers(0, 2, n), rng.normal(size=n), rng.integers(0, 2, n)]).astype(float)
    t = rng.integers(0, 2, (n, 1)).astype(float)
    y = rng.integers(0, 2, (n, 1)).astype(float)
    return x, t, y


def zero_all(model):
    for p in model.params.values():
        p.value[...] = 0.0


def set_final(model, net, arm=None, W=None, b=None):
    """Overwrite the last affine layer of ``net`` (or of one arm)."""
    dense = getattr(model, net)
    dense = dense.arms[arm] if arm is not None else dense
    wid, bid = dense.names[-1]
    if W is not None:
        model.params[wid].value[...] = W
    if b is not None:
        model.params[bid].value[...] = b


def oracle_wired_model(p_z1):
    """1-d latent model whose counterfactual query reproduces the synthetic process
    at a single x with p(z=1|x) = p_z1.

    q(t|x) = p_z1, q(z|x,t,y) ~= point mass at z = t, and
    p(y=1|t,z) = sigmoid(3(z + 2(2t-1))) exactly (the ELU trunk is kept in
    its linear region by a +100 offset).
    """
    arch = ArchConfig(x_dim=1, x_binary_mask=[False], z_dim=1, hidden_layers=1, hidden_units=1,
                      arm_layers=0, y_is_binary=True)
    m = CevaeModel(arch, seed=0)
    zero_all(m)
    set_final(m, "qt", b=np.log(p_z1 / (1 - p_z1)))
    for k in (0, 1):
        set_final(m, "qz", arm=k, b=np.array([[float(k), -60.0]]))
    wid, bid = m.py.trunk.names[0]
    m.params[wid].value[...] = 1.0
    m.params[bid].value[...] = 100.0
    for k in (0, 1):
        set_final(m, "py", arm=k, W=3.0, b=-300.0 + 6.0 * (2 * k - 1))
    m.trained = True
    return m
