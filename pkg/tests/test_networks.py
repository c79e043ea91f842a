import math

import numpy as np
import pytest
from scipy.special import expit

from utvae import diffcore as dc
from utvae.dists import BernoulliP, GaussianDiag
from utvae.networks import ArchConfig, CevaeModel, CfQueryConfig, UntrainedModelError

from .conftest import oracle_wired_model, set_final, small_arch, zero_all


def test_arch_validation():
    with pytest.raises(ValueError):
        ArchConfig(x_dim=2, x_binary_mask=[True], z_dim=1)
    with pytest.raises(ValueError):
        ArchConfig(x_dim=1, z_dim=0)
    with pytest.raises(ValueError):
        ArchConfig(x_dim=1, hidden_layers=0)


def test_parameter_groups_disjoint_and_complete(small_model):
    groups = [small_model.group_ids(g) for g in dc.Group]
    assert sum(len(g) for g in groups) == len(small_model.params)
    assert not (groups[0] & groups[1]) and not (groups[1] & groups[2]) and not (groups[0] & groups[2])
    assert all(k.startswith(("px", "pt", "py")) for k in groups[0])
    assert all(k.startswith("qz") for k in groups[1])
    assert all(k.startswith(("qt", "qy")) for k in groups[2])


def test_zero_logit_binary_x_is_log_half():
    arch = ArchConfig(x_dim=2, x_binary_mask=[True, True], z_dim=2, hidden_layers=1, hidden_units=4)
    m = CevaeModel(arch, seed=1)
    for pid, p in m.params.items():
        if ".b" in pid:
            p.value[...] = 0.0
    z = np.zeros((1, 2))
    lp = m.px(m, None, dc.Tensor(z))
    px = BernoulliP(dc.slice_cols(lp, 0, 2)).log_prob(np.ones((1, 2))).value[0]
    assert px == pytest.approx(2 * math.log(0.5), abs=1e-15)


def test_generative_log_prob_matches_hand_composition():
    rng = np.random.default_rng(4)
    arch = ArchConfig(x_dim=2, x_binary_mask=[True, False], z_dim=2, hidden_layers=1, hidden_units=3,
                      arm_layers=0, y_is_binary=True)
    m = CevaeModel(arch, seed=2)
    z, x, t, y = rng.normal(size=(1, 2)), np.array([[1.0, 0.4]]), np.array([[1.0]]), np.array([[0.0]])

    def dense(prefix, h, n_layers):
        for i in range(n_layers):
            h = h @ m.params[f"{prefix}.W{i}"].value + m.params[f"{prefix}.b{i}"].value
            if i < n_layers - 1:
                h = np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
        return h

    elu = lambda h: np.where(h > 0, h, np.expm1(np.minimum(h, 0)))
    out = dense("px", z, 2)
    bin_logit, mu, raw = out[0, 0], out[0, 1], out[0, 2]
    sd = math.log1p(math.exp(raw)) + 1e-6
    lp_x = x[0, 0] * bin_logit - math.log1p(math.exp(bin_logit))
    lp_x += -0.5 * math.log(2 * math.pi) - math.log(sd) - 0.5 * ((x[0, 1] - mu) / sd) ** 2
    t_logit = dense("pt", z, 2)[0, 0]
    lp_t = t_logit - math.log1p(math.exp(t_logit))
    h = elu(dense("py.trunk", z, 1))
    y_logit = dense("py.arm1", h, 1)[0, 0]
    lp_y = -math.log1p(math.exp(y_logit))
    got = m.generative_log_prob(z, x, t, y).value[0]
    assert got == pytest.approx(lp_x + lp_t + lp_y, rel=1e-12)


def test_generative_arm_isolation_by_value(small_model, small_batch):
    x, _, y = small_batch
    t = np.ones((len(x), 1))
    z = np.random.default_rng(1).normal(size=(len(x), 2))
    before = small_model.generative_log_prob(z, x, t, y).value.copy()
    for wid, bid in small_model.py.arms[0].names:
        small_model.params[wid].value += 1.7
    after = small_model.generative_log_prob(z, x, t, y).value
    assert before.tobytes() == after.tobytes()


def test_treatment_outside_binary_rejected(small_model, small_batch):
    x, t, y = small_batch
    with pytest.raises(ValueError):
        small_model.generative_log_prob(np.zeros((len(x), 2)), x, t + 1, y)
    with pytest.raises(ValueError):
        small_model.inference_posterior(x, t * 2, y)


def test_zero_final_layer_posterior():
    m = CevaeModel(small_arch(), seed=0)
    for k in (0, 1):
        set_final(m, "qz", arm=k, W=0.0, b=0.0)
    rng = np.random.default_rng(0)
    q = m.inference_posterior(rng.normal(size=(5, 3)), np.array([[0], [1], [1], [0], [1]]), np.ones((5, 1)))
    np.testing.assert_array_equal(q.mean.value, 0.0)
    np.testing.assert_allclose(q.std.value, math.log(2.0) + 1e-6, rtol=0, atol=1e-15)
    assert round(float(q.std.value[0, 0]), 3) == 0.693


def test_posterior_arms_differ(small_model, small_batch):
    x, _, y = small_batch
    q0 = small_model.inference_posterior(x, np.zeros((len(x), 1)), y)
    q1 = small_model.inference_posterior(x, np.ones((len(x), 1)), y)
    assert not np.allclose(q0.mean.value, q1.mean.value)


def test_posterior_std_positive_sweep():
    m = CevaeModel(small_arch(), seed=8)
    rng = np.random.default_rng(2)
    n = 10_000
    x = np.column_stack([rng.integers(0, 2, n), rng.normal(scale=20, size=n), rng.integers(0, 2, n)])
    q = m.inference_posterior(x, rng.integers(0, 2, (n, 1)), rng.normal(scale=10, size=(n, 1)))
    assert np.all(q.std.value > 0) and np.all(np.isfinite(q.mean.value))


def test_aux_zero_weights_uniform(small_model):
    zero_all(small_model)
    x = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(small_model.aux_treatment(x).prob.value, 0.5)


def test_aux_outcome_arm_selection(small_model, small_batch):
    x, _, _ = small_batch
    ones = np.ones((len(x), 1))
    base = small_model.aux_outcome(x, ones).logit.value.copy()
    for wid, _ in small_model.qy.arms[0].names:
        small_model.params[wid].value *= -3.0
    assert small_model.aux_outcome(x, ones).logit.value.tobytes() == base.tobytes()
    assert not np.allclose(small_model.aux_outcome(x, 0 * ones).logit.value, base)


def test_aux_outcome_gaussian_head_for_continuous_y():
    m = CevaeModel(small_arch(y_is_binary=False), seed=0)
    head = m.aux_outcome(np.zeros((2, 3)), np.ones((2, 1)))
    assert isinstance(head, GaussianDiag)


def test_aux_treatment_learns_separable_toy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(400, 1))
    t = (x > 0).astype(float)
    arch = ArchConfig(x_dim=1, x_binary_mask=[False], z_dim=1, hidden_layers=1, hidden_units=8)
    m = CevaeModel(arch, seed=0)
    params = {k: p for k, p in m.params.items() if k.startswith("qt")}
    opt = dc.AdamState(lr=0.05)
    for _ in range(200):
        tape = dc.Tape()
        loss = -dc.mean(m.aux_treatment(x, tape).log_prob(t))
        opt.update(params, tape.backward(loss))
    acc = np.mean((m.aux_treatment(x).prob.value > 0.5) == t)
    assert acc > 0.95


@pytest.mark.parametrize("net", ["py", "qz", "qy"])
def test_arm_isolation_gradients_exactly_zero(small_model, small_batch, net):
    x, t, y = small_batch
    rng = np.random.default_rng(3)
    for i in range(len(x)):
        xi, ti, yi = x[i:i + 1], t[i:i + 1], y[i:i + 1]
        tape = dc.Tape()
        for p in small_model.params.values():
            tape.watch(p)
        if net == "py":
            loss = small_model.generative_log_prob(rng.normal(size=(1, 2)), xi, ti, yi, tape)
        elif net == "qz":
            q = small_model.inference_posterior(xi, ti, yi, tape)
            loss = dc.sum(q.mean) + dc.sum(dc.log(q.std))
        else:
            loss = small_model.aux_outcome(xi, ti, tape).log_prob(yi)
        grads = tape.backward(dc.sum(loss))
        cf_arm = 1 - int(ti[0, 0])
        for pid in getattr(small_model, net).final_layer_ids(cf_arm):
            assert np.all(grads[pid] == 0.0), pid
        fact = getattr(small_model, net).final_layer_ids(int(ti[0, 0]))
        assert any(np.any(grads[pid] != 0.0) for pid in fact)


# ---------------------------------------------------------- counterfactuals

def test_counterfactual_requires_training_and_positive_L(small_model):
    with pytest.raises(UntrainedModelError):
        small_model.counterfactual_outcomes(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        CfQueryConfig(mc_samples=0)


def test_constant_outcome_model_has_zero_ite(small_model):
    b = 0.8
    for k in (0, 1):
        set_final(small_model, "py", arm=k, W=0.0, b=b)
    small_model.trained = True
    mu0, mu1 = small_model.counterfactual_outcomes(np.random.default_rng(0).normal(size=(7, 3)),
                                                   CfQueryConfig(20), np.random.default_rng(1))
    np.testing.assert_allclose(mu0, expit(b), rtol=0, atol=1e-15)
    np.testing.assert_allclose(mu1, expit(b), rtol=0, atol=1e-15)
    np.testing.assert_array_equal(mu1 - mu0, 0.0)


def test_counterfactual_determinism(small_model):
    small_model.trained = True
    x = np.random.default_rng(0).normal(size=(9, 3))
    a = small_model.counterfactual_outcomes(x, CfQueryConfig(30), np.random.default_rng(5))
    b = small_model.counterfactual_outcomes(x, CfQueryConfig(30), np.random.default_rng(5))
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_counterfactual_chunking_does_not_change_result(small_model):
    small_model.trained = True
    x = np.random.default_rng(0).normal(size=(9, 3))
    a = small_model.counterfactual_outcomes(x, CfQueryConfig(30), np.random.default_rng(5))
    b = small_model.counterfactual_outcomes(x, CfQueryConfig(30, max_rows=9 * 30), np.random.default_rng(5))
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)


def test_ite_sign_symmetry_on_arm_swap(small_model):
    small_model.trained = True
    x = np.random.default_rng(0).normal(size=(9, 3))
    mu0, mu1 = small_model.counterfactual_outcomes(x, CfQueryConfig(25), np.random.default_rng(2))
    small_model.swap_outcome_arms()
    s0, s1 = small_model.counterfactual_outcomes(x, CfQueryConfig(25), np.random.default_rng(2))
    np.testing.assert_array_equal(s1 - s0, -(mu1 - mu0))


@pytest.mark.parametrize("p_z1", [0.1, 0.45, 0.8])
def test_oracle_wired_ite_matches_process(p_z1):
    # analytic ITE: sum over z of p(z|x) [sigmoid(3(z+2)) - sigmoid(3(z-2))]
    expected = p_z1 * (expit(9) - expit(-3)) + (1 - p_z1) * (expit(6) - expit(-6))
    m = oracle_wired_model(p_z1)
    mu0, mu1 = m.counterfactual_outcomes(np.zeros((1, 1)), CfQueryConfig(20_000), np.random.default_rng(0))
    ite = float(mu1[0] - mu0[0])
    se = abs(expit(9) - expit(-3) - expit(6) + expit(-6)) * math.sqrt(p_z1 * (1 - p_z1) / 20_000)
    assert abs(ite - expected) < 4 * se + 1e-6


def test_counterfactual_mc_error_scales_inverse_sqrt_L():
    m = oracle_wired_model(0.5)
    sds = {}
    for L in (10, 100, 1000):
        rng = np.random.default_rng(L)
        draws = [m.counterfactual_outcomes(np.zeros((1, 1)), CfQueryConfig(L), rng)[1][0] for _ in range(200)]
        sds[L] = np.std(draws)
    # each tenfold increase in L shrinks the spread by ~sqrt(10)
    for a, b in ((10, 100), (100, 1000)):
        assert 2.0 < sds[a] / sds[b] < 5.0


def test_checkpoint_roundtrip(tmp_path, small_model):
    small_model.trained = True
    small_model.y_loc, small_model.y_scale = 1.5, 2.0
    path = tmp_path / "m.ckpt"
    small_model.save(path)
    assert path.read_text().splitlines()[0] == "UTVAE-CKPT-1"
    back = CevaeModel.load(path)
    assert back.arch == small_model.arch
    assert back.trained and back.y_loc == 1.5 and back.y_scale == 2.0
    for pid, p in small_model.params.items():
        assert back.params[pid].value.tobytes() == p.value.tobytes()
        assert back.params[pid].group is p.group


def test_checkpoint_rejects_bad_magic(tmp_path):
    bad = tmp_path / "x.ckpt"
    bad.write_text("NOT-A-CKPT\n")
    with pytest.raises(ValueError):
        CevaeModel.load(bad)
