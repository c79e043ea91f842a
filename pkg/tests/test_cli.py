import csv
import json
import logging
import math

import numpy as np
import pytest

from utvae import experiment
from utvae.cli import main
from utvae.evaluation import mean_and_se
from utvae.networks import CevaeModel

SMALL = ["--n", "200", "--epochs", "2", "--hidden-layers", "1", "--hidden-units", "8", "--mc-samples", "5",
         "--batch", "64"]


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_gen_writes_csv_and_manifest(tmp_path):
    assert main(["gen", "--n", "8000", "--alpha", "0.75", "--seed", "7", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "synthetic_n8000_a0.75_s7.csv")
    assert len(rows) == 8000
    assert list(rows[0]) == ["z", "t", "x", "y", "mu0", "mu1"]
    manifest = json.loads((tmp_path / "synthetic_n8000_a0.75_s7.manifest.json").read_text())
    assert manifest["alpha"] == 0.75 and manifest["seed"] == 7 and manifest["n"] == 8000


def test_gen_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["gen", "--n", "500", "--alpha", "0.6", "--seed", "1", "--out-dir", str(d)]) == 0
    for name in ("synthetic_n500_a0.6_s1.csv", "synthetic_n500_a0.6_s1.manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


@pytest.mark.parametrize("alpha", ["1.0", "0", "abc"])
def test_gen_rejects_alpha_outside_open_interval(tmp_path, alpha):
    assert main(["gen", "--alpha", alpha, "--out-dir", str(tmp_path)]) == 1


def test_unknown_objective_and_missing_dataset(tmp_path):
    assert main(["train", "--objective", "bogus", "--out-dir", str(tmp_path)]) == 1
    assert main(["train", "--dataset", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == 1
    assert main(["train", "--objective", "utvae", "--epsilon", "-1", "--out-dir", str(tmp_path)]) == 1


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("UTVAE_OUT_DIR", str(tmp_path / "env"))
    assert main(["gen", "--n", "10", "--alpha", "0.5"]) == 0
    assert (tmp_path / "env" / "synthetic_n10_a0.5_s0.csv").exists()


def test_train_cevae_warns_about_epsilon(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="utvae"):
        rc = main(["train", "--objective", "cevae", "--epsilon", "1.0", "--out-dir", str(tmp_path)] + SMALL)
    assert rc == 0
    assert "ignored" in caplog.text
    rec = json.loads(next(tmp_path.glob("*.run.json")).read_text())
    assert rec["config"]["epsilon"] is None


def test_train_replay_is_reproducible(tmp_path):
    metrics = []
    for d in ("a", "b"):
        out = tmp_path / d
        assert main(["train", "--objective", "utvae", "--epsilon", "1.0", "--seed", "3", "--out-dir", str(out)]
                    + SMALL) == 0
        rec = json.loads(next(out.glob("*.run.json")).read_text())
        metrics.append(rec["metrics"])
        assert (out / (next(out.glob("*.run.json")).name.replace(".run.json", ".train.csv"))).exists()
    assert metrics[0] == metrics[1]


def test_utvae_gen_first_step_matches_component_objectives(tmp_path):
    # one Adam step on one full batch; Adam maps equal gradients to equal updates
    params = {}
    for obj in ("cevae", "utvae", "utvae_gen", "utvae_inf"):
        ck = tmp_path / f"{obj}.ckpt"
        args = ["train", "--objective", obj, "--seed", "5", "--out-dir", str(tmp_path), "--checkpoint", str(ck),
                "--n", "200", "--epochs", "1", "--batch", "200", "--hidden-layers", "1", "--hidden-units", "8",
                "--mc-samples", "2"]
        if obj != "cevae":
            args += ["--epsilon", "1.0"]
        assert main(args) == 0
        params[obj] = CevaeModel.load(ck)
    ref = params["cevae"]
    theta = [k for k, p in ref.params.items() if p.group.value == "theta"]
    phi = [k for k, p in ref.params.items() if p.group.value == "phi"]
    same = lambda a, b, ks: all(params[a].params[k].value.tobytes() == params[b].params[k].value.tobytes() for k in ks)
    assert same("utvae_gen", "utvae", theta) and same("utvae_gen", "cevae", phi)
    assert same("utvae_inf", "cevae", theta) and same("utvae_inf", "utvae", phi)
    assert not same("utvae", "cevae", theta)


def _write_config(path, body):
    path.write_text(body)
    return str(path)


def test_sweep_aggregation_recomputed_independently(tmp_path):
    cfg = _write_config(tmp_path / "sweep.ini", """
[data]
n = 150
n_val = 100
n_test = 100
alpha = 0.7
[model]
epochs = 1
hidden_layers = 1
hidden_units = 6
mc_samples = 3
batch = 64
[grid]
objective = cevae,utvae
epsilon = 0.5,1.5
seeds = 3
""")
    assert main(["sweep", "--config", cfg, "--out-dir", str(tmp_path)]) == 0
    long = read_rows(tmp_path / "sweep_long.csv")
    assert len(long) == 3 + 3 * 2
    assert all(r["error"] == "" for r in long)
    # exactly one selected epsilon per (objective, seed)
    for seed in "012":
        assert sum(int(r["selected"]) for r in long if r["objective"] == "utvae" and r["seed"] == seed) == 1
    summary = read_rows(tmp_path / "sweep_summary.csv")
    for s in summary:
        errs = [float(r["ate_err"]) for r in long if r["objective"] == s["objective"] and r["selected"] == "1"]
        pehes = [float(r["pehe"]) for r in long if r["objective"] == s["objective"] and r["selected"] == "1"]
        m = sum(errs) / len(errs)
        se = math.sqrt(sum((e - m) ** 2 for e in errs) / (len(errs) - 1) / len(errs))
        assert abs(float(s["ate_err_mean"]) - m) < 1e-12
        assert abs(float(s["ate_err_se"]) - se) < 1e-12
        assert abs(float(s["pehe_mean"]) - np.mean(pehes)) < 1e-12
        assert int(s["runs"]) == 3


def test_sweep_determinism_and_flags_override_config(tmp_path):
    cfg = _write_config(tmp_path / "s.ini", """
[grid]
objective = cevae
seeds = 2
n = 120
n_val = 50
n_test = 50
epochs = 1
hidden_layers = 1
hidden_units = 4
mc_samples = 2
alpha = 0.9
""")
    outs = []
    for d in ("a", "b"):
        assert main(["sweep", "--config", cfg, "--alpha", "0.6", "--out-dir", str(tmp_path / d)]) == 0
        outs.append(read_rows(tmp_path / d / "sweep_long.csv"))
    assert all(r["alpha"] == "0.6" for r in outs[0])
    for a, b in zip(*outs):
        for k in ("ate_err", "pehe", "val_elbo", "config_hash"):
            assert a[k] == b[k]


def test_sweep_partial_failure_isolated(monkeypatch):
    real = experiment.run_cell

    def flaky(spec, data=None):
        if spec.seed == 1:
            raise RuntimeError("injected failure")
        return real(spec, data)

    monkeypatch.setattr(experiment, "run_cell", flaky)
    base = experiment.RunSpec(n=100, n_val=50, n_test=50, epochs=1, hidden_layers=1, hidden_units=4, mc_samples=2)
    rows = experiment.run_sweep(experiment.SweepConfig(base=base, objectives=("cevae",), seeds=(0, 1, 2)))
    errs = {r["seed"]: r["error"] for r in rows}
    assert "injected failure" in errs[1]
    assert errs[0] == "" and errs[2] == ""
    ok = [r for r in rows if not r["error"]]
    assert all(np.isfinite(r["ate_err"]) for r in ok)
    summary = experiment.summarize(rows)
    assert summary[0]["runs"] == 2


def test_config_hash_stable_under_reordering():
    a = {"b": 1, "a": [1, 2], "c": {"y": 1, "x": 2}}
    b = {"c": {"x": 2, "y": 1}, "a": [1, 2], "b": 1}
    assert experiment.config_hash(a) == experiment.config_hash(b)


def test_ipw_command(tmp_path):
    assert main(["ipw", "--n", "20000", "--alpha", "0.75", "--epsilon", "0.5,1.0", "--out-dir", str(tmp_path)]) == 0
    rows = read_rows(tmp_path / "ipw.csv")
    sources = [r["source"] for r in rows]
    assert sources == ["oracle_x", "oracle_z", "estimated", "estimated", "naive"]
    for r in rows:
        assert math.isfinite(float(r["ate_hat"]))
    assert float(rows[1]["ate_err"]) < 0.05


def test_ipw_on_ihdp_files(tmp_path):
    from .test_datagen import write_ihdp
    d = tmp_path / "ihdp"
    d.mkdir()
    for rep in (1, 2):
        write_ihdp(d / f"ihdp_npci_{rep}.csv", seed=rep)
    assert main(["ipw", "--dataset", str(d), "--replicates", "2", "--epsilon", "3.0",
                 "--out-dir", str(tmp_path / "o")]) == 0
    rows = read_rows(tmp_path / "o" / "ipw.csv")
    assert [r["dataset"] for r in rows] == ["ihdp1", "ihdp1", "ihdp2", "ihdp2"]
    assert all(math.isfinite(float(r["ate_hat"])) for r in rows)


def test_eval_requires_checkpoint(tmp_path):
    assert main(["eval", "--out-dir", str(tmp_path)]) == 1


def test_eval_round_trip(tmp_path):
    ck = tmp_path / "m.ckpt"
    assert main(["train", "--checkpoint", str(ck), "--out-dir", str(tmp_path)] + SMALL) == 0
    rec = json.loads(next(tmp_path.glob("*.run.json")).read_text())
    assert main(["eval", "--checkpoint", str(ck), "--out-dir", str(tmp_path)] + SMALL) == 0
    row = read_rows(tmp_path / "eval_metrics.csv")[0]
    assert float(row["ate_err"]) == pytest.approx(rec["metrics"]["ate_err"], abs=1e-12)


def test_summary_helper_matches_mean_and_se():
    rows = [{"dataset": "synthetic", "objective": "cevae", "n": 1, "alpha": 0.5, "epsilon": "", "selected": 1,
             "ate_err": v, "pehe": v, "error": ""} for v in (0.1, 0.3, 0.2)]
    s = experiment.summarize(rows)[0]
    assert (s["ate_err_mean"], s["ate_err_se"]) == mean_and_se([0.1, 0.3, 0.2])
