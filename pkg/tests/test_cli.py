import numpy as np
import pytest

from batchgp import cli
from batchgp.data import load_csv
from batchgp.serialize import load_policy

FAST = """
fit.max_steps = 40
fit.lr = 0.1
fit.max_points = 150
train.batch_size = 4
train.horizon = 10
train.max_steps = 3
eval.n_episodes = 1
eval.episode_length = 60
bench.values = 4, 8, 16
bench.axis = batch_size
bench.horizon = 5
bench.repetitions = 3
bench.warmup = 0
bench.trials = 1
bench.budget_s = 0.2
bench.eval_batch = 4
bench.eval_horizon = 5
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("run")
    (d / "fast.cfg").write_text(FAST)
    base = ["--out", str(d), "--config", str(d / "fast.cfg")]
    assert cli.main(base + ["collect", "--duration", "15"]) == 0
    assert cli.main(base + ["fit-gp"]) == 0
    return d, base


def test_collect_default_duration_row_count(tmp_path, capsys):
    assert cli.main(["collect", "--output", str(tmp_path / "d.csv")]) == 0
    lines = (tmp_path / "d.csv").read_text().splitlines()
    assert lines[0] == "t,x1,x2,u1"
    assert len(lines) == 1 + 2201  # 2200 transitions need 2201 logged states
    assert load_csv(tmp_path / "d.csv").n == 2200
    assert "2200 transitions" in capsys.readouterr().out


def test_collect_short_duration_and_determinism(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert cli.main(["--seed", "5", "collect", "--duration", "10", "--output", str(tmp_path / name)]) == 0
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes()
    assert load_csv(tmp_path / "a.csv").n == 200
    assert cli.main(["collect", "--seed", "6", "--duration", "10", "--output", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_bytes() != a


def test_collect_without_output_is_usage_error(capsys):
    assert cli.main(["collect", "--duration", "1"]) == 1
    assert "output" in capsys.readouterr().err


def test_unknown_command_and_bad_config(tmp_path):
    assert cli.main(["frobnicate"]) == 1
    (tmp_path / "bad.cfg").write_text("train.nonsense = 1\n")
    assert cli.main(["--config", str(tmp_path / "bad.cfg"), "collect", "--out", str(tmp_path)]) == 1


def test_corrupt_csv_is_io_error(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("t,x1,x2,u1\n0.0,0.1,0.0,0.5\n0.05,oops,0.0,0.5\n")
    assert cli.main(["fit-gp", "--data", str(path), "--model", str(tmp_path / "m.bgp")]) == 3
    assert "bad.csv:3" in capsys.readouterr().err
    assert cli.main(["fit-gp", "--data", str(tmp_path / "missing.csv"), "--model", str(tmp_path / "m")]) == 3


def test_fit_gp_writes_model_and_reports(run_dir):
    d, _ = run_dir
    assert (d / "model.bgp").exists()


def test_train_zero_steps_saves_initial_policy(run_dir, tmp_path):
    d, base = run_dir
    out = tmp_path / "p0.bgp"
    assert cli.main(base + ["train", "--max-steps", "0", "--policy", str(out), "--log", str(tmp_path / "l.csv")]) == 0
    from batchgp.config import load_config
    from batchgp.serialize import load_ensemble
    cfg = load_config(d / "fast.cfg")
    ens = load_ensemble(d / "model.bgp")
    init = cli.initial_policy(cfg, ens, cli.train_config(cfg, ens), cli.reward_params(cfg))
    np.testing.assert_array_equal(load_policy(out).policy.to_flat(), init.to_flat())
    assert (tmp_path / "l.csv").read_text().count("\n") == 1


def test_single_candidate_is_the_seeded_policy(run_dir):
    d, _ = run_dir
    from batchgp.config import load_config
    from batchgp.policy import make_policy
    from batchgp.serialize import load_ensemble
    cfg = load_config(d / "fast.cfg")
    cfg.train.init_candidates = 1
    ens = load_ensemble(d / "model.bgp")
    pol = cli.initial_policy(cfg, ens, cli.train_config(cfg, ens), cli.reward_params(cfg))
    np.testing.assert_array_equal(pol.to_flat(), make_policy(2, 1, cfg.train.hidden,
                                                             seed=cfg.module_seed("policy")).to_flat())


def test_train_then_eval_single_goal(run_dir):
    d, base = run_dir
    assert cli.main(base + ["train"]) == 0
    assert len((d / "train_log.csv").read_text().splitlines()) == 1 + 3
    bundle = load_policy(d / "policy.bgp")
    np.testing.assert_array_equal(bundle.goal, [0.0, 0.0])
    assert cli.main(base + ["eval"]) == 0
    rows = (d / "metrics.csv").read_text().splitlines()
    assert rows[0] == "episode,goal_index,goal_phi,settling_time,steady_state_error,overshoot"
    assert len(rows) == 2
    assert (d / "trajectory.csv").read_text().startswith("t,phi,phidot,u,goal_phi\n")


def test_train_is_deterministic(run_dir, tmp_path):
    _, base = run_dir
    for name in ("a", "b"):
        assert cli.main(base + ["train", "--policy", str(tmp_path / name), "--log", str(tmp_path / f"{name}.csv")]) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_goal_conditioned_eval_has_four_goals(run_dir, tmp_path):
    _, base = run_dir
    pol = tmp_path / "gc.bgp"
    assert cli.main(base + ["train", "--goal-conditioned", "--policy", str(pol),
                            "--log", str(tmp_path / "gc.csv")]) == 0
    assert load_policy(pol).policy.goal_conditioned
    assert cli.main(base + ["--out", str(tmp_path), "eval", "--policy", str(pol)]) == 0
    rows = (tmp_path / "metrics.csv").read_text().splitlines()[1:]
    assert [float(r.split(",")[2]) for r in rows] == list(cli.GOAL_REFERENCES)


def test_mismatched_dimensions_rejected(run_dir, tmp_path, capsys):
    from batchgp.data import TransitionDataset, fit_normalizer, write_csv
    from batchgp.policy import make_policy
    from batchgp.serialize import save_policy
    t = np.arange(30) * 0.05
    ds = TransitionDataset.from_log(t, np.random.default_rng(0).standard_normal((30, 3)), np.zeros((30, 1)), dt=0.05)
    write_csv(tmp_path / "d3.csv", ds)
    assert cli.main(["fit-gp", "--data", str(tmp_path / "d3.csv"), "--model", str(tmp_path / "m3.bgp")]) == 1
    assert "3 state columns" in capsys.readouterr().err
    # a policy built for three states cannot drive the two-state plant
    save_policy(make_policy(3, 1), tmp_path / "p3.bgp", fit_normalizer(ds), goal=[0.0, 0.0, 0.0])
    assert cli.main(["--out", str(tmp_path), "eval", "--policy", str(tmp_path / "p3.bgp")]) == 1
    assert "trained on 3 states" in capsys.readouterr().err


def test_bench_scaling_and_learning(run_dir):
    d, base = run_dir
    assert cli.main(base + ["bench", "--what", "all"]) == 0
    lines = (d / "bench_scaling.csv").read_text().splitlines()
    assert lines[0] == "axis,value,rep,iter_ms_mean,iter_ms_min,iter_ms_max,peak_mb" and len(lines) == 10
    learn = (d / "bench_learning.csv").read_text().splitlines()
    assert learn[0] == "mode,trial,wall_s,mean_return"
    assert {r.split(",")[0] for r in learn[1:]} == {"batch_100", "sequential_1"}


def test_fit_gate_failure_exits_numeric(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("fit.max_steps = 1\nfit.max_points = 20\nplant.noise_std = 1e-9, 1e-9\n")
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "collect", "--duration", "5"]) == 0
    assert cli.main(["--config", str(cfg), "--out", str(tmp_path), "fit-gp"]) == 2
    assert "FAIL" in capsys.readouterr().out
