import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mcnb import cli, harness
from mcnb.policies import PolicyConfig

SMALL_ENV = {"kind": "synthetic", "n_users": 6, "dim": 4, "arms_per_round": 4, "n_groups": 2, "gamma_gap": 0.3}


def small_cfg(policy="mcnb", horizon=40, seeds=(0,), **pol):
    return harness.ExperimentConfig(dict(SMALL_ENV), policy, PolicyConfig(width=8, **pol), horizon, list(seeds),
                                    window=min(20, horizon))


def raw_cfg(**over):
    raw = {"environment": dict(SMALL_ENV), "policy": {"id": "mcnb", "width": 8}, "horizon": 30, "seeds": [0], "window": 10}
    raw.update(over)
    return raw


# ---------------------------------------------------------------- runs


@pytest.mark.parametrize("env", [SMALL_ENV, {"kind": "uniform", "n_users": 3, "dim": 4, "arms_per_round": 5}])
def test_oracle_zero_regret(env):
    cfg = harness.ExperimentConfig(dict(env), "oracle", PolicyConfig(), 200, [0], window=50)
    res = harness.run_seed(cfg, 0)
    assert res.cum_regret[-1] == 0.0


def test_regret_trace_invariants():
    res = harness.run_seed(small_cfg("random", 300), 0)
    assert np.all(res.inst_regret >= 0) and np.all(res.inst_regret <= 1)
    assert np.all(np.diff(res.cum_regret) >= 0)


def test_cluster_record_bounds():
    res = harness.run_seed(small_cfg("mcnb", 60), 1)
    ok = ~np.isnan(res.precision)
    assert ok.all()
    assert np.all((res.precision > 0) & (res.precision <= 1))
    assert np.all((res.recall > 0) & (res.recall <= 1))


def test_policy_without_clusters_has_no_cluster_rows(tmp_path):
    res = harness.run_seed(small_cfg("neuucb-ind", 20), 0)
    harness.write_run(res, tmp_path)
    assert (tmp_path / "clusters.csv").read_text().strip() == ",".join(harness.CLUSTER_COLUMNS)


def test_determinism_byte_identical(tmp_path):
    cfg = small_cfg("mcnb", 40)
    harness.run_experiment(cfg, tmp_path / "a")
    harness.run_experiment(cfg, tmp_path / "b")
    for name in ("regret.csv", "clusters.csv"):
        assert (tmp_path / "a/seed_0" / name).read_bytes() == (tmp_path / "b/seed_0" / name).read_bytes()


def test_golden_csv_schema(tmp_path):
    harness.run_experiment(small_cfg("mcnb", 12), tmp_path)
    d = tmp_path / "seed_0"
    assert (d / "regret.csv").read_text().splitlines()[0] == "t,user,arm,reward,optimal,inst_regret,cum_regret"
    assert (d / "clusters.csv").read_text().splitlines()[0] == "t,precision,recall,est_size,true_size"
    assert (d / "timing.csv").read_text().splitlines()[0] == "t,clustering_s,meta_s,user_s"
    rows = (d / "regret.csv").read_text().splitlines()[1:]
    assert len(rows) == 12 and rows[0].startswith("1,")
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["policy"] == "mcnb" and len(summary["seeds"]) == 1


@pytest.mark.parametrize("c", [0.0, 0.25, 1.0])
def test_constant_regret_windows(c):
    windows, cum = harness.windowed_average_regret(np.full(100, c), 25)
    assert [e for e, _ in windows] == [25, 50, 75, 100]
    assert all(m == pytest.approx(c) for _, m in windows)
    np.testing.assert_allclose(cum, c)


def test_window_validation():
    with pytest.raises(ValueError):
        harness.windowed_average_regret(np.zeros(5), 6)


@given(st.lists(st.floats(0, 1), min_size=1, max_size=60), st.integers(1, 60))
def test_window_means_partition(vals, w):
    if w > len(vals):
        return
    windows, cum = harness.windowed_average_regret(vals, w)
    assert len(windows) == len(vals) // w
    assert cum[-1] == pytest.approx(np.mean(vals))


def test_timing_phases_bounded_by_round_time():
    import time
    cfg = small_cfg("mcnb", 30)
    t0 = time.perf_counter()
    res = harness.run_seed(cfg, 0)
    wall = time.perf_counter() - t0
    assert np.all(res.timing >= 0)
    assert res.timing.sum() <= wall


# ---------------------------------------------------------------- compare


def _summary(policy, finals, env=None, horizon=10):
    return {"policy": policy, "environment": env or {"kind": "x"}, "horizon": horizon,
            "mean_final_regret": float(np.mean(finals)), "std_final_regret": float(np.std(finals)),
            "seeds": [{"seed": i, "final_regret": f} for i, f in enumerate(finals)]}


def test_compare_single():
    rows = harness.compare([_summary("mcnb", [1.0, 2.0])])
    assert len(rows) == 1 and rows[0]["rank"] == 1 and rows[0]["wins"] == {}


def test_compare_oracle_random():
    o = harness.run_experiment(small_cfg("oracle", 50, seeds=(0, 1, 2)))[1]
    r = harness.run_experiment(small_cfg("random", 50, seeds=(0, 1, 2)))[1]
    rows = harness.compare([r, o])
    assert rows[0]["policy"] == "oracle" and rows[0]["wins"]["random"] == 3


def test_compare_mismatch():
    with pytest.raises(ValueError):
        harness.compare([_summary("a", [1.0]), _summary("b", [1.0], horizon=20)])


# ---------------------------------------------------------------- config


def test_parse_valid():
    cfg = harness.parse_config(raw_cfg())
    assert cfg.policy == "mcnb" and cfg.policy_config.width == 8 and cfg.horizon == 30


def test_parse_reports_every_problem_with_path():
    raw = raw_cfg(horizon=0, extra=1)
    raw["environment"]["nusers"] = 3
    raw["policy"]["lr"] = 0.1
    with pytest.raises(harness.ConfigError) as ei:
        harness.parse_config(raw)
    probs = ei.value.problems
    assert "unknown key 'extra'" in probs
    assert "unknown key 'environment.nusers'" in probs
    assert "unknown key 'policy.lr'" in probs
    assert any(p.startswith("horizon") for p in probs)


def test_parse_window_and_seeds():
    with pytest.raises(harness.ConfigError, match="window"):
        harness.parse_config(raw_cfg(window=31))
    with pytest.raises(harness.ConfigError, match="seeds"):
        harness.parse_config(raw_cfg(seeds=[]))


def test_parse_semantic_error():
    raw = raw_cfg()
    raw["policy"]["nu"] = 0.5
    with pytest.raises(harness.ConfigError, match="nu"):
        harness.parse_config(raw)


# ---------------------------------------------------------------- CLI


def test_cli_run_and_compare(tmp_path, capsys):
    cpath = tmp_path / "c.json"
    cpath.write_text(json.dumps(raw_cfg()))
    assert cli.main(["run", "--config", str(cpath), "--out", str(tmp_path / "m"), "--seed", "3"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["seeds"][0]["seed"] == 3
    assert (tmp_path / "m/seed_3/regret.csv").exists()
    raw = raw_cfg()
    raw["policy"] = {"id": "random"}
    cpath.write_text(json.dumps(raw))
    assert cli.main(["run", "--config", str(cpath), "--out", str(tmp_path / "r"), "--seed", "3"]) == 0
    capsys.readouterr()
    assert cli.main(["compare", "--inputs", str(tmp_path / "m"), str(tmp_path / "r")]) == 0
    table = json.loads(capsys.readouterr().out)
    assert {r["policy"] for r in table} == {"mcnb", "random"}


def test_cli_bad_config_json_error(tmp_path, capsys):
    cpath = tmp_path / "bad.json"
    cpath.write_text(json.dumps(raw_cfg(bogus=True)))
    assert cli.main(["run", "--config", str(cpath), "--out", str(tmp_path / "o")]) == 2
    err = json.loads(capsys.readouterr().err)
    assert err["error"] == "config" and "unknown key 'bogus'" in err["problems"]


def test_cli_missing_file(tmp_path, capsys):
    assert cli.main(["run", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) != 0
    assert json.loads(capsys.readouterr().err)["error"] == "file-not-found"


def test_cli_ntk_report(tmp_path, capsys):
    cpath = tmp_path / "n.json"
    cpath.write_text(json.dumps({"n_contexts": 3, "dim": 4, "width": 32, "rewards": [0.1, 0.2, 0.3]}))
    assert cli.main(["ntk-report", "--config", str(cpath)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert set(rep) >= {"min_eigenvalue", "effective_dimension", "s_complexity", "frobenius_gap"}
    cpath.write_text(json.dumps({"n_contexts": 3, "dim": 4, "duplicate_last": True}))
    assert cli.main(["ntk-report", "--config", str(cpath)]) == 0
    assert json.loads(capsys.readouterr().out)["s_complexity"] == "unbounded"
    cpath.write_text(json.dumps({"dim": 4, "depth": 1}))
    assert cli.main(["ntk-report", "--config", str(cpath)]) == 2
    assert len(json.loads(capsys.readouterr().err)["problems"]) == 2
