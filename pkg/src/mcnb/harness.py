"""Seeded experiment runner: environment x policy over T rounds.

Regret is pseudo-regret from hidden expected rewards, so it is noise free.
Output layout for ``run_experiment``::

    <out>/seed_<s>/regret.csv    t,user,arm,reward,optimal,inst_regret,cum_regret
    <out>/seed_<s>/clusters.csv  t,precision,recall,est_size,true_size
    <out>/seed_<s>/timing.csv    t,clustering_s,meta_s,user_s
    <out>/summary.json
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .environments import DatasetEnvSpec, SyntheticEnvSpec, UniformRewardEnv, make_env
from .policies import POLICIES, PolicyConfig, RetrainSchedule, make_policy

REGRET_COLUMNS = ["t", "user", "arm", "reward", "optimal", "inst_regret", "cum_regret"]
CLUSTER_COLUMNS = ["t", "precision", "recall", "est_size", "true_size"]
TIMING_COLUMNS = ["t", "clustering_s", "meta_s", "user_s"]
ENV_KINDS = ("synthetic", "uniform", "dataset")


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("; ".join(problems))
        self.problems = problems


@dataclass
class ExperimentConfig:
    environment: dict
    policy: str = "mcnb"
    policy_config: PolicyConfig = field(default_factory=PolicyConfig)
    horizon: int = 2000
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str | None = None
    window: int = 500

    def env_spec(self):
        env = dict(self.environment)
        kind = env.pop("kind")
        if kind == "synthetic":
            return SyntheticEnvSpec(**env)
        if kind == "dataset":
            return DatasetEnvSpec(**env)
        return env

    def make_env(self, seed):
        env = dict(self.environment)
        if env["kind"] == "uniform":
            env.pop("kind")
            return UniformRewardEnv(**env)
        return make_env(self.env_spec(), seed)

    def to_json(self) -> dict:
        pol = {"id": self.policy, **dataclasses.asdict(self.policy_config)}
        return {
            "environment": self.environment,
            "policy": pol,
            "horizon": self.horizon,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "window": self.window,
        }


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def parse_config(raw: dict) -> ExperimentConfig:
    """Validate a JSON config; every problem is reported with its field path."""
    problems = []
    top = {"environment", "policy", "horizon", "seeds", "output_dir", "window"}
    for k in raw:
        if k not in top:
            problems.append(f"unknown key '{k}'")
    env = raw.get("environment")
    if not isinstance(env, dict):
        problems.append("environment: required object")
        env = {"kind": "synthetic"}
    kind = env.get("kind")
    if kind not in ENV_KINDS:
        problems.append(f"environment.kind: must be one of {ENV_KINDS}")
    else:
        allowed = {
            "synthetic": _fields(SyntheticEnvSpec),
            "dataset": _fields(DatasetEnvSpec),
            "uniform": {"n_users", "dim", "arms_per_round", "noise_std"},
        }[kind]
        for k in env:
            if k != "kind" and k not in allowed:
                problems.append(f"unknown key 'environment.{k}'")
    pol = dict(raw.get("policy", {"id": "mcnb"}))
    pid = pol.pop("id", None)
    if pid not in POLICIES:
        problems.append(f"policy.id: must be one of {POLICIES}")
    for k in pol:
        if k not in _fields(PolicyConfig):
            problems.append(f"unknown key 'policy.{k}'")
    if isinstance(pol.get("retrain"), dict):
        for k in pol["retrain"]:
            if k not in _fields(RetrainSchedule):
                problems.append(f"unknown key 'policy.retrain.{k}'")
    horizon = raw.get("horizon", 2000)
    if not isinstance(horizon, int) or horizon < 1:
        problems.append("horizon: must be an integer >= 1")
        horizon = 1
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        problems.append("seeds: must be a non-empty list of non-negative integers")
        seeds = [0]
    window = raw.get("window", min(500, horizon))
    if not isinstance(window, int) or not 1 <= window <= horizon:
        problems.append("window: must be an integer in [1, horizon]")
    if problems:
        raise ConfigError(problems)
    try:
        cfg = ExperimentConfig(env, pid, PolicyConfig(**pol), horizon, seeds, raw.get("output_dir"), window)
        if kind != "uniform":
            cfg.env_spec()
    except (TypeError, ValueError) as exc:
        raise ConfigError([str(exc)]) from exc
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(json.load(fh))


@dataclass
class RunResult:
    seed: int
    policy: str
    users: np.ndarray
    arms: np.ndarray
    rewards: np.ndarray
    optimal: np.ndarray
    inst_regret: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    est_size: np.ndarray
    true_size: np.ndarray
    timing: np.ndarray  # (T, 3): clustering, meta, user seconds

    @property
    def cum_regret(self) -> np.ndarray:
        return np.cumsum(self.inst_regret)

    @property
    def horizon(self) -> int:
        return len(self.inst_regret)


def run_seed(cfg: ExperimentConfig, seed: int) -> RunResult:
    ss = np.random.SeedSequence(seed)
    round_ss, reward_ss, policy_ss, cold_ss = ss.spawn(4)
    env = cfg.make_env(seed)
    pc = dataclasses.replace(cfg.policy_config)
    policy = make_policy(cfg.policy, env.n_users, pc, policy_ss, env.input_dim)
    round_rng = np.random.default_rng(round_ss)
    reward_rng = np.random.default_rng(reward_ss)
    policy.cold_start(env, np.random.default_rng(cold_ss))

    T = cfg.horizon
    users = np.empty(T, np.int64)
    arms = np.empty(T, np.int64)
    rewards = np.empty(T)
    optimal = np.empty(T)
    inst = np.empty(T)
    prec = np.full(T, np.nan)
    rec = np.full(T, np.nan)
    est_size = np.zeros(T, np.int64)
    true_size = np.zeros(T, np.int64)
    timing = np.zeros((T, 3))
    for t in range(T):
        rnd = env.gen_round(t + 1, round_rng)
        if getattr(policy, "needs_expected", False):
            dec = policy.select_arm(rnd.user, rnd.arms, expected=rnd.expected)
        else:
            dec = policy.select_arm(rnd.user, rnd.arms)
        i = dec.chosen_index
        r = env.sample_reward(rnd.user, rnd.arms[i], reward_rng)
        policy.update(rnd.user, rnd.arms[i], r, decision=dec)
        users[t], arms[t], rewards[t] = rnd.user, i, r
        optimal[t] = rnd.optimal
        inst[t] = max(0.0, optimal[t] - float(rnd.expected[i]))
        est = dec.cluster
        truth = rnd.true_cluster(i)
        if est is not None:
            est_size[t] = len(est.members)
            if truth is not None:
                hit = np.intersect1d(est.members, truth).size
                prec[t] = hit / len(est.members)
                rec[t] = hit / len(truth)
                true_size[t] = len(truth)
        tm = policy.last_timing
        timing[t] = (tm["clustering"], tm["meta"], tm["user"])
    return RunResult(seed, cfg.policy, users, arms, rewards, optimal, inst, prec, rec, est_size, true_size, timing)


def _fmt(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return ""
    return repr(v)


def write_run(result: RunResult, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    cum = result.cum_regret
    with open(os.path.join(out_dir, "regret.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(REGRET_COLUMNS)
        for t in range(result.horizon):
            w.writerow([t + 1] + [_fmt(v) for v in (
                result.users[t], result.arms[t], result.rewards[t], result.optimal[t],
                result.inst_regret[t], cum[t])])
    with open(os.path.join(out_dir, "clusters.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(CLUSTER_COLUMNS)
        for t in range(result.horizon):
            if result.est_size[t] == 0:
                continue
            w.writerow([t + 1] + [_fmt(v) for v in (
                result.precision[t], result.recall[t], result.est_size[t], result.true_size[t])])
    with open(os.path.join(out_dir, "timing.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TIMING_COLUMNS)
        for t in range(result.horizon):
            w.writerow([t + 1] + [_fmt(v) for v in result.timing[t]])


def windowed_average_regret(inst_regret, window: int):
    """Non-overlapping window means and the running average regret per round.

    Returns ``(windows, cumulative_average)`` where ``windows`` is a list of
    ``(window_end_round, mean)``.
    """
    inst = np.asarray(inst_regret, dtype=np.float64)
    if not 1 <= window <= len(inst):
        raise ValueError("window must be in [1, T]")
    windows = []
    for end in range(window, len(inst) + 1, window):
        windows.append((end, float(inst[end - window : end].mean())))
    cum_avg = np.cumsum(inst) / np.arange(1, len(inst) + 1)
    return windows, cum_avg


def timing_breakdown(result: RunResult) -> dict:
    tm = result.timing
    return {
        "clustering_s": float(tm[:, 0].mean()),
        "meta_s": float(tm[:, 1].mean()),
        "user_s": float(tm[:, 2].mean()),
    }


def clustering_time_ratio(small: RunResult, large: RunResult) -> float:
    return timing_breakdown(large)["clustering_s"] / timing_breakdown(small)["clustering_s"]


def summarize(cfg: ExperimentConfig, results: list[RunResult]) -> dict:
    per_seed = []
    for res in results:
        windows, cum_avg = windowed_average_regret(res.inst_regret, cfg.window)
        tail = res.precision[-cfg.window :]
        tail = tail[~np.isnan(tail)]
        per_seed.append({
            "seed": res.seed,
            "final_regret": float(res.cum_regret[-1]),
            "window_means": [[e, m] for e, m in windows],
            "cumulative_average": float(cum_avg[-1]),
            "tail_precision": float(tail.mean()) if tail.size else None,
            "timing": timing_breakdown(res),
        })
    finals = np.array([s["final_regret"] for s in per_seed])
    return {
        "policy": cfg.policy,
        "horizon": cfg.horizon,
        "environment": cfg.environment,
        "config": cfg.to_json(),
        "seeds": per_seed,
        "mean_final_regret": float(finals.mean()),
        "std_final_regret": float(finals.std(ddof=1)) if len(finals) > 1 else 0.0,
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, seeds=None) -> tuple[list[RunResult], dict]:
    out_dir = out_dir or cfg.output_dir
    seeds = cfg.seeds if seeds is None else seeds
    results = []
    for s in seeds:
        res = run_seed(cfg, s)
        results.append(res)
        if out_dir:
            write_run(res, os.path.join(out_dir, f"seed_{s}"))
    summary = summarize(cfg, results)
    if out_dir:
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
            json.dump(summary, fh, indent=2)
    return results, summary


def compare(summaries: list[dict]) -> list[dict]:
    """Rank policies by mean final regret, with paired-seed win counts.

    All summaries must share environment and horizon.  ``wins[p]`` counts the
    seeds on which this policy had strictly lower final regret than ``p``.
    """
    if not summaries:
        return []
    env0, h0 = summaries[0]["environment"], summaries[0]["horizon"]
    for s in summaries[1:]:
        if s["environment"] != env0 or s["horizon"] != h0:
            raise ValueError("cannot compare runs with different environments or horizons")
    finals = {
        s["policy"]: {d["seed"]: d["final_regret"] for d in s["seeds"]} for s in summaries
    }
    rows = []
    for s in summaries:
        mine = finals[s["policy"]]
        wins = {}
        for other, theirs in finals.items():
            if other == s["policy"]:
                continue
            common = sorted(set(mine) & set(theirs))
            wins[other] = sum(mine[k] < theirs[k] for k in common)
        rows.append({
            "policy": s["policy"],
            "mean_final_regret": s["mean_final_regret"],
            "std_final_regret": s["std_final_regret"],
            "n_seeds": len(mine),
            "wins": wins,
        })
    rows.sort(key=lambda r: r["mean_final_regret"])
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows


def load_summary(run_dir) -> dict:
    with open(os.path.join(run_dir, "summary.json"), encoding="utf-8") as fh:
        return json.load(fh)
