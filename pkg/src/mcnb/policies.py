"""Arm-selection policies: M-CNB and the baselines it is compared against.

Every policy exposes the same two calls::

    decision = policy.select_arm(user, arms)
    policy.update(user, arms[decision.chosen_index], reward, decision=decision)

plus ``cold_start(env)`` before the first round.  ``last_timing`` holds the
wall-clock split (clustering / meta adaptation / user training) of the most
recent round.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import core
from .core import NetworkShape, Optimizer

STATE_FORMAT = "mcnb-state"
STATE_VERSION = 1

ALPHA_GRID = (0.0001, 0.001, 0.01, 0.1)
LAMBDA_GRID = (0.01, 0.1, 1.0)


class ColdStartError(RuntimeError):
    """A learner was asked to score or sample before it has any data."""


class UnknownUserError(KeyError):
    pass


@dataclass
class RetrainSchedule:
    """Periodic refit: every ``warmup_every`` rounds up to ``warmup_rounds``, then every ``later_every``."""

    warmup_rounds: int = 1000
    warmup_every: int = 10
    later_every: int = 100

    def due(self, t: int) -> bool:
        every = self.warmup_every if t <= self.warmup_rounds else self.later_every
        return every > 0 and t % every == 0


@dataclass
class PolicyConfig:
    nu: float = 5.0
    gamma: float = 0.4
    s_norm: float = 1.0
    delta: float = 0.1
    lr_user: float = 0.01
    lr_meta: float = 1.0
    lr_refit: float = 1e-3
    width: int = 100
    depth: int = 2
    input_dim: int | None = None
    optimizer: str = "adam"
    step_optimizer: str = "plain-sgd"
    retrain: RetrainSchedule = field(default_factory=RetrainSchedule)
    refit_epochs: int = 2
    refit_scope: str = "all"
    refit_data: str = "own"
    meta_steps: int = 1
    meta_bonus_scale: float = 1.0
    center_at_init: bool = False
    # NeuUCB baselines
    alpha: float = 0.01
    lam: float = 1.0

    def __post_init__(self):
        if isinstance(self.retrain, dict):
            self.retrain = RetrainSchedule(**self.retrain)
        errs = []
        if not self.nu > 1:
            errs.append("nu must be > 1")
        if not 0 < self.gamma < 1:
            errs.append("gamma must be in (0, 1)")
        if not 0 < self.delta <= 1:
            errs.append("delta must be in (0, 1]")
        if self.s_norm < 0:
            errs.append("s_norm must be >= 0")
        if not (self.lr_user > 0 and self.lr_meta > 0 and self.lr_refit > 0):
            errs.append("learning rates must be > 0")
        for name in ("optimizer", "step_optimizer"):
            if getattr(self, name) not in ("plain-sgd", "adam"):
                errs.append(f"{name} must be 'plain-sgd' or 'adam'")
        if self.refit_scope not in ("served", "all"):
            errs.append("refit_scope must be 'served' or 'all'")
        if self.refit_data not in ("history", "own"):
            errs.append("refit_data must be 'history' or 'own'")
        if self.meta_steps < 1:
            errs.append("meta_steps must be >= 1")
        if self.refit_epochs < 0:
            errs.append("refit_epochs must be >= 0")
        if errs:
            raise ValueError("; ".join(errs))

    @property
    def tau(self) -> float:
        """Cluster threshold (nu - 1) / nu * gamma."""
        return (self.nu - 1.0) / self.nu * self.gamma

    def network(self, input_dim: int | None = None) -> NetworkShape:
        d = self.input_dim if input_dim is None else input_dim
        if d is None:
            raise ValueError("input_dim is not set on the policy config")
        return NetworkShape(d, self.width, self.depth)

    def to_json(self) -> dict:
        return asdict(self)


class History:
    """Growable (x, r, own) store; ``own`` marks samples the user was served itself."""

    def __init__(self, dim: int, cap: int = 64):
        self.X = np.empty((cap, dim))
        self.r = np.empty(cap)
        self.own = np.empty(cap, dtype=bool)
        self.n = 0

    def append(self, x, r, own):
        if self.n == len(self.r):
            cap = 2 * len(self.r)
            self.X = np.resize(self.X, (cap, self.X.shape[1]))
            self.r = np.resize(self.r, cap)
            self.own = np.resize(self.own, cap)
        self.X[self.n] = x
        self.r[self.n] = r
        self.own[self.n] = own
        self.n += 1

    def __len__(self):
        return self.n

    def rows(self, own_only=False) -> np.ndarray:
        if own_only:
            return np.flatnonzero(self.own[: self.n])
        return np.arange(self.n)


class UserLearnerState:
    """Per-user network, serve count and history; ``params`` is a row of the policy's matrix."""

    def __init__(self, user_id: int, thetas: np.ndarray, dim: int, step_opt: Optimizer, refit_opt: Optimizer):
        self.user_id = user_id
        self._thetas = thetas
        self.history = History(dim)
        self.step_opt = step_opt
        self.opt = refit_opt
        self.refit_mark = 0

    @property
    def params(self) -> np.ndarray:
        return self._thetas[self.user_id]

    @property
    def serve_count(self) -> int:
        return len(self.history)


@dataclass
class MetaLearnerState:
    params: np.ndarray
    init_snapshot: np.ndarray
    opt: Optimizer

    def __post_init__(self):
        self.init_snapshot = self.init_snapshot.copy()
        self.init_snapshot.flags.writeable = False


@dataclass
class ClusterEstimate:
    members: np.ndarray
    anchor_user: int
    anchor_arm: np.ndarray
    threshold: float

    def __len__(self):
        return len(self.members)

    def __contains__(self, u):
        return bool(np.any(self.members == u))


@dataclass
class ArmScore:
    exploit: float
    meta_bonus: float = 0.0
    user_bonus_s: float = 0.0
    user_bonus_log: float = 0.0
    cluster_size: int = 0

    @property
    def total(self) -> float:
        return self.exploit + self.meta_bonus + self.user_bonus_s + self.user_bonus_log


@dataclass
class ArmDecision:
    chosen_index: int
    scores: list[ArmScore]
    clusters: list[ClusterEstimate] | None = None
    grads: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def totals(self) -> np.ndarray:
        return np.array([s.total for s in self.scores])

    @property
    def cluster(self) -> ClusterEstimate | None:
        return None if self.clusters is None else self.clusters[self.chosen_index]


def _seed_seq(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def arm_rng(round_seed: int, arm: np.ndarray) -> np.random.Generator:
    """Per-arm stream keyed by the round seed and the arm's bytes.

    Identical contexts in one round get identical draws, and hence identical
    scores; distinct arms get independent streams.
    """
    words = np.frombuffer(np.ascontiguousarray(arm, dtype=np.float64).tobytes(), dtype=np.uint32)
    return np.random.default_rng([round_seed, *words.tolist()])


def argmax_lowest(values) -> int:
    # np.argmax already returns the first maximal index
    return int(np.argmax(np.asarray(values)))


def _check_arms(arms):
    arms = np.atleast_2d(np.asarray(arms, dtype=np.float64))
    if arms.shape[0] == 0 or arms.size == 0:
        raise ValueError("select_arm needs at least one arm")
    return arms


def _check_reward(r):
    if not 0.0 <= r <= 1.0:
        raise ValueError(f"reward {r} outside [0, 1]")


class MCNB:
    """Meta clustering of neural bandits.

    User learners cluster users per arm; one meta learner is adapted to each
    arm's estimated cluster and scores the arm with a gradient-distance bonus.
    """

    name = "mcnb"

    def __init__(self, n_users: int, cfg: PolicyConfig, seed=0, input_dim: int | None = None):
        self.cfg = cfg
        self.shape = cfg.network(input_dim)
        self.n_users = n_users
        init_seed, rng_seed = _seed_seq(seed).spawn(2)
        theta0 = core.init_params(self.shape, init_seed)
        self.meta = MetaLearnerState(theta0.copy(), theta0, Optimizer(cfg.step_optimizer, cfg.lr_meta))
        self.thetas = np.tile(theta0, (n_users, 1))
        self.users = [
            UserLearnerState(
                u, self.thetas, self.shape.input_dim,
                Optimizer(cfg.step_optimizer, cfg.lr_user), Optimizer(cfg.optimizer, cfg.lr_refit),
            )
            for u in range(n_users)
        ]
        self.rng = np.random.default_rng(rng_seed)
        self.t = 0
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": 0.0}
        self._g0_cache: dict[bytes, np.ndarray] = {}

    # -- building blocks -------------------------------------------------

    def _check_user(self, u):
        if not 0 <= u < self.n_users:
            raise UnknownUserError(f"unknown user id {u}")

    def estimate_cluster(self, anchor: int, arm) -> ClusterEstimate:
        self._check_user(anchor)
        arm = np.asarray(arm, dtype=np.float64)
        preds = core.forward_many(self.shape, self.thetas, arm)
        members = np.flatnonzero(np.abs(preds - preds[anchor]) <= self.cfg.tau)
        return ClusterEstimate(members, anchor, arm, self.cfg.tau)

    def sgd_meta_adapt(self, cluster: ClusterEstimate, rng=None, persist=False) -> np.ndarray:
        """Averaged one-sample-per-member gradient step(s) from the current meta parameters.

        Draws are consumed from ``rng`` in ascending member-id order.  With
        ``persist=False`` the meta optimizer state is copied and discarded.
        """
        rng = self.rng if rng is None else rng
        opt = self.meta.opt if persist else self.meta.opt.copy()
        theta = self.meta.params
        hists = [self.users[u].history for u in cluster.members]
        sizes = np.array([h.n for h in hists])
        if (sizes == 0).any():
            u = cluster.members[int(np.argmax(sizes == 0))]
            raise ColdStartError(f"user {u} has an empty history; run cold_start first")
        idx = np.arange(len(hists))
        for _ in range(self.cfg.meta_steps):
            picks = rng.integers(0, sizes)
            X = np.array([h.X[j] for h, j in zip(hists, picks)])
            r = np.array([h.r[j] for h, j in zip(hists, picks)])
            _, g = core.mean_loss_grad(self.shape, theta, X, r, idx)
            theta = core.optimizer_step(theta, g, opt)
        return theta

    def _init_grad(self, arm):
        key = arm.tobytes()
        g = self._g0_cache.get(key)
        if g is None:
            if len(self._g0_cache) > 4096:
                self._g0_cache.clear()
            g = core.backward(self.shape, self.meta.init_snapshot, arm)
            self._g0_cache[key] = g
        return g

    def ucb_score(self, arm, adapted: np.ndarray, mu: int, cluster_size: int = 0) -> ArmScore:
        if mu < 1:
            raise ColdStartError("serve count is 0: cold start must precede scoring")
        arm = np.asarray(arm, dtype=np.float64)
        f, g = core.value_and_grad(self.shape, adapted, arm)
        if self.cfg.center_at_init:
            f -= core.forward(self.shape, self.meta.init_snapshot, arm)
        meta_bonus = self.cfg.meta_bonus_scale * core.grad_l2_distance(g, self._init_grad(arm)) / self.shape.width ** 0.25
        return ArmScore(
            exploit=f,
            meta_bonus=meta_bonus,
            user_bonus_s=math.sqrt((self.cfg.s_norm + 1.0) / (2.0 * mu)),
            user_bonus_log=math.sqrt(2.0 * math.log(1.0 / self.cfg.delta) / mu),
            cluster_size=cluster_size,
        )

    # -- protocol ---------------------------------------------------------

    def cold_start(self, env, rng=None):
        """One observation per user, applied to that user only."""
        rng = self.rng if rng is None else rng
        for u in range(self.n_users):
            x, r = env.cold_start_sample(u, rng)
            self._user_step(u, x, r, own=True)

    def select_arm(self, user: int, arms, rng=None) -> ArmDecision:
        self._check_user(user)
        arms = _check_arms(arms)
        rng = self.rng if rng is None else rng
        round_seed = int(rng.integers(2**63))
        mu = self.users[user].serve_count
        if mu < 1:
            raise ColdStartError(f"user {user} has serve count 0")
        t_cluster = t_meta = 0.0
        scores, clusters = [], []
        for i, arm in enumerate(arms):
            rng_i = arm_rng(round_seed, arm)
            t0 = time.perf_counter()
            cl = self.estimate_cluster(user, arm)
            t1 = time.perf_counter()
            adapted = self.sgd_meta_adapt(cl, rng_i)
            t2 = time.perf_counter()
            t_cluster += t1 - t0
            t_meta += t2 - t1
            scores.append(self.ucb_score(arm, adapted, mu, len(cl)))
            clusters.append(cl)
        self.last_timing = {"clustering": t_cluster, "meta": t_meta, "user": 0.0}
        return ArmDecision(argmax_lowest([s.total for s in scores]), scores, clusters)

    def _user_step(self, u, x, r, own):
        st = self.users[u]
        core.train_pass(self.shape, self.thetas[u], x[None, :], np.array([r]), np.zeros(1, np.int64), st.step_opt)
        st.history.append(x, r, own)

    def refit(self, u):
        st = self.users[u]
        rows = st.history.rows(own_only=self.cfg.refit_data == "own")
        if rows.size == 0 or self.cfg.refit_epochs == 0:
            return
        order = np.concatenate([rows[self.rng.permutation(rows.size)] for _ in range(self.cfg.refit_epochs)])
        core.train_pass(self.shape, self.thetas[u], st.history.X, st.history.r, order, st.opt)
        st.refit_mark = st.history.n

    def update(self, user: int, arm, reward: float, rng=None, decision: ArmDecision | None = None):
        self._check_user(user)
        _check_reward(reward)
        rng = self.rng if rng is None else rng
        arm = np.asarray(arm, dtype=np.float64)
        self.t += 1
        t0 = time.perf_counter()
        cluster = decision.cluster if decision is not None and decision.clusters else None
        if cluster is None:
            cluster = self.estimate_cluster(user, arm)
        t1 = time.perf_counter()
        self.meta.params = self.sgd_meta_adapt(cluster, rng, persist=True)
        t2 = time.perf_counter()
        for u in cluster.members:
            self._user_step(int(u), arm, reward, own=(u == user))
        if self.cfg.retrain.due(self.t):
            targets = [user] if self.cfg.refit_scope == "served" else range(self.n_users)
            for u in targets:
                if self.users[u].history.n > self.users[u].refit_mark:
                    self.refit(u)
        t3 = time.perf_counter()
        timing = dict(self.last_timing)
        timing["clustering"] += t1 - t0
        timing["meta"] += t2 - t1
        timing["user"] = t3 - t2
        self.last_timing = timing

    # -- checkpointing ----------------------------------------------------

    def state_dict(self) -> dict:
        def opt_json(o):
            s = None if o.state is None else {"m": o.state.m.tolist(), "v": o.state.v.tolist(), "t": o.state.t}
            return {"mode": o.mode, "lr": o.lr, "adam": s}

        return {
            "format": STATE_FORMAT,
            "version": STATE_VERSION,
            "shape": asdict(self.shape),
            "config": self.cfg.to_json(),
            "t": self.t,
            "rng": self.rng.bit_generator.state,
            "meta": {
                "params": self.meta.params.tolist(),
                "init": self.meta.init_snapshot.tolist(),
                "optimizer": opt_json(self.meta.opt),
            },
            "users": [
                {
                    "id": st.user_id,
                    "params": st.params.tolist(),
                    "serve_count": st.serve_count,
                    "refit_mark": st.refit_mark,
                    "history": {
                        "x": st.history.X[: st.history.n].tolist(),
                        "r": st.history.r[: st.history.n].tolist(),
                        "own": st.history.own[: st.history.n].tolist(),
                    },
                    "step_optimizer": opt_json(st.step_opt),
                    "optimizer": opt_json(st.opt),
                }
                for st in self.users
            ],
        }

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.state_dict(), fh)

    @classmethod
    def from_state_dict(cls, state: dict) -> "MCNB":
        if state.get("format") != STATE_FORMAT:
            raise ValueError("not an mcnb state file")
        if state.get("version") != STATE_VERSION:
            raise ValueError(f"unsupported state version {state.get('version')}")

        def opt_load(o):
            a = o["adam"]
            st = None if a is None else core.AdamState(np.array(a["m"]), np.array(a["v"]), a["t"])
            return Optimizer(o["mode"], o["lr"], st)

        cfg = PolicyConfig(**state["config"])
        shape = NetworkShape(**state["shape"])
        pol = cls(len(state["users"]), cfg, 0, shape.input_dim)
        pol.t = state["t"]
        pol.rng.bit_generator.state = state["rng"]
        init = np.array(state["meta"]["init"])
        pol.meta = MetaLearnerState(np.array(state["meta"]["params"]), init, opt_load(state["meta"]["optimizer"]))
        for st, blob in zip(pol.users, state["users"]):
            pol.thetas[st.user_id] = blob["params"]
            st.opt = opt_load(blob["optimizer"])
            st.step_opt = opt_load(blob["step_optimizer"])
            st.refit_mark = blob["refit_mark"]
            h = blob["history"]
            for x, r, own in zip(h["x"], h["r"], h["own"]):
                st.history.append(np.array(x), r, own)
            if st.serve_count != blob["serve_count"]:
                raise ValueError(f"user {st.user_id}: serve_count does not match history length")
        return pol

    @classmethod
    def load(cls, path) -> "MCNB":
        with open(path, encoding="utf-8") as fh:
            return cls.from_state_dict(json.load(fh))


class _NeuralUCBLearner:
    def __init__(self, theta0, cfg, shape, dim):
        self.theta = theta0.copy()
        self.diag = np.full(theta0.shape[0], cfg.lam)
        self.history = History(dim)
        self.step_opt = Optimizer(cfg.step_optimizer, cfg.lr_user)
        self.opt = Optimizer(cfg.optimizer, cfg.lr_refit)
        self.refit_mark = 0


class NeuUCB:
    """NeuralUCB with a diagonal design matrix; one shared network or one per user."""

    def __init__(self, n_users: int, cfg: PolicyConfig, seed=0, input_dim=None, shared=True):
        self.cfg = cfg
        self.shape = cfg.network(input_dim)
        self.n_users = n_users
        self.shared = shared
        self.name = "neuucb-one" if shared else "neuucb-ind"
        init_seed, rng_seed = _seed_seq(seed).spawn(2)
        theta0 = core.init_params(self.shape, init_seed)
        n = 1 if shared else n_users
        self.learners = [_NeuralUCBLearner(theta0, cfg, self.shape, self.shape.input_dim) for _ in range(n)]
        self.rng = np.random.default_rng(rng_seed)
        self.t = 0
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": 0.0}

    def _learner(self, user):
        if not 0 <= user < self.n_users:
            raise UnknownUserError(f"unknown user id {user}")
        return self.learners[0 if self.shared else user]

    def cold_start(self, env, rng=None):
        rng = self.rng if rng is None else rng
        for u in range(self.n_users):
            x, r = env.cold_start_sample(u, rng)
            self._step(self._learner(u), x, r)

    def select_arm(self, user, arms, rng=None) -> ArmDecision:
        arms = _check_arms(arms)
        ln = self._learner(user)
        m = self.shape.width
        scores, grads = [], []
        for arm in arms:
            f, g = core.value_and_grad(self.shape, ln.theta, arm)
            bonus = self.cfg.alpha * math.sqrt(float(np.sum(g * g / ln.diag)) / m)
            scores.append(ArmScore(exploit=f, meta_bonus=bonus))
            grads.append(g)
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": 0.0}
        return ArmDecision(argmax_lowest([s.total for s in scores]), scores, None, grads)

    def _step(self, ln, x, r):
        core.train_pass(self.shape, ln.theta, x[None, :], np.array([r]), np.zeros(1, np.int64), ln.step_opt)
        ln.history.append(x, r, True)

    def _refit(self, ln):
        n = ln.history.n
        if n == 0 or self.cfg.refit_epochs == 0:
            return
        order = np.concatenate([self.rng.permutation(n) for _ in range(self.cfg.refit_epochs)])
        core.train_pass(self.shape, ln.theta, ln.history.X, ln.history.r, order, ln.opt)
        ln.refit_mark = n

    def update(self, user, arm, reward, rng=None, decision: ArmDecision | None = None):
        _check_reward(reward)
        arm = np.asarray(arm, dtype=np.float64)
        ln = self._learner(user)
        self.t += 1
        t0 = time.perf_counter()
        if decision is not None and decision.grads is not None:
            g = decision.grads[decision.chosen_index]
        else:
            g = core.backward(self.shape, ln.theta, arm)
        ln.diag += g * g / self.shape.width
        self._step(ln, arm, reward)
        if self.cfg.retrain.due(self.t):
            targets = [ln] if self.cfg.refit_scope == "served" else self.learners
            for other in targets:
                if other.history.n > other.refit_mark:
                    self._refit(other)
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": time.perf_counter() - t0}


class UniformRandom:
    name = "random"

    def __init__(self, n_users: int, cfg: PolicyConfig | None = None, seed=0, input_dim=None):
        self.n_users = n_users
        self.rng = np.random.default_rng(seed)
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": 0.0}

    def cold_start(self, env, rng=None):
        pass

    def select_arm(self, user, arms, rng=None) -> ArmDecision:
        arms = _check_arms(arms)
        rng = self.rng if rng is None else rng
        i = int(rng.integers(arms.shape[0]))
        return ArmDecision(i, [ArmScore(float(j == i)) for j in range(arms.shape[0])])

    def update(self, user, arm, reward, rng=None, decision=None):
        _check_reward(reward)


class Oracle:
    """Picks the arm with the highest hidden expected reward (metrics-side access)."""

    name = "oracle"
    needs_expected = True

    def __init__(self, n_users: int, cfg=None, seed=0, input_dim=None):
        self.n_users = n_users
        self.last_timing = {"clustering": 0.0, "meta": 0.0, "user": 0.0}

    def cold_start(self, env, rng=None):
        pass

    def select_arm(self, user, arms, rng=None, expected=None) -> ArmDecision:
        if expected is None:
            raise ValueError("oracle policy needs the hidden expected rewards")
        exp = np.asarray(expected, dtype=np.float64)
        return ArmDecision(argmax_lowest(exp), [ArmScore(float(e)) for e in exp])

    def update(self, user, arm, reward, rng=None, decision=None):
        _check_reward(reward)


POLICIES = ("mcnb", "neuucb-one", "neuucb-ind", "random", "oracle")


def make_policy(policy_id: str, n_users: int, cfg: PolicyConfig, seed, input_dim: int):
    if policy_id == "mcnb":
        return MCNB(n_users, cfg, seed, input_dim)
    if policy_id == "neuucb-one":
        return NeuUCB(n_users, cfg, seed, input_dim, shared=True)
    if policy_id == "neuucb-ind":
        return NeuUCB(n_users, cfg, seed, input_dim, shared=False)
    if policy_id == "random":
        return UniformRandom(n_users, cfg, seed, input_dim)
    if policy_id == "oracle":
        return Oracle(n_users, cfg, seed, input_dim)
    raise ValueError(f"unknown policy {policy_id!r}; choose from {POLICIES}")
