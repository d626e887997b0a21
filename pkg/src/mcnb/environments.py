"""Reward-generating worlds with ground-truth relative clusters.

Synthetic worlds split arm space into two regions by the sign of the first
coordinate.  Each region has its own labelling of users into ``n_groups``
groups, so two users can agree on one kind of arm and disagree on another.
Every (region, group) pair owns a reward function

    h(x) = low_g + band * phi(<w, x>)

where ``phi`` comes from the chosen family and maps into [0, 1], the offsets
``low_g`` are evenly spaced over [0, 1 - band] and ``band`` is small enough
that groups on the same arm are always at least ``gamma_gap`` apart.  Arms
are still checked against the gap and resampled if one slips through.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

UNIT_TOL = 1e-12
FAMILIES = ("linear", "quadratic", "cosine")


class GapCertificationError(RuntimeError):
    """Could not draw an arm satisfying the gamma-gap within the retry budget."""


class SampleUnavailableError(RuntimeError):
    """The environment cannot produce a sample (e.g. a user with no data)."""


@dataclass(frozen=True)
class SyntheticEnvSpec:
    n_users: int = 30
    dim: int = 10
    arms_per_round: int = 10
    n_groups: int = 3
    reward_family: str = "linear"
    noise_std: float = 0.05
    gamma_gap: float = 0.4
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        errs = []
        for name in ("n_users", "dim", "arms_per_round", "n_groups", "max_retries"):
            if getattr(self, name) < 1:
                errs.append(f"{name} must be >= 1")
        if self.dim < 2:
            errs.append("dim must be >= 2 (the first coordinate selects the region)")
        if self.reward_family not in FAMILIES:
            errs.append(f"reward_family must be one of {FAMILIES}")
        if self.noise_std < 0:
            errs.append("noise_std must be >= 0")
        if not self.gamma_gap > 0:
            errs.append("gamma_gap must be > 0")
        if self.n_groups > self.n_users:
            errs.append("n_groups cannot exceed n_users")
        if errs:
            raise ValueError("; ".join(errs))


@dataclass
class Round:
    """One interaction.  ``user`` and ``arms`` are what a policy may see.

    ``expected`` (rewards of the serving user per arm) and ``labels`` (per arm,
    the true relative-cluster id of every user) are for metrics only.
    """

    t: int
    user: int
    arms: np.ndarray
    expected: np.ndarray
    labels: np.ndarray | None = field(default=None, repr=False)

    def true_cluster(self, arm_index: int) -> np.ndarray | None:
        if self.labels is None:
            return None
        lab = self.labels[arm_index]
        return np.flatnonzero(lab == lab[self.user])

    @property
    def optimal(self) -> float:
        return float(self.expected.max())


def random_unit(rng, k, d):
    x = rng.standard_normal((k, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def family_value(family: str, proj):
    """phi(<w, x>) in [0, 1] for the documented closed forms."""
    if family == "linear":
        return np.clip(proj / 2.0 + 0.5, 0.0, 1.0)
    if family == "quadratic":
        return np.clip(proj * proj, 0.0, 1.0)
    if family == "cosine":
        return 0.5 * (1.0 + np.cos(np.pi * proj))
    raise ValueError(f"unknown reward family {family!r}")


def band_layout(n_groups: int, gamma: float) -> tuple[float, np.ndarray]:
    """Band width and per-group lower offsets for a gamma-spaced layout."""
    if n_groups == 1:
        return 1.0, np.zeros(1)
    band = max(0.0, 0.9 * (1.0 - (n_groups - 1) * gamma) / n_groups)
    step = (1.0 - band) / (n_groups - 1)
    return band, step * np.arange(n_groups)


class SyntheticEnv:
    def __init__(self, spec: SyntheticEnvSpec, seed=None):
        self.spec = spec
        ss = np.random.SeedSequence([spec.seed] if seed is None else [spec.seed, seed])
        rng = np.random.default_rng(ss)
        n, q, d = spec.n_users, spec.n_groups, spec.dim
        # balanced, shuffled groups per region
        self.labels = np.stack([rng.permutation(np.arange(n) % q) for _ in range(2)])
        self.directions = random_unit(rng, 2 * q, d).reshape(2, q, d)
        self.band, self.offsets = band_layout(q, spec.gamma_gap)

    @property
    def n_users(self):
        return self.spec.n_users

    @property
    def input_dim(self):
        return self.spec.dim

    @staticmethod
    def region(arm) -> int:
        return 0 if arm[0] >= 0 else 1

    def _group_values(self, arms):
        """(K, q) expected reward of every group on each arm's own region."""
        arms = np.atleast_2d(arms)
        reg = (arms[:, 0] < 0).astype(int)
        proj = np.einsum("kd,kqd->kq", arms, self.directions[reg])
        return self.offsets[None, :] + self.band * family_value(self.spec.reward_family, proj), reg

    def expected_reward(self, user: int, arm) -> float:
        arm = np.asarray(arm, dtype=np.float64)
        if abs(np.linalg.norm(arm) - 1.0) > 1e-9:
            raise ValueError("expected_reward needs a unit-norm arm")
        if not 0 <= user < self.n_users:
            raise IndexError(f"user {user} out of range")
        vals, reg = self._group_values(arm)
        return float(vals[0, self.labels[reg[0], user]])

    def expected_matrix(self, arms) -> np.ndarray:
        """(n_users, K) expected rewards."""
        vals, reg = self._group_values(arms)
        return np.take_along_axis(vals, self.labels[reg], axis=1).T

    def label_matrix(self, arms) -> np.ndarray:
        """(K, n_users) true relative-cluster ids."""
        reg = (np.atleast_2d(arms)[:, 0] < 0).astype(int)
        return self.labels[reg]

    def _gap_ok(self, vals):
        q = vals.shape[1]
        if q == 1:
            return np.ones(vals.shape[0], bool)
        s = np.sort(vals, axis=1)
        return np.min(np.diff(s, axis=1), axis=1) >= self.spec.gamma_gap

    def draw_arms(self, rng, k=None) -> np.ndarray:
        k = self.spec.arms_per_round if k is None else k
        arms = random_unit(rng, k, self.spec.dim)
        for _ in range(self.spec.max_retries):
            bad = ~self._gap_ok(self._group_values(arms)[0])
            if not bad.any():
                return arms
            arms[bad] = random_unit(rng, int(bad.sum()), self.spec.dim)
        raise GapCertificationError(
            f"no arm met gamma_gap={self.spec.gamma_gap} with n_groups={self.spec.n_groups} "
            f"after {self.spec.max_retries} retries; use a smaller gamma_gap or fewer groups"
        )

    def gen_round(self, t: int, rng) -> Round:
        user = int(rng.integers(self.n_users))
        arms = self.draw_arms(rng)
        exp = self.expected_matrix(arms)
        return Round(t, user, arms, exp[user].copy(), self.label_matrix(arms))

    def sample_reward(self, user: int, arm, rng) -> float:
        mean = self.expected_reward(user, arm)
        if self.spec.noise_std == 0:
            return mean
        return float(min(1.0, max(0.0, mean + rng.normal(0.0, self.spec.noise_std))))

    def cold_start_sample(self, user: int, rng) -> tuple[np.ndarray, float]:
        arm = self.draw_arms(rng, 1)[0]
        return arm, self.sample_reward(user, arm, rng)


class UniformRewardEnv:
    """Expected rewards iid U(0, 1) per arm and round, shared by all users."""

    def __init__(self, n_users=1, dim=10, arms_per_round=10, noise_std=0.0):
        self.n_users = n_users
        self.input_dim = dim
        self.k = arms_per_round
        self.noise_std = noise_std
        self._last = {}

    def gen_round(self, t, rng):
        user = int(rng.integers(self.n_users))
        arms = random_unit(rng, self.k, self.input_dim)
        exp = rng.uniform(0.0, 1.0, self.k)
        self._last = {arm.tobytes(): e for arm, e in zip(arms, exp)}
        return Round(t, user, arms, exp, np.zeros((self.k, self.n_users), int))

    def expected_reward(self, user, arm):
        return float(self._last[np.asarray(arm).tobytes()])

    def sample_reward(self, user, arm, rng):
        mean = self.expected_reward(user, arm)
        if self.noise_std == 0:
            return mean
        return float(min(1.0, max(0.0, mean + rng.normal(0.0, self.noise_std))))

    def cold_start_sample(self, user, rng):
        r = self.gen_round(-1, rng)
        i = int(rng.integers(self.k))
        return r.arms[i], float(r.expected[i])


# ---------------------------------------------------------------- datasets


def build_classification_arms(feature, n_classes: int) -> np.ndarray:
    """K block vectors of length d*K with the feature in block i of arm i."""
    if n_classes < 1:
        raise ValueError("need at least one class")
    x = np.asarray(feature, dtype=np.float64)
    d = x.shape[0]
    arms = np.zeros((n_classes, d * n_classes))
    for i in range(n_classes):
        arms[i, i * d : (i + 1) * d] = x
    return arms


def _normalise_rows(X):
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero feature vector cannot be normalised")
    return X / norms


def _read_csv(path, first: str, last: str | None):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file, header row required")
    header = rows[0]
    if header[0] != first or (last is not None and header[-1] != last):
        want = f"{first},f1,...,fd" + (f",{last}" if last else "")
        raise ValueError(f"{path}: header must look like {want!r}, got {','.join(header)!r}")
    body = rows[1:]
    ids = np.array([int(r[0]) for r in body], dtype=np.int64)
    if np.any(ids < 0):
        raise ValueError(f"{path}: ids/labels must be non-negative integers")
    stop = -1 if last else None
    feats = np.array([[float(v) for v in r[1:stop]] for r in body], dtype=np.float64)
    tail = np.array([float(r[-1]) for r in body]) if last else None
    return ids, feats, tail


def load_classification_csv(path):
    labels, feats, _ = _read_csv(path, "label", None)
    return labels, feats


def load_rating_csv(path):
    return _read_csv(path, "user_id", "rating")


def write_classification_csv(path, labels, features):
    d = np.asarray(features).shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["label"] + [f"f{i + 1}" for i in range(d)])
        for lab, row in zip(labels, features):
            w.writerow([int(lab)] + [repr(float(v)) for v in row])


def write_rating_csv(path, users, features, ratings):
    d = np.asarray(features).shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["user_id"] + [f"f{i + 1}" for i in range(d)] + ["rating"])
        for u, row, r in zip(users, features, ratings):
            w.writerow([int(u)] + [repr(float(v)) for v in row] + [repr(float(r))])


@dataclass(frozen=True)
class DatasetEnvSpec:
    path: str
    mode: str = "classification"
    rating_threshold: float = 4.0
    arms_per_round: int = 10
    precluster_k: int | None = None

    def __post_init__(self):
        if self.mode not in ("classification", "rating"):
            raise ValueError("mode must be 'classification' or 'rating'")
        if self.arms_per_round < 1:
            raise ValueError("arms_per_round must be >= 1")


class ClassificationEnv:
    """Each class is a user; a row becomes K block arms, reward 1 on its own class.

    Ground truth: user v's expected reward on block-arm i is 1 iff i == v, so on
    arm i the serving user's relative cluster is {i} when i is its own class and
    every class other than i otherwise.
    """

    def __init__(self, labels, features):
        self.labels = np.asarray(labels, dtype=np.int64)
        self.features = _normalise_rows(np.asarray(features, dtype=np.float64))
        self.n_users = int(self.labels.max()) + 1
        self.k = self.n_users
        self.input_dim = self.features.shape[1] * self.k
        self._by_class = [np.flatnonzero(self.labels == c) for c in range(self.n_users)]

    @classmethod
    def from_spec(cls, spec: DatasetEnvSpec):
        return cls(*load_classification_csv(spec.path))

    def _round_for_row(self, t, row):
        u = int(self.labels[row])
        arms = build_classification_arms(self.features[row], self.k)
        exp = (np.arange(self.k) == u).astype(float)
        lab = np.ones((self.k, self.n_users), int)
        lab[np.arange(self.k), np.arange(self.k)] = 0
        # on arm i users != i all score 0 (label 1), user i scores 1 (label 0)
        return Round(t, u, arms, exp, lab)

    def gen_round(self, t, rng):
        return self._round_for_row(t, int(rng.integers(len(self.labels))))

    def sample_reward(self, user, arm, rng):
        d = self.features.shape[1]
        block = int(np.argmax(np.abs(np.asarray(arm)).reshape(self.k, d).sum(axis=1)))
        return 1.0 if block == user else 0.0

    def cold_start_sample(self, user, rng):
        rows = self._by_class[user]
        if rows.size == 0:
            raise SampleUnavailableError(f"class {user} has no rows, cannot cold-start it")
        r = self._round_for_row(-1, int(rng.choice(rows)))
        i = int(rng.integers(self.k))
        return r.arms[i], float(r.expected[i])


class RatingEnv:
    """Rows are (user, item features, rating); reward is 1 iff rating > threshold.

    A round shows one positively rated item plus K-1 items the user rated at
    or below the threshold.  Relative clusters are unknown for real ratings,
    so rounds carry no labels.  With ``precluster_k`` set, users are merged by
    k-means on the mean feature vector of their positively rated items.
    """

    def __init__(self, users, features, ratings, threshold=4.0, k=10, precluster_k=None, seed=0):
        users = np.asarray(users, dtype=np.int64)
        self.features = _normalise_rows(np.asarray(features, dtype=np.float64))
        self.reward = (np.asarray(ratings, dtype=np.float64) > threshold).astype(float)
        self.k = k
        self.input_dim = self.features.shape[1]
        uniq, inv = np.unique(users, return_inverse=True)
        if precluster_k is not None:
            prof = np.stack([
                self.features[(inv == i) & (self.reward > 0)].mean(axis=0)
                if np.any((inv == i) & (self.reward > 0)) else self.features[inv == i].mean(axis=0)
                for i in range(len(uniq))
            ])
            _, assign, _ = kmeans_precluster(prof, precluster_k, 50, np.random.default_rng(seed))
            inv = assign[inv]
        self.owner = inv
        n = int(inv.max()) + 1
        self.pos = [np.flatnonzero((inv == u) & (self.reward > 0)) for u in range(n)]
        self.neg = [np.flatnonzero((inv == u) & (self.reward == 0)) for u in range(n)]
        eligible = [u for u in range(n) if self.pos[u].size and self.neg[u].size >= k - 1]
        if not eligible:
            raise SampleUnavailableError("no user has one positive and K-1 non-positive ratings")
        self.eligible = np.array(eligible)
        self.n_users = n
        self._last = {}

    @classmethod
    def from_spec(cls, spec: DatasetEnvSpec, seed=0):
        users, feats, ratings = load_rating_csv(spec.path)
        return cls(users, feats, ratings, spec.rating_threshold, spec.arms_per_round, spec.precluster_k, seed)

    def _round_for_user(self, t, u, rng):
        rows = np.concatenate([rng.choice(self.pos[u], 1), rng.choice(self.neg[u], self.k - 1, replace=False)])
        rows = rows[rng.permutation(self.k)]
        arms = self.features[rows]
        exp = self.reward[rows]
        self._last = {a.tobytes(): e for a, e in zip(arms, exp)}
        return Round(t, u, arms, exp, None)

    def gen_round(self, t, rng):
        return self._round_for_user(t, int(rng.choice(self.eligible)), rng)

    def sample_reward(self, user, arm, rng):
        return float(self._last[np.asarray(arm).tobytes()])

    def cold_start_sample(self, user, rng):
        if self.pos[user].size == 0 and self.neg[user].size == 0:
            raise SampleUnavailableError(f"user {user} has no ratings")
        rows = np.concatenate([self.pos[user], self.neg[user]])
        j = int(rng.choice(rows))
        return self.features[j], float(self.reward[j])


def kmeans_precluster(rows, k: int, iters: int, rng):
    """Lloyd's algorithm from k-means++ seeding.

    Returns ``(centroids, assignment, distortions)`` where ``distortions[i]``
    is the mean squared distance after iteration i.
    """
    X = np.asarray(rows, dtype=np.float64)
    if X.size == 0:
        raise ValueError("kmeans_precluster needs at least one row")
    n = X.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k={k} must be between 1 and the number of rows ({n})")
    centroids = [X[rng.integers(n)]]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total == 0:
            # remaining points coincide with chosen centroids
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    C = np.array(centroids)
    distortions = []
    assign = None
    for _ in range(max(1, iters)):
        dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
        new = dist.argmin(axis=1)
        distortions.append(float(dist[np.arange(n), new].mean()))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for c in range(k):
            members = X[assign == c]
            if len(members):
                C[c] = members.mean(axis=0)
    dist = ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)
    assign = dist.argmin(axis=1)
    distortions.append(float(dist[np.arange(n), assign].mean()))
    return C, assign, np.array(distortions)


def verify_round(env: SyntheticEnv, arms, gamma) -> bool:
    """Brute-force O(n^2 K) check of relative-cluster equality and the gamma-gap."""
    for arm in arms:
        vals = [env.expected_reward(u, arm) for u in range(env.n_users)]
        lab = env.label_matrix(arm[None, :])[0]
        for a in range(env.n_users):
            for b in range(env.n_users):
                if lab[a] == lab[b]:
                    if vals[a] != vals[b]:
                        return False
                elif abs(vals[a] - vals[b]) < gamma:
                    return False
    return True


def make_env(spec, seed=None):
    if isinstance(spec, SyntheticEnvSpec):
        return SyntheticEnv(spec, seed)
    if isinstance(spec, DatasetEnvSpec):
        if spec.mode == "classification":
            return ClassificationEnv.from_spec(spec)
        return RatingEnv.from_spec(spec, 0 if seed is None else seed)
    raise TypeError(f"unsupported environment spec {type(spec).__name__}")

