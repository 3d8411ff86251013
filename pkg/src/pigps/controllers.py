"""Time-varying linear-Gaussian controllers, rollouts and Gaussian KL divergences."""
from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property

import numpy as np

COV_FLOOR = 1e-6
SCHEMA = "pigps.lingauss/1"


class NotPositiveDefiniteError(ValueError):
    pass


def as_rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def floor_covariance(C, floor=COV_FLOOR):
    """Symmetrize and clamp eigenvalues of one or a stack of covariances to ``>= floor``."""
    C = np.asarray(C, dtype=float)
    C = 0.5 * (C + np.swapaxes(C, -1, -2))
    w, V = np.linalg.eigh(C)
    w = np.maximum(w, floor)
    return (V * w[..., None, :]) @ np.swapaxes(V, -1, -2)


def safe_cholesky(C):
    """Lower Cholesky factor of ``C``.

    An all-zero matrix is accepted and maps to a zero factor (noiseless
    controller). Anything else that is not positive definite is rejected;
    repair belongs to ``floor_covariance`` at update time, never here.
    """
    C = np.asarray(C, dtype=float)
    if not np.any(C):
        return np.zeros_like(C)
    try:
        return np.linalg.cholesky(C)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError("covariance is not positive definite") from err


def _check_state(x, dX):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != dX or x.ndim > 2:
        raise ValueError(f"expected state(s) with {dX} entries, got shape {x.shape}")
    return x


@dataclass(frozen=True, eq=False)
class LinGaussPolicy:
    """p(u_t | x_t) = N(K_t x_t + k_t, C_t), t = 0..T-1."""

    K: np.ndarray
    k: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        K = np.array(self.K, dtype=float)
        k = np.array(self.k, dtype=float)
        C = np.array(self.C, dtype=float)
        if K.ndim != 3 or k.ndim != 2 or C.ndim != 3:
            raise ValueError("K must be (T, dU, dX), k (T, dU), C (T, dU, dU)")
        T, dU, _ = K.shape
        if k.shape != (T, dU) or C.shape != (T, dU, dU):
            raise ValueError(
                f"inconsistent shapes K={K.shape} k={k.shape} C={C.shape}"
            )
        for a in (K, k, C):
            a.setflags(write=False)
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "k", k)
        object.__setattr__(self, "C", C)

    @property
    def T(self):
        return self.K.shape[0]

    @property
    def dU(self):
        return self.K.shape[1]

    @property
    def dX(self):
        return self.K.shape[2]

    @cached_property
    def chol(self):
        return np.stack([safe_cholesky(c) for c in self.C])

    def mean(self, t, x):
        x = _check_state(x, self.dX)
        return x @ self.K[t].T + self.k[t]

    def action_dist(self, t, x):
        return self.mean(t, x), self.C[t]

    def replace(self, K=None, k=None, C=None):
        return LinGaussPolicy(
            self.K if K is None else K,
            self.k if k is None else k,
            self.C if C is None else C,
        )

    @classmethod
    def constant(cls, T, K, k, C):
        """Tile one gain / offset / covariance over ``T`` steps (``k`` may be (T, dU))."""
        K = np.broadcast_to(np.asarray(K, float), (T,) + np.shape(K)[-2:])
        C = np.broadcast_to(np.asarray(C, float), (T,) + np.shape(C)[-2:])
        k = np.broadcast_to(np.asarray(k, float), (T, K.shape[1]))
        return cls(K, k, C)

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "T": self.T,
            "dX": self.dX,
            "dU": self.dU,
            "K": [m.tolist() for m in self.K],
            "k": self.k.tolist(),
            "C": [m.tolist() for m in self.C],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported policy schema {d.get('schema')!r}")
        pol = cls(d["K"], d["k"], d["C"])
        if (pol.T, pol.dX, pol.dU) != (d["T"], d["dX"], d["dU"]):
            raise ValueError("declared dimensions do not match matrices")
        return pol

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Trajectory:
    states: np.ndarray   # (T+1, dX)
    actions: np.ndarray  # (T, dU)
    noise: np.ndarray    # (T, dU)
    costs: np.ndarray    # (T,)

    def __post_init__(self):
        T = self.actions.shape[0]
        if (self.states.shape[0] != T + 1 or self.noise.shape != self.actions.shape
                or self.costs.shape != (T,)):
            raise ValueError("trajectory arrays are inconsistent with T")

    @property
    def T(self):
        return self.actions.shape[0]

    @property
    def total_cost(self):
        return float(self.costs.sum())


@dataclass(frozen=True)
class SampleSet:
    """N rollouts on one instance, stacked along the first axis."""

    X: np.ndarray      # (N, T+1, dX)
    U: np.ndarray      # (N, T, dU)
    noise: np.ndarray  # (N, T, dU)
    cost: np.ndarray   # (N, T)

    def __post_init__(self):
        N, T = self.cost.shape
        if (self.X.shape[:2] != (N, T + 1) or self.U.shape[:2] != (N, T)
                or self.noise.shape != self.U.shape):
            raise ValueError("sample arrays are inconsistent")

    @property
    def N(self):
        return self.cost.shape[0]

    @property
    def T(self):
        return self.cost.shape[1]

    def __len__(self):
        return self.N

    def trajectory(self, i):
        return Trajectory(self.X[i], self.U[i], self.noise[i], self.cost[i])

    @classmethod
    def from_trajectories(cls, trajs):
        trajs = list(trajs)
        if not trajs:
            raise ValueError("no trajectories")
        return cls(
            np.stack([tr.states for tr in trajs]),
            np.stack([tr.actions for tr in trajs]),
            np.stack([tr.noise for tr in trajs]),
            np.stack([tr.costs for tr in trajs]),
        )

    def with_costs(self, cost):
        return SampleSet(self.X, self.U, self.noise, np.asarray(cost, float))


def sample_action(policy, t, x, seed):
    """Draw u ~ N(K_t x + k_t, C_t) using the standard-normal stream of ``seed``."""
    x = _check_state(x, policy.dX)
    if x.ndim != 1:
        raise ValueError("sample_action takes a single state")
    z = as_rng(seed).standard_normal(policy.dU)
    return policy.mean(t, x) + z @ policy.chol[t].T


def smoothing_matrix(T, width):
    """Row-normalized Gaussian smoothing operator over time.

    Rows have unit Euclidean norm so that smoothed white noise keeps exact
    standard-normal marginals at every step.
    """
    if width <= 0:
        return np.eye(T)
    idx = np.arange(T)
    M = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / width) ** 2)
    return M / np.linalg.norm(M, axis=1, keepdims=True)


def sample_rollouts(policy, env, n, seed, smoothing=0.0, noiseless=False):
    """Run ``n`` rollouts of ``policy`` on ``env`` (vectorized over samples).

    ``policy`` needs ``T``, ``dU``, ``chol`` (T, dU, dU) and ``mean(t, X)``;
    ``env`` needs ``x0``, ``step(X, U)`` and ``cost(X, U, t)``.
    The recorded action is the unclamped draw; the environment applies its
    own action box.
    """
    rng = as_rng(seed)
    T, dU = policy.T, policy.dU
    if T != env.T:
        raise ValueError(f"policy horizon {T} != environment horizon {env.T}")
    x0 = np.asarray(env.x0, dtype=float)
    if noiseless:
        z = np.zeros((n, T, dU))
    else:
        z = rng.standard_normal((n, T, dU))
        if smoothing > 0:
            z = np.einsum("st,ntd->nsd", smoothing_matrix(T, smoothing), z)
    X = np.empty((n, T + 1, x0.size))
    U = np.empty((n, T, dU))
    cost = np.empty((n, T))
    X[:, 0] = x0
    chol = policy.chol
    for t in range(T):
        U[:, t] = policy.mean(t, X[:, t]) + z[:, t] @ chol[t].T
        cost[:, t] = env.cost(X[:, t], U[:, t], t)
        X[:, t + 1] = env.step(X[:, t], U[:, t])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(cost))):
        raise FloatingPointError("rollout produced non-finite states or costs")
    return SampleSet(X, U, z, cost)


def gaussian_kl(mu_p, C_p, mu_q, C_q):
    """KL(N(mu_p, C_p) || N(mu_q, C_q)); means may be stacked along axis 0."""
    C_p = np.asarray(C_p, float)
    C_q = np.asarray(C_q, float)
    d = C_p.shape[-1]
    if C_q.shape != (d, d) or C_p.shape != (d, d):
        raise ValueError("covariance shapes do not match")
    try:
        Lp = np.linalg.cholesky(C_p)
        Lq = np.linalg.cholesky(C_q)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefiniteError("KL needs positive definite covariances") from err
    diff = np.asarray(mu_q, float) - np.asarray(mu_p, float)
    if diff.shape[-1] != d:
        raise ValueError("mean dimension does not match covariance")
    Lq_inv = np.linalg.inv(Lq)
    trace = np.sum((Lq_inv @ Lp) ** 2)
    maha = np.sum((diff @ Lq_inv.T) ** 2, axis=-1)
    logdet = 2.0 * (np.sum(np.log(np.diag(Lq))) - np.sum(np.log(np.diag(Lp))))
    return 0.5 * (trace + maha - d + logdet)


def policy_step_kl(p, q, t, x):
    """KL(p(u|x) || q(u|x)) at time ``t``; ``x`` may be one state or a stack."""
    if p.dU != q.dU or p.dX != q.dX:
        raise ValueError("policies have mismatched dimensions")
    mu_p, C_p = p.action_dist(t, x)
    mu_q, C_q = q.action_dist(t, x)
    return np.maximum(gaussian_kl(mu_p, C_p, mu_q, C_q), 0.0)


def trajectory_kl(p, q, samples):
    """Sum over t of the sample-average step KL at the visited states."""
    if samples is None or samples.N == 0:
        raise ValueError("trajectory KL needs at least one sample")
    return float(sum(
        np.mean(policy_step_kl(p, q, t, samples.X[:, t])) for t in range(samples.T)
    ))
