"""Simulated tasks: a 2D point mass and a contact-gated latch.

Both use planar double-integrator dynamics with a clamped acceleration input.
All methods operate on single states or on stacks of states (leading axis).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .controllers import as_rng


@dataclass(frozen=True, eq=False)
class Instance:
    x0: np.ndarray
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return {"x0": np.asarray(self.x0).tolist(),
                "params": {k: np.asarray(v).tolist() for k, v in self.params.items()}}


@dataclass(frozen=True, eq=False)
class InstanceDistribution:
    """Independent uniform bounds per named parameter (arrays of matching shape)."""

    low: dict
    high: dict

    def __post_init__(self):
        problems = []
        if set(self.low) != set(self.high):
            problems.append("low/high bounds name different parameters")
        for key in sorted(set(self.low) & set(self.high)):
            lo, hi = np.asarray(self.low[key], float), np.asarray(self.high[key], float)
            if lo.shape != hi.shape:
                problems.append(f"{key}: bound shapes differ")
            elif np.any(lo > hi):
                problems.append(f"{key}: empty bounds (low > high)")
        if problems:
            raise ValueError("; ".join(problems))

    @classmethod
    def point(cls, **values):
        return cls(dict(values), dict(values))

    def widened(self, fraction):
        """Bounds shrunk about their midpoint to ``fraction`` of the full width."""
        low, high = {}, {}
        for key in self.low:
            lo, hi = np.asarray(self.low[key], float), np.asarray(self.high[key], float)
            mid = 0.5 * (lo + hi)
            low[key] = mid + fraction * (lo - mid)
            high[key] = mid + fraction * (hi - mid)
        return InstanceDistribution(low, high)


def sample_instance(dist, seed):
    """Uniform draw within ``dist``; keys are drawn in sorted order for reproducibility."""
    rng = as_rng(seed)
    values = {}
    for key in sorted(dist.low):
        lo, hi = np.asarray(dist.low[key], float), np.asarray(dist.high[key], float)
        values[key] = lo + (hi - lo) * rng.random(lo.shape)
    x0 = values.pop("x0", None)
    return Instance(x0=x0, params=values)


def min_jerk(p0, p1, n, dt):
    """Position, velocity, acceleration of a minimum-jerk segment sampled at n steps."""
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    dur = n * dt
    tau = np.arange(n)[:, None] / n
    s = 10 * tau**3 - 15 * tau**4 + 6 * tau**5
    ds = (30 * tau**2 - 60 * tau**3 + 30 * tau**4) / dur
    dds = (60 * tau - 180 * tau**2 + 120 * tau**3) / dur**2
    d = p1 - p0
    return p0 + s * d, ds * d, dds * d


def _hold(p, n):
    return np.tile(p, (n, 1)), np.zeros((n, 2)), np.zeros((n, 2))


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite state or action")


def _integrate(p, v, u, dt):
    return p + v * dt + 0.5 * u * dt**2, v + u * dt


@dataclass(frozen=True, eq=False)
class PointMassEnv:
    """State (px, py, vx, vy), action (ax, ay); quadratic cost toward ``goal``."""

    dt: float = 0.05
    T: int = 100
    goal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    x0: np.ndarray = field(default_factory=lambda: np.zeros(4))
    w_pos: float = 1.0
    w_vel: float = 0.1
    w_u: float = 1e-3
    u_max: float = 10.0
    success_tol: float = 0.1
    reach_steps: int = 40

    dX = 4
    dU = 2
    instance_params = ("goal",)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if min(self.w_pos, self.w_vel, self.w_u) < 0:
            raise ValueError("cost weights must be non-negative")
        object.__setattr__(self, "goal", np.asarray(self.goal, float).reshape(2))
        object.__setattr__(self, "x0", np.asarray(self.x0, float).reshape(4))

    def at(self, instance):
        kw = {}
        if instance.x0 is not None:
            kw["x0"] = instance.x0
        if "goal" in instance.params:
            kw["goal"] = instance.params["goal"]
        return replace(self, **kw)

    def clamp(self, u):
        return np.clip(u, -self.u_max, self.u_max)

    def step(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        _check_finite(x, u)
        u = self.clamp(u)
        p, v = _integrate(x[..., :2], x[..., 2:4], u, self.dt)
        return np.concatenate([p, v], axis=-1)

    def cost(self, x, u, t=0):
        x, u = np.asarray(x, float), self.clamp(np.asarray(u, float))
        _check_finite(x, u)
        dp = x[..., :2] - self.goal
        return (self.w_pos * np.sum(dp**2, -1) + self.w_vel * np.sum(x[..., 2:4]**2, -1)
                + self.w_u * np.sum(u**2, -1))

    def success(self, X):
        """Success predicate on trajectories (..., T+1, dX)."""
        X = np.asarray(X)
        return np.linalg.norm(X[..., -1, :2] - self.goal, axis=-1) <= self.success_tol

    def linear_dynamics(self):
        """(A, B, c) of the unclamped dynamics."""
        dt = self.dt
        A = np.eye(4)
        A[:2, 2:] = dt * np.eye(2)
        B = np.vstack([0.5 * dt**2 * np.eye(2), dt * np.eye(2)])
        return A, B, np.zeros(4)

    def quadratic_cost(self, t=0):
        """Exact expansion l = 1/2 [x;u]^T H [x;u] + h^T [x;u] + c0 (unclamped)."""
        H = np.zeros((6, 6))
        H[:2, :2] = 2 * self.w_pos * np.eye(2)
        H[2:4, 2:4] = 2 * self.w_vel * np.eye(2)
        H[4:, 4:] = 2 * self.w_u * np.eye(2)
        h = np.zeros(6)
        h[:2] = -2 * self.w_pos * self.goal
        return H, h, self.w_pos * float(self.goal @ self.goal)

    def reference(self):
        """Minimum-jerk path to the goal followed by a hold: (p_ref, v_ref, a_ref)."""
        n = min(self.reach_steps, self.T)
        seg = min_jerk(self.x0[:2], self.goal, n, self.dt)
        rest = _hold(self.goal, self.T - n)
        return tuple(np.vstack([a, b]) for a, b in zip(seg, rest))

    def position_index(self):
        return slice(0, 2), slice(2, 4)


@dataclass(frozen=True, eq=False)
class LatchEnv:
    """Point agent that must push a latch handle by ``d_req`` along ``push_dir``.

    State (px, py, vx, vy, d, lx, ly): agent position and velocity, latch
    displacement, and the latch rest position (constant, part of the observation).
    The handle sits at ``l + d * push_dir``. Displacement grows by the agent's
    motion along ``push_dir`` only while the agent is within ``engage_radius`` of
    the handle and on its approach side. After ``deadline`` every step carries
    a failure penalty until the latch is displaced by ``d_req``.
    """

    dt: float = 0.05
    T: int = 100
    latch: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    start: np.ndarray = field(default_factory=lambda: np.zeros(2))
    push_dir: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0]))
    engage_radius: float = 0.15
    d_req: float = 0.2
    fail_penalty: float = 50.0
    progress_credit: float = 0.5
    deadline: int = 70
    w_u: float = 1e-3
    w_vel: float = 1e-2
    u_max: float = 10.0
    approach_steps: int = 35
    push_steps: int = 25
    pre_push: float = 0.25
    push_through: float = 0.15

    dX = 7
    dU = 2
    instance_params = ("latch",)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.engage_radius > 0 and self.d_req > 0):
            raise ValueError("engage radius and required displacement must be positive")
        n = np.asarray(self.push_dir, float)
        object.__setattr__(self, "push_dir", n / np.linalg.norm(n))
        object.__setattr__(self, "latch", np.asarray(self.latch, float).reshape(2))
        object.__setattr__(self, "start", np.asarray(self.start, float).reshape(2))

    @property
    def x0(self):
        return np.concatenate([self.start, np.zeros(3), self.latch])

    def at(self, instance):
        kw = {}
        if instance.x0 is not None:
            kw["start"] = np.asarray(instance.x0, float)[:2]
        if "latch" in instance.params:
            kw["latch"] = instance.params["latch"]
        return replace(self, **kw)

    def clamp(self, u):
        return np.clip(u, -self.u_max, self.u_max)

    def engaged(self, x):
        x = np.asarray(x, float)
        handle = x[..., 5:7] + x[..., 4:5] * self.push_dir
        rel = x[..., :2] - handle
        return (np.linalg.norm(rel, axis=-1) <= self.engage_radius) & (rel @ self.push_dir <= 0)

    def step(self, x, u):
        x, u = np.asarray(x, float), np.asarray(u, float)
        _check_finite(x, u)
        u = self.clamp(u)
        p, v = _integrate(x[..., :2], x[..., 2:4], u, self.dt)
        advance = np.maximum((p - x[..., :2]) @ self.push_dir, 0.0)
        d = x[..., 4] + np.where(self.engaged(x), advance, 0.0)
        return np.concatenate([p, v, d[..., None], x[..., 5:7]], axis=-1)

    def latch_penalty(self, d, t):
        if t < self.deadline:
            return np.zeros_like(d)
        frac = np.clip(d / self.d_req, 0.0, 1.0)
        return np.where(d >= self.d_req, 0.0,
                        self.fail_penalty * (1.0 - self.progress_credit * frac))

    def cost(self, x, u, t=0):
        x, u = np.asarray(x, float), self.clamp(np.asarray(u, float))
        _check_finite(x, u)
        return (self.w_u * np.sum(u**2, -1) + self.w_vel * np.sum(x[..., 2:4]**2, -1)
                + self.latch_penalty(x[..., 4], t))

    def success(self, X):
        return np.asarray(X)[..., -1, 4] >= self.d_req

    def reference(self, latch=None):
        """Approach a pre-push point behind ``latch`` (default: this instance's), push through, hold."""
        latch = self.latch if latch is None else np.asarray(latch, float)
        n = self.push_dir
        pre = latch - self.pre_push * n
        end = latch + (self.d_req + self.push_through) * n
        na = min(self.approach_steps, self.T)
        npush = min(self.push_steps, self.T - na)
        segs = [min_jerk(self.start, pre, na, self.dt),
                min_jerk(pre, end, npush, self.dt),
                _hold(end, self.T - na - npush)]
        return tuple(np.vstack(parts) for parts in zip(*segs))

    def position_index(self):
        return slice(0, 2), slice(2, 4)


ENVS = {"point_mass": PointMassEnv, "latch": LatchEnv}


def make_env(name, **params):
    try:
        cls = ENVS[name]
    except KeyError:
        raise ValueError(f"unknown environment {name!r}; choose from {sorted(ENVS)}") from None
    return cls(**params)
