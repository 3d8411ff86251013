"""PI2 update of linear-Gaussian feedforward terms with KL-bounded temperatures.

The feedback gains stay fixed. For each timestep the temperature is the
minimizer of the REPS-style dual

    g(eta) = eta * epsilon + eta * log(1/N sum_i exp(-S_i / eta))

and the feedforward mean / covariance are refit by weighted maximum likelihood
on the realized feedforwards ``k_{i,t} = u_{i,t} - K_t x_{i,t}``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .controllers import COV_FLOOR, floor_covariance, policy_step_kl

ETA_MIN = 1e-4
ETA_MAX = 1e6
GOLDEN_ITERS = 40  # brackets the minimizer to ~1e-7 in log eta; _polish does the rest

_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class KlBound:
    epsilon: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"KL bound must be positive, got {self.epsilon}")


@dataclass(frozen=True)
class WeightTable:
    P: np.ndarray    # (N, T), columns sum to one
    eta: np.ndarray  # (T,)

    def kl_to_uniform(self):
        return np.array([weight_kl(self.P[:, t]) for t in range(self.P.shape[1])])

    def entropy(self):
        P = self.P
        with np.errstate(divide="ignore", invalid="ignore"):
            return -np.sum(np.where(P > 0, P * np.log(P), 0.0), axis=0)


def cost_to_go(samples):
    """S[i, t] = sum_{j >= t} l(x_ij, u_ij). Accepts a SampleSet or an (N, T) array."""
    c = np.asarray(getattr(samples, "cost", samples), dtype=float)
    if c.ndim != 2:
        raise ValueError(f"costs must be (N, T), got {c.shape}")
    bad = np.argwhere(~np.isfinite(c))
    if bad.size:
        i, t = bad[0]
        raise ValueError(f"non-finite cost {c[i, t]} in sample {i} at timestep {t}")
    return np.cumsum(c[:, ::-1], axis=1)[:, ::-1]


def softmax_weights(S_col, eta):
    if not eta > 0:
        raise ValueError(f"temperature must be positive, got {eta}")
    S = np.asarray(S_col, dtype=float)
    a = -(S - S.min()) / eta
    w = np.exp(a - a.max())
    return w / w.sum()


def weight_kl(P):
    """KL(P || uniform) = sum_i P_i log(N P_i)."""
    P = np.asarray(P, dtype=float)
    nz = P > 0
    return float(np.sum(P[nz] * np.log(P.size * P[nz])))


def dual(eta, S_col, epsilon):
    S = np.asarray(S_col, dtype=float)
    smin = S.min()
    return (eta * epsilon - smin
            + eta * (logsumexp(-(S - smin) / eta) - math.log(S.size)))


def _dual_columns(log_eta, s, eps):
    """Dual for each column of ``s`` (shifted so every column minimum is 0)."""
    eta = np.exp(log_eta)
    return eta * eps + eta * np.log(np.mean(np.exp(-s / eta), axis=0))


def _golden_min(f, lo, hi, iters):
    """Vectorized golden-section search; ``f`` maps an array of points to values."""
    a = np.full_like(hi, lo) if np.ndim(lo) == 0 else np.array(lo, float)
    b = np.array(hi, float)
    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc <= fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        c_new = np.where(left, b - _INVPHI * (b - a), d)
        d_new = np.where(left, c, a + _INVPHI * (b - a))
        probe = np.where(left, c_new, d_new)
        fp = f(probe)
        fc, fd = np.where(left, fp, fd), np.where(left, fc, fp)
        c, d = c_new, d_new
    cands = np.stack([c, d, np.full_like(c, lo), np.full_like(c, hi)])
    vals = np.stack([fc, fd, f(cands[2]), f(cands[3])])
    return cands[np.argmin(vals, axis=0), np.arange(c.size)]


def solve_etas(S, bound, eta_min=ETA_MIN, eta_max=ETA_MAX, iters=GOLDEN_ITERS):
    """Temperatures minimizing the dual, one per column of an (N, T) cost-to-go table.

    The search runs over log(eta) on costs rescaled to unit range per column,
    so the result is equivariant to cost scaling and invariant to cost shifts.
    Columns with no spread get ``eta_max`` (uniform weights).
    """
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] < 2:
        raise ValueError("the dual needs at least two cost-to-go values per step")
    if not np.all(np.isfinite(S)):
        raise ValueError("cost-to-go values must be finite")
    eps = bound.epsilon if isinstance(bound, KlBound) else KlBound(float(bound)).epsilon
    smin, smax = S.min(axis=0), S.max(axis=0)
    spread = smax - smin
    flat = spread <= 1e-14 * np.maximum(1.0, np.abs(smax))
    s = (S - smin) / np.where(flat, 1.0, spread)
    lo, hi = math.log(eta_min), np.full(S.shape[1], math.log(eta_max))
    y = _golden_min(lambda y: _dual_columns(y, s, eps), lo, hi, iters)
    y = _polish(y, s, eps, lo, hi[0])
    return np.where(flat, eta_max, np.exp(y) * spread)


def _kl_columns(log_eta, s):
    a = -s / np.exp(log_eta)
    a = a - a.max(axis=0)
    P = np.exp(a) / np.exp(a).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.sum(np.where(P > 0, P * np.log(s.shape[0] * P), 0.0), axis=0)


def _polish(y, s, eps, lo, hi, width=1e-3, iters=48):
    """Refine interior minimizers by bisection on the dual's derivative, eps - KL(P_eta).

    Near its minimum the dual is flat to rounding error, so the golden-section
    answer is only good to ~sqrt(machine eps); the derivative root is sharper.
    """
    a = np.maximum(y - width, lo)
    b = np.minimum(y + width, hi)
    ok = (_kl_columns(a, s) > eps) & (_kl_columns(b, s) < eps)
    for _ in range(iters):
        m = 0.5 * (a + b)
        above = _kl_columns(m, s) > eps
        a = np.where(above, m, a)
        b = np.where(above, b, m)
    return np.where(ok, 0.5 * (a + b), y)


def solve_eta(S_col, bound, eta_min=ETA_MIN, eta_max=ETA_MAX, iters=GOLDEN_ITERS):
    """Temperature minimizing the dual for one column of cost-to-go values."""
    S = np.asarray(S_col, dtype=float)
    if S.ndim != 1:
        raise ValueError("expected a single column of cost-to-go values")
    return float(solve_etas(S[:, None], bound, eta_min, eta_max, iters)[0])


def compute_weights(S, bound, eta=None):
    """WeightTable for an (N, T) cost-to-go table, one temperature per step."""
    S = np.asarray(S, dtype=float)
    N, T = S.shape
    etas = solve_etas(S, bound) if eta is None else np.full(T, float(eta))
    P = np.empty((N, T))
    for t in range(T):
        P[:, t] = softmax_weights(S[:, t], etas[t])
    return WeightTable(P, etas)


def realized_feedforward(policy, samples):
    """k_{i,t} = u_{i,t} - K_t x_{i,t} for every sample and step."""
    if samples.T != policy.T:
        raise ValueError(f"samples have T={samples.T}, policy has T={policy.T}")
    if samples.X.shape[-1] != policy.dX or samples.U.shape[-1] != policy.dU:
        raise ValueError("sample dimensions do not match the policy")
    kff = samples.U - np.einsum("tux,ntx->ntu", policy.K, samples.X[:, :-1])
    if not np.all(np.isfinite(kff)):
        raise ValueError("non-finite realized feedforward terms")
    return kff


def weighted_mle(kff, P, floor=COV_FLOOR):
    """Probability-weighted mean and outer-product covariance per timestep.

    ``kff`` is (N, T, dU) and ``P`` (N, T). Returns k (T, dU) and floored C (T, dU, dU).
    """
    k_new = np.einsum("nt,ntu->tu", P, kff)
    d = kff - k_new[None]
    C_new = np.einsum("nt,ntu,ntv->tuv", P, d, d)
    return k_new, floor_covariance(C_new, floor)


def penalized_costs(policy, samples, weight, reference):
    """Per-step costs plus ``weight * KL(policy || reference)`` at the visited states."""
    extra = np.stack([
        policy_step_kl(policy, reference, t, samples.X[:, t]) for t in range(samples.T)
    ], axis=1)
    return samples.cost + weight * extra


def default_penalty_weight(samples, relative=0.1):
    return relative * float(np.mean(np.abs(samples.cost)))


def pi2_step(policy, samples, bound, kl_penalty=None, floor=COV_FLOOR, eta=None):
    """One PI2 update. Returns (new policy, WeightTable).

    ``kl_penalty`` is an optional ``(weight, reference_policy)`` pair; the
    penalty enters the costs before the cost-to-go. ``eta`` fixes the
    temperature instead of solving the dual.
    """
    if samples.N < 2:
        raise ValueError("PI2 needs at least two samples")
    kff = realized_feedforward(policy, samples)
    cost = samples.cost
    if kl_penalty is not None:
        weight, reference = kl_penalty
        cost = penalized_costs(policy, samples, weight, reference)
    S = cost_to_go(cost)
    weights = compute_weights(S, bound, eta=eta)
    k_new, C_new = weighted_mle(kff, weights.P, floor)
    return policy.replace(k=k_new, C=C_new), weights


def pi2_update(policy, samples, bound, kl_penalty=None, floor=COV_FLOOR):
    return pi2_step(policy, samples, bound, kl_penalty, floor)[0]
