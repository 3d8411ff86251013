"""KL-constrained LQR on fitted time-varying linear dynamics (comparison baseline).

The backward pass minimizes the quadratic cost model plus ``eta`` times the
KL divergence from the previous controller, which turns ``-eta log p_prev``
into an extra quadratic term in the Q-function. One ``eta`` is shared by all
timesteps and is chosen by log-space bisection so that the expected
trajectory KL lands in [0.9, 1.1] x T x epsilon.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .controllers import COV_FLOOR, LinGaussPolicy, floor_covariance, gaussian_kl
from .pi2 import KlBound

LOGGER = logging.getLogger(__name__)

ETA_MIN = 1e-12
ETA_MAX = 1e16
KL_TOL = 0.1


class LqrBracketError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class LinearDynamics:
    A: np.ndarray      # (T, dX, dX)
    B: np.ndarray      # (T, dX, dU)
    c: np.ndarray      # (T, dX)
    Sigma: np.ndarray  # (T, dX, dX)

    @property
    def T(self):
        return self.A.shape[0]

    @classmethod
    def constant(cls, T, A, B, c=None, Sigma=None):
        dX = A.shape[0]
        c = np.zeros(dX) if c is None else c
        Sigma = np.zeros((dX, dX)) if Sigma is None else Sigma
        tile = lambda a: np.broadcast_to(np.asarray(a, float), (T,) + np.shape(a)).copy()
        return cls(tile(A), tile(B), tile(c), tile(Sigma))

    def weights(self):
        """Stacked regression weights W_t = [A_t B_t c_t]^T, shape (T, dX+dU+1, dX)."""
        return np.concatenate([self.A, self.B, self.c[..., None]], axis=2).transpose(0, 2, 1)


@dataclass(frozen=True, eq=False)
class QuadraticCostExpansion:
    """l(x, u) ~ 1/2 z^T H_t z + h_t^T z with z = [x; u] in absolute coordinates."""

    H: np.ndarray  # (T, dX+dU, dX+dU)
    h: np.ndarray  # (T, dX+dU)
    dX: int

    @property
    def T(self):
        return self.H.shape[0]


def fit_dynamics(samples, prior_strength=1.0, prior=None, ridge=1e-8):
    """Per-step regression of x_{t+1} on (x_t, u_t, 1).

    The weights are shrunk toward ``prior`` (a LinearDynamics from the last
    iteration; zero when absent) with strength ``prior_strength`` pseudo-samples
    at the typical regressor scale, plus a small ``ridge`` term. Without a prior
    only the ridge term applies.
    """
    N, T = samples.N, samples.T
    if N < 2:
        raise ValueError("fitting dynamics needs at least two samples")
    dX, dU = samples.X.shape[-1], samples.U.shape[-1]
    d = dX + dU + 1
    A = np.empty((T, dX, dX))
    B = np.empty((T, dX, dU))
    c = np.empty((T, dX))
    Sigma = np.empty((T, dX, dX))
    W_prior = prior.weights() if prior is not None else np.zeros((T, d, dX))
    for t in range(T):
        Phi = np.hstack([samples.X[:, t], samples.U[:, t], np.ones((N, 1))])
        Y = samples.X[:, t + 1]
        G = Phi.T @ Phi
        scale = max(np.trace(G) / (N * d), 1e-12)
        lam = ridge * scale + (prior_strength * scale if prior is not None else 0.0)
        try:
            W = np.linalg.solve(G + lam * np.eye(d), Phi.T @ Y + lam * W_prior[t])
        except np.linalg.LinAlgError as err:
            raise ValueError(f"dynamics regressors are rank deficient at step {t}") from err
        if not np.all(np.isfinite(W)):
            raise ValueError(f"dynamics regression is ill-posed at step {t}")
        A[t], B[t], c[t] = W[:dX].T, W[dX:dX + dU].T, W[-1]
        R = Y - Phi @ W
        S = R.T @ R
        if prior is not None:
            S = (S + prior_strength * prior.Sigma[t]) / (N + prior_strength)
        else:
            S = S / N
        Sigma[t] = 0.5 * (S + S.T)
    return LinearDynamics(A, B, c, Sigma)


def expand_cost(env, xbar, ubar, fd_step=1e-4, uu_floor=1e-6):
    """Quadratic cost model around the mean states/actions (T+1 and T rows).

    Uses the environment's exact expansion when it provides one, otherwise
    central finite differences of ``env.cost`` at each (xbar_t, ubar_t).
    """
    xbar, ubar = np.asarray(xbar, float), np.asarray(ubar, float)
    T, dU = ubar.shape
    dX = xbar.shape[1]
    n = dX + dU
    H = np.empty((T, n, n))
    h = np.empty((T, n))
    exact = getattr(env, "quadratic_cost", None)
    for t in range(T):
        if exact is not None:
            H[t], h[t], _ = exact(t)
        else:
            z0 = np.concatenate([xbar[t], ubar[t]])
            f = lambda z: float(env.cost(z[:dX], z[dX:], t))
            g = np.empty(n)
            Ht = np.empty((n, n))
            f0 = f(z0)
            E = np.eye(n) * fd_step
            for i in range(n):
                fp, fm = f(z0 + E[i]), f(z0 - E[i])
                g[i] = (fp - fm) / (2 * fd_step)
                Ht[i, i] = (fp - 2 * f0 + fm) / fd_step**2
                for j in range(i):
                    Ht[i, j] = Ht[j, i] = (
                        f(z0 + E[i] + E[j]) - f(z0 + E[i] - E[j])
                        - f(z0 - E[i] + E[j]) + f(z0 - E[i] - E[j])) / (4 * fd_step**2)
            H[t] = Ht
            h[t] = g - Ht @ z0
        H[t, dX:, dX:] = floor_covariance(H[t, dX:, dX:], uu_floor)
    return QuadraticCostExpansion(H, h, dX)


def _kl_terms(prev, t):
    """Hessian / gradient of -log p_prev(u|x) in z = [x; u] (up to a constant)."""
    Ci = np.linalg.inv(prev.C[t])
    K, k = prev.K[t], prev.k[t]
    top = np.hstack([K.T @ Ci @ K, -K.T @ Ci])
    bot = np.hstack([-Ci @ K, Ci])
    return np.vstack([top, bot]), np.concatenate([K.T @ Ci @ k, -Ci @ k])


def lqr_backward(dyn, cost, prev, eta, floor=COV_FLOOR):
    """Backward pass for cost + eta * KL(new || prev). Returns a LinGaussPolicy."""
    T, dX, dU = prev.T, prev.dX, prev.dU
    if dyn.T != T or cost.T != T:
        raise ValueError("dynamics, cost and policy horizons differ")
    ix, iu = slice(0, dX), slice(dX, dX + dU)
    K = np.empty((T, dU, dX))
    k = np.empty((T, dU))
    C = np.empty((T, dU, dU))
    Vxx = np.zeros((dX, dX))
    vx = np.zeros(dX)
    for t in range(T - 1, -1, -1):
        F = np.hstack([dyn.A[t], dyn.B[t]])
        PH, ph = _kl_terms(prev, t)
        Q = cost.H[t] + eta * PH + F.T @ Vxx @ F
        q = cost.h[t] + eta * ph + F.T @ (Vxx @ dyn.c[t] + vx)
        Q = 0.5 * (Q + Q.T)
        Quu = Q[iu, iu]
        try:
            L = np.linalg.cholesky(Quu)
        except np.linalg.LinAlgError:
            raise ValueError(f"action Hessian is not positive definite at step {t}") from None
        Quu_inv = np.linalg.solve(L.T, np.linalg.solve(L, np.eye(dU)))
        K[t] = -Quu_inv @ Q[iu, ix]
        k[t] = -Quu_inv @ q[iu]
        C[t] = eta * Quu_inv
        Vxx = Q[ix, ix] + Q[ix, iu] @ K[t]
        Vxx = 0.5 * (Vxx + Vxx.T)
        vx = q[ix] + Q[ix, iu] @ k[t]
    return LinGaussPolicy(K, k, floor_covariance(C, floor))


def forward_marginals(dyn, policy, x0_mean, x0_cov):
    """State means and covariances (T, dX), (T, dX, dX) under the linear model."""
    T, dX = policy.T, policy.dX
    mu = np.empty((T, dX))
    Sig = np.empty((T, dX, dX))
    m, S = np.asarray(x0_mean, float), np.asarray(x0_cov, float)
    for t in range(T):
        mu[t], Sig[t] = m, S
        K, k = policy.K[t], policy.k[t]
        F = dyn.A[t] + dyn.B[t] @ K
        m = F @ m + dyn.B[t] @ k + dyn.c[t]
        S = F @ S @ F.T + dyn.B[t] @ policy.C[t] @ dyn.B[t].T + dyn.Sigma[t]
        S = 0.5 * (S + S.T)
    return mu, Sig


def expected_kl(new, prev, mu, Sig):
    """sum_t E_{x ~ N(mu_t, Sig_t)} KL(new(u|x) || prev(u|x))."""
    total = 0.0
    for t in range(new.T):
        m_new = new.K[t] @ mu[t] + new.k[t]
        m_prev = prev.K[t] @ mu[t] + prev.k[t]
        dK = new.K[t] - prev.K[t]
        Ci = np.linalg.inv(prev.C[t])
        spread = 0.5 * np.trace(dK.T @ Ci @ dK @ Sig[t])
        total += max(gaussian_kl(m_new, new.C[t], m_prev, prev.C[t]) + spread, 0.0)
    return float(total)


def lqr_backward_kl(dyn, cost, prev, bound, x0_mean, x0_cov, eta_min=ETA_MIN,
                    eta_max=ETA_MAX, max_iter=200):
    """KL-constrained update. Returns (policy, eta, achieved trajectory KL).

    If even ``eta_min`` stays inside the trust region the constraint is slack
    and that solution is returned. A target below what ``eta_max`` achieves
    raises LqrBracketError.
    """
    eps = bound.epsilon if isinstance(bound, KlBound) else float(bound)
    target = prev.T * eps

    def solve(eta):
        pol = lqr_backward(dyn, cost, prev, eta)
        mu, Sig = forward_marginals(dyn, pol, x0_mean, x0_cov)
        return pol, expected_kl(pol, prev, mu, Sig)

    pol, kl = solve(eta_min)
    if kl <= (1 + KL_TOL) * target:
        return pol, eta_min, kl
    pol_hi, kl_hi = solve(eta_max)
    if kl_hi > (1 + KL_TOL) * target:
        raise LqrBracketError(
            f"KL target {target:.3g} outside achievable range [{kl_hi:.3g}, {kl:.3g}]")
    if kl_hi >= (1 - KL_TOL) * target:
        return pol_hi, eta_max, kl_hi
    lo, hi = math.log(eta_min), math.log(eta_max)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        pol, kl = solve(math.exp(mid))
        if (1 - KL_TOL) * target <= kl <= (1 + KL_TOL) * target:
            return pol, math.exp(mid), kl
        if kl > target:
            lo = mid
        else:
            hi = mid
    LOGGER.warning("eta bisection did not reach the KL window (kl=%.3g, target=%.3g)", kl, target)
    return pol, math.exp(mid), kl


def lqr_iteration(env, prev, samples, bound, dynamics=None, prior=None, prior_strength=1.0):
    """One baseline step: fit (or use given) dynamics, expand cost at the sample means, update.

    Returns (policy, info) with info holding eta, achieved KL and the dynamics used.
    """
    dyn = dynamics if dynamics is not None else fit_dynamics(samples, prior_strength, prior)
    xbar = samples.X.mean(axis=0)
    ubar = samples.U.mean(axis=0)
    cost = expand_cost(env, xbar[:-1], ubar)
    x0 = samples.X[:, 0]
    x0_cov = np.cov(x0.T, bias=True).reshape(x0.shape[1], x0.shape[1]) + 1e-6 * np.eye(x0.shape[1])
    pol, eta, kl = lqr_backward_kl(dyn, cost, prev, bound, x0.mean(axis=0), x0_cov)
    return pol, {"eta": eta, "kl": kl, "dynamics": dyn}
