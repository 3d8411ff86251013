import numpy as np
import pytest
from hypothesis import settings

from pigps.controllers import LinGaussPolicy, SampleSet

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def random_pd(rng, d, scale=1.0):
    A = rng.standard_normal((d, d))
    return scale * (A @ A.T / d + 0.5 * np.eye(d))


def random_policy(rng, T=3, dX=3, dU=2):
    K = rng.standard_normal((T, dU, dX))
    k = rng.standard_normal((T, dU))
    C = np.stack([random_pd(rng, dU) for _ in range(T)])
    return LinGaussPolicy(K, k, C)


def random_samples(rng, N=5, T=3, dX=3, dU=2):
    X = rng.standard_normal((N, T + 1, dX))
    U = rng.standard_normal((N, T, dU))
    z = rng.standard_normal((N, T, dU))
    cost = rng.random((N, T))
    return SampleSet(X, U, z, cost)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def riccati_oracle(A, B, H, h, c0, T, x0):
    """Finite-horizon LQR on the augmented state [x; 1] (no terminal cost).

    Returns per-step gains K_t, offsets k_t and the optimal cost from x0.
    Written independently of the package's backward pass.
    """
    dX, dU = B.shape
    n = dX + 1
    Aa = np.zeros((n, n))
    Aa[:dX, :dX] = A
    Aa[dX, dX] = 1.0
    Ba = np.vstack([B, np.zeros((1, dU))])
    # l = 1/2 x^T Hxx x + x^T Hxu u + 1/2 u^T Huu u + hx^T x + hu^T u + c0
    Qa = np.zeros((n, n))
    Qa[:dX, :dX] = H[:dX, :dX]
    Qa[:dX, dX] = Qa[dX, :dX] = h[:dX]
    Qa[dX, dX] = 2 * c0
    Na = np.zeros((n, dU))
    Na[:dX] = H[:dX, dX:]
    Na[dX] = h[dX:]
    R = H[dX:, dX:]
    P = np.zeros((n, n))  # V(x~) = 1/2 x~^T P x~
    gains = []
    for _ in range(T):
        G = R + Ba.T @ P @ Ba
        F = np.linalg.solve(G, Ba.T @ P @ Aa + Na.T)
        P = Qa + Aa.T @ P @ Aa - (Aa.T @ P @ Ba + Na) @ F
        P = 0.5 * (P + P.T)
        gains.append(-F)
    gains = gains[::-1]
    K = np.stack([g[:, :dX] for g in gains])
    k = np.stack([g[:, dX] for g in gains])
    xa = np.append(x0, 1.0)
    return K, k, 0.5 * xa @ P @ xa
