"""Fully-connected global policy and its supervised trainers.

The network maps the full state to an action mean through ReLU hidden layers
and a linear output; exploration noise is a separate time-varying covariance.
Distillation minimizes the precision-weighted squared error between network
means and local-policy targets, which is the mean-dependent part of
KL(pi_theta || p) when the network covariance is held fixed.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .controllers import COV_FLOOR, LinGaussPolicy, as_rng, floor_covariance, safe_cholesky
from .pi2 import compute_weights, cost_to_go

LOGGER = logging.getLogger(__name__)

SCHEMA = "pigps.mlp/1"
HIDDEN = (40, 40)


class TrainingDiverged(FloatingPointError):
    pass


@dataclass(frozen=True, eq=False)
class MlpPolicy:
    weights: tuple  # W_l with shape (fan_out, fan_in)
    biases: tuple
    C: np.ndarray   # (T, dU, dU) exploration covariance

    def __post_init__(self):
        Ws = tuple(np.array(w, dtype=float) for w in self.weights)
        bs = tuple(np.array(b, dtype=float) for b in self.biases)
        if len(Ws) != len(bs) or not Ws:
            raise ValueError("need one bias per weight matrix")
        for i, (W, b) in enumerate(zip(Ws, bs)):
            if b.shape != (W.shape[0],):
                raise ValueError(f"layer {i}: bias shape {b.shape} vs weight {W.shape}")
            if i and W.shape[1] != Ws[i - 1].shape[0]:
                raise ValueError(f"layer {i}: input width does not match previous layer")
        C = np.array(self.C, dtype=float)
        if C.ndim != 3 or C.shape[1:] != (Ws[-1].shape[0],) * 2:
            raise ValueError(f"noise covariance must be (T, dU, dU), got {C.shape}")
        for a in Ws + bs + (C,):
            a.setflags(write=False)
        object.__setattr__(self, "weights", Ws)
        object.__setattr__(self, "biases", bs)
        object.__setattr__(self, "C", C)

    @classmethod
    def init(cls, dX, dU, T, seed, hidden=HIDDEN, noise_cov=None):
        """Glorot-uniform weights, zero biases."""
        rng = as_rng(seed)
        sizes = (dX,) + tuple(hidden) + (dU,)
        Ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            Ws.append(rng.uniform(-lim, lim, size=(fan_out, fan_in)))
            bs.append(np.zeros(fan_out))
        if noise_cov is None:
            noise_cov = np.eye(dU)
        C = np.broadcast_to(np.asarray(noise_cov, float), (T, dU, dU))
        return cls(tuple(Ws), tuple(bs), C)

    @property
    def T(self):
        return self.C.shape[0]

    @property
    def dX(self):
        return self.weights[0].shape[1]

    @property
    def dU(self):
        return self.weights[-1].shape[0]

    @cached_property
    def chol(self):
        return np.stack([safe_cholesky(c) for c in self.C])

    def forward(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dX:
            raise ValueError(f"expected {self.dX} state entries, got shape {x.shape}")
        h = x
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h = np.maximum(h @ W.T + b, 0.0)
        return h @ self.weights[-1].T + self.biases[-1]

    def mean(self, t, x):
        return self.forward(x)

    def action_dist(self, t, x):
        return self.forward(x), self.C[t]

    def jacobian(self, x):
        """d mean / d x at a single state, shape (dU, dX)."""
        J = np.eye(self.dX)
        h = np.asarray(x, dtype=float)
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            z = W @ h + b
            J = (W * (z > 0)[:, None]) @ J
            h = np.maximum(z, 0.0)
        return self.weights[-1] @ J

    def linearize(self, Xbar):
        """Linear-Gaussian controller matching the network to first order around Xbar (T, dX)."""
        Xbar = np.asarray(Xbar, dtype=float)
        K = np.stack([self.jacobian(x) for x in Xbar[: self.T]])
        k = self.forward(Xbar[: self.T]) - np.einsum("tux,tx->tu", K, Xbar[: self.T])
        return LinGaussPolicy(K, k, self.C)

    def replace(self, weights=None, biases=None, C=None):
        return MlpPolicy(
            self.weights if weights is None else weights,
            self.biases if biases is None else biases,
            self.C if C is None else C,
        )

    def flat_params(self):
        return np.concatenate([p.ravel() for pair in zip(self.weights, self.biases) for p in pair])

    def with_flat_params(self, theta):
        theta = np.asarray(theta, dtype=float)
        Ws, bs, i = [], [], 0
        for W, b in zip(self.weights, self.biases):
            Ws.append(theta[i:i + W.size].reshape(W.shape))
            i += W.size
            bs.append(theta[i:i + b.size].copy())
            i += b.size
        if i != theta.size:
            raise ValueError("parameter vector has the wrong length")
        return self.replace(tuple(Ws), tuple(bs))

    def to_dict(self):
        return {
            "schema": SCHEMA,
            "T": self.T,
            "dX": self.dX,
            "dU": self.dU,
            "weights": [W.tolist() for W in self.weights],
            "biases": [b.tolist() for b in self.biases],
            "C": [c.tolist() for c in self.C],
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("schema") != SCHEMA:
            raise ValueError(f"unsupported network schema {d.get('schema')!r}")
        pol = cls(tuple(d["weights"]), tuple(d["biases"]), d["C"])
        if (pol.T, pol.dX, pol.dU) != (d["T"], d["dX"], d["dU"]):
            raise ValueError("declared dimensions do not match parameters")
        return pol

    def dumps(self):
        return json.dumps(self.to_dict())

    @classmethod
    def loads(cls, text):
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True, eq=False)
class SupervisedSet:
    X: np.ndarray          # (n, dX)
    target: np.ndarray     # (n, dU)
    precision: np.ndarray  # (n, dU, dU)
    weight: np.ndarray     # (n,)

    def __post_init__(self):
        n = self.X.shape[0]
        if n == 0:
            raise ValueError("empty supervised set")
        if (self.target.shape[0] != n or self.precision.shape != (n,) + (self.target.shape[1],) * 2
                or self.weight.shape != (n,)):
            raise ValueError("supervised set arrays are inconsistent")
        if np.any(self.weight < 0):
            raise ValueError("weights must be non-negative")

    @classmethod
    def build(cls, X, target, precision=None, weight=None):
        X = np.asarray(X, float).reshape(-1, np.shape(X)[-1])
        target = np.asarray(target, float).reshape(X.shape[0], -1)
        n, dU = target.shape
        if precision is None:
            precision = np.eye(dU)
        precision = np.asarray(precision, float)
        if precision.ndim == 2:
            precision = np.broadcast_to(precision, (n, dU, dU))
        precision = precision.reshape(n, dU, dU)
        weight = np.ones(n) if weight is None else np.asarray(weight, float).reshape(n)
        return cls(X, target, precision, weight)

    def __len__(self):
        return self.X.shape[0]

    @staticmethod
    def concat(sets):
        sets = list(sets)
        return SupervisedSet(*(np.concatenate([getattr(s, f) for s in sets])
                               for f in ("X", "target", "precision", "weight")))

    def normalized(self):
        """Precision rescaled so its average trace per action dimension is one."""
        dU = self.target.shape[1]
        scale = np.mean(np.trace(self.precision, axis1=1, axis2=2)) / dU
        return SupervisedSet(self.X, self.target, self.precision / scale, self.weight)


def supervised_loss(policy, data, idx=None):
    """sum_n w_n r_n^T Lambda_n r_n / (dU sum_n w_n), r_n = mean(x_n) - target_n."""
    return _loss_and_grad(policy.weights, policy.biases, data, idx, need_grad=False)[0]


def loss_and_grad(policy, data, idx=None):
    """Supervised loss and its gradients (lists matching weights and biases)."""
    return _loss_and_grad(policy.weights, policy.biases, data, idx)


def _loss_and_grad(Ws, bs, data, idx=None, need_grad=True):
    X, Y, Lam, w = data.X, data.target, data.precision, data.weight
    if idx is not None:
        X, Y, Lam, w = X[idx], Y[idx], Lam[idx], w[idx]
    wsum = w.sum()
    if wsum <= 0:
        return 0.0, [np.zeros_like(W) for W in Ws], [np.zeros_like(b) for b in bs]
    norm = Ws[-1].shape[0] * wsum
    acts, pre = [X], []
    h = X
    for W, b in zip(Ws[:-1], bs[:-1]):
        z = h @ W.T + b
        pre.append(z)
        h = np.maximum(z, 0.0)
        acts.append(h)
    r = h @ Ws[-1].T + bs[-1] - Y
    Lr = np.einsum("nij,nj->ni", Lam, r)
    loss = float(np.sum(w * np.sum(r * Lr, axis=1)) / norm)
    if not need_grad:
        return loss, None, None
    delta = (2.0 / norm) * w[:, None] * Lr
    gW, gb = [None] * len(Ws), [None] * len(bs)
    for layer in range(len(Ws) - 1, -1, -1):
        gW[layer] = delta.T @ acts[layer]
        gb[layer] = delta.sum(axis=0)
        if layer:
            delta = (delta @ Ws[layer]) * (pre[layer - 1] > 0)
    return loss, gW, gb


def train_supervised(policy, data, lr, epochs, batch=64, seed=0, momentum=0.9, history=None):
    """Mini-batch gradient descent with momentum on the supervised loss.

    Epoch losses over the full set are appended to ``history`` when given.
    """
    if len(data) == 0:
        raise ValueError("empty supervised set")
    rng = as_rng(seed)
    Ws = [W.copy() for W in policy.weights]
    bs = [b.copy() for b in policy.biases]
    vW = [np.zeros_like(W) for W in Ws]
    vb = [np.zeros_like(b) for b in bs]
    n = len(data)
    if history is not None:
        history.append(supervised_loss(policy, data))
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch):
            with np.errstate(over="ignore", invalid="ignore"):  # divergence is reported below
                loss, gW, gb = _loss_and_grad(Ws, bs, data, order[start:start + batch])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"supervised loss became {loss} in epoch {epoch}; reduce the learning rate")
            for i in range(len(Ws)):
                vW[i] *= momentum
                vW[i] -= lr * gW[i]
                vb[i] *= momentum
                vb[i] -= lr * gb[i]
                Ws[i] += vW[i]
                bs[i] += vb[i]
        if history is not None:
            with np.errstate(over="ignore", invalid="ignore"):
                full = _loss_and_grad(Ws, bs, data, need_grad=False)[0]
            if not np.isfinite(full):
                raise TrainingDiverged(
                    f"supervised loss became {full} in epoch {epoch}; reduce the learning rate")
            history.append(full)
    return policy.replace(tuple(Ws), tuple(bs))


def update_noise(policy, local_policies):
    """Exploration covariance := average of the local covariances at each step."""
    local_policies = list(local_policies)
    if not local_policies:
        raise ValueError("need at least one local policy")
    for p in local_policies:
        if p.T != policy.T or p.dU != policy.dU:
            raise ValueError(f"local policy T={p.T}, dU={p.dU} does not match global T={policy.T}")
    C = np.mean([p.C for p in local_policies], axis=0)
    return policy.replace(C=C)


def distillation_set(local_policy, samples, weight=None):
    """Targets K_t x + k_t and precisions C_t^{-1} at every sampled state."""
    Xs = samples.X[:, :-1]
    mu = np.einsum("tux,ntx->ntu", local_policy.K, Xs) + local_policy.k[None]
    prec = np.linalg.inv(local_policy.C)
    prec = np.broadcast_to(prec[None], (samples.N,) + prec.shape)
    return SupervisedSet.build(Xs, mu, prec, weight)


def sample_weights(samples, bound):
    """PI2 probabilities for a sample set, scaled by N so uniform weights are one."""
    table = compute_weights(cost_to_go(samples), bound)
    return samples.N * table.P, table


def reps_train(policy, sample_sets, bound, lr, epochs, batch=64, seed=0, history=None,
               momentum=0.9):
    """Regress the network onto the sampled actions reweighted by their probabilities."""
    parts = []
    for samples in sample_sets:
        w, _ = sample_weights(samples, bound)
        parts.append(SupervisedSet.build(samples.X[:, :-1], samples.U, None, w))
    data = SupervisedSet.concat(parts)
    return train_supervised(policy, data, lr, epochs, batch, seed, momentum, history)


def reps_noise(policy, sample_sets, bound, floor=COV_FLOOR):
    """Exploration covariance refit for REPS, which has no local controllers.

    Per step, the probability-weighted covariance of the sampled actions around
    the (already retrained) network mean, averaged over instances.
    """
    sample_sets = list(sample_sets)
    if not sample_sets:
        raise ValueError("need at least one sample set")
    C = np.zeros_like(policy.C)
    for samples in sample_sets:
        w, _ = sample_weights(samples, bound)
        r = samples.U - policy.forward(samples.X[:, :-1])
        C += np.einsum("nt,ntu,ntv->tuv", w / samples.N, r, r)
    return policy.replace(C=floor_covariance(C / len(sample_sets), floor))


def pigpsw_train(policy, local_policies, sample_sets, weights, lr, epochs, batch=64, seed=0,
                 history=None, normalize=True, momentum=0.9):
    """Distill updated local policies with per-sample probability weights.

    ``weights`` holds one (N, T) array per instance, already scaled so that
    uniform probabilities give weight one; ``None`` entries mean uniform.
    """
    data = SupervisedSet.concat(
        distillation_set(p, s, w) for p, s, w in zip(local_policies, sample_sets, weights))
    if normalize:
        data = data.normalized()
    return train_supervised(policy, data, lr, epochs, batch, seed, momentum, history)
