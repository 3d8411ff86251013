"""Guided policy search outer loop.

Two phases share one iteration body: sample, improve one controller per
instance, distill into the network, refresh the network's exploration noise.

* local phase: a fixed set of instances, rollouts from per-instance
  linear-Gaussian controllers, PI2 constrained against the previous local
  controller with a KL penalty toward the network in the costs (or the LQR
  baseline);
* global phase: fresh instances every iteration, rollouts from the noisy
  network, PI2 constrained against the network itself (via its linearization
  around the sampled mean states).
"""
from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .controllers import LinGaussPolicy, sample_rollouts, trajectory_kl
from .envs import sample_instance
from .global_policy import HIDDEN, MlpPolicy, pigpsw_train, reps_noise, reps_train, update_noise
from .lqr import lqr_iteration
from .pi2 import KlBound, default_penalty_weight, pi2_step

LOGGER = logging.getLogger(__name__)

OPTIMIZERS = ("pi2", "lqr")
VARIANTS = ("pi-gps", "pi-gps-w", "reps")

# stream ids for seed derivation
_LOCAL, _GLOBAL, _EVAL, _INIT, _TRAIN, _INST, _FIXED = range(7)


@dataclass
class GpsConfig:
    local_iterations: int = 2
    global_iterations: int = 0
    instances: int = 5
    samples: int = 10
    epsilon: float = 1.0
    optimizer: str = "pi2"
    variant: str = "pi-gps"
    init_sigma: float = 1.0
    global_noise_scale: float = 1.5
    noise_smoothing: float = 0.0
    kl_penalty: float = 0.1
    kp: float = 10.0
    lr_init: float = 5e-3
    lr_global: float = 1e-3
    epochs: int = 20
    batch: int = 64
    momentum: float = 0.9
    hidden: tuple = HIDDEN
    distill: bool = True
    curriculum: bool = False
    curriculum_start: float = 0.2
    prior_strength: float = 1.0
    eval_local: bool = False
    seed: int = 0

    def validate(self):
        problems = []
        if self.instances < 1:
            problems.append("instances must be >= 1")
        if self.samples < 2:
            problems.append("samples must be >= 2")
        for name in ("local_iterations", "global_iterations", "epochs"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be >= 0")
        if not self.epsilon > 0:
            problems.append("epsilon must be > 0")
        if self.optimizer not in OPTIMIZERS:
            problems.append(f"optimizer must be one of {OPTIMIZERS}")
        if self.variant not in VARIANTS:
            problems.append(f"variant must be one of {VARIANTS}")
        if self.optimizer == "lqr" and self.global_iterations > 0:
            problems.append("the lqr optimizer is only available in the local phase")
        if self.optimizer == "lqr" and self.instances != 1:
            problems.append("the lqr optimizer runs on a single instance")
        if not self.init_sigma > 0 or not self.global_noise_scale > 0:
            problems.append("noise scales must be > 0")
        if self.batch < 1:
            problems.append("batch must be >= 1")
        if self.lr_init <= 0 or self.lr_global <= 0:
            problems.append("learning rates must be > 0")
        return problems

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown gps settings: {unknown}")
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(int(h) for h in d["hidden"])
        return cls(**d)


@dataclass
class MetricRow:
    iteration: int
    instance_id: str
    mean_cost: float
    success_rate: float
    min_eta: float = math.nan
    max_eta: float = math.nan
    kl_to_global: float = math.nan


@dataclass
class IterationRecord:
    iteration: int
    phase: str
    rows: list = field(default_factory=list)
    train_loss: float = math.nan
    wall_clock: float = 0.0

    def row(self, instance_id):
        for r in self.rows:
            if r.instance_id == instance_id:
                return r
        raise KeyError(instance_id)

    @property
    def sample_rows(self):
        return [r for r in self.rows if r.instance_id.isdigit()]

    @property
    def mean_cost(self):
        return float(np.mean([r.mean_cost for r in self.sample_rows]))

    @property
    def success_rate(self):
        return float(np.mean([r.success_rate for r in self.sample_rows]))


def stream(seed, *path):
    """Independent generator for a (phase, iteration, purpose, index) path."""
    return np.random.default_rng(np.random.SeedSequence([int(seed)] + [int(p) for p in path]))


def scripted_policy(env, sigma, kp=10.0, reference=None):
    """PD tracking of a scripted reference: K fixed, k_t = kp p_t + kd v_t + a_t."""
    p, v, a = env.reference() if reference is None else reference
    kd = 2.0 * math.sqrt(kp)
    ipos, ivel = env.position_index()
    K = np.zeros((env.dU, env.dX))
    K[:, ipos] = -kp * np.eye(env.dU)
    K[:, ivel] = -kd * np.eye(env.dU)
    k = kp * p + kd * v + a
    return LinGaussPolicy.constant(env.T, K, k, sigma**2 * np.eye(env.dU))


def init_global_policy(env, cfg):
    return MlpPolicy.init(env.dX, env.dU, env.T, stream(cfg.seed, _INIT), cfg.hidden,
                          cfg.init_sigma**2 * np.eye(env.dU))


def _sample_row(iteration, m, samples, env, weights=None, kl=math.nan):
    return MetricRow(
        iteration=iteration,
        instance_id=str(m),
        mean_cost=float(samples.cost.sum(axis=1).mean()),
        success_rate=float(np.mean(env.success(samples.X))),
        min_eta=float(weights.eta.min()) if weights is not None else math.nan,
        max_eta=float(weights.eta.max()) if weights is not None else math.nan,
        kl_to_global=float(kl),
    )


def distill(cfg, policy, locals_, sample_sets, lr, seed, weight_tables=None, history=None):
    """Supervised step for the configured variant; returns the retrained network."""
    if cfg.variant == "reps":
        return reps_train(policy, sample_sets, KlBound(cfg.epsilon), lr, cfg.epochs, cfg.batch,
                          seed, history, cfg.momentum)
    ws = [None] * len(sample_sets)
    if cfg.variant == "pi-gps-w":
        ws = [s.N * table.P for s, table in zip(sample_sets, weight_tables)]
    return pigpsw_train(policy, locals_, sample_sets, ws, lr, cfg.epochs, cfg.batch, seed,
                        history, momentum=cfg.momentum)


def run_local_phase(cfg, envs, local_policies, policy, callback=None, start_iteration=0):
    """Local-policy sampling on a fixed instance set.

    ``envs`` are environments already bound to their instances, one per local
    controller. Returns (network, local controllers, records).
    """
    bound = KlBound(cfg.epsilon)
    locals_ = list(local_policies)
    if len(envs) != len(locals_):
        raise ValueError("need exactly one local policy per instance")
    trained = False
    priors = [None] * len(envs)
    records = []
    for it in range(start_iteration, start_iteration + cfg.local_iterations):
        t0 = time.perf_counter()
        rec = IterationRecord(it, "local")
        sample_sets, tables, new_locals = [], [], []
        for m, (env, pol) in enumerate(zip(envs, locals_)):
            samples = sample_rollouts(pol, env, cfg.samples, stream(cfg.seed, _LOCAL, it, 0, m),
                                      cfg.noise_smoothing)
            kl = trajectory_kl(pol, policy, samples) if trained else math.nan
            table = None
            if cfg.optimizer == "pi2":
                penalty = None
                if trained and cfg.kl_penalty > 0:
                    penalty = (default_penalty_weight(samples, cfg.kl_penalty), policy)
                new, table = pi2_step(pol, samples, bound, kl_penalty=penalty)
            else:
                new, info = lqr_iteration(env, pol, samples, bound, prior=priors[m],
                                          prior_strength=cfg.prior_strength)
                priors[m] = info["dynamics"]
            rec.rows.append(_sample_row(it, m, samples, env, table, kl))
            sample_sets.append(samples)
            tables.append(table)
            new_locals.append(new)
        locals_ = new_locals
        if cfg.distill:
            hist = []
            policy = distill(cfg, policy, locals_, sample_sets, cfg.lr_init,
                             stream(cfg.seed, _TRAIN, it), tables, hist)
            policy = update_noise(policy, locals_)
            rec.train_loss = hist[-1]
            trained = True
        if cfg.eval_local:
            for m, (env, pol) in enumerate(zip(envs, locals_)):
                ev = sample_rollouts(pol, env, 1, 0, noiseless=True)
                rec.rows.append(MetricRow(it, f"local{m}", float(ev.cost.sum()),
                                          float(env.success(ev.X)[0])))
        rec.wall_clock = time.perf_counter() - t0
        records.append(rec)
        if callback is not None:
            callback(rec, policy, locals_)
    return policy, locals_, records


def run_global_phase(cfg, env, dist, policy, callback=None, start_iteration=0, boost_noise=True):
    """Global-policy sampling on freshly drawn instances each iteration.

    Returns (network, records).
    """
    bound = KlBound(cfg.epsilon)
    if boost_noise and cfg.global_iterations:
        policy = policy.replace(C=policy.C * cfg.global_noise_scale**2)
    records = []
    n_iter = cfg.global_iterations
    for j in range(n_iter):
        it = start_iteration + j
        t0 = time.perf_counter()
        rec = IterationRecord(it, "global")
        cur_dist = dist
        if cfg.curriculum and n_iter > 1:
            frac = cfg.curriculum_start + (1 - cfg.curriculum_start) * j / (n_iter - 1)
            cur_dist = dist.widened(frac)
        sample_sets, tables, locals_ = [], [], []
        for m in range(cfg.instances):
            inst = sample_instance(cur_dist, stream(cfg.seed, _INST, it, m))
            env_m = env.at(inst)
            samples = sample_rollouts(policy, env_m, cfg.samples,
                                      stream(cfg.seed, _GLOBAL, it, 0, m), cfg.noise_smoothing)
            reference = policy.linearize(samples.X.mean(axis=0))
            new, table = pi2_step(reference, samples, bound)
            kl = trajectory_kl(new, policy, samples)
            rec.rows.append(_sample_row(it, m, samples, env_m, table, kl))
            sample_sets.append(samples)
            tables.append(table)
            locals_.append(new)
        hist = []
        policy = distill(cfg, policy, locals_, sample_sets, cfg.lr_global,
                         stream(cfg.seed, _TRAIN, it), tables, hist)
        if cfg.variant == "reps":
            policy = reps_noise(policy, sample_sets, bound)
        else:
            policy = update_noise(policy, locals_)
        rec.train_loss = hist[-1]
        rec.wall_clock = time.perf_counter() - t0
        records.append(rec)
        if callback is not None:
            callback(rec, policy, locals_)
    return policy, records


def evaluate(policy, env, dist, n_eval, seed):
    """Noiseless rollouts on ``n_eval`` instances drawn from ``dist``.

    Returns (success rate, mean cost, per-rollout SampleSets).
    """
    if n_eval < 1:
        raise ValueError("n_eval must be >= 1")
    rollouts, succ, costs = [], [], []
    for i in range(n_eval):
        env_i = env.at(sample_instance(dist, stream(seed, _EVAL, i)))
        s = sample_rollouts(policy, env_i, 1, 0, noiseless=True)
        rollouts.append((env_i, s))
        succ.append(bool(env_i.success(s.X)[0]))
        costs.append(float(s.cost.sum()))
    return float(np.mean(succ)), float(np.mean(costs)), rollouts


def fixed_instances(dist, count, seed):
    return [sample_instance(dist, stream(seed, _FIXED, m)) for m in range(count)]
