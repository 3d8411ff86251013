"""Run a configured experiment for each seed and persist its records.

Layout of an output directory::

    config.yaml                 resolved config
    summary.json                per-seed curves and run status
    timing.json                 wall-clock per iteration (kept out of the metrics)
    seed_<s>/metrics.csv        one row per (iteration, instance)
    seed_<s>/checkpoints/*.json network (and local controllers) every k iterations

Metric rows with a numeric ``instance_id`` summarize the training rollouts of
that instance. ``eval`` rows hold the noiseless evaluation of the network on
held-out instances and ``local<m>`` rows the noiseless local controllers.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import replace
from pathlib import Path

from ..envs import Instance
from ..global_policy import MlpPolicy
from ..gps import (
    MetricRow, evaluate, fixed_instances, init_global_policy, run_global_phase,
    run_local_phase, scripted_policy,
)

LOGGER = logging.getLogger(__name__)

COLUMNS = ("iteration", "instance_id", "mean_cost", "success_rate", "min_eta", "max_eta",
           "kl_to_global")
SUMMARY_SCHEMA = "pigps.summary/1"
CHECKPOINT_SCHEMA = "pigps.checkpoint/1"


def _fmt(v):
    if isinstance(v, str):
        return v
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


class MetricsWriter:
    """Appends metric rows to a CSV file, flushing after every iteration."""

    def __init__(self, path):
        self.path = Path(path)
        self._f = open(self.path, "w", newline="")
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(COLUMNS)
        self._f.flush()

    def write(self, rows):
        for r in rows:
            self._w.writerow([_fmt(getattr(r, c)) for c in COLUMNS])
        self._f.flush()

    def close(self):
        self._f.close()


def read_metrics(path):
    """Rows of a metrics file as MetricRow records."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        rows = []
        for r in reader:
            rows.append(MetricRow(
                iteration=int(r["iteration"]), instance_id=r["instance_id"],
                **{c: float(r[c]) for c in COLUMNS[2:]}))
    return rows


def json_safe(v):
    """NaN/inf become null so the documents stay strict JSON."""
    if isinstance(v, dict):
        return {k: json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [json_safe(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return None
    return v


def write_json(path, obj):
    Path(path).write_text(json.dumps(json_safe(obj), indent=1, sort_keys=True, allow_nan=False) + "\n")


def save_checkpoint(path, iteration, seed, policy, locals_=None):
    obj = {"schema": CHECKPOINT_SCHEMA, "iteration": iteration, "seed": seed,
           "policy": policy.to_dict(),
           "locals": [p.to_dict() for p in locals_] if locals_ is not None else None}
    write_json(path, obj)


def load_checkpoint(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: not a checkpoint (schema {obj.get('schema')!r})")
    return MlpPolicy.from_dict(obj["policy"]), obj


def initial_locals(cfg, env, instances, gps):
    """Scripted demonstrations: PD tracking toward the nominal (or the instance's own) target."""
    out = []
    for inst in instances:
        env_m = env.at(inst)
        guide = env.at(Instance(inst.x0)) if cfg.init_target == "nominal" else env_m
        out.append(scripted_policy(env_m, gps.init_sigma, gps.kp, reference=guide.reference()))
    return out


def run_seed(cfg, seed, seed_dir):
    """One seed of the configured phases. Returns the per-seed summary and wall-clock list."""
    seed_dir = Path(seed_dir)
    ckpt_dir = seed_dir / "checkpoints"
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    gps = replace(cfg.gps, seed=seed)
    env, dist = cfg.make_env(), cfg.distribution()
    last = gps.local_iterations + gps.global_iterations - 1
    curves = {k: [] for k in ("iterations", "mean_cost", "success_rate", "train_loss",
                              "eval_cost", "eval_success")}
    wall = []
    writer = MetricsWriter(seed_dir / "metrics.csv")
    state = {"trained": False}

    def on_iteration(rec, policy, locals_):
        if rec.phase == "global" or gps.distill:
            state["trained"] = True
        due = cfg.eval_every and ((rec.iteration + 1) % cfg.eval_every == 0 or rec.iteration == last)
        ev_cost = ev_succ = math.nan
        if due and state["trained"]:
            ev_succ, ev_cost, _ = evaluate(policy, env, dist, cfg.n_eval, cfg.eval_seed)
            rec.rows.append(MetricRow(rec.iteration, "eval", ev_cost, ev_succ))
        writer.write(rec.rows)
        curves["iterations"].append(rec.iteration)
        curves["mean_cost"].append(rec.mean_cost)
        curves["success_rate"].append(rec.success_rate)
        curves["train_loss"].append(rec.train_loss)
        curves["eval_cost"].append(ev_cost)
        curves["eval_success"].append(ev_succ)
        wall.append(rec.wall_clock)
        k = cfg.checkpoint_every
        if (k and (rec.iteration + 1) % k == 0) or rec.iteration == last:
            save_checkpoint(ckpt_dir / f"iter_{rec.iteration:04d}.json", rec.iteration, seed,
                            policy, locals_ if rec.phase == "local" else None)

    try:
        policy = init_global_policy(env, gps)
        instances = fixed_instances(dist, gps.instances, seed)
        locals_ = initial_locals(cfg, env, instances, gps)
        if gps.local_iterations:
            policy, locals_, _ = run_local_phase(gps, [env.at(i) for i in instances], locals_,
                                                 policy, callback=on_iteration)
        if gps.global_iterations:
            policy, _ = run_global_phase(gps, env, dist, policy, callback=on_iteration,
                                         start_iteration=gps.local_iterations)
    finally:
        writer.close()
    return curves, wall


def run_experiment(cfg, out=None):
    """Run every seed of ``cfg`` into ``out`` (default: the config's output dir).

    Returns the summary dict. A failing seed stops the run; whatever was
    recorded so far stays on disk and the summary is marked failed.
    """
    out = Path(out if out is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dumps())
    summary = {"schema": SUMMARY_SCHEMA, "name": cfg.name, "status": "running",
               "variant": cfg.gps.variant, "optimizer": cfg.gps.optimizer,
               "protocol": cfg.protocol(), "seeds": {}}
    timing = {}
    try:
        for seed in cfg.seeds:
            LOGGER.info("%s: seed %d", cfg.name, seed)
            curves, wall = run_seed(cfg, seed, out / f"seed_{seed}")
            summary["seeds"][str(seed)] = curves
            timing[str(seed)] = wall
        summary["status"] = "complete"
    except Exception as err:
        summary["status"] = "failed"
        summary["error"] = f"{type(err).__name__}: {err}"
        raise
    finally:
        write_json(out / "summary.json", summary)
        write_json(out / "timing.json", timing)
    return summary
