"""Cross-run comparison built only from persisted metric files.

Each run directory contributes one algorithm: its ``config.yaml`` supplies the
label and evaluation protocol, and every ``seed_*/metrics.csv`` one curve.
The per-iteration cost of a seed is taken from its ``eval`` rows when the run
has any, else from the noiseless ``local<m>`` rows, else from the training
rollouts (mean over instances).
"""
from __future__ import annotations

import math
from collections import defaultdict
from itertools import permutations
from pathlib import Path

import numpy as np

from .config import load
from .runner import write_json, read_metrics

REPORT_SCHEMA = "pigps.report/1"
MIN_SEEDS = 2


class CompareError(ValueError):
    pass


def _source(rows):
    ids = {r.instance_id for r in rows}
    if "eval" in ids:
        return "eval"
    if any(i.startswith("local") for i in ids):
        return "local"
    return "samples"


def seed_curve(rows, source=None):
    """(iterations, cost, success) arrays for one seed's metric rows."""
    source = source or _source(rows)
    if source == "eval":
        keep = lambda r: r.instance_id == "eval"
    elif source == "local":
        keep = lambda r: r.instance_id.startswith("local")
    else:
        keep = lambda r: r.instance_id.isdigit()
    cost, succ = defaultdict(list), defaultdict(list)
    for r in rows:
        if keep(r):
            cost[r.iteration].append(r.mean_cost)
            succ[r.iteration].append(r.success_rate)
    its = sorted(cost)
    return (np.array(its, dtype=int), np.array([np.mean(cost[i]) for i in its]),
            np.array([np.mean(succ[i]) for i in its]))


def load_run(run_dir):
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.yaml"
    if not cfg_path.exists():
        raise CompareError(f"{run_dir}: no config.yaml (not a run directory)")
    cfg = load(cfg_path)
    seeds = {}
    for path in sorted(run_dir.glob("seed_*/metrics.csv"), key=lambda p: int(p.parent.name[5:])):
        seeds[int(path.parent.name[5:])] = read_metrics(path)
    if not seeds:
        raise CompareError(f"{run_dir}: no metrics files")
    return cfg, seeds


def _quantiles(M):
    if M.shape[1] == 0:
        return [], [], []
    q25, med, q75 = np.percentile(M, [25, 50, 75], axis=0)
    return med.tolist(), q25.tolist(), q75.tolist()


def summarize(label, seeds, source):
    """Per-iteration median / IQR over seeds for one algorithm."""
    curves = {s: seed_curve(rows, source) for s, rows in seeds.items()}
    its = {tuple(c[0]) for c in curves.values()}
    if len(its) != 1:
        raise CompareError(f"{label}: seeds were recorded at different iterations")
    iterations = [int(i) for i in next(iter(its))]
    cost = np.array([curves[s][1] for s in sorted(curves)]).reshape(len(curves), len(iterations))
    succ = np.array([curves[s][2] for s in sorted(curves)]).reshape(len(curves), len(iterations))
    med, q25, q75 = _quantiles(cost)
    smed, sq25, sq75 = _quantiles(succ)
    return {
        "label": label,
        "source": source,
        "seeds": sorted(curves),
        "iterations": iterations,
        "per_seed_cost": {str(s): curves[s][1].tolist() for s in sorted(curves)},
        "per_seed_success": {str(s): curves[s][2].tolist() for s in sorted(curves)},
        "median_cost": med, "q25_cost": q25, "q75_cost": q75,
        "median_success": smed, "q25_success": sq25, "q75_success": sq75,
        "final_median_cost": med[-1] if med else math.nan,
        "final_median_success": smed[-1] if smed else math.nan,
        "best_median_cost": min(med) if med else math.nan,
    }


def _order(a, b):
    if a == b:
        return "tie"
    return a < b


def verdicts(algos):
    out = []
    for a, b in permutations(algos, 2):
        for key, what in (("final_median_cost", "final median cost"),
                          ("best_median_cost", "lowest median cost across iterations")):
            out.append({"statement": f"{a['label']} {what} < {b['label']} {what}",
                        "a": a["label"], "b": b["label"], "metric": key,
                        "value": _order(a[key], b[key])})
    return out


def compare(run_dirs, report_path=None):
    """Aggregate two or more runs into a report dict (also written as JSON if a path is given)."""
    if len(run_dirs) < 2:
        raise CompareError("compare needs at least two runs")
    loaded = [load_run(d) for d in run_dirs]
    ref = loaded[0][0].protocol()
    for (cfg, _), d in zip(loaded[1:], run_dirs[1:]):
        p = cfg.protocol()
        diff = sorted(k for k in ref if ref[k] != p.get(k))
        if diff:
            raise CompareError(f"{d}: protocol differs from {run_dirs[0]} in {diff}")
    sources = {_source([r for rows in seeds.values() for r in rows]) for _, seeds in loaded}
    if len(sources) != 1:
        raise CompareError(f"runs record different cost sources: {sorted(sources)}")
    source = sources.pop()
    labels, algos = [], []
    for cfg, seeds in loaded:
        label = cfg.name
        n = 2
        while label in labels:
            label = f"{cfg.name}#{n}"
            n += 1
        labels.append(label)
        algos.append(summarize(label, seeds, source))
    insufficient = any(len(a["seeds"]) < MIN_SEEDS for a in algos)
    report = {
        "schema": REPORT_SCHEMA,
        "runs": [str(d) for d in run_dirs],
        "protocol": ref,
        "source": source,
        "algorithms": algos,
        "insufficient_seeds": insufficient,
        "verdicts": None,
    }
    if not insufficient:
        report["verdicts"] = verdicts(algos) if algos[0]["iterations"] else []
    if not insufficient and algos[0]["iterations"]:
        finals = [a["final_median_cost"] for a in algos]
        bests = [a["best_median_cost"] for a in algos]
        report["lowest_final_median_cost"] = [a["label"] for a, f in zip(algos, finals) if f == min(finals)]
        report["lowest_median_cost_any_iteration"] = [a["label"] for a, b in zip(algos, bests) if b == min(bests)]
    if report_path is not None:
        Path(report_path).parent.mkdir(parents=True, exist_ok=True)
        write_json(report_path, report)
    return report
