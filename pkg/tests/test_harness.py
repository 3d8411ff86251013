import json
import time
from pathlib import Path

import numpy as np
import pytest
import yaml
from hypothesis import given, strategies as st

from pigps.gps import MetricRow
from pigps.harness import (
    CompareError, ConfigError, apply_overrides, compare, load, load_checkpoint, loads, parse,
    read_metrics, run_experiment,
)
from pigps.harness.cli import main
from pigps.harness.runner import COLUMNS, MetricsWriter

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def raw(name="point_mass_smoke.yaml"):
    return yaml.safe_load((CONFIGS / name).read_text())


def tiny(tmp_path, **gps):
    d = raw()
    d["gps"].update({"local_iterations": 1, "global_iterations": 1, "samples": 4, "epochs": 1, **gps})
    d["environment"]["params"]["T"] = 10
    d["output"]["dir"] = str(tmp_path / "out")
    return d


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIGS.glob("*.yaml")))
def test_shipped_configs_parse_and_round_trip(name):
    cfg = load(CONFIGS / name)
    assert loads(cfg.dumps()) == cfg
    assert parse(cfg.to_dict()).to_dict() == cfg.to_dict()


@given(eps=st.floats(0.01, 5.0), samples=st.integers(2, 50), n_eval=st.integers(1, 40),
       seeds=st.lists(st.integers(0, 10**6), min_size=1, max_size=5, unique=True),
       goal=st.tuples(st.floats(-1, 1), st.floats(-1, 1)), variant=st.sampled_from(["pi-gps", "pi-gps-w", "reps"]))
def test_config_round_trip_property(eps, samples, n_eval, seeds, goal, variant):
    d = raw()
    d["gps"].update(epsilon=eps, samples=samples, variant=variant)
    d["evaluation"]["n_eval"] = n_eval
    d["seeds"] = seeds
    d["instances"]["low"]["goal"] = d["instances"]["high"]["goal"] = list(goal)
    cfg = parse(d)
    assert loads(cfg.dumps()) == cfg


def test_validation_lists_every_violation():
    d = raw()
    d["schema"] = "other/9"
    d["environment"]["name"] = "door"
    d["gps"]["samples"] = 1
    d["gps"]["epsilon"] = -1
    d["evaluation"]["n_eval"] = 0
    d["seeds"] = [1, 1]
    del d["output"]
    with pytest.raises(ConfigError) as err:
        parse(d)
    text = "\n".join(err.value.problems)
    for needle in ("schema", "environment.name", "samples", "epsilon", "n_eval", "seeds", "output"):
        assert needle in text
    assert len(err.value.problems) == 8  # a missing output section also lacks output.dir


def test_unknown_instance_parameter_and_env_param():
    d = raw()
    d["instances"]["low"]["latch"] = d["instances"]["high"]["latch"] = [1, 0]
    d["environment"]["params"]["mass"] = 2
    with pytest.raises(ConfigError) as err:
        parse(d)
    assert len(err.value.problems) == 2


def test_overrides():
    d = apply_overrides(raw(), ["gps.epsilon=0.25", "seeds=[3, 4]", "output.dir=x/y", "gps.new.deep=1"])
    assert d["gps"]["epsilon"] == 0.25 and d["seeds"] == [3, 4] and d["output"]["dir"] == "x/y"
    assert d["gps"]["new"] == {"deep": 1}
    assert raw()["gps"]["epsilon"] == 0.5
    with pytest.raises(ConfigError):
        apply_overrides(raw(), ["noequals"])


def test_zero_iterations_give_empty_curves(tmp_path):
    d = tiny(tmp_path, local_iterations=0, global_iterations=0)
    summary = run_experiment(parse(d))
    assert summary["status"] == "complete"
    assert summary["seeds"]["0"]["iterations"] == []
    rows = read_metrics(tmp_path / "out" / "seed_0" / "metrics.csv")
    assert rows == []
    assert main(["run", str(tmp_path / "c.yaml")]) == 2  # missing file is a config error
    (tmp_path / "c.yaml").write_text(yaml.safe_dump(d))
    assert main(["run", str(tmp_path / "c.yaml"), "--out", str(tmp_path / "o2")]) == 0


def test_metrics_are_byte_identical_across_runs(tmp_path):
    d = tiny(tmp_path)
    a = run_experiment(parse(d), tmp_path / "a")
    b = run_experiment(parse(d), tmp_path / "b")
    fa, fb = (p / "seed_0" / "metrics.csv" for p in (tmp_path / "a", tmp_path / "b"))
    assert fa.read_bytes() == fb.read_bytes()
    assert (tmp_path / "a" / "summary.json").read_bytes() == (tmp_path / "b" / "summary.json").read_bytes()
    assert a["status"] == b["status"] == "complete"


def test_metrics_layout(tmp_path):
    run_experiment(parse(tiny(tmp_path)))
    out = tmp_path / "out"
    header = (out / "seed_0" / "metrics.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == COLUMNS
    rows = read_metrics(out / "seed_0" / "metrics.csv")
    assert [(r.iteration, r.instance_id) for r in rows] == [(0, "0"), (0, "eval"), (1, "0"), (1, "eval")]
    for name in ("config.yaml", "summary.json", "timing.json"):
        assert (out / name).exists()
    timing = json.loads((out / "timing.json").read_text())
    assert len(timing["0"]) == 2
    assert "wall" not in header


def test_smoke_config_under_a_minute(tmp_path):
    t0 = time.perf_counter()
    code = main(["run", str(CONFIGS / "point_mass_smoke.yaml"), "--out", str(tmp_path / "smoke")])
    assert code == 0
    assert time.perf_counter() - t0 < 60
    summary = json.loads((tmp_path / "smoke" / "summary.json").read_text())
    assert summary["seeds"]["0"]["iterations"] == [0, 1, 2, 3, 4]


def test_checkpoint_round_trip_and_eval_verb(tmp_path, capsys):
    d = tiny(tmp_path)
    cfg = parse(d)
    run_experiment(cfg)
    ckpt = tmp_path / "out" / "seed_0" / "checkpoints" / "iter_0001.json"
    policy, meta = load_checkpoint(ckpt)
    assert meta["iteration"] == 1 and meta["seed"] == 0
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(cfg.dumps())
    capsys.readouterr()
    assert main(["eval", str(ckpt), str(cfg_path), "--out", str(tmp_path / "ev.json")]) == 0
    result = json.loads(capsys.readouterr().out)
    last = [r for r in read_metrics(tmp_path / "out" / "seed_0" / "metrics.csv") if r.instance_id == "eval"][-1]
    assert result["mean_cost"] == last.mean_cost
    assert result["success_rate"] == last.success_rate
    assert json.loads((tmp_path / "ev.json").read_text()) == result
    assert main(["eval", str(cfg_path), str(cfg_path)]) == 1


def write_run(root, name, per_seed, source="eval", horizon=10):
    """Synthetic run directory: ``per_seed`` maps seed -> list of costs per iteration."""
    d = raw()
    d["name"] = name
    d["environment"]["params"]["T"] = horizon
    n = len(next(iter(per_seed.values())))
    d["gps"].update(local_iterations=0, global_iterations=n)
    d["seeds"] = sorted(per_seed)
    root.mkdir(parents=True)
    (root / "config.yaml").write_text(parse(d).dumps())
    for seed, costs in per_seed.items():
        (root / f"seed_{seed}").mkdir()
        w = MetricsWriter(root / f"seed_{seed}" / "metrics.csv")
        for it, c in enumerate(costs):
            w.write([MetricRow(it, "0", 1000.0 + c, 0.0), MetricRow(it, source, c, float(c < 2))])
        w.close()
    return root


def test_compare_self_ties(tmp_path):
    run = write_run(tmp_path / "a", "x", {0: [3, 2, 1], 1: [4, 3, 2]})
    report = compare([run, run])
    assert report["verdicts"] and all(v["value"] == "tie" for v in report["verdicts"])
    assert [a["label"] for a in report["algorithms"]] == ["x", "x#2"]


def test_compare_matches_hand_medians(tmp_path):
    a = write_run(tmp_path / "a", "A", {0: [5.0, 1.0], 1: [7.0, 3.0], 2: [6.0, 8.0]})
    b = write_run(tmp_path / "b", "B", {0: [4.0, 4.0], 1: [9.0, 2.0], 2: [5.0, 6.0], 3: [1.0, 1.0]})
    report = compare([a, b], tmp_path / "r.json")
    A, B = report["algorithms"]
    assert A["median_cost"] == [6.0, 3.0]
    assert A["q25_cost"] == [5.5, 2.0] and A["q75_cost"] == [6.5, 5.5]
    assert B["median_cost"] == [4.5, 3.0]
    assert A["median_success"] == [0.0, 0.0] and B["median_success"] == [0.0, 0.0]
    assert A["final_median_cost"] == 3.0 and B["best_median_cost"] == 3.0
    v = {x["statement"]: x["value"] for x in report["verdicts"]}
    assert v["A final median cost < B final median cost"] == "tie"
    assert v["B lowest median cost across iterations < A lowest median cost across iterations"] == "tie"
    assert report["lowest_final_median_cost"] == ["A", "B"]
    assert json.loads((tmp_path / "r.json").read_text())["algorithms"][0]["median_cost"] == [6.0, 3.0]


def test_compare_verdict_order(tmp_path):
    a = write_run(tmp_path / "a", "A", {0: [5.0, 1.0], 1: [5.0, 1.0]})
    b = write_run(tmp_path / "b", "B", {0: [4.0, 2.0], 1: [4.0, 2.0]})
    v = {x["statement"]: x["value"] for x in compare([a, b])["verdicts"]}
    assert v["A final median cost < B final median cost"] is True
    assert v["B final median cost < A final median cost"] is False


def test_compare_single_seed_is_flagged(tmp_path):
    a = write_run(tmp_path / "a", "A", {0: [1.0]})
    b = write_run(tmp_path / "b", "B", {0: [2.0]})
    report = compare([a, b])
    assert report["insufficient_seeds"] is True and report["verdicts"] is None


def test_compare_errors(tmp_path):
    a = write_run(tmp_path / "a", "A", {0: [1.0], 1: [1.0]})
    b = write_run(tmp_path / "b", "B", {0: [1.0], 1: [1.0]}, horizon=20)
    c = write_run(tmp_path / "c", "C", {0: [1.0], 1: [1.0]}, source="local0")
    with pytest.raises(CompareError, match="horizon"):
        compare([a, b])
    with pytest.raises(CompareError, match="sources"):
        compare([a, c])
    with pytest.raises(CompareError):
        compare([a])
    with pytest.raises(CompareError, match="config"):
        compare([a, tmp_path])
    assert main(["compare", str(a), str(b)]) == 1
    assert main(["compare", str(a), str(a), "--out", str(tmp_path / "r.json")]) == 0


def test_cli_override_and_seed_flags(tmp_path):
    cfg_path = tmp_path / "c.yaml"
    cfg_path.write_text(yaml.safe_dump(tiny(tmp_path)))
    out = tmp_path / "o"
    assert main(["run", str(cfg_path), "--seed", "7", "--out", str(out),
                 "--override", "gps.global_iterations=0"]) == 0
    cfg = load(out / "config.yaml")
    assert cfg.seeds == [7] and cfg.gps.global_iterations == 0
    assert (out / "seed_7" / "metrics.csv").exists()
    assert main(["run", str(cfg_path), "--override", "gps.samples=1"]) == 2


def test_failed_run_is_flushed(tmp_path):
    d = tiny(tmp_path, lr_global=1e9, epochs=30)
    with pytest.raises(Exception):
        run_experiment(parse(d))
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["status"] == "failed" and "error" in summary
    rows = read_metrics(tmp_path / "out" / "seed_0" / "metrics.csv")
    assert [r.iteration for r in rows if r.instance_id == "0"] == [0]


def test_report_numbers_recompute_from_metric_files(tmp_path):
    d = tiny(tmp_path)
    d["seeds"] = [0, 1]
    run_experiment(parse(d), tmp_path / "a")
    report = compare([tmp_path / "a", tmp_path / "a"])
    alg = report["algorithms"][0]
    for s in (0, 1):
        ev = [r.mean_cost for r in read_metrics(tmp_path / "a" / f"seed_{s}" / "metrics.csv") if r.instance_id == "eval"]
        assert alg["per_seed_cost"][str(s)] == ev
    assert alg["median_cost"] == np.median(list(map(list, alg["per_seed_cost"].values())), axis=0).tolist()
