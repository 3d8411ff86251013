"""Command line entry point: ``pigps run | eval | compare``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from ..gps import evaluate
from .config import ConfigError, apply_overrides, parse
from .report import CompareError, compare
from .runner import json_safe, load_checkpoint, run_experiment

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def load_config(path, overrides=(), seed=None, out=None):
    """Read a YAML config, apply ``key=value`` overrides and CLI flags, validate."""
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as err:
        raise ConfigError([f"cannot read {path}: {err.strerror}"]) from None
    except yaml.YAMLError as err:
        raise ConfigError([f"{path}: not valid YAML: {err}"]) from None
    if not isinstance(raw, dict):
        raise ConfigError([f"{path}: config must be a mapping"])
    raw = apply_overrides(raw, overrides)
    if seed is not None:
        raw["seeds"] = [seed]
    if out is not None:
        raw.setdefault("output", {})
        if isinstance(raw["output"], dict):
            raw["output"]["dir"] = str(out)
    return parse(raw)


def build_parser():
    parser = argparse.ArgumentParser(prog="pigps", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None, help="run: this seed only; eval: evaluation seed")
        p.add_argument("--out", default=None, help="output directory (or report file for eval)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. gps.epsilon=0.5 (repeatable)")

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    common(p)

    p = sub.add_parser("eval", help="evaluate a checkpointed network")
    p.add_argument("checkpoint")
    p.add_argument("config")
    common(p)

    p = sub.add_parser("compare", help="compare finished runs")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--out", default=None, help="write the report here (JSON)")
    return parser


def _run(args):
    cfg = load_config(args.config, args.override, args.seed, args.out)
    summary = run_experiment(cfg)
    print(json.dumps({"status": summary["status"], "out": cfg.out,
                      "seeds": list(summary["seeds"])}))
    return EXIT_OK


def _eval(args):
    cfg = load_config(args.config, args.override)
    policy, meta = load_checkpoint(args.checkpoint)
    seed = cfg.eval_seed if args.seed is None else args.seed
    success, cost, _ = evaluate(policy, cfg.make_env(), cfg.distribution(), cfg.n_eval, seed)
    result = {"checkpoint": str(args.checkpoint), "iteration": meta["iteration"],
              "n_eval": cfg.n_eval, "eval_seed": seed, "success_rate": success, "mean_cost": cost}
    text = json.dumps(json_safe(result), indent=1, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


def _compare(args):
    report = compare(args.dirs, args.out)
    brief = {"insufficient_seeds": report["insufficient_seeds"],
             "verdicts": [{v["statement"]: v["value"]} for v in report["verdicts"] or []]}
    print(json.dumps(brief, indent=1))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = {"run": _run, "eval": _eval, "compare": _compare}[args.verb]
    try:
        return handler(args)
    except ConfigError as err:
        print(err, file=sys.stderr)
        return EXIT_CONFIG
    except (CompareError, ValueError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
