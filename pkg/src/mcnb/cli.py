"""Command line entry point: ``mcnb run | ntk-report | compare``.

Errors are printed to stderr as one JSON object ``{"error": kind, "message": ..., "problems": [...]}``
and the process exits with status 2 (bad input) or 1 (runtime failure).
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness, ntk
from .environments import random_unit

NTK_KEYS = {"contexts", "n_contexts", "dim", "depth", "rewards", "t_times_k", "width", "seed", "duplicate_last"}


class InputError(ValueError):
    def __init__(self, problems):
        super().__init__("; ".join(problems))
        self.problems = list(problems)


def _seed_list(text):
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"seed list must be comma separated integers: {text!r}") from exc
    if not seeds or min(seeds) < 0 or max(seeds) >= 2**64:
        raise argparse.ArgumentTypeError("seeds must be integers in [0, 2^64)")
    return seeds


def cmd_run(args):
    cfg = harness.load_config(args.config)
    out = args.out or cfg.output_dir
    if not out:
        raise InputError(["output directory: pass --out or set output_dir in the config"])
    _, summary = harness.run_experiment(cfg, out, args.seed)
    rows = [{"seed": s["seed"], "final_regret": s["final_regret"], "tail_precision": s["tail_precision"]}
            for s in summary["seeds"]]
    print(json.dumps({"output_dir": out, "policy": summary["policy"], "seeds": rows}))


def load_ntk_config(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    problems = [f"unknown key '{k}'" for k in raw if k not in NTK_KEYS]
    if "contexts" not in raw and "n_contexts" not in raw:
        problems.append("contexts: give a list of unit vectors or n_contexts and dim")
    if "n_contexts" in raw and "dim" not in raw:
        problems.append("dim: required with n_contexts")
    depth = raw.get("depth", 2)
    if not isinstance(depth, int) or depth < 2:
        problems.append("depth: must be an integer >= 2")
    if problems:
        raise InputError(problems)
    return raw


def ntk_report_from_config(raw: dict) -> dict:
    seed = raw.get("seed", 0)
    rng = np.random.default_rng(seed)
    if "contexts" in raw:
        X = np.asarray(raw["contexts"], dtype=np.float64)
    else:
        X = random_unit(rng, int(raw["n_contexts"]), int(raw["dim"]))
    if raw.get("duplicate_last"):
        X = np.vstack([X, X[-1:]])
    if "rewards" in raw:
        h = np.asarray(raw["rewards"], dtype=np.float64)
        if h.shape != (X.shape[0],):
            raise InputError([f"rewards: expected {X.shape[0]} values, got {h.size}"])
    else:
        h = rng.uniform(0.0, 1.0, X.shape[0])
    rep = ntk.complexity_report(X, h, raw.get("depth", 2), raw.get("t_times_k"), raw.get("width"), seed)
    return rep.to_json()


def cmd_ntk_report(args):
    print(json.dumps(ntk_report_from_config(load_ntk_config(args.config))))


def cmd_compare(args):
    summaries = [harness.load_summary(d) for d in args.inputs]
    print(json.dumps(harness.compare(summaries), indent=2))


def build_parser():
    p = argparse.ArgumentParser(prog="mcnb", description="Meta clustering of neural bandits lab")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config over its seeds")
    r.add_argument("--config", required=True)
    r.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=_seed_list, default=None, help="comma separated seeds, overrides the config list")
    r.set_defaults(func=cmd_run)

    n = sub.add_parser("ntk-report", help="print NTK complexity diagnostics as JSON")
    n.add_argument("--config", required=True)
    n.set_defaults(func=cmd_ntk_report)

    c = sub.add_parser("compare", help="rank finished runs by final regret")
    c.add_argument("--inputs", nargs="+", required=True, help="run directories holding summary.json")
    c.set_defaults(func=cmd_compare)
    return p


def _fail(kind, message, problems=None, code=2):
    err = {"error": kind, "message": message}
    if problems:
        err["problems"] = problems
    print(json.dumps(err), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (harness.ConfigError, InputError) as exc:
        return _fail("config", str(exc), exc.problems)
    except FileNotFoundError as exc:
        return _fail("file-not-found", str(exc))
    except json.JSONDecodeError as exc:
        return _fail("invalid-json", str(exc))
    except ntk.SingularKernelError as exc:
        return _fail("singular-kernel", str(exc), code=1)
    except (ValueError, RuntimeError, KeyError) as exc:
        return _fail(type(exc).__name__, str(exc), code=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
