"""Command-line entry point: ``qflow {run,validate,resume,sweep}``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace

from .checkpoint import CheckpointError, load_checkpoint
from .config import PRESETS, ConfigError, build_problem, config_hash, get_preset, parse_config
from .runner import EXIT_ERROR, run_scenario, validate_scenario

OUT_ENV = "QFLOW_OUT"


def _load(args):
    if bool(args.config) == bool(args.preset):
        raise ConfigError("give exactly one of --config or --preset")
    if args.config:
        with open(args.config) as fh:
            cfg = parse_config(fh.read())
    else:
        cfg = get_preset(args.preset)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg):
    if args.out:
        return args.out
    if cfg.output_dir:
        return cfg.output_dir
    return os.path.join(os.environ.get(OUT_ENV, "qflow-out"), cfg.name)


def _report(rec):
    s = rec.summary
    keys = ("status", "exit_code", "stop_reason", "t_final", "lambda_inf", "final_residual_Lg")
    print(json.dumps({k: s[k] for k in keys if k in s}))


def cmd_run(args):
    cfg = _load(args)
    rec = run_scenario(cfg, _out_dir(args, cfg), force=args.force, seed=args.seed)
    if rec.validation is not None and not rec.validation.ok:
        print(rec.validation.format(), file=sys.stderr)
    _report(rec)
    return rec.exit_code


def cmd_validate(args):
    cfg = _load(args)
    rep = validate_scenario(cfg, args.seed)
    print(rep.format())
    return 0 if rep.ok else 5


def cmd_resume(args):
    cfg = _load(args)
    if args.t_max is not None:
        cfg = replace(cfg, flow=replace(cfg.flow, t_max=args.t_max))
    prob = build_problem(cfg, args.seed)
    state = load_checkpoint(args.checkpoint, prob.background, config_hash(cfg))
    rec = run_scenario(cfg, _out_dir(args, cfg), force=args.force, seed=args.seed, resume_state=state)
    _report(rec)
    return rec.exit_code


def _sweep_one(job):
    name, out, force, seed = job
    cfg = get_preset(name)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    rec = run_scenario(cfg, os.path.join(out, name), force=force, seed=seed)
    return name, rec.exit_code, rec.status


def cmd_sweep(args):
    names = args.presets or list(PRESETS)
    out = args.out or os.environ.get(OUT_ENV, "qflow-out")
    jobs = [(n, out, args.force, args.seed) for n in names]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    worst = 0
    for name, code, status in results:
        print(f"{name}: exit {code} ({status})")
        worst = max(worst, code)
    return worst


def build_parser():
    parser = argparse.ArgumentParser(prog="qflow", description="Q-curvature flow simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="scenario config file")
            p.add_argument("--preset", help=f"named preset ({', '.join(PRESETS)})")
        p.add_argument("--out", help=f"output directory (default ${OUT_ENV}/<name>)")
        p.add_argument("--force", action="store_true", help="run even if hypotheses are violated")
        p.add_argument("--seed", type=int, help="seed for random initial data")

    p = sub.add_parser("run", help="run a scenario")
    common(p)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("validate", help="check theorem hypotheses without running")
    common(p)
    p.set_defaults(func=cmd_validate)
    p = sub.add_parser("resume", help="continue a run from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--t-max", type=float, help="new final time")
    p.set_defaults(func=cmd_resume)
    p = sub.add_parser("sweep", help="run several presets")
    common(p, config=False)
    p.add_argument("presets", nargs="*", help="preset names (default: all)")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"qflow: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
