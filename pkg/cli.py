"""
Command line: run / validate / replay experiments, or serve the status API.

Exit codes: 0 success, 1 a run or replay failed, 2 the config could not be loaded.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys

from config import API_HOST, API_PORT, LOG_LEVEL, OUTPUT_DIR, PROFILES
from errors import ConfigParseError, ConfigValidationError, SmpcError

logger = logging.getLogger("cli")

EXIT_OK, EXIT_RUN_FAILED, EXIT_CONFIG = 0, 1, 2


def _load(path: str):
    from services.experiment_config import load_config
    try:
        return load_config(path)
    except ConfigParseError as e:
        print(f"config parse error at line {e.line}, column {e.column}: {e}", file=sys.stderr)
    except ConfigValidationError as e:
        fields = f" [{', '.join(e.fields)}]" if e.fields else ""
        print(f"config invalid{fields}: {e}", file=sys.stderr)
    except OSError as e:
        print(f"cannot read config: {e}", file=sys.stderr)
    return None


def cmd_run(args: argparse.Namespace) -> int:
    from services.experiment import run_experiment
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    profile = args.profile or cfg.profile
    try:
        cfg.resolve_profile(profile)
    except ConfigValidationError as e:
        print(f"config invalid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out_dir = args.out or cfg.output_dir or os.path.join(OUTPUT_DIR, cfg.name)
    result = run_experiment(cfg, out_dir, profile=profile, seed_offset=args.seed_offset, jobs=args.jobs)
    print(f"{len(result.rows)} cells written to {result.out_dir / 'summary.csv'}")
    return EXIT_RUN_FAILED if result.failures else EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    from services.experiment import cells_for
    cfg = _load(args.config)
    if cfg is None:
        return EXIT_CONFIG
    profile = args.profile or cfg.profile
    try:
        prof = cfg.resolve_profile(profile)
    except ConfigValidationError as e:
        print(f"config invalid: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{cfg.name}: OK")
    print(f"  methods : {', '.join(cfg.methods)}")
    print(f"  deltas  : {', '.join(repr(d) for d in cfg.deltas)} ({cfg.risk.interpretation} values)")
    print(f"  seeds   : {', '.join(str(s) for s in cfg.seeds)}")
    print(f"  profile : {profile} (t_wait={prof.t_wait}, t_col={prof.t_col}, t_final={prof.t_final}, "
          f"eval={prof.eval_horizon})")
    print(f"  cells   : {len(cells_for(cfg))}")
    return EXIT_OK


def cmd_replay(args: argparse.Namespace) -> int:
    from services.experiment import replay_cell
    cfg = None
    if args.config:
        cfg = _load(args.config)
        if cfg is None:
            return EXIT_CONFIG
    try:
        res = replay_cell(args.cell_dir, cfg)
    except (OSError, SmpcError, KeyError, ValueError) as e:
        print(f"replay failed: {e}", file=sys.stderr)
        return EXIT_RUN_FAILED
    print(f"steps        : {res.steps}")
    print(f"empirical_H  : {res.empirical_H!r}")
    print(f"avg_cost     : {res.avg_cost!r}")
    if res.gamma_sum is not None:
        print(f"gamma_sum    : {res.gamma_sum!r}")
    if res.updates:
        print(f"updates      : {res.updates}")
    if res.final_gamma_tilde is not None:
        print(f"final gamma~ : {';'.join(repr(v) for v in res.final_gamma_tilde)}")
    if res.final_probability is not None:
        print(f"final H_hat  : {res.final_probability!r}")
    return EXIT_OK if res.steps else EXIT_RUN_FAILED


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn
    from main import app
    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smpc", description="Online constraint-tightening experiments")
    p.add_argument("--log-level", default=LOG_LEVEL, help="DEBUG, INFO, WARNING ... (env SMPC_LOG_LEVEL)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run every (method, delta, seed) cell of an experiment")
    r.add_argument("config")
    r.add_argument("--out", default=None, help=f"output directory (default: config output_dir or {OUTPUT_DIR}/<name>)")
    r.add_argument("--profile", default=None, help=f"schedule profile, built-in: {', '.join(PROFILES)}")
    r.add_argument("--seed-offset", type=int, default=0)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="parse and check a config without running it")
    v.add_argument("config")
    v.add_argument("--profile", default=None, help="schedule profile to resolve")
    v.set_defaults(func=cmd_validate)

    rp = sub.add_parser("replay", help="recompute metrics from a stored cell directory")
    rp.add_argument("cell_dir")
    rp.add_argument("--config", default=None, help="experiment config, to redo the final gamma choice")
    rp.set_defaults(func=cmd_replay)

    s = sub.add_parser("serve", help="start the status API")
    s.add_argument("--host", default=API_HOST)
    s.add_argument("--port", type=int, default=API_PORT)
    s.set_defaults(func=cmd_serve)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("--jobs must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
