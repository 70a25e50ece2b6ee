"""Command-line entry points: generate fixtures, run suites, re-emit reports.

Exit codes: 0 when every selected check passed, 1 when some assertion
failed, 2 on configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from dyadlab import accretive as acc
from dyadlab import fixtures as fx
from dyadlab import grid as gr
from dyadlab import measure as ms
from dyadlab._seeds import derive_seed
from dyadlab.harness import ALL_SUITES, ExperimentConfig, emit_report, run_suite


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    else:
        cfg = ExperimentConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "suite", None):
        cfg.suites = tuple(s.strip() for s in args.suite.split(",") if s.strip())
        unknown = set(cfg.suites) - set(ALL_SUITES)
        if unknown:
            raise ValueError(f"unknown suites: {sorted(unknown)}")
    return cfg


def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = derive_seed(cfg.seed, "measure")
    if cfg.measure_profile == "battery":
        mu = fx.battery_measure(seed, cfg.dimension, cfg.atom_count,
                                d=cfg.growth_exponent)
    else:
        mu = ms.generate_random_measure(seed, cfg.dimension, cfg.growth_exponent,
                                        cfg.atom_count, cfg.measure_profile)
    ms.save_measure(mu, out / "measure.json")
    params = cfg.params()
    sys_f = gr.build_random_system(derive_seed(cfg.seed, "grid:f") % 2 ** 31,
                                   mu, params, window=cfg.window)
    sys_g = gr.build_random_system(derive_seed(cfg.seed, "grid:g") % 2 ** 31,
                                   mu, params, window=cfg.window)
    (out / "system_f.json").write_text(gr.dumps_system(sys_f), encoding="utf-8")
    (out / "system_g.json").write_text(gr.dumps_system(sys_g), encoding="utf-8")
    for tag, system in (("f", sys_f), ("g", sys_g)):
        index = gr.locate(mu, system)
        sys_b = acc.generate_accretive(derive_seed(cfg.seed, f"accr:{tag}") % 2 ** 31,
                                       mu, index, cfg.delta, cfg.accretive_style)
        (out / f"accretive_{tag}.json").write_text(acc.dumps_accretive(sys_b),
                                                   encoding="utf-8")
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    print(f"wrote fixtures for {mu.atom_count} atoms to {out}")
    return 0


def cmd_run(args) -> int:
    cfg = _load_config(args)
    report = run_suite(cfg)
    for line in report.summary_lines():
        print(line)
    if args.out:
        written = emit_report(report, args.out)
        print(f"wrote {', '.join(str(p) for p in written)}")
    failed = [c for c in report.checks if not c.passed]
    print(f"{len(report.checks) - len(failed)}/{len(report.checks)} checks passed "
          f"(config {report.config_hash}, seed {report.seed})")
    return 0 if report.passed else 1


def cmd_report(args) -> int:
    src = Path(args.out) / "report.json"
    if not src.exists():
        print(f"no report at {src}", file=sys.stderr)
        return 2
    data = json.loads(src.read_text(encoding="utf-8"))
    for check in data["checks"]:
        status = "PASS" if check["passed"] else "FAIL"
        print(f"[{status}] {check['suite']}/{check['name']} ({check['anchor']})")
    return 0 if data["passed"] else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="dyadlab",
                                     description="dyadic-martingale verification lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate fixture files")
    p_gen.add_argument("--config", default=None)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", required=True)
    p_gen.set_defaults(func=cmd_gen)

    p_run = sub.add_parser("run", help="run verification suites")
    p_run.add_argument("--config", default=None)
    p_run.add_argument("--suite", default=None,
                       help="comma-separated subset of " + ",".join(ALL_SUITES))
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", default=None)
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="re-print a stored report")
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
