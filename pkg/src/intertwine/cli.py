"""Command line entry point ``itw``.

Exit codes: 0 pass, 1 check failure, 2 inconclusive, 3 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ThreadPoolExecutor

from . import scenarios, verify
from .config import ConfigError, loads

EXIT_PASS, EXIT_FAIL, EXIT_INCONCLUSIVE, EXIT_CONFIG = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # usage errors are configuration errors, not the argparse default of 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="itw", description="Intertwined diffusion couplings: simulate and certify.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one or more scenarios")
    run.add_argument("scenario", nargs="*", help="scenario names, or 'all'; defaults to the one in --config")
    run.add_argument("--config", metavar="FILE", help="key = value overrides for a single scenario")
    run.add_argument("--seed", type=int)
    run.add_argument("--paths", type=int, dest="n_paths")
    run.add_argument("--dt", type=float)
    run.add_argument("--out", metavar="DIR", help="write the check CSV, .dat curves and ensembles here")
    run.add_argument("--mutate-drift", action="store_true", help="negate the link term in the Y drift")
    run.add_argument("--parallel", nargs="?", type=int, const=0, default=None, metavar="N",
                     help="run scenarios concurrently (N threads, default one per scenario); "
                          "results do not depend on N")
    sub.add_parser("list", help="list scenario names")
    sub.add_parser("verify-kernels", help="run the kernel PDE residual suite")
    return p


def _configs(args) -> list:
    names = list(args.scenario)
    base_text = None
    if args.config:
        try:
            with open(args.config) as fh:
                base_text = fh.read()
        except OSError as exc:
            raise ConfigError(f"cannot read {args.config}: {exc}") from None
        if not names:
            from .config import parse_config

            name = parse_config(base_text).get("scenario")
            if name is None:
                raise ConfigError("the config file names no scenario")
            names = [name]
    if names == ["all"]:
        names = scenarios.list_scenarios()
    if not names:
        raise ConfigError("name a scenario (see 'itw list')")
    if base_text is not None and len(names) > 1:
        raise ConfigError("--config applies to a single scenario")
    out = []
    for name in names:
        cfg = scenarios.default_config(name)
        if base_text is not None:
            cfg = loads(base_text, base=cfg)
        over = {k: v for k, v in (("seed", args.seed), ("n_paths", args.n_paths), ("dt", args.dt)) if v is not None}
        if args.out is not None:
            over["out"] = args.out
        if args.mutate_drift:
            over["mutate"] = True
        if args.parallel:
            over["workers"] = args.parallel
        out.append(dataclasses.replace(cfg, **over))
    return out


def _print_result(res: scenarios.ScenarioResult) -> None:
    name = res.config.scenario
    print(f"# {name}  seed={res.config.seed} n_paths={res.config.n_paths} dt={res.config.dt:g} T={res.config.T:g}"
          f"{'  [mutated drift]' if res.config.mutate else ''}")
    print(f"{'check':40s} {'statistic':>12s} {'n':>8s} {'threshold':>12s}  status")
    for c in res.checks:
        tag = "" if c.mandatory else " (advisory)"
        print(f"{c.check:40s} {c.statistic:12.5g} {c.n:8d} {c.threshold:12.5g}  {c.status}{tag}")
        if c.note and c.status != "pass":
            print(f"    {c.note}")
    verdict = {0: "PASS", 1: "FAIL", 2: "INCONCLUSIVE"}[res.exit_code]
    print(f"{name}: {verdict} ({res.wall_time:.1f} s)\n")


def _cmd_run(args) -> int:
    cfgs = _configs(args)
    for cfg in cfgs:
        # reject bad configs before any simulation starts
        scenarios.validate_config(cfg)
    if args.parallel is not None and len(cfgs) > 1:
        with ThreadPoolExecutor(max_workers=args.parallel or len(cfgs)) as ex:
            results = list(ex.map(scenarios.run_scenario, cfgs))
    else:
        results = [scenarios.run_scenario(c) for c in cfgs]
    for res in results:
        _print_result(res)
        if res.config.out:
            scenarios.emit_plotdata(res, res.config.out)
    codes = {r.exit_code for r in results}
    return EXIT_FAIL if EXIT_FAIL in codes else EXIT_INCONCLUSIVE if EXIT_INCONCLUSIVE in codes else EXIT_PASS


def _cmd_verify() -> int:
    ok = True
    print(f"{'kernel':24s} {'max_abs':>11s} {'tol':>8s} {'r(h)/r(h/2)':>12s}  status")
    for e, rep, (order_ok, _, _, ratio) in verify.run_suite():
        passed = rep.passed and order_ok
        if e.acceptance:
            ok &= passed
        tag = "" if e.acceptance else " (extended)"
        print(f"{e.name:24s} {rep.max_abs:11.3e} {rep.tol:8.0e} {ratio:12.3g}  {'pass' if passed else 'FAIL'}{tag}")
    return EXIT_PASS if ok else EXIT_FAIL


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "list":
            print("\n".join(scenarios.list_scenarios()))
            return EXIT_PASS
        if args.command == "verify-kernels":
            return _cmd_verify()
        return _cmd_run(args)
    except ConfigError as exc:
        print(f"itw: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except scenarios.ScenarioError as exc:
        print(f"itw: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
