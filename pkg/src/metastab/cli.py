"""Command-line entry point: ``metastab run|validate|chain-info``."""
from __future__ import annotations

import argparse
import json
import sys

from .experiments import EXPERIMENTS, ConfigError, run_experiment, validate_config

USAGE_HINT = f"experiments: {', '.join(EXPERIMENTS)}"


def _load(path, parser):
    try:
        return validate_config(path)
    except OSError as exc:
        print(f"error: cannot read {path}: {exc.strerror}", file=sys.stderr)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"violation: {v}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        print(USAGE_HINT, file=sys.stderr)
    return None


def _cmd_run(args, parser) -> int:
    cfg = _load(args.config, parser)
    if cfg is None:
        return 2
    records, status = run_experiment(cfg, workers=args.workers)
    for r in records:
        if r.status != "ok":
            print(f"cell N={r.N} failed: {r.reason}", file=sys.stderr)
    print(f"wrote {cfg.output}/{cfg.experiment}.csv ({len(records)} rows)")
    return status


def _cmd_validate(args, parser) -> int:
    cfg = _load(args.config, parser)
    if cfg is None:
        return 2
    print(json.dumps(cfg.echo(), indent=2, sort_keys=True))
    return 0


def _cmd_chain_info(args, parser) -> int:
    from .chain import check_reversible
    from .zero_range import ZRModel, config_count, read_model_spec, zr_generator, zr_measure, zr_wells

    try:
        spec = read_model_spec(args.modelspec)
    except OSError as exc:
        print(f"error: cannot read {args.modelspec}: {exc.strerror}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    N = args.n if args.n is not None else spec.pop("N", None)
    spec.pop("N", None)
    if N is None:
        print("error: particle number missing (pass --n)", file=sys.stderr)
        return 2
    try:
        model = ZRModel(N=N, **spec)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    n_states = config_count(N, model.kappa)
    info = {"kappa": model.kappa, "N": N, "states": n_states, "gamma": model.gamma,
            "delta": model.delta, "speedup": model.speedup}
    if N >= 2:
        info["scales"] = model.scales.to_record()
    if n_states <= args.max_states and N >= 2:
        chain = zr_generator(model)
        mu, Z = zr_measure(model)
        info.update({"transitions": int(chain.rates.nnz), "irreducible": chain.irreducible,
                     "reversible": check_reversible(chain, mu)[0], "Z": Z})
        try:
            w = zr_wells(model)
            info["well_sizes"] = {str(x): int(w.E[x].size) for x in w.E.labels}
            info["mu_Delta"] = mu.mass(w.E.delta)
        except ValueError as exc:
            info["wells"] = str(exc)
    print(json.dumps(info, indent=2, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metastab", description="Metastability diagnostics for zero-range processes.",
                                epilog=USAGE_HINT)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=None, help="worker threads (overrides config and env)")
    v = sub.add_parser("validate", help="check a config and print its normalized form")
    v.add_argument("config")
    c = sub.add_parser("chain-info", help="summarize the zero-range chain of a model spec")
    c.add_argument("modelspec")
    c.add_argument("--n", type=int, default=None, help="particle number")
    c.add_argument("--max-states", type=int, default=200_000)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"run": _cmd_run, "validate": _cmd_validate, "chain-info": _cmd_chain_info}[args.command]
    return handler(args, parser)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
