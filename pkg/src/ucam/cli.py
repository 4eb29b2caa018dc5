"""Command line entry point: ``ucam <command> ...``.

Configuration precedence is defaults < ``--config`` file < ``UCAM_SEED`` < flags.
Exit codes: 0 ok, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from . import experiment as E
from . import losses as L

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parse_value(v):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


# flags that map straight onto RunConfig fields
CONFIG_FLAGS = {"mode": str, "seed": int, "data": str, "epochs": int, "batch": int, "lr": float,
                "mc_T": int, "eta_loss": float, "lam": float, "gamma": float}


def build_config(args, env=None):
    """Resolve a RunConfig from defaults, config file, environment and flags."""
    env = os.environ if env is None else env
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        try:
            values.update(json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from e
    if env.get("UCAM_SEED") not in (None, ""):
        try:
            values["seed"] = int(env["UCAM_SEED"])
        except ValueError as e:
            raise UsageError(f"UCAM_SEED must be an integer, got {env['UCAM_SEED']!r}") from e
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k] = _parse_value(v)
    for k in CONFIG_FLAGS:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    try:
        cfg = E.RunConfig.from_dict(values)
        cfg.validate()
    except (ValueError, TypeError) as e:
        raise UsageError(str(e)) from e
    return cfg


def _add_config_flags(p):
    p.add_argument("--config", help="flat JSON config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    for k, t in CONFIG_FLAGS.items():
        p.add_argument(f"--{k.replace('_', '-')}", dest=k, type=t)


def _run_dir(args, cfg):
    if args.out:
        return Path(args.out)
    return Path(args.runs) / (args.name or f"{cfg.mode}_s{cfg.seed}")


def _require_run(path):
    run = Path(path)
    if not (run / "checkpoint.bin").exists() or not (run / "checkpoint.json").exists():
        raise FileNotFoundError(f"missing checkpoint: {run / 'checkpoint.bin'}")
    return E.load_run(run)


def _require_data(path):
    if not D.dataset_exists(path):
        raise FileNotFoundError(f"no dataset at {path} (run gen-data first)")


# --- commands ------------------------------------------------------------------

def cmd_gen_data(args):
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        print(f"refusing to overwrite existing {out} (use --force)", file=sys.stderr)
        return EXIT_USAGE
    sizes = {"train": args.train, "val": args.val, "test": args.test}
    seed = args.seed
    if seed is None:
        seed = int(os.environ.get("UCAM_SEED") or 0)
    m = D.generate_dataset(out, seed, sizes)
    print(json.dumps({"out": str(out), "seed": m.seed, "sizes": m.sizes,
                      "checksums": m.checksums}, indent=2))
    return EXIT_OK


def cmd_train(args):
    cfg = build_config(args)
    _require_data(cfg.data)
    run = _run_dir(args, cfg)
    cfg = cfg.replace(out=str(run))
    E.train_run(cfg)
    print(f"trained {cfg.mode} seed {cfg.seed} -> {run}")
    print((run / "metrics.json").read_text(), end="")
    return EXIT_OK


def _split(args, cfg):
    data = args.data or cfg.data
    _require_data(data)
    return E.load_split(data, args.split)


def cmd_eval(args):
    params, cfg = _require_run(args.run)
    records, enc = _split(args, cfg)
    result = E.evaluate(params, records, enc, cfg)
    run = Path(args.run)
    E.write_rows(run / f"eval_{args.split}.csv", result["rows"])
    E.write_json(run / f"eval_{args.split}.json", {"split": args.split, **result["summary"]})
    print(json.dumps(result["summary"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_explain(args):
    params, cfg = _require_run(args.run)
    records, _ = _split(args, cfg)
    if args.records:
        wanted = args.records.split(",")
        by_id = {r.record_id: r for r in records}
        missing = [w for w in wanted if w not in by_id]
        if missing:
            raise UsageError(f"unknown record ids: {', '.join(missing)}")
        chosen = [by_id[w] for w in wanted]
    else:
        chosen = records[:args.n]
    out = Path(args.run) / "explain"
    for rec in chosen:
        png, js = E.write_explanation(out, E.explain_record(params, rec, cfg))
        print(png, js)
    return EXIT_OK


def cmd_analyze(args):
    params, cfg = _require_run(args.run)
    records, enc = _split(args, cfg)
    result = E.analyze(params, records, enc, cfg, T=args.T)
    E.write_analysis(Path(args.run) / "analyze", result)
    print(json.dumps(result["summary_stats"], indent=2, sort_keys=True))
    return EXIT_OK


def cmd_ablate(args):
    cfg = build_config(args)
    _require_data(cfg.data)
    modes = tuple(args.modes.split(",")) if args.modes else E.ABLATION_MODES
    for m in modes:
        try:
            L.get_mode(m)
        except ValueError as e:
            raise UsageError(str(e)) from e
    seeds = tuple(int(s) for s in args.seeds.split(","))
    out = Path(args.out or Path(args.runs) / "ablation")
    E.ablate(cfg, modes, seeds, out, save_runs=not args.no_save_runs)
    print((out / "ablation_summary.csv").read_text(), end="")
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def build_parser():
    ap = argparse.ArgumentParser(prog="ucam", description="Uncertainty-aware VQA attention runs")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic dataset")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="data")
    p.add_argument("--train", type=int, default=D.DEFAULT_SIZES["train"])
    p.add_argument("--val", type=int, default=D.DEFAULT_SIZES["val"])
    p.add_argument("--test", type=int, default=D.DEFAULT_SIZES["test"])
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one mode")
    _add_config_flags(p)
    p.add_argument("--runs", default="runs")
    p.add_argument("--name", help="run directory name under --runs")
    p.add_argument("--out", help="explicit run directory")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "accuracy, rank correlation and EMD"),
                                 ("explain", cmd_explain, "certainty heatmaps"),
                                 ("analyze", cmd_analyze, "uncertainty vs error reports")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--run", required=True, help="run directory with a checkpoint")
        p.add_argument("--data", help="dataset directory (default: the run's)")
        p.add_argument("--split", default="test", choices=D.SPLITS)
        if name == "explain":
            p.add_argument("--records", help="comma-separated record ids")
            p.add_argument("--n", type=int, default=4, help="first N records if --records is unset")
        if name == "analyze":
            p.add_argument("--T", type=int, default=None, help="MC samples (default: analysis_T)")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="every mode across seeds, Table-style CSV")
    _add_config_flags(p)
    p.add_argument("--modes", help="comma-separated modes (default: all)")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--runs", default="runs")
    p.add_argument("--out", help="output directory (default: <runs>/ablation)")
    p.add_argument("--no-save-runs", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, D.DatasetError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
