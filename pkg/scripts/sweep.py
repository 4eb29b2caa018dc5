"""Train a handful of modes under config overrides and print test metrics.

    python scripts/sweep.py --data data --modes baseline,p-gca --seeds 0 --set lr=1e-3
"""
import argparse
import json
import time

from ucam import data as D
from ucam.experiment import RunConfig, load_split, run_one


def parse_value(v):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="data")
    ap.add_argument("--modes", default="baseline,aul,pul,a-gca,p-gca")
    ap.add_argument("--seeds", default="0")
    ap.add_argument("--set", action="append", default=[], help="key=value override")
    args = ap.parse_args()
    overrides = {k: parse_value(v) for k, v in (s.split("=", 1) for s in args.set)}
    cfg = RunConfig(data=args.data).replace(**overrides)
    _, train_enc = load_split(args.data, "train")
    test_records, test_enc = load_split(args.data, "test")
    for mode in args.modes.split(","):
        for seed in map(int, args.seeds.split(",")):
            t0 = time.time()
            _, row = run_one(cfg.replace(mode=mode, seed=seed), test_records, test_enc, train_enc)
            print(json.dumps({k: (round(v, 4) if isinstance(v, float) else v)
                              for k, v in row.items()}), f"{time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
