"""Grid search on the validation split (accuracy and rank correlation only).

    python scripts/tune.py --modes baseline,a-gca,p-gca --grid sigma0=1.75,2.0 --grid eta_loss=0.25,0.5
"""
import argparse
import itertools
import json
import time

from ucam.experiment import RunConfig, evaluate, load_split, train


def parse_value(v):
    try:
        return json.loads(v)
    except json.JSONDecodeError:
        return v


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--data", default="data")
    ap.add_argument("--modes", default="baseline,a-gca,p-gca")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--set", action="append", default=[], help="fixed key=value override")
    ap.add_argument("--grid", action="append", default=[], help="key=v1,v2,... to sweep")
    args = ap.parse_args()
    base = RunConfig(data=args.data, seed=args.seed).replace(
        **{k: parse_value(v) for k, v in (s.split("=", 1) for s in args.set)})
    axes = [(k, [parse_value(x) for x in vs.split(",")])
            for k, vs in (g.split("=", 1) for g in args.grid)]
    _, train_enc = load_split(args.data, "train")
    val_records, val_enc = load_split(args.data, "val")
    for combo in itertools.product(*[vals for _, vals in axes]):
        over = dict(zip([k for k, _ in axes], combo))
        for mode in args.modes.split(","):
            t0 = time.time()
            cfg = base.replace(mode=mode, **over)
            ev = evaluate(train(cfg, train_enc), val_records, val_enc, cfg, with_emd=False)["summary"]
            print(json.dumps({"mode": mode, **over, "val_accuracy": round(ev["accuracy"], 4),
                              "val_rc": round(ev["rank_correlation"], 4)}),
                  f"{time.time() - t0:.0f}s", flush=True)


if __name__ == "__main__":
    main()
