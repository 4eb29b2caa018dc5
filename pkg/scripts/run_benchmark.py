"""Full ablation grid on the synthetic benchmark (every mode, seeds 0-2).

    ucam gen-data --seed 0 --out data
    python scripts/run_benchmark.py --config configs/benchmark.json --out runs/benchmark

Writes ablation.csv, ablation_summary.csv, provenance.json and one run
directory per (mode, seed) holding its checkpoint and config.
"""
import argparse
import json
import logging
from pathlib import Path

from ucam import data as D
from ucam.experiment import ABLATION_MODES, RunConfig, ablate, write_json


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config", default="configs/benchmark.json")
    ap.add_argument("--out", default="runs/benchmark")
    ap.add_argument("--modes", default=",".join(ABLATION_MODES))
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    cfg = RunConfig.from_dict(json.loads(Path(args.config).read_text()))
    if not D.dataset_exists(cfg.data):
        D.generate_dataset(cfg.data, 0)
    out = Path(args.out)
    modes = tuple(args.modes.split(","))
    seeds = tuple(int(s) for s in args.seeds.split(","))
    ablate(cfg, modes, seeds, out)
    write_json(out / "provenance.json", {"config": cfg.to_dict(), "modes": modes, "seeds": seeds,
                                         "data_checksums": D.read_manifest(cfg.data).checksums})


if __name__ == "__main__":
    main()
