"""Shared entry point for the per-experiment scripts."""
import argparse
import sys
import time
from pathlib import Path

from rodl.experiments import load_config, run_experiment

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def main(config_name: str) -> int:
    ap = argparse.ArgumentParser(description=f"run the {config_name} experiment")
    ap.add_argument("--config", default=str(CONFIGS / f"{config_name}.yaml"))
    ap.add_argument("--seed", type=int, default=None, help="override all four seeds")
    ap.add_argument("--out", default=f"results/{config_name}")
    args = ap.parse_args()
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    t0 = time.perf_counter()
    bundle = run_experiment(cfg)
    out = bundle.write(args.out)
    for name, table in bundle.tables.items():
        print(f"== {name}")
        print(table, end="")
    print(bundle.summary())
    print(f"{time.perf_counter() - t0:.1f}s, results in {out}")
    return 0 if bundle.passed else 4


if __name__ == "__main__":
    sys.exit(main(sys.argv[1]))
