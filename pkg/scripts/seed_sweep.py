"""Rerun one experiment over several seeds and tabulate its acceptance checks."""
import argparse
from pathlib import Path

from rodl.experiments import load_config, run_experiment

ap = argparse.ArgumentParser()
ap.add_argument("config", nargs="?", default=str(Path(__file__).resolve().parents[1] / "configs" / "one_layer.yaml"))
ap.add_argument("--seeds", default="0,1,2,3")
args = ap.parse_args()

base = load_config(args.config)
for seed in (int(s) for s in args.seeds.split(",")):
    b = run_experiment(base.with_seed(seed))
    cells = " ".join(f"{k}={c['value']:.4g}{'' if c['pass'] else '(FAIL)'}" for k, c in b.checks.items())
    print(f"seed {seed}: {cells}", flush=True)
