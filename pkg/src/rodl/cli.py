"""Command-line entry point: ``rodl <verb> [options]``.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure,
4 acceptance threshold missed.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_THRESHOLD = 0, 2, 3, 4


def _set_threads(n: int | None) -> None:
    # must run before numpy is first imported to take effect
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(n)


def _load_cfg(args):
    from .experiments import load_config
    cfg = load_config(args.config)
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _out(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# verbs
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .dynamics import gen_dataset, subspace_sample
    from .experiments import _model_for, build_dataset
    cfg = _load_cfg(args)
    out = _out(args, "data")
    for k, path in enumerate(cfg.scenarios):
        model = _model_for(path, cfg.dataset)
        model.cs.save(out / f"{path.stem}.system.rodl")
        if cfg.tag == "eigen-subspace":
            r = cfg.reduction.r or max(1, round(model.m / 15))
            U0 = subspace_sample(model.cs, r, cfg.dataset.count, cfg.seeds.data, cfg.reduction.scale)
            data = gen_dataset(model.cs, U0, 1, 0, {"r": r, "scenario": model.scenario.name})
        else:
            _, data = build_dataset(cfg, k, model)
        f = data.save(out / f"{path.stem}.data.rodl")
        print(f"{f}: m={data.m} T={data.T} count={len(data)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .dynamics import TrajectoryDataset
    from .experiments import _fit, _split, build_dataset, error_table
    from .reduction import rel_l2_rows
    from .ronet import predict
    cfg = _load_cfg(args)
    out = _out(args, "train")
    data = TrajectoryDataset.load(args.data) if args.data else build_dataset(cfg)[1]
    tr, te = _split(cfg, data)
    net, rep = _fit(cfg, tr)
    net.save(out / "model.rodl")
    tr.save(out / "train.rodl")
    te.save(out / "test.rodl")
    (out / "train_report.json").write_text(json.dumps(rep.to_dict(), indent=2) + "\n")
    pred = predict(net, te.inputs)
    cols = {f"U{t + 1}": rel_l2_rows(pred[:, t], te.targets[:, t]) for t in range(net.T)}
    table = error_table(cols)
    (out / "prediction_error.csv").write_text(table)
    print(table, end="")
    if rep.orth_flagged:
        print("warning: orthogonality residual above the report threshold", file=sys.stderr)
    return EXIT_OK


def cmd_reduce(args) -> int:
    from .dynamics import TrajectoryDataset
    from .experiments import error_table
    from .reduction import dominance, scaled_s_grid, truncation_error_curve
    from .ronet import RonetModel
    net = RonetModel.load(args.checkpoint)
    p = net.layers[0]
    tr = TrajectoryDataset.load(args.train)
    te = TrajectoryDataset.load(args.test)
    order = dominance(p, tr.inputs)
    grid = [int(s) for s in args.s_grid.split(",")] if args.s_grid else scaled_s_grid(p.m)
    curve = truncation_error_curve(p, order, te.inputs, te.targets[:, 0], grid)
    out = _out(args, "reduce")
    table = error_table({f"s={s}": curve.errors[i] for i, s in enumerate(grid)})
    (out / "truncation_error.csv").write_text(table)
    (out / "dominance_profile.csv").write_text("k,coordinate,S\n" + "".join(
        f"{k + 1},{j},{s:.12e}\n" for k, (j, s) in enumerate(zip(order.order, order.sorted_scores))))
    print(table, end="")
    return EXIT_OK


def cmd_eigen_compare(args) -> int:
    from .nlmc import CoarseSystem
    from .reduction import eigen_subspace_compare
    from .ronet import RonetModel
    cs = CoarseSystem.load(args.system)
    net = RonetModel.load(args.checkpoint)
    r = args.r or max(1, round(cs.m / 15))
    cmp = eigen_subspace_compare(cs, net.layers[0], r)
    block, full, ref = cmp.block_distance(), cmp.full_distance(), cmp.block_norm()
    print(f"m={cs.m} r={r}")
    print(f"leading block distance {block:.4e} ({block / ref:.2%} of the true block)")
    print(f"full distance {full:.4e} ({full / max(block, 1e-300):.2f}x the block distance)")
    if args.out:
        out = _out(args, "eigen")
        (out / "diagonal.csv").write_text("i,lambda_true,lambda_learned\n" + "".join(
            f"{i + 1},{a:.12e},{b:.12e}\n" for i, (a, b) in enumerate(zip(cmp.lam, cmp.learned_diagonal()))))
    return EXIT_OK if block <= 0.1 * ref and full >= 3 * block else EXIT_THRESHOLD


def cmd_run(args) -> int:
    from .experiments import run_experiment
    cfg = _load_cfg(args)
    bundle = run_experiment(cfg)
    out = bundle.write(_out(args, f"results/{cfg.name}"))
    for name, table in bundle.tables.items():
        print(f"== {name}")
        print(table, end="")
    print(bundle.summary())
    print(f"results written to {out}")
    return EXIT_OK if bundle.passed else EXIT_THRESHOLD


def inspect_path(path) -> str:
    """Human-readable summary of a dataset, checkpoint or coarse-system file."""
    import numpy as np
    from .numerics import load_container, read_header
    kind = read_header(path)["kind"]
    arrays, _ = load_container(path)
    lines = [f"{path}: {kind}"]
    if kind == "trajectory-dataset":
        from .dynamics import TrajectoryDataset
        ds = TrajectoryDataset.load(path)
        norms = np.linalg.norm(ds.trajectories, axis=2)
        lines += [f"  m={ds.m} T={ds.T} count={len(ds)} labels={sorted(set(ds.labels.tolist()))}",
                  "  |U^t| mean per step: " + " ".join(f"{v:.4g}" for v in norms.mean(axis=0)),
                  f"  max |entry| {np.max(np.abs(ds.trajectories)):.4g}"]
    elif kind == "ronet-checkpoint":
        from .ronet import RonetModel, orth_residual
        net = RonetModel.load(path)
        lines.append(f"  m={net.m} T={net.T} eta={net.eta}")
        for t, p in enumerate(net.layers):
            shapes = "x".join(str(w.shape[0]) for w in p.W1)
            lines.append(f"  layer {t}: depth={p.depth} widths={shapes} activation={p.activation} "
                         f"gamma={p.gamma:.4g} |W2^T W2 - I|_1={orth_residual(p.W2):.4g} "
                         f"|W1|_F={np.linalg.norm(p.W1[0]):.4g}")
    elif kind == "coarse-system":
        from .nlmc import CoarseSystem
        cs = CoarseSystem.load(path)
        lam, _ = cs.eigen()
        lines += [f"  m={cs.m} dt={cs.dt} basis={'yes' if cs.Phi is not None else 'no'}",
                  f"  eigenvalues of W_hat in [{lam[-1]:.4g}, {lam[0]:.4g}]",
                  f"  |F|={np.linalg.norm(cs.F):.4g} |b_hat|={np.linalg.norm(cs.b_hat):.4g}"]
    else:
        lines += [f"  {k}: {v.dtype} {v.shape}" for k, v in arrays.items()]
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    print(inspect_path(args.path))
    return EXIT_OK


def corrupt_gradients(grads):
    """Negative-control hook: perturb one gradient entry."""
    grads = [[g.copy() for g in layer] for layer in grads]
    grads[0][0].flat[0] += 1.0 + abs(grads[0][0].flat[0])
    return grads


def cmd_gradcheck(args) -> int:
    from .numerics import rng_stream
    from .ronet import RonetModel
    from .training import fd_check, init_model
    seed = args.seed if args.seed is not None else 0
    if min(args.m, args.T, args.depth, args.batch) < 1:
        print("sizes must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    if args.checkpoint:
        net = RonetModel.load(args.checkpoint)
    else:
        net = init_model(args.m, args.T, seed, args.eta, depth=args.depth, activation_name=args.activation,
                         noise=0.3, w2="gaussian")
        for p in net.layers:
            p.gamma = args.gamma
    traj = rng_stream(seed, 55).standard_normal((args.batch, net.T + 1, net.m))
    try:
        dev = fd_check(net, traj, args.h, args.kink_margin, corrupt_gradients if args.corrupt else None)
    except ValueError as exc:
        print(f"gradcheck: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    ok = dev <= args.tol
    print(f"max relative deviation {dev:.3e} (tolerance {args.tol:.0e}): {'pass' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_THRESHOLD


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS thread count")

    ap = argparse.ArgumentParser(prog="rodl", description="Reduced-order soft-thresholding networks for multiscale flow.")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="build coarse systems and trajectory datasets")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", parents=[common], help="train a network on a dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", default=None, help="existing dataset file (default: generate from config)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("reduce", parents=[common], help="dominance ordering and truncation errors")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--s-grid", default=None, help="comma-separated retained-mode counts")
    p.set_defaults(fn=cmd_reduce)

    p = sub.add_parser("eigen-compare", parents=[common], help="compare learned and true maps in the eigenbasis")
    p.add_argument("--system", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--r", type=int, default=None)
    p.set_defaults(fn=cmd_eigen_compare)

    p = sub.add_parser("run", parents=[common], help="run a full experiment from its config")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("inspect", parents=[common], help="summarize a data, checkpoint or system file")
    p.add_argument("path")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of backprop")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--m", type=int, default=5)
    p.add_argument("--T", type=int, default=2)
    p.add_argument("--depth", type=int, default=1)
    p.add_argument("--activation", default="tanh")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--gamma", type=float, default=0.05)
    p.add_argument("--batch", type=int, default=6)
    p.add_argument("--h", type=float, default=1e-6)
    p.add_argument("--kink-margin", type=float, default=1e-4)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    _set_threads(args.threads)
    from .experiments import ConfigError
    from .grid import GridError
    from .numerics import NumericsError, ParseError
    from .training import Diverged
    try:
        return args.fn(args)
    except (ConfigError, GridError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericsError, Diverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
