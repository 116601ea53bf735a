"""Config-driven experiment pipelines producing deterministic result tables.

An experiment config is a YAML mapping::

    name: one-layer
    tag: one-layer            # eigen-subspace | one-layer | truncation | multi-layer | clustering
    scenarios: [scenarios/lognormal.yaml]
    seeds: {data: 0, split: 0, init: 0, train: 0}
    dataset: {count: 500, T: 1, test: 0.02, dt: 0.01, layers: 2,
              law: u2, pre_steps: 10, scheme: implicit-lagged}
    model: {eta: 0.01, depth: 1, activation: tanh, noise: 0.01, w2: orthogonal}
    train: {lr: 0.01, epochs: 1000, batch_size: 16, gamma_scale: 0.2}
    reduction: {r: 7, scale: 0.05, s_grid: null, s_compare: null}
    acceptance: {...}          # optional thresholds, see ``_ACCEPTANCE``
    cache: ../.cache           # optional dataset cache directory

Relative paths resolve against the config file's directory.
"""
from __future__ import annotations

import copy
import hashlib
import json
import platform
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .dynamics import (CoarseModel, NonlinearLaw, SplitSpec, TrajectoryDataset, build_coarse_model,
                       gen_dataset, gen_initial_conditions, split, subspace_sample)
from .grid import load_scenario
from .reduction import dominance, eigen_subspace_compare, rel_l2_rows, scaled_s_grid, truncation_error_curve
from .ronet import RonetModel, predict
from .training import TrainConfig, TrainReport, init_model, train

TAGS = ("eigen-subspace", "one-layer", "truncation", "multi-layer", "clustering")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class DatasetParams:
    count: int = 500
    T: int = 1
    test: float = 0.02
    dt: float = 0.01
    layers: int = 2
    law: str = "u2"
    law_eps: float = 0.0
    pre_steps: int = 10
    scheme: str = "implicit-lagged"


@dataclass
class ModelParams:
    eta: float = 1.0
    depth: int = 1
    width: int | None = None
    activation: str = "tanh"
    noise: float = 1e-2
    w2: str = "orthogonal"


@dataclass
class ReductionParams:
    r: int | None = None          # eigen-subspace dimension, default round(m / 15)
    scale: float = 1.0            # coefficient scale of subspace samples
    s_grid: list[int] | None = None
    s_compare: int | None = None  # s of the three-way comparison table


@dataclass
class Seeds:
    data: int
    split: int
    init: int
    train: int


@dataclass
class ExperimentConfig:
    name: str
    tag: str
    scenarios: list[Path]
    seeds: Seeds
    dataset: DatasetParams = field(default_factory=DatasetParams)
    model: ModelParams = field(default_factory=ModelParams)
    train: TrainConfig = field(default_factory=TrainConfig)
    reduction: ReductionParams = field(default_factory=ReductionParams)
    acceptance: dict = field(default_factory=dict)
    cache: Path | None = None
    raw: dict = field(default_factory=dict, repr=False)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = copy.deepcopy(self)
        cfg.seeds = Seeds(seed, seed, seed, seed)
        cfg.train.seed = seed
        cfg.raw["seeds"] = {"data": seed, "split": seed, "init": seed, "train": seed}
        return cfg

    def digest(self) -> str:
        """Hash of the canonical config content (scenario files included)."""
        h = hashlib.sha256()
        h.update(json.dumps(_canonical(self.raw), sort_keys=True).encode())
        for p in self.scenarios:
            h.update(Path(p).read_bytes())
        return h.hexdigest()


def _canonical(obj):
    if isinstance(obj, dict):
        return {str(k): _canonical(v) for k, v in obj.items() if k != "cache"}
    if isinstance(obj, (list, tuple)):
        return [_canonical(v) for v in obj]
    return obj


def _build(cls, d: dict | None, what: str):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{what}: unknown field(s) {sorted(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from exc


def config_from_dict(d: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(d, dict):
        raise ConfigError("experiment config must be a mapping")
    base = Path(base_dir or ".")
    tag = d.get("tag")
    if tag not in TAGS:
        raise ConfigError(f"unknown experiment tag {tag!r}; expected one of {TAGS}")
    scen = d.get("scenarios")
    if not scen or not isinstance(scen, list):
        raise ConfigError("scenarios: a non-empty list of scenario files is required")
    paths = [(base / s).resolve() for s in scen]
    for p in paths:
        if not p.is_file():
            raise ConfigError(f"scenario file not found: {p}")
    if tag == "clustering" and len(paths) != 2:
        raise ConfigError("clustering needs exactly two scenarios")
    seeds = d.get("seeds")
    if not isinstance(seeds, dict) or set(seeds) != {"data", "split", "init", "train"}:
        raise ConfigError("seeds: explicit data, split, init and train seeds are required")
    try:
        seeds = Seeds(**{k: int(v) for k, v in seeds.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"seeds: {exc}") from exc
    ds = _build(DatasetParams, d.get("dataset"), "dataset")
    if tag in ("one-layer", "truncation", "clustering", "eigen-subspace") and ds.T != 1:
        raise ConfigError(f"{tag} uses one-step pairs; dataset.T must be 1")
    if ds.count < 2:
        raise ConfigError("dataset.count must be at least 2")
    tr = dict(d.get("train") or {})
    if "seed" in tr:
        raise ConfigError("train.seed is set through seeds.train")
    tr["seed"] = seeds.train
    cache = d.get("cache")
    return ExperimentConfig(
        name=str(d.get("name", tag)), tag=tag, scenarios=paths, seeds=seeds, dataset=ds,
        model=_build(ModelParams, d.get("model"), "model"),
        train=_build(TrainConfig, tr, "train"),
        reduction=_build(ReductionParams, d.get("reduction"), "reduction"),
        acceptance=dict(d.get("acceptance") or {}),
        cache=(base / cache).resolve() if cache else None, raw=copy.deepcopy(d))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            d = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    return config_from_dict(d, path.parent)


# ---------------------------------------------------------------------------
# results
# ---------------------------------------------------------------------------

@dataclass
class ResultBundle:
    name: str
    tag: str
    tables: dict[str, str]
    curves: dict[str, str]
    metrics: dict[str, float]
    checks: dict[str, dict]
    manifest: dict
    checkpoints: dict[str, RonetModel] = field(default_factory=dict)
    reports: dict[str, TrainReport] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c["pass"] for c in self.checks.values())

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        (out / "tables").mkdir(parents=True, exist_ok=True)
        (out / "curves").mkdir(exist_ok=True)
        (out / "checkpoints").mkdir(exist_ok=True)
        for k, v in self.tables.items():
            (out / "tables" / f"{k}.csv").write_text(v)
        for k, v in self.curves.items():
            (out / "curves" / f"{k}.csv").write_text(v)
        for k, m in self.checkpoints.items():
            m.save(out / "checkpoints" / f"{k}.rodl")
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        (out / "metrics.json").write_text(json.dumps({"metrics": self.metrics, "checks": self.checks},
                                                     indent=2, sort_keys=True) + "\n")
        (out / "train_reports.json").write_text(
            json.dumps({k: r.to_dict() for k, r in self.reports.items()}, indent=2) + "\n")
        return out

    def summary(self) -> str:
        lines = [f"{self.name} [{self.tag}]"]
        for k, c in self.checks.items():
            lines.append(f"  {'PASS' if c['pass'] else 'FAIL'} {k}: {c['value']:.4g} "
                         f"{c['op']} {c['threshold']:.4g}")
        return "\n".join(lines)


def _pct(x: float) -> str:
    return f"{100.0 * x:.2f}"


def error_table(columns: dict[str, np.ndarray], index_label: str = "sample") -> str:
    """One row per sample (``#1``...), a final mean row, percentages to two decimals."""
    names = list(columns)
    n = len(next(iter(columns.values())))
    rows = [",".join([index_label] + names)]
    for i in range(n):
        rows.append(",".join([f"#{i + 1}"] + [_pct(columns[c][i]) for c in names]))
    rows.append(",".join(["Mean"] + [_pct(float(np.mean(columns[c]))) for c in names]))
    return "\n".join(rows) + "\n"


def _check(value: float, op: str, threshold: float) -> dict:
    ok = value <= threshold if op == "<=" else value >= threshold
    return {"value": float(value), "op": op, "threshold": float(threshold), "pass": bool(ok)}


def _manifest(cfg: ExperimentConfig, extra: dict) -> dict:
    return {
        "name": cfg.name, "tag": cfg.tag, "config_sha256": cfg.digest(), "config": _canonical(cfg.raw),
        "scenarios": {p.name: p.read_text() for p in cfg.scenarios},
        "seeds": vars(cfg.seeds),
        "versions": {"rodl": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        **extra,
    }


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

def _law(ds: DatasetParams) -> NonlinearLaw:
    return NonlinearLaw(ds.law, ds.law_eps)


def _model_for(path: Path, ds: DatasetParams) -> CoarseModel:
    return build_coarse_model(load_scenario(path), ds.dt, ds.layers)


def _ic_key(path: Path, ds: DatasetParams, seed: int, count: int) -> str:
    h = hashlib.sha256(Path(path).read_bytes())
    h.update(json.dumps([ds.dt, ds.layers, ds.law, ds.law_eps, ds.pre_steps, ds.scheme, seed, count]).encode())
    return h.hexdigest()[:20]


def initial_states(cfg: ExperimentConfig, model: CoarseModel, path: Path) -> np.ndarray:
    ds = cfg.dataset
    seed = cfg.seeds.data
    if cfg.cache is not None:
        f = cfg.cache / f"ics-{_ic_key(path, ds, seed, ds.count)}.rodl"
        if f.exists():
            U0 = TrajectoryDataset.load(f).trajectories[:, 0]
            if U0.shape == (ds.count, model.m):
                return U0
    U0 = gen_initial_conditions(model, ds.count, _law(ds), ds.pre_steps, seed, ds.scheme)
    if cfg.cache is not None:
        TrajectoryDataset(U0[:, None, :], np.zeros(ds.count, dtype=np.int64),
                          {"scenario": path.name, "seed": seed}).save(f)
    return U0


def build_dataset(cfg: ExperimentConfig, index: int = 0, model: CoarseModel | None = None) -> tuple[CoarseModel, TrajectoryDataset]:
    path = cfg.scenarios[index]
    model = model or _model_for(path, cfg.dataset)
    U0 = initial_states(cfg, model, path)
    label = model.scenario.label if model.scenario is not None else index
    meta = {"scenario": model.scenario.name, "seed": cfg.seeds.data, "pre_steps": cfg.dataset.pre_steps}
    return model, gen_dataset(model.cs, U0, cfg.dataset.T, label, meta)


def _split(cfg: ExperimentConfig, data: TrajectoryDataset):
    return split(data, SplitSpec(1.0 - cfg.dataset.test, cfg.dataset.test, cfg.seeds.split))


def _fit(cfg: ExperimentConfig, train_set: TrajectoryDataset, init_offset: int = 0):
    mp = cfg.model
    net = init_model(train_set.m, train_set.T, cfg.seeds.init + init_offset, mp.eta, depth=mp.depth,
                     width=mp.width, activation_name=mp.activation, noise=mp.noise, w2=mp.w2)
    return train(net, train_set, cfg.train)


# ---------------------------------------------------------------------------
# pipelines
# ---------------------------------------------------------------------------

def _one_layer(cfg: ExperimentConfig, truncation: bool) -> ResultBundle:
    model, data = build_dataset(cfg)
    tr, te = _split(cfg, data)
    net, rep = _fit(cfg, tr)
    p = net.layers[0]
    truth = te.targets[:, 0]
    nn = predict(net, te.inputs)[:, 0]
    err = rel_l2_rows(nn, truth)
    order = dominance(p, tr.inputs)
    prof = order.sorted_scores
    m = p.m
    tables = {"prediction_error": error_table({"error_pct": err})}
    curves = {"dominance_profile": "k,coordinate,S\n" + "".join(
        f"{k + 1},{j},{s:.12e}\n" for k, (j, s) in enumerate(zip(order.order, prof)))}
    k4 = max(1, m // 4)
    sparsity_ratio = float(prof[k4 - 1] / prof[0]) if prof[0] > 0 else 0.0
    metrics = {"m": m, "mean_error": float(err.mean()), "sparsity_ratio_m4": sparsity_ratio,
               "gamma": p.gamma, "orth_residual": rep.orth_residuals[0]}
    acc = {**_ACCEPTANCE["truncation" if truncation else "one-layer"], **cfg.acceptance}
    checks = {"mean_error": _check(err.mean(), "<=", acc["max_mean_error"]),
              "sparsity_ratio_m4": _check(sparsity_ratio, "<=", acc["max_sparsity_ratio"])}
    if truncation:
        grid = cfg.reduction.s_grid or scaled_s_grid(m)
        s_mid = int(round(0.18 * m))
        grid = sorted(set(int(s) for s in grid) | {s_mid, m})
        curve = truncation_error_curve(p, order, te.inputs, truth, grid)
        tables["truncation_error"] = error_table({f"s={s}": curve.errors[i] for i, s in enumerate(grid)})
        curves["truncation_mean"] = "s,mean_error\n" + "".join(
            f"{s},{e:.12e}\n" for s, e in zip(grid, curve.mean))
        s_cmp = cfg.reduction.s_compare or int(round(100 * m / 445))
        ci = grid.index(s_cmp) if s_cmp in grid else None
        if ci is None:
            c2 = truncation_error_curve(p, order, te.inputs, truth, [s_cmp])
            e_s, e_sn = c2.errors[0], c2.to_nn[0]
        else:
            e_s, e_sn = curve.errors[ci], curve.to_nn[ci]
        tables["comparison"] = error_table({"nn_vs_true": err, "reduced_vs_true": e_s, "reduced_vs_nn": e_sn})
        # split ||L_s - truth|| <= ||NN - truth|| + ||L_s - NN||, in relative units
        nn_norm = np.linalg.norm(nn, axis=1) / np.linalg.norm(truth, axis=1)
        slack = err + curve.to_nn * nn_norm - curve.errors
        ratio = curve.error_at(s_mid) / max(err.mean(), 1e-300)
        metrics.update({"s_mid": s_mid, "error_at_s_mid": curve.error_at(s_mid), "ratio_s_mid": ratio,
                        "max_uptick": curve.max_uptick(), "full_linear_error": float(curve.mean[-1]),
                        "triangle_min_slack": float(slack.min())})
        checks.update({
            "ratio_s_mid": _check(ratio, "<=", acc["max_truncation_ratio"]),
            "max_uptick": _check(curve.max_uptick(), "<=", acc["max_uptick"]),
            "triangle_min_slack": _check(float(slack.min()), ">=", -1e-12),
        })
    extra = {"m": m, "train_count": len(tr), "test_count": len(te)}
    return ResultBundle(cfg.name, cfg.tag, tables, curves, metrics, checks, _manifest(cfg, extra),
                        {"nn": net}, {"nn": rep})


def _eigen_subspace(cfg: ExperimentConfig) -> ResultBundle:
    model = _model_for(cfg.scenarios[0], cfg.dataset)
    cs = model.cs
    m = cs.m
    r = cfg.reduction.r or max(1, int(round(m / 15)))
    U0 = subspace_sample(cs, r, cfg.dataset.count, cfg.seeds.data, cfg.reduction.scale)
    data = gen_dataset(cs, U0, 1, 0, {"scenario": model.scenario.name, "r": r})
    tr, te = _split(cfg, data)
    net, rep = _fit(cfg, tr)
    p = net.layers[0]
    cmp = eigen_subspace_compare(cs, p, r)
    block, full, ref = cmp.block_distance(), cmp.full_distance(), cmp.block_norm()
    lam_l = cmp.learned_diagonal()
    curves = {"diagonal": "i,lambda_true,lambda_learned\n" + "".join(
        f"{i + 1},{a:.12e},{b:.12e}\n" for i, (a, b) in enumerate(zip(cmp.lam, lam_l)))}
    curves["block_true"] = _matrix_csv(cmp.T_true[:r, :r])
    curves["block_learned"] = _matrix_csv(cmp.T_learned[:r, :r])
    err = rel_l2_rows(predict(net, te.inputs)[:, 0], te.targets[:, 0])
    tables = {"prediction_error": error_table({"error_pct": err}),
              "subspace_summary": "quantity,value\n" + "".join(f"{k},{v:.6e}\n" for k, v in [
                  ("r", r), ("block_distance", block), ("block_norm", ref), ("full_distance", full),
                  ("true_offdiag_max", cmp.off_diagonal_true())])}
    acc = {**_ACCEPTANCE["eigen-subspace"], **cfg.acceptance}
    metrics = {"m": m, "r": r, "block_rel": block / ref, "full_over_block": full / max(block, 1e-300),
               "true_offdiag_max": cmp.off_diagonal_true(), "mean_error": float(err.mean()), "gamma": p.gamma}
    checks = {"block_rel": _check(block / ref, "<=", acc["max_block_rel"]),
              "full_over_block": _check(full / max(block, 1e-300), ">=", acc["min_full_over_block"])}
    return ResultBundle(cfg.name, cfg.tag, tables, curves, metrics, checks,
                        _manifest(cfg, {"m": m, "r": r}), {"nn": net}, {"nn": rep})


def _matrix_csv(A: np.ndarray) -> str:
    return "".join(",".join(f"{v:.12e}" for v in row) + "\n" for row in A)


def _multi_layer(cfg: ExperimentConfig) -> ResultBundle:
    model, data = build_dataset(cfg)
    tr, te = _split(cfg, data)
    net, rep = _fit(cfg, tr)
    pred = predict(net, te.inputs)
    cols = {f"U{t + 1}": rel_l2_rows(pred[:, t], te.targets[:, t]) for t in range(net.T)}
    means = [float(np.mean(v)) for v in cols.values()]
    acc = {**_ACCEPTANCE["multi-layer"], **cfg.acceptance}
    metrics = {"m": net.m, "T": net.T, "step_means": means, "worst_step_mean": max(means)}
    checks = {"worst_step_mean": _check(max(means), "<=", acc["max_step_mean_error"])}
    return ResultBundle(cfg.name, cfg.tag, {"prediction_error": error_table(cols)}, {}, metrics, checks,
                        _manifest(cfg, {"m": net.m, "T": net.T}), {"nn": net}, {"nn": rep})


def _clustering(cfg: ExperimentConfig) -> ResultBundle:
    parts = []
    for k in range(2):
        _, data = build_dataset(cfg, k)
        tr, te = _split(cfg, data)
        parts.append((data.labels[0], tr, te))
    if parts[0][1].m != parts[1][1].m:
        raise ConfigError(f"cluster scenarios have different m ({parts[0][1].m} vs {parts[1][1].m})")
    nets, reports, sep, mixed_err = {}, {}, {}, {}
    for k, (_, tr, te) in enumerate(parts):
        nets[f"cluster{k + 1}"], reports[f"cluster{k + 1}"] = _fit(cfg, tr, init_offset=k + 1)
    mixed_tr = TrajectoryDataset.concat([parts[0][1], parts[1][1]])
    nets["mixed"], reports["mixed"] = _fit(cfg, mixed_tr)
    for k, (_, _, te) in enumerate(parts):
        truth = te.targets[:, 0]
        sep[k] = rel_l2_rows(predict(nets[f"cluster{k + 1}"], te.inputs)[:, 0], truth)
        mixed_err[k] = rel_l2_rows(predict(nets["mixed"], te.inputs)[:, 0], truth)
    tables = {
        "separate": error_table({"cluster1_error": sep[0], "cluster2_error": sep[1]}),
        "mixed": error_table({"cluster1_error": mixed_err[0], "cluster2_error": mixed_err[1]}),
        "comparison": error_table({"cluster1_separate": sep[0], "cluster1_mixed": mixed_err[0],
                                   "cluster2_separate": sep[1], "cluster2_mixed": mixed_err[1]}),
    }
    acc = {**_ACCEPTANCE["clustering"], **cfg.acceptance}
    metrics, checks = {"m": parts[0][1].m}, {}
    for k in range(2):
        ratio = float(sep[k].mean() / max(mixed_err[k].mean(), 1e-300))
        metrics[f"cluster{k + 1}_separate"] = float(sep[k].mean())
        metrics[f"cluster{k + 1}_mixed"] = float(mixed_err[k].mean())
        metrics[f"cluster{k + 1}_ratio"] = ratio
        checks[f"cluster{k + 1}_ratio"] = _check(ratio, "<=", acc["max_separate_over_mixed"])
    return ResultBundle(cfg.name, cfg.tag, tables, {}, metrics, checks,
                        _manifest(cfg, {"m": parts[0][1].m}), nets, reports)


_ACCEPTANCE = {
    "one-layer": {"max_mean_error": 0.10, "max_sparsity_ratio": 0.10},
    "truncation": {"max_mean_error": 0.10, "max_sparsity_ratio": 0.10, "max_truncation_ratio": 2.5,
                   "max_uptick": 0.01},
    "eigen-subspace": {"max_block_rel": 0.1, "min_full_over_block": 3.0},
    "multi-layer": {"max_step_mean_error": 0.15},
    "clustering": {"max_separate_over_mixed": 0.5},
}


def run_experiment(cfg: ExperimentConfig) -> ResultBundle:
    if cfg.tag == "one-layer":
        return _one_layer(cfg, truncation=False)
    if cfg.tag == "truncation":
        return _one_layer(cfg, truncation=True)
    if cfg.tag == "eigen-subspace":
        return _eigen_subspace(cfg)
    if cfg.tag == "multi-layer":
        return _multi_layer(cfg)
    if cfg.tag == "clustering":
        return _clustering(cfg)
    raise ConfigError(f"unknown tag {cfg.tag!r}")
