import json

import numpy as np
import pytest
import yaml

from rodl.experiments import ConfigError, config_from_dict, error_table, load_config, run_experiment


def _scenario(path, name="tiny", label=0, seed=1):
    path.write_text(yaml.safe_dump({
        "name": name, "label": label, "coarse": [3, 3], "refine": 3, "extents": [1.0, 1.0],
        "kappa_m": {"type": "lognormal", "sigma": 0.3, "smooth": 1.0, "seed": seed, "mean": 1.0},
        "source": {"type": "bump", "center": [0.5, 0.5], "width": 0.2, "amplitude": 1.0},
    }))
    return path.name


def _cfg(tmp_path, tag="one-layer", **over):
    d = {
        "name": "tiny", "tag": tag, "scenarios": [_scenario(tmp_path / "s.yaml")],
        "seeds": {"data": 0, "split": 0, "init": 0, "train": 0},
        "dataset": {"count": 40, "T": 1, "test": 0.25, "pre_steps": 2},
        "train": {"epochs": 3, "batch_size": 8},
    }
    d.update(over)
    return d


def test_error_table_layout():
    t = error_table({"a": np.array([0.01, 0.02346]), "b": np.array([0.5, 0.0])})
    assert t.splitlines() == ["sample,a,b", "#1,1.00,50.00", "#2,2.35,0.00", "Mean,1.67,25.00"]


@pytest.mark.parametrize("edit, msg", [
    (lambda d: d.update(tag="bogus"), "tag"),
    (lambda d: d.update(scenarios=[]), "scenarios"),
    (lambda d: d.update(scenarios=["missing.yaml"]), "not found"),
    (lambda d: d.pop("seeds"), "seeds"),
    (lambda d: d["seeds"].pop("train"), "seeds"),
    (lambda d: d["dataset"].update(T=3), "T must be 1"),
    (lambda d: d["dataset"].update(count=1), "count"),
    (lambda d: d["train"].update(seed=5), "seeds.train"),
    (lambda d: d["train"].update(learning_rate=1.0), "unknown field"),
    (lambda d: d.update(model={"depth": 1, "colour": 2}), "unknown field"),
])
def test_config_rejects(tmp_path, edit, msg):
    d = _cfg(tmp_path)
    edit(d)
    with pytest.raises(ConfigError, match=msg):
        config_from_dict(d, tmp_path)


def test_clustering_needs_two_scenarios(tmp_path):
    with pytest.raises(ConfigError, match="two"):
        config_from_dict(_cfg(tmp_path, tag="clustering"), tmp_path)


def test_load_config_bad_yaml(tmp_path):
    (tmp_path / "c.yaml").write_text("tag: [unclosed\n")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.yaml")


def test_digest_tracks_scenario_content(tmp_path):
    cfg = config_from_dict(_cfg(tmp_path), tmp_path)
    d0 = cfg.digest()
    assert config_from_dict(_cfg(tmp_path), tmp_path).digest() == d0
    _scenario(tmp_path / "s.yaml", seed=9)
    assert cfg.digest() != d0
    assert cfg.with_seed(3).seeds.train == 3


def test_shipped_configs_load():
    from pathlib import Path
    root = Path(__file__).resolve().parents[1] / "configs"
    for f in sorted(root.glob("*.yaml")):
        cfg = load_config(f)
        assert cfg.scenarios and all(p.is_file() for p in cfg.scenarios)


def test_one_layer_bundle(tmp_path):
    cfg = config_from_dict(_cfg(tmp_path), tmp_path)
    b = run_experiment(cfg)
    rows = b.tables["prediction_error"].splitlines()
    assert rows[0].startswith("sample,") and rows[-1].startswith("Mean,")
    assert len(rows) == 1 + 10 + 1
    out = b.write(tmp_path / "out")
    man = json.loads((out / "manifest.json").read_text())
    assert man["config_sha256"] == cfg.digest() and man["seeds"]["train"] == 0
    assert (out / "checkpoints" / "nn.rodl").is_file()
    assert set(json.loads((out / "metrics.json").read_text())) == {"metrics", "checks"}


def test_truncation_is_deterministic(tmp_path):
    d = _cfg(tmp_path, tag="truncation")
    a = run_experiment(config_from_dict(d, tmp_path))
    b = run_experiment(config_from_dict(d, tmp_path))
    assert a.tables == b.tables
    assert a.curves == b.curves
    assert "truncation_error" in a.tables


def test_multi_layer_columns(tmp_path):
    d = _cfg(tmp_path, tag="multi-layer")
    d["dataset"]["T"] = 3
    b = run_experiment(config_from_dict(d, tmp_path))
    assert b.tables["prediction_error"].splitlines()[0] == "sample,U1,U2,U3"
    assert len(b.metrics["step_means"]) == 3


def test_clustering_tables(tmp_path):
    d = _cfg(tmp_path, tag="clustering")
    d["scenarios"] = [_scenario(tmp_path / "a.yaml", "a", 1, 1), _scenario(tmp_path / "b.yaml", "b", 2, 7)]
    b = run_experiment(config_from_dict(d, tmp_path))
    head = b.tables["comparison"].splitlines()[0].split(",")
    assert head[1:] == ["cluster1_separate", "cluster1_mixed", "cluster2_separate", "cluster2_mixed"]
    assert set(b.checkpoints) == {"cluster1", "cluster2", "mixed"}
    assert set(b.checks) == {"cluster1_ratio", "cluster2_ratio"}


def test_eigen_subspace_bundle(tmp_path):
    d = _cfg(tmp_path, tag="eigen-subspace", reduction={"r": 2})
    b = run_experiment(config_from_dict(d, tmp_path))
    assert b.metrics["r"] == 2
    assert len(b.curves["block_true"].splitlines()) == 2
    assert set(b.checks) == {"block_rel", "full_over_block"}
