import csv
import io
import json
import shutil

import numpy as np
import pytest

from icunet import cli
from icunet import clinical_data as cd
from icunet import nn_core as nn


def make_fixture(root, patients=40, seed=0, missing_rate=0.2, epochs=4, **overrides):
    schema = cd.synthetic_schema(n_continuous=8, n_binary=2)
    tls = cd.synthesize_dataset(seed, patients, schema, missing_rate)
    return write_fixture(root, schema, tls, epochs=epochs, **overrides)


def write_fixture(root, schema, timelines, epochs=4, **overrides):
    root.mkdir(parents=True, exist_ok=True)
    (root / "data.csv").write_text(cd.write_dataset(timelines, schema))
    (root / "schema.json").write_text(schema.dumps())
    cfg = {"dataset": "data.csv", "schema": "schema.json", "output_dir": "out",
           "train": {"hidden_layers": [8, 4], "epochs": epochs, "batch_size": 16}}
    cfg.update(overrides)
    (root / "config.json").write_text(json.dumps(cfg))
    return root / "config.json"


def test_config_round_trip(tmp_path):
    path = make_fixture(tmp_path)
    cfg = cli.PipelineConfig.load(path)
    again = cli.PipelineConfig.from_dict(json.loads(cfg.dumps()), cfg.base_dir)
    assert again == cfg and again.dumps() == cfg.dumps()
    with pytest.raises(cli.ConfigError, match="unknown"):
        cli.PipelineConfig.from_dict({"dataset": "x", "output_dir": "y", "bogus": 1})
    with pytest.raises(cli.ConfigError, match="unknown keys in \\[train\\]"):
        cli.PipelineConfig.from_dict({"dataset": "x", "output_dir": "y", "train": {"lr": 1}})


def test_prepare_deterministic(tmp_path):
    path = make_fixture(tmp_path, patients=10)
    assert cli.main(["prepare", "--config", str(path)]) == 0
    first = {p.name: p.read_bytes() for p in (tmp_path / "out" / "prepared").iterdir()}
    assert cli.main(["prepare", "--config", str(path)]) == 0
    second = {p.name: p.read_bytes() for p in (tmp_path / "out" / "prepared").iterdir()}
    assert first == second
    summary = json.loads(first["ingest_summary.json"])
    assert summary["patients"] == 10 and summary["records"] == 50
    train_ids = {r["patient_id"] for r in csv.DictReader(io.StringIO(first["train.csv"].decode()))}
    test_ids = {r["patient_id"] for r in csv.DictReader(io.StringIO(first["test.csv"].decode()))}
    assert not train_ids & test_ids


def test_prepare_zero_usable(tmp_path, capsys):
    schema = cd.synthetic_schema(n_continuous=3, n_binary=1)
    tls = cd.synthesize_dataset(0, 6, schema)
    for tl in tls:
        tl.icu_flags = {w: True for w in tl.windows}
    path = write_fixture(tmp_path, schema, tls)
    assert cli.main(["prepare", "--config", str(path)]) == cli.EXIT_DATA
    assert "zero usable patients" in capsys.readouterr().err


def test_missing_dataset_is_config_error_and_writes_nothing(tmp_path, capsys):
    path = make_fixture(tmp_path)
    (tmp_path / "data.csv").unlink()
    assert cli.main(["run-all", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_widths_and_determinism(tmp_path):
    path = make_fixture(tmp_path)
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    h1 = cli.cmd_train(cfg)
    h2 = cli.cmd_train(cfg)
    assert h1 == h2
    model = nn.load_model((tmp_path / "out" / "models" / "initial.json").read_bytes())
    assert model.architecture.layer_widths == (13, 8, 4, 1)

    schema = cd.FeatureSchema.loads((tmp_path / "schema.json").read_text())
    plan = {"kept": schema.names[:10], "dropped": schema.names[10:], "schema_version": 2}
    (tmp_path / "plan.json").write_text(json.dumps(plan))
    assert cli.main(["train", "--config", str(path), "--plan", str(tmp_path / "plan.json")]) == 0
    final = nn.load_model((tmp_path / "out" / "models" / "final.json").read_bytes())
    assert final.architecture.n_inputs == 10 and final.schema_version == 2
    ev = json.loads((tmp_path / "out" / "models" / "final_eval.json").read_text())
    assert ev["param_count"] == nn.param_count(final.architecture)


def test_train_without_prepare_is_data_error(tmp_path):
    path = make_fixture(tmp_path)
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_DATA


def test_explain_null_model(tmp_path):
    path = make_fixture(tmp_path)
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    model = nn.init_parameters(nn.MlpArchitecture((13, 3, 1)), 0)
    model.weights[0][:] = 0.0
    (tmp_path / "null.json").write_bytes(nn.save_model(model))
    assert cli.main(["explain", "--config", str(path), "--model", str(tmp_path / "null.json")]) == 0
    out = tmp_path / "out" / "explain"
    impacts = [float(r["impact"]) for r in csv.DictReader(io.StringIO((out / "initial_impact.csv").read_text()))]
    assert impacts == [0.0] * 13
    plan = json.loads((out / "initial_prune_plan.json").read_text())
    assert plan["dropped"] == [] and len(plan["kept"]) == 13
    chart = (out / "initial_chart.csv").read_text().strip().splitlines()
    assert len(chart) == 1 + 2 * 13


def test_explain_rejects_schema_version_mismatch(tmp_path):
    path = make_fixture(tmp_path)
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    model = nn.init_parameters(nn.MlpArchitecture((13, 3, 1)), 0, schema_version=2)
    (tmp_path / "m.json").write_bytes(nn.save_model(model))
    assert cli.main(["explain", "--config", str(path), "--model", str(tmp_path / "m.json")]) == cli.EXIT_DATA


def test_trust_single_gender(tmp_path):
    schema = cd.synthetic_schema(n_continuous=4, n_binary=1)
    tls = cd.synthesize_dataset(1, 30, schema)
    g = schema.index("GENDER")
    for tl in tls:
        for rec in tl.windows.values():
            rec[g] = 0.0
    path = write_fixture(tmp_path, schema, tls)
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    cli.cmd_train(cfg)
    cli.cmd_trust(cfg, tmp_path / "out" / "models" / "initial.json")
    summary = json.loads((tmp_path / "out" / "trust" / "final_trust_summary.json").read_text())
    assert [e["group"] for e in summary["spectra"]["gender"]] == ["gender=0"]
    assert "fewer than 2 groups" in summary["fairness_gaps"]["gender"]["error"]
    assert 0.0 <= summary["net_trust_score"] <= 1.0


def test_trust_missing_grouping_column(tmp_path):
    schema = cd.FeatureSchema((cd.Feature("a"), cd.Feature("b")))
    tls = cd.synthesize_dataset(0, 12, schema)
    path = write_fixture(tmp_path, schema, tls)
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    cli.cmd_train(cfg)
    with pytest.raises(cd.DataError, match="absent"):
        cli.cmd_trust(cfg, tmp_path / "out" / "models" / "initial.json")


def _artifact_kinds(manifest):
    names = manifest["artifacts"]
    return {
        "models": [n for n in names if n.startswith("models/") and n.endswith(("initial.json", "final.json"))],
        "evals": [n for n in names if n.endswith("_eval.json")],
        "impact": [n for n in names if n.endswith("_impact.csv")],
        "plans": [n for n in names if n.endswith("_prune_plan.json")],
        "trust": [n for n in names if n.endswith("_trust_summary.json")],
    }


def test_run_all_topology_and_determinism(tmp_path):
    path = make_fixture(tmp_path / "a", patients=60)
    m1 = cli.cmd_run_all(cli.PipelineConfig.load(path))
    kinds = _artifact_kinds(m1)
    assert {k: len(v) for k, v in kinds.items()} == {"models": 2, "evals": 2, "impact": 1,
                                                     "plans": 1, "trust": 1}
    assert [s["status"] for s in m1["stages"]] == ["ok"] * 5
    for rel, digest in m1["artifacts"].items():
        assert cli.sha256_bytes((tmp_path / "a" / "out" / rel).read_bytes()) == digest

    plan = json.loads((tmp_path / "a" / "out" / "explain" / "initial_prune_plan.json").read_text())
    final = nn.load_model((tmp_path / "a" / "out" / "models" / "final.json").read_bytes())
    assert final.architecture.n_inputs == 13 - len(plan["dropped"])
    assert len(plan["kept"]) + len(plan["dropped"]) == 13

    shutil.rmtree(tmp_path / "a" / "out")
    m2 = cli.cmd_run_all(cli.PipelineConfig.load(path))
    assert m2["artifacts"] == m1["artifacts"] and m2["digest"] == m1["digest"]


def test_stage_isolation(tmp_path):
    path = make_fixture(tmp_path, patients=30)
    cfg = cli.PipelineConfig.load(path)
    m1 = cli.cmd_run_all(cfg)
    for sub in ("explain", "trust"):
        shutil.rmtree(tmp_path / "out" / sub)
    (tmp_path / "out" / "models" / "final.json").unlink()
    out = tmp_path / "out"
    hashes = cli.cmd_explain(cfg, out / "models" / "initial.json")
    hashes |= cli.cmd_train(cfg, out / "explain" / "initial_prune_plan.json", "final")
    hashes |= cli.cmd_trust(cfg, out / "models" / "final.json", out / "explain" / "initial_prune_plan.json")
    for rel, digest in hashes.items():
        assert m1["artifacts"][rel] == digest


def test_run_all_failure_reports_stage(tmp_path, capsys):
    path = make_fixture(tmp_path, explain={"method": "ablation", "top_k": 15, "iterations": 1},
                        trust={"groupings": ["shoe_size"]})
    assert cli.main(["run-all", "--config", str(path)]) == cli.EXIT_CONFIG
    assert "trust_final" in capsys.readouterr().err
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["stages"][-1] == {"stage": "trust_final", "status": "failed"}
    assert (tmp_path / "out" / "models" / "final.json").exists()


def test_divergence_exit_code(tmp_path):
    path = make_fixture(tmp_path, train={"hidden_layers": [4], "epochs": 3, "initial_lr": 1e308})
    cli.cmd_prepare(cli.PipelineConfig.load(path))
    assert cli.main(["train", "--config", str(path)]) == cli.EXIT_DIVERGENCE


def test_synthesize_and_schema_commands(tmp_path):
    assert cli.main(["synthesize", "--out", str(tmp_path / "s"), "--patients", "12"]) == 0
    assert (tmp_path / "s" / "config.json").exists()
    assert cli.main(["schema", str(tmp_path / "s" / "dataset.csv"), "--out", str(tmp_path / "i.json")]) == 0
    inferred = cd.FeatureSchema.loads((tmp_path / "i.json").read_text())
    declared = cd.FeatureSchema.loads((tmp_path / "s" / "schema.json").read_text())
    assert inferred.names == declared.names


def test_atomic_write_leaves_no_temp_files(tmp_path):
    digest = cli.atomic_write(tmp_path / "x" / "f.txt", "hello")
    assert digest == cli.sha256_bytes(b"hello")
    assert [p.name for p in (tmp_path / "x").iterdir()] == ["f.txt"]


def test_trust_split_all_counts(tmp_path):
    path = make_fixture(tmp_path, trust={"split": "all"})
    cfg = cli.PipelineConfig.load(path)
    cli.cmd_prepare(cfg)
    cli.cmd_train(cfg)
    cli.cmd_trust(cfg, tmp_path / "out" / "models" / "initial.json")
    summary = json.loads((tmp_path / "out" / "trust" / "final_trust_summary.json").read_text())
    ingest = json.loads((tmp_path / "out" / "prepared" / "ingest_summary.json").read_text())
    assert summary["samples"] == ingest["rows"]
    assert sum(e["count"] for e in summary["spectra"]["gender"]) == ingest["rows"]
    assert np.isclose(sum(e["count"] * e["trust"] for e in summary["spectra"]["gender"]) / ingest["rows"],
                      summary["net_trust_score"], rtol=0, atol=1e-12)
