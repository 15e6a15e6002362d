"""Command line pipeline: prepare -> train -> explain -> prune -> retrain -> trust.

Configuration is a JSON document (see ``PipelineConfig``); relative paths are
resolved against the config file's directory. All artifacts are written
atomically under ``output_dir``.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from sklearn.preprocessing import MinMaxScaler

from . import clinical_data as cd
from .explain import (PrunePlan, dataset_impact, emit_impact_chart, project_dataset,
                      prune_features, rank_features)
from .nn_core import (ModelFormatError, SchemaVersionMismatch, TrainingDivergence,
                      ICUNetClassifier, history_csv, load_model, param_count, predict_proba,
                      save_model)
from .trust import TrustParams, trust_report

log = logging.getLogger("icunet")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SplitConfig:
    train_fraction: float = 0.7
    seed: int = 0


@dataclass
class TrainSection:
    hidden_layers: list = field(default_factory=lambda: [220, 100, 5])
    epochs: int = 1000
    initial_lr: float = 0.001
    lr_policy: str = "exponential"
    lr_decay_rate: float = 0.995
    lr_step_factor: float = 0.5
    lr_step_every: int = 100
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    l2_coefficient: float = 0.0
    seed: int = 0
    threshold: float = 0.5


@dataclass
class ExplainSection:
    method: str = "ablation"
    top_k: int = 15
    iterations: int = 1


@dataclass
class TrustSection:
    alpha: float = 1.0
    beta: float = 1.0
    split: str = "test"
    groupings: list = field(default_factory=lambda: ["gender", "age_above_65"])
    bins: int = 20


@dataclass
class PipelineConfig:
    dataset: str
    output_dir: str
    schema: str | None = None
    renormalize: bool = False
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainSection = field(default_factory=TrainSection)
    explain: ExplainSection = field(default_factory=ExplainSection)
    trust: TrustSection = field(default_factory=TrustSection)
    base_dir: str = field(default=".", repr=False, compare=False)

    _SECTIONS = {"split": SplitConfig, "train": TrainSection,
                 "explain": ExplainSection, "trust": TrustSection}

    @classmethod
    def from_dict(cls, d: dict, base_dir: str = ".") -> "PipelineConfig":
        d = dict(d)
        top = {f.name for f in dataclasses.fields(cls)} - {"base_dir"}
        unknown = set(d) - top
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key in ("dataset", "output_dir"):
            if not d.get(key):
                raise ConfigError(f"config key '{key}' is required")
        for name, kind in cls._SECTIONS.items():
            sec = d.get(name, {})
            allowed = {f.name for f in dataclasses.fields(kind)}
            bad = set(sec) - allowed
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            d[name] = kind(**sec)
        return cls(base_dir=base_dir, **d)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("base_dir")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        return cls.from_dict(doc, str(path.parent))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def validate(self):
        if not self.resolve(self.dataset).is_file():
            raise ConfigError(f"dataset not found: {self.dataset}")
        if self.schema and not self.resolve(self.schema).is_file():
            raise ConfigError(f"schema not found: {self.schema}")
        if self.explain.method not in ("ablation", "grad_x_input"):
            raise ConfigError(f"unknown impact method {self.explain.method!r}")
        if self.trust.split not in ("train", "test", "all"):
            raise ConfigError("trust.split must be train, test or all")
        if self.explain.iterations < 1:
            raise ConfigError("explain.iterations must be >= 1")
        try:
            self.classifier()
            TrustParams(self.trust.alpha, self.trust.beta)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def classifier(self, schema_version: int = 1) -> ICUNetClassifier:
        t = self.train
        est = ICUNetClassifier(
            hidden_layer_sizes=tuple(t.hidden_layers), epochs=t.epochs, initial_lr=t.initial_lr,
            lr_policy=t.lr_policy, lr_decay_rate=t.lr_decay_rate, lr_step_factor=t.lr_step_factor,
            lr_step_every=t.lr_step_every, batch_size=t.batch_size, beta1=t.beta1, beta2=t.beta2,
            epsilon=t.epsilon, l2_coefficient=t.l2_coefficient, random_state=t.seed,
            threshold=t.threshold, schema_version=schema_version)
        est.train_config()
        return est


# -- file helpers ------------------------------------------------------------

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def atomic_write(path: Path, data) -> str:
    """Write via a temp file in the same directory and rename; returns the SHA-256."""
    if isinstance(data, str):
        data = data.encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return sha256_bytes(data)


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


# -- stages ------------------------------------------------------------------

def load_schema(cfg: PipelineConfig) -> cd.FeatureSchema:
    if cfg.schema:
        return cd.FeatureSchema.loads(cfg.resolve(cfg.schema).read_text())
    with open(cfg.resolve(cfg.dataset), newline="") as fh:
        return cd.infer_schema(fh)


def cmd_prepare(cfg: PipelineConfig) -> dict:
    """Ingest, impute, label, split; writes ``prepared/`` and returns artifact hashes."""
    schema = load_schema(cfg)
    with open(cfg.resolve(cfg.dataset), newline="") as fh:
        timelines = cd.parse_dataset(fh, schema)
    prepared = cd.prepare(schema, timelines, cfg.split.train_fraction, cfg.split.seed)
    split = prepared.split
    if cfg.renormalize:
        scaler = MinMaxScaler().fit(split.train.X)
        split = cd.SplitDataset(split.train.with_features(schema, scaler.transform(split.train.X)),
                                split.test.with_features(schema, scaler.transform(split.test.X)),
                                split.seed)
    d = cfg.out / "prepared"
    log.info("prepared %d train / %d test rows, %d excluded patients",
             len(split.train), len(split.test), prepared.summary["excluded_patients"])
    return {
        "prepared/schema.json": atomic_write(d / "schema.json", schema.dumps()),
        "prepared/train.csv": atomic_write(d / "train.csv", split.train.to_csv()),
        "prepared/test.csv": atomic_write(d / "test.csv", split.test.to_csv()),
        "prepared/fallback.json": atomic_write(
            d / "fallback.json", _json(dict(zip(schema.names, prepared.fallback)))),
        "prepared/ingest_summary.json": atomic_write(d / "ingest_summary.json",
                                                     _json(prepared.summary)),
    }


def load_split(cfg: PipelineConfig, which: str, plan: PrunePlan | None = None) -> cd.LabeledDataset:
    d = cfg.out / "prepared"
    if not (d / "schema.json").is_file():
        raise FileNotFoundError("prepared splits missing; run 'prepare' first")
    schema = cd.FeatureSchema.loads((d / "schema.json").read_text())
    names = ["train", "test"] if which == "all" else [which]
    parts = [cd.LabeledDataset.from_csv((d / f"{n}.csv").read_text(), schema) for n in names]
    ds = parts[0]
    if len(parts) == 2:
        ds = cd.LabeledDataset(schema, np.vstack([p.X for p in parts]),
                               np.concatenate([p.y for p in parts]),
                               np.concatenate([p.patient_ids for p in parts]),
                               np.concatenate([p.windows for p in parts]),
                               np.concatenate([p.gender for p in parts]),
                               np.concatenate([p.age_above_65 for p in parts]))
    return project_dataset(ds, plan) if plan is not None else ds


def load_plan(path) -> PrunePlan | None:
    return PrunePlan.loads(Path(path).read_text()) if path else None


def cmd_train(cfg: PipelineConfig, plan_path=None, tag=None) -> dict:
    plan = load_plan(plan_path)
    tag = tag or ("final" if plan else "initial")
    train = load_split(cfg, "train", plan)
    test = load_split(cfg, "test", plan)
    est = cfg.classifier(train.schema.version).fit(train.X, train.y)
    report = est.evaluate(test.X, test.y)
    train_report = est.evaluate(train.X, train.y)
    arch = est.model_.architecture
    log.info("%s model %s: test accuracy %.4f", tag, arch.layer_widths, report.accuracy)
    d = cfg.out / "models"
    evald = {"model": tag, "layer_widths": list(arch.layer_widths),
             "param_count": param_count(arch), "schema_version": train.schema.version,
             "test": report.to_dict(), "train": train_report.to_dict()}
    return {
        f"models/{tag}.json": atomic_write(d / f"{tag}.json", save_model(est.model_)),
        f"models/{tag}_history.csv": atomic_write(d / f"{tag}_history.csv", history_csv(est.history_)),
        f"models/{tag}_eval.json": atomic_write(d / f"{tag}_eval.json", _json(evald)),
    }


def _load_model_for(path, dataset: cd.LabeledDataset):
    model = load_model(Path(path).read_bytes(), expected_schema_version=dataset.schema.version)
    if model.architecture.n_inputs != len(dataset.schema):
        raise SchemaVersionMismatch("model input width does not match dataset schema")
    return model


def cmd_explain(cfg: PipelineConfig, model_path, plan_path=None, tag="initial") -> dict:
    plan = load_plan(plan_path)
    train = load_split(cfg, "train", plan)
    model = _load_model_for(model_path, train)
    model_id = sha256_bytes(Path(model_path).read_bytes())[:16]
    report = dataset_impact(model, train, cfg.explain.method, cfg.train.threshold,
                            model_id=model_id)
    new_plan = prune_features(train.schema, report)
    k = min(cfg.explain.top_k, len(train.schema))
    summary = report.summary() | {"dropped": len(new_plan.dropped), "kept": len(new_plan.kept),
                                  "top": rank_features(report, k)[0],
                                  "bottom": rank_features(report, k)[1]}
    log.info("impact: %d negative of %d features", len(new_plan.dropped), len(train.schema))
    d = cfg.out / "explain"
    return {
        f"explain/{tag}_impact.csv": atomic_write(d / f"{tag}_impact.csv", report.to_csv()),
        f"explain/{tag}_impact_summary.json": atomic_write(d / f"{tag}_impact_summary.json", _json(summary)),
        f"explain/{tag}_chart.csv": atomic_write(d / f"{tag}_chart.csv", emit_impact_chart(report, k)),
        f"explain/{tag}_prune_plan.json": atomic_write(d / f"{tag}_prune_plan.json", new_plan.dumps()),
    }


def cmd_trust(cfg: PipelineConfig, model_path, plan_path=None, tag="final") -> dict:
    plan = load_plan(plan_path)
    full_schema = cd.FeatureSchema.loads((cfg.out / "prepared" / "schema.json").read_text())
    needed = {"gender": cd.GENDER_COLUMN, "age_above_65": cd.AGE65_COLUMN}
    for g in cfg.trust.groupings:
        if g not in needed:
            raise ConfigError(f"unknown grouping {g!r}")
        if needed[g] not in full_schema.names:
            raise cd.DataError(f"grouping column {needed[g]} absent from dataset")
    ds = load_split(cfg, cfg.trust.split, plan)
    model = _load_model_for(model_path, ds)
    params = TrustParams(cfg.trust.alpha, cfg.trust.beta)
    rep = trust_report(predict_proba(model, ds.X), ds, cfg.trust.groupings, params,
                       cfg.train.threshold)
    summary = rep.summary() | {"split": cfg.trust.split}
    log.info("net trust score %.4f on %d %s rows", rep.net_trust_score, len(ds), cfg.trust.split)
    d = cfg.out / "trust"
    return {
        f"trust/{tag}_trust_summary.json": atomic_write(d / f"{tag}_trust_summary.json", _json(summary)),
        f"trust/{tag}_per_sample.csv": atomic_write(d / f"{tag}_per_sample.csv", rep.per_sample_csv()),
        f"trust/{tag}_density.csv": atomic_write(d / f"{tag}_density.csv",
                                                 rep.density_csv(ds, cfg.trust.bins)),
    }


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def cmd_run_all(cfg: PipelineConfig) -> dict:
    """Full design loop; writes ``manifest.json`` and returns the manifest."""
    cfg.validate()
    started = datetime.now(timezone.utc).isoformat()
    artifacts: dict[str, str] = {}
    stages: list[dict] = []
    out = cfg.out

    def stage(name, fn, *args, **kwargs):
        try:
            res = _run_stage(name, fn, *args, **kwargs)
        except StageError:
            stages.append({"stage": name, "status": "failed"})
            _write_manifest(cfg, artifacts, stages, started)
            raise
        artifacts.update(res)
        stages.append({"stage": name, "status": "ok"})
        return res

    stage("prepare", cmd_prepare, cfg)
    stage("train_initial", cmd_train, cfg, None, "initial")
    model_path, plan_path, tag = out / "models" / "initial.json", None, "initial"
    for it in range(cfg.explain.iterations):
        stage(f"explain_{tag}", cmd_explain, cfg, model_path, plan_path, tag)
        plan_path = out / "explain" / f"{tag}_prune_plan.json"
        tag = "final" if it == cfg.explain.iterations - 1 else f"iter{it + 1}"
        stage(f"train_{tag}", cmd_train, cfg, plan_path, tag)
        model_path = out / "models" / f"{tag}.json"
    stage("trust_final", cmd_trust, cfg, model_path, plan_path, "final")
    return _write_manifest(cfg, artifacts, stages, started)


def _write_manifest(cfg, artifacts, stages, started) -> dict:
    dataset_hash = sha256_bytes(cfg.resolve(cfg.dataset).read_bytes())
    core = {"config": cfg.to_dict(), "dataset_sha256": dataset_hash,
            "artifacts": dict(sorted(artifacts.items()))}
    manifest = core | {
        "digest": sha256_bytes(json.dumps(core, sort_keys=True).encode()),
        "stages": stages,
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
    }
    atomic_write(cfg.out / "manifest.json", _json(manifest))
    return manifest


def cmd_synthesize(out_dir, patients=200, seed=0, missing_rate=0.2, n_continuous=20) -> None:
    """Write a synthetic dataset, its schema, and a starter config."""
    out_dir = Path(out_dir)
    schema = cd.synthetic_schema(n_continuous=n_continuous)
    tls = cd.synthesize_dataset(seed, patients, schema, missing_rate)
    atomic_write(out_dir / "dataset.csv", cd.write_dataset(tls, schema))
    atomic_write(out_dir / "schema.json", schema.dumps())
    cfg = PipelineConfig(dataset="dataset.csv", schema="schema.json", output_dir="run")
    atomic_write(out_dir / "config.json", cfg.dumps())


# -- entry point -------------------------------------------------------------

def _exit_code(exc) -> int:
    cause = exc.cause if isinstance(exc, StageError) else exc
    if isinstance(cause, ConfigError):
        return EXIT_CONFIG
    if isinstance(cause, TrainingDivergence):
        return EXIT_DIVERGENCE
    if isinstance(cause, (cd.DataError, FileNotFoundError, ModelFormatError,
                          SchemaVersionMismatch, KeyError)):
        return EXIT_DATA
    return EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="icunet", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("prepare", "train", "explain", "trust", "run-all"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", help="override output_dir")
        if name in ("train", "explain", "trust"):
            p.add_argument("--plan", help="prune plan selecting the feature subset")
        if name in ("explain", "trust"):
            p.add_argument("--model", required=True)
        if name in ("train", "explain", "trust"):
            p.add_argument("--tag", help="artifact name prefix")
    p = sub.add_parser("synthesize", help="write a synthetic dataset + schema + config")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--missing-rate", type=float, default=0.2)
    p = sub.add_parser("schema", help="infer a schema file from a dataset header")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "synthesize":
            cmd_synthesize(args.out, args.patients, args.seed, args.missing_rate)
            return EXIT_OK
        if args.command == "schema":
            with open(args.dataset, newline="") as fh:
                atomic_write(Path(args.out), cd.infer_schema(fh).dumps())
            return EXIT_OK

        cfg = PipelineConfig.load(args.config)
        if args.out:
            cfg.output_dir = str(Path(args.out).resolve())
        if args.command == "run-all":
            manifest = cmd_run_all(cfg)
            print(json.dumps({"digest": manifest["digest"], "artifacts": len(manifest["artifacts"])}))
            return EXIT_OK
        cfg.validate()
        if args.command == "prepare":
            res = _run_stage("prepare", cmd_prepare, cfg)
        elif args.command == "train":
            res = _run_stage("train", cmd_train, cfg, args.plan, args.tag)
        elif args.command == "explain":
            res = _run_stage("explain", cmd_explain, cfg, args.model, args.plan, args.tag or "initial")
        else:
            res = _run_stage("trust", cmd_trust, cfg, args.model, args.plan, args.tag or "final")
        print(_json(res), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
