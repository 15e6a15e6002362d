"""Dataset-level feature impact scoring and the prune step of the retrain loop."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted, check_X_y

from .clinical_data import FeatureSchema, LabeledDataset
from .nn_core import MlpModel, input_gradient, predict_proba

METHODS = ("ablation", "grad_x_input")


@dataclass
class ImpactReport:
    features: list[str]
    scores: np.ndarray
    method: str
    baseline_metric: float
    model_id: str = ""

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float)
        if len(self.scores) != len(self.features):
            raise ValueError("one score per feature required")

    def score_of(self, name: str) -> float:
        return float(self.scores[self.features.index(name)])

    def ranking(self) -> list[int]:
        """Indices by descending impact; stable, so ties keep schema order."""
        return sorted(range(len(self.features)), key=lambda j: -self.scores[j])

    def to_csv(self) -> str:
        rank = {j: r + 1 for r, j in enumerate(self.ranking())}
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["feature", "method", "impact", "rank"])
        for j, name in enumerate(self.features):
            w.writerow([name, self.method, repr(float(self.scores[j])), rank[j]])
        return buf.getvalue()

    def summary(self) -> dict:
        return {"model_id": self.model_id, "method": self.method,
                "baseline_metric": self.baseline_metric,
                "features": len(self.features),
                "negative": int(np.sum(self.scores < 0)),
                "zero": int(np.sum(self.scores == 0)),
                "positive": int(np.sum(self.scores > 0))}


def neutral_values(X: np.ndarray) -> np.ndarray:
    """Column means, with constant columns pinned to their exact value."""
    X = np.asarray(X, dtype=float)
    means = X.mean(axis=0)
    const = np.all(X == X[0], axis=0)
    means[const] = X[0, const]
    return means


def _accuracy(model, X, y, threshold):
    return float(np.mean((predict_proba(model, X) >= threshold).astype(int) == y))


def feature_impact(model: MlpModel, X, y, method: str = "ablation", threshold: float = 0.5,
                   baseline: np.ndarray | None = None, feature_names=None,
                   seed: int = 0, model_id: str = "") -> ImpactReport:
    """Signed impact of each input feature on the model's decisions over ``X``.

    ``ablation``: accuracy drop when the feature is replaced in every row by its
    neutral value (training mean). ``grad_x_input``: mean of
    d(logit)/dx_j * x_j, signed towards the true label.
    ``seed`` is accepted for sampled variants; both methods here are deterministic.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) == 0:
        raise ValueError("impact needs a non-empty 2-d dataset")
    if X.shape[1] != model.architecture.n_inputs:
        raise ValueError(f"dataset has {X.shape[1]} features, model expects {model.architecture.n_inputs}")
    if method not in METHODS:
        raise ValueError(f"unknown impact method {method!r}")
    names = list(feature_names) if feature_names is not None else [f"x{j}" for j in range(X.shape[1])]
    base_acc = _accuracy(model, X, y, threshold)

    if method == "ablation":
        neutral = neutral_values(X) if baseline is None else np.asarray(baseline, dtype=float)
        scores = np.empty(X.shape[1])
        Xa = X.copy()
        for j in range(X.shape[1]):
            Xa[:, j] = neutral[j]
            scores[j] = base_acc - _accuracy(model, Xa, y, threshold)
            Xa[:, j] = X[:, j]
    else:
        sign = (2 * y - 1)[:, None]
        scores = np.mean(input_gradient(model, X) * X * sign, axis=0)
    return ImpactReport(names, scores, method, base_acc, model_id)


def dataset_impact(model: MlpModel, dataset: LabeledDataset, method: str = "ablation",
                   threshold: float = 0.5, seed: int = 0, model_id: str = "") -> ImpactReport:
    return feature_impact(model, dataset.X, dataset.y, method, threshold,
                          feature_names=dataset.schema.names, seed=seed, model_id=model_id)


def rank_features(report: ImpactReport, k: int):
    n = len(report.features)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    order = report.ranking()
    top = [(report.features[j], float(report.scores[j])) for j in order[:k]]
    bottom = [(report.features[j], float(report.scores[j])) for j in order[::-1][:k]]
    return top, bottom


@dataclass
class PrunePlan:
    kept: list[str]
    dropped: list[str]
    threshold_rule: str = "drop impact < 0"
    schema_version: int = 2

    def to_dict(self) -> dict:
        return {"kept": self.kept, "dropped": self.dropped,
                "threshold_rule": self.threshold_rule, "schema_version": self.schema_version}

    @classmethod
    def from_dict(cls, d) -> "PrunePlan":
        return cls(list(d["kept"]), list(d["dropped"]), d.get("threshold_rule", ""),
                   int(d["schema_version"]))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PrunePlan":
        return cls.from_dict(json.loads(text))

    def apply(self, schema: FeatureSchema) -> FeatureSchema:
        """The pruned schema; the plan's version wins over a plain bump."""
        sub = schema.subset(self.kept)
        return FeatureSchema(sub.features, self.schema_version)


def prune_features(schema: FeatureSchema, report: ImpactReport) -> PrunePlan:
    if report.features != schema.names:
        raise ValueError("impact report does not cover the schema feature-for-feature")
    dropped = [n for n, s in zip(report.features, report.scores) if s < 0]
    gone = set(dropped)
    kept = [n for n in schema.names if n not in gone]
    return PrunePlan(kept, dropped, "drop impact < 0", schema.version + 1)


def project_dataset(dataset: LabeledDataset, plan: PrunePlan) -> LabeledDataset:
    unknown = set(plan.kept) - set(dataset.schema.names)
    if unknown:
        raise KeyError(f"plan keeps features absent from dataset schema: {sorted(unknown)}")
    schema = plan.apply(dataset.schema)
    cols = [dataset.schema.index(n) for n in schema.names]
    return dataset.with_features(schema, dataset.X[:, cols].copy())


def emit_impact_chart(report: ImpactReport, k: int = 15) -> str:
    """Two-section CSV (top, bottom) for plotting; bottom is listed least-first."""
    top, bottom = rank_features(report, k)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["section", "rank", "feature", "impact"])
    for r, (name, s) in enumerate(top, 1):
        w.writerow(["top", r, name, repr(s)])
    for r, (name, s) in enumerate(bottom, 1):
        w.writerow(["bottom", r, name, repr(s)])
    return buf.getvalue()


class ImpactPruner(SelectorMixin, BaseEstimator):
    """Feature selector keeping every column whose impact on a fitted network is >= 0.

    ``estimator`` must be a fitted :class:`~icunet.nn_core.ICUNetClassifier`;
    ``fit`` scores the columns of the data it is given (use the training split).
    """

    def __init__(self, estimator, method="ablation", feature_names=None):
        self.estimator = estimator
        self.method = method
        self.feature_names = feature_names

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        check_is_fitted(self.estimator, "model_")
        self.report_ = feature_impact(self.estimator.model_, X, y, self.method,
                                      self.estimator.threshold, feature_names=self.feature_names)
        self.impacts_ = self.report_.scores
        self.n_features_in_ = X.shape[1]
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "impacts_")
        return self.impacts_ >= 0
