"""Question-answer trust per prediction and its demographic aggregates."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .clinical_data import LabeledDataset


@dataclass(frozen=True)
class TrustParams:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        for v in (self.alpha, self.beta):
            if not (math.isfinite(v) and v > 0):
                raise ValueError("alpha and beta must be finite and positive")


def question_answer_trust(confidence, correct, params: TrustParams = TrustParams()):
    """confidence**alpha when the answer is right, (1 - confidence)**beta when wrong.

    Works elementwise on arrays; scalars in give a float back.
    """
    c = np.asarray(confidence, dtype=float)
    if np.any(~np.isfinite(c)) or np.any((c < 0) | (c > 1)):
        raise ValueError("confidence must lie in [0, 1]")
    ok = np.asarray(correct, dtype=bool)
    t = np.where(ok, c ** params.alpha, (1.0 - c) ** params.beta)
    return float(t) if t.ndim == 0 else t


def prediction_confidence(proba, threshold: float = 0.5):
    """Predicted class and the probability the model assigns to it."""
    p = np.asarray(proba, dtype=float)
    pred = (p >= threshold).astype(int)
    return pred, np.where(pred == 1, p, 1.0 - p)


def per_sample_trust(proba, y, threshold: float = 0.5, params: TrustParams = TrustParams()):
    pred, conf = prediction_confidence(proba, threshold)
    correct = pred == np.asarray(y, dtype=int)
    return conf, correct, question_answer_trust(conf, correct, params)


def net_trust_score(trust) -> float:
    t = np.asarray(trust, dtype=float)
    if t.size == 0:
        raise ValueError("net trust score of an empty sample")
    return math.fsum(t.tolist()) / t.size


@dataclass(frozen=True)
class SpectrumEntry:
    label: str
    count: int
    trust: float


def group_masks(dataset: LabeledDataset, grouping):
    """Resolve a grouping into ordered (label, mask) pairs.

    ``grouping`` is ``"gender"``, ``"age_above_65"``, or a sequence of
    ``(label, predicate_or_mask)`` where a predicate maps the dataset to a mask.
    Built-in groupings only list values that occur.
    """
    if isinstance(grouping, str):
        if grouping not in ("gender", "age_above_65"):
            raise KeyError(f"unknown grouping {grouping!r}")
        col = getattr(dataset, grouping)
        return [(f"{grouping}={v}", col == v) for v in sorted(set(col.tolist()))]
    out = []
    for label, sel in grouping:
        mask = sel(dataset) if callable(sel) else sel
        out.append((str(label), np.asarray(mask, dtype=bool)))
    return out


def spectrum_from_trust(trust, masks) -> list[SpectrumEntry]:
    trust = np.asarray(trust, dtype=float)
    cover = np.zeros(len(trust), dtype=int)
    for _, m in masks:
        if len(m) != len(trust):
            raise ValueError("group mask length does not match the sample count")
        cover += m
    if np.any(cover != 1):
        raise ValueError("grouping must assign every row to exactly one group "
                         f"({int(np.sum(cover == 0))} unassigned, {int(np.sum(cover > 1))} double-assigned)")
    return [SpectrumEntry(label, int(m.sum()), net_trust_score(trust[m]) if m.any() else float("nan"))
            for label, m in masks]


def trust_spectrum(proba, dataset: LabeledDataset, grouping, params: TrustParams = TrustParams(),
                   threshold: float = 0.5) -> list[SpectrumEntry]:
    """Mean trust per demographic group, groups in declared order.

    ``proba`` are the model's positive-class probabilities for ``dataset`` rows.
    """
    _, _, t = per_sample_trust(proba, dataset.y, threshold, params)
    return spectrum_from_trust(t, group_masks(dataset, grouping))


def trust_density(trust, bins: int = 20):
    """Equal-width histogram over [0, 1]; the last bin is closed on the right."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    t = np.asarray(trust, dtype=float)
    edges = np.linspace(0.0, 1.0, bins + 1)
    idx = np.minimum(np.floor(t * bins).astype(int), bins - 1)
    counts = np.bincount(idx, minlength=bins)
    return edges, counts


def fairness_gap(spectrum: list[SpectrumEntry]):
    """(highest-trust group, lowest-trust group, absolute gap); ties go to the earlier group."""
    entries = [e for e in spectrum if e.count > 0]
    if len(entries) < 2:
        raise ValueError("fairness gap needs at least 2 groups (fewer than 2 groups present)")
    hi = max(entries, key=lambda e: e.trust)
    lo = min(entries, key=lambda e: e.trust)
    return hi, lo, abs(hi.trust - lo.trust)


@dataclass
class TrustReport:
    row_ids: list[str]
    confidence: np.ndarray
    correct: np.ndarray
    trust: np.ndarray
    spectra: dict[str, list[SpectrumEntry]] = field(default_factory=dict)
    params: TrustParams = TrustParams()

    @property
    def net_trust_score(self) -> float:
        return net_trust_score(self.trust)

    def per_sample_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["row_id", "confidence", "correct", "trust"])
        for rid, c, ok, t in zip(self.row_ids, self.confidence, self.correct, self.trust):
            w.writerow([rid, repr(float(c)), int(ok), repr(float(t))])
        return buf.getvalue()

    def density_csv(self, dataset: LabeledDataset, bins: int = 20) -> str:
        """Per-group trust histograms for every grouping in the report."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["grouping", "group", "bin_low", "bin_high", "count"])
        for name in self.spectra:
            for label, mask in group_masks(dataset, name):
                edges, counts = trust_density(self.trust[mask], bins)
                for b in range(bins):
                    w.writerow([name, label, repr(float(edges[b])), repr(float(edges[b + 1])),
                                int(counts[b])])
        return buf.getvalue()

    def summary(self) -> dict:
        out = {"alpha": self.params.alpha, "beta": self.params.beta,
               "samples": len(self.trust), "net_trust_score": self.net_trust_score,
               "spectra": {}, "fairness_gaps": {}}
        for name, spec in self.spectra.items():
            out["spectra"][name] = [{"group": e.label, "count": e.count, "trust": e.trust}
                                    for e in spec]
            try:
                hi, lo, gap = fairness_gap(spec)
                out["fairness_gaps"][name] = {"max_group": hi.label, "min_group": lo.label, "gap": gap}
            except ValueError as exc:
                out["fairness_gaps"][name] = {"error": str(exc)}
        return out


def trust_report(proba, dataset: LabeledDataset, groupings=("gender", "age_above_65"),
                 params: TrustParams = TrustParams(), threshold: float = 0.5) -> TrustReport:
    conf, correct, t = per_sample_trust(proba, dataset.y, threshold, params)
    row_ids = [f"{pid}@{w}" for pid, w in zip(dataset.patient_ids, dataset.windows)]
    spectra = {g: spectrum_from_trust(t, group_masks(dataset, g)) for g in groupings}
    return TrustReport(row_ids, conf, correct, t, spectra, params)
