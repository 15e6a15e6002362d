"""Windowed clinical records: ingestion, forward-fill imputation, leakage-free
labels, feature encoding and patient-level splits.

The input is one row per (patient, admission window). Only windows recorded
before a patient's first ICU-positive window are ever turned into rows.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from enum import IntEnum
from typing import Iterable, Sequence

import numpy as np

ID_COLUMN = "PATIENT_VISIT_IDENTIFIER"
WINDOW_COLUMN = "WINDOW"
ICU_COLUMN = "ICU"
GENDER_COLUMN = "GENDER"
AGE65_COLUMN = "AGE_ABOVE65"

AGE_PERCENTILE_LEVELS = [f"{10 * i}th" for i in range(1, 10)] + ["Above 90th"]

KINDS = ("binary", "ordinal", "continuous")


class DataError(ValueError):
    """Input data does not conform to the expected layout or schema."""


class WindowId(IntEnum):
    W0_2 = 0
    W2_4 = 1
    W4_6 = 2
    W6_12 = 3
    ABOVE_12 = 4

    @property
    def label(self) -> str:
        return _WINDOW_LABELS[self]

    @classmethod
    def parse(cls, text: str) -> "WindowId":
        try:
            return _LABEL_TO_WINDOW[text.strip()]
        except KeyError:
            raise DataError(f"unparseable window label {text!r}") from None


_WINDOW_LABELS = {
    WindowId.W0_2: "0-2",
    WindowId.W2_4: "2-4",
    WindowId.W4_6: "4-6",
    WindowId.W6_12: "6-12",
    WindowId.ABOVE_12: "ABOVE_12",
}
_LABEL_TO_WINDOW = {v: k for k, v in _WINDOW_LABELS.items()}


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = "continuous"
    levels: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature kind {self.kind!r} for {self.name}")
        if self.kind == "ordinal" and not self.levels:
            raise ValueError(f"ordinal feature {self.name} declares no levels")


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple[Feature, ...]
    version: int = 1

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise ValueError(f"duplicate feature names: {dupes}")
        reserved = {ID_COLUMN, WINDOW_COLUMN, ICU_COLUMN} & set(names)
        if reserved:
            raise ValueError(f"reserved column names used as features: {sorted(reserved)}")

    @property
    def names(self) -> list[str]:
        return [f.name for f in self.features]

    def __len__(self):
        return len(self.features)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def subset(self, keep: Sequence[str]) -> "FeatureSchema":
        """Order-preserving sub-schema with the version bumped by one."""
        keep = set(keep)
        unknown = keep - set(self.names)
        if unknown:
            raise KeyError(f"features not in schema: {sorted(unknown)}")
        return FeatureSchema(tuple(f for f in self.features if f.name in keep),
                             self.version + 1)

    def to_dict(self) -> dict:
        feats = []
        for f in self.features:
            d = {"name": f.name, "kind": f.kind}
            if f.levels is not None:
                d["levels"] = list(f.levels)
            feats.append(d)
        return {"version": self.version, "features": feats}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSchema":
        feats = tuple(
            Feature(f["name"], f.get("kind", "continuous"),
                    tuple(f["levels"]) if f.get("levels") is not None else None)
            for f in d["features"]
        )
        return cls(feats, int(d.get("version", 1)))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def loads(cls, text: str) -> "FeatureSchema":
        return cls.from_dict(json.loads(text))


def infer_schema(source: io.TextIOBase | str) -> FeatureSchema:
    """Guess a schema from a dataset file: every column except id/window/ICU.

    Columns whose observed values are all in {0, 1} become binary, the age
    percentile column becomes ordinal, everything else continuous.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    header = [h.strip() for h in next(reader)]
    cols = [h for h in header if h not in (ID_COLUMN, WINDOW_COLUMN, ICU_COLUMN)]
    seen: dict[str, set[str]] = {c: set() for c in cols}
    for row in reader:
        for h, v in zip(header, row):
            v = v.strip()
            if h in seen and v and len(seen[h]) < 3:
                seen[h].add(v)
    feats = []
    for c in cols:
        vals = seen[c]
        if vals and not _all_numeric(vals):
            levels = AGE_PERCENTILE_LEVELS if vals <= set(AGE_PERCENTILE_LEVELS) else sorted(vals)
            feats.append(Feature(c, "ordinal", tuple(levels)))
        elif vals and {float(v) for v in vals} <= {0.0, 1.0}:
            feats.append(Feature(c, "binary"))
        else:
            feats.append(Feature(c, "continuous"))
    return FeatureSchema(tuple(feats), 1)


def _all_numeric(values: Iterable[str]) -> bool:
    try:
        for v in values:
            float(v)
    except ValueError:
        return False
    return True


@dataclass
class PatientTimeline:
    """One patient's raw window records.

    ``windows`` maps a window to a list of raw values in schema order: floats
    for numeric features, level strings for ordinal ones, ``None`` if missing.
    """

    patient_id: str
    windows: dict[WindowId, list] = field(default_factory=dict)
    icu_flags: dict[WindowId, bool] = field(default_factory=dict)

    def ordered_windows(self) -> list[WindowId]:
        return sorted(self.windows)


# -- ingestion ---------------------------------------------------------------

def parse_dataset(source, schema: FeatureSchema) -> list[PatientTimeline]:
    """Read the windowed CSV into one timeline per patient.

    ``source`` is a text stream or a string holding the CSV content.
    """
    if isinstance(source, str):
        source = io.StringIO(source)
    reader = csv.reader(source)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty dataset") from None

    expected = set(schema.names) | {ID_COLUMN, WINDOW_COLUMN, ICU_COLUMN}
    if len(header) != len(set(header)) or set(header) != expected:
        missing = sorted(expected - set(header))
        extra = sorted(set(header) - expected)
        raise DataError(
            f"header mismatch (wrong dataset version?): missing={missing[:5]} extra={extra[:5]}")

    pos = {h: i for i, h in enumerate(header)}
    cols = [(pos[f.name], f) for f in schema.features]
    timelines: dict[str, PatientTimeline] = {}

    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {lineno}: expected {len(header)} cells, got {len(row)}")
        pid = row[pos[ID_COLUMN]].strip()
        window = WindowId.parse(row[pos[WINDOW_COLUMN]])
        icu_text = row[pos[ICU_COLUMN]].strip()
        try:
            icu = float(icu_text)
        except ValueError:
            raise DataError(f"line {lineno}: non-numeric ICU flag {icu_text!r}") from None
        if icu not in (0.0, 1.0):
            raise DataError(f"line {lineno}: ICU flag must be 0 or 1, got {icu_text!r}")

        values = []
        for i, feat in cols:
            cell = row[i].strip()
            if cell == "":
                values.append(None)
            elif feat.kind == "ordinal":
                values.append(cell)
            else:
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"line {lineno}: non-numeric value {cell!r} in column {feat.name}") from None

        tl = timelines.setdefault(pid, PatientTimeline(pid))
        if window in tl.windows:
            raise DataError(f"line {lineno}: duplicate (patient, window) pair ({pid}, {window.label})")
        tl.windows[window] = values
        tl.icu_flags[window] = icu == 1.0

    return list(timelines.values())


def write_dataset(timelines: Sequence[PatientTimeline], schema: FeatureSchema) -> str:
    """Serialize timelines back to the windowed CSV layout."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([ID_COLUMN] + schema.names + [WINDOW_COLUMN, ICU_COLUMN])
    for tl in timelines:
        for win in tl.ordered_windows():
            cells = ["" if v is None else (v if isinstance(v, str) else repr(float(v)))
                     for v in tl.windows[win]]
            w.writerow([tl.patient_id] + cells + [win.label, int(tl.icu_flags[win])])
    return buf.getvalue()


# -- per-patient transforms --------------------------------------------------

def impute_forward(timeline: PatientTimeline) -> PatientTimeline:
    """Fill each missing value from the nearest earlier window of the same patient."""
    out: dict[WindowId, list] = {}
    last: list | None = None
    for win in timeline.ordered_windows():
        rec = list(timeline.windows[win])
        if last is not None:
            rec = [prev if v is None else v for v, prev in zip(rec, last)]
        out[win] = rec
        last = rec
    return PatientTimeline(timeline.patient_id, out, dict(timeline.icu_flags))


def derive_label(timeline: PatientTimeline) -> tuple[int, list[WindowId]]:
    """Patient label and the windows that precede ICU admission.

    An empty window list for a positive patient means no pre-ICU data exists and
    the patient must be excluded.
    """
    wins = timeline.ordered_windows()
    positive = [w for w in wins if timeline.icu_flags.get(w, False)]
    if not positive:
        return 0, wins
    first = positive[0]
    return 1, [w for w in wins if w < first]


def encode_features(schema: FeatureSchema, timeline: PatientTimeline,
                    usable_windows: Sequence[WindowId],
                    fallback: Sequence[float] | None) -> list[np.ndarray]:
    vectors = []
    for win in usable_windows:
        rec = timeline.windows[win]
        vec = np.empty(len(schema), dtype=float)
        for j, (feat, v) in enumerate(zip(schema.features, rec)):
            if v is None:
                if fallback is None or fallback[j] is None or not math.isfinite(fallback[j]):
                    raise DataError(f"no fallback statistic for missing feature {feat.name}")
                vec[j] = fallback[j]
            else:
                vec[j] = encode_value(feat, v)
        vectors.append(vec)
    return vectors


def encode_value(feat: Feature, value) -> float:
    if feat.kind == "ordinal":
        if value not in feat.levels:
            raise DataError(f"{feat.name}: value {value!r} not among declared levels")
        n = len(feat.levels)
        return feat.levels.index(value) / (n - 1) if n > 1 else 0.0
    value = float(value)
    if not math.isfinite(value):
        raise DataError(f"{feat.name}: non-finite value {value}")
    if feat.kind == "binary" and value not in (0.0, 1.0):
        raise DataError(f"{feat.name}: binary feature holds {value}")
    return value


def fallback_medians(schema: FeatureSchema, timelines: Sequence[PatientTimeline],
                     usable: dict[str, list[WindowId]]) -> list[float]:
    """Per-feature median of the encoded, already-imputed usable windows.

    Features never observed get 0.0 so encoding stays total.
    """
    cols: list[list[float]] = [[] for _ in schema.features]
    for tl in timelines:
        for win in usable[tl.patient_id]:
            for j, (feat, v) in enumerate(zip(schema.features, tl.windows[win])):
                if v is not None:
                    cols[j].append(encode_value(feat, v))
    return [float(np.median(c)) if c else 0.0 for c in cols]


# -- labelled datasets -------------------------------------------------------

@dataclass
class LabeledDataset:
    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    patient_ids: np.ndarray
    windows: np.ndarray
    gender: np.ndarray
    age_above_65: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float).reshape(len(self.y), len(self.schema))
        self.y = np.asarray(self.y, dtype=int)
        self.patient_ids = np.asarray(self.patient_ids, dtype=str)
        self.windows = np.asarray(self.windows, dtype=int)
        self.gender = np.asarray(self.gender, dtype=int)
        self.age_above_65 = np.asarray(self.age_above_65, dtype=int)
        n = len(self.y)
        for name in ("patient_ids", "windows", "gender", "age_above_65"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} entries, expected {n}")

    def __len__(self):
        return len(self.y)

    def take(self, index) -> "LabeledDataset":
        return LabeledDataset(self.schema, self.X[index], self.y[index], self.patient_ids[index],
                              self.windows[index], self.gender[index], self.age_above_65[index])

    def with_features(self, schema: FeatureSchema, X: np.ndarray) -> "LabeledDataset":
        return replace(self, schema=schema, X=X)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["patient_id", "window", "label", "gender", "age_above_65"] + self.schema.names)
        for i in range(len(self)):
            w.writerow([self.patient_ids[i], WindowId(self.windows[i]).label, self.y[i],
                        self.gender[i], self.age_above_65[i]] + [repr(float(v)) for v in self.X[i]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, schema: FeatureSchema) -> "LabeledDataset":
        reader = csv.reader(io.StringIO(text))
        header = next(reader)
        if header[5:] != schema.names:
            raise DataError("split file columns do not match schema")
        rows = list(reader)
        X = np.array([[float(v) for v in r[5:]] for r in rows], dtype=float).reshape(len(rows), len(schema))
        return cls(schema, X,
                   [int(r[2]) for r in rows],
                   [r[0] for r in rows],
                   [int(WindowId.parse(r[1])) for r in rows],
                   [int(r[3]) for r in rows],
                   [int(r[4]) for r in rows])


@dataclass
class SplitDataset:
    train: LabeledDataset
    test: LabeledDataset
    seed: int


def _shuffle_key(seed: int, patient_id: str) -> str:
    return hashlib.sha256(f"{seed}:{patient_id}".encode()).hexdigest()


def assign_patients(patient_ids: Iterable[str], train_fraction: float,
                    seed: int) -> tuple[list[str], list[str]]:
    """Deterministic patient partition: order ids by a seeded hash, cut at floor(f*P)."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    ids = sorted(set(patient_ids))
    if len(ids) < 2:
        raise DataError("need at least 2 patients to split")
    ids.sort(key=lambda p: (_shuffle_key(seed, p), p))
    n_train = math.floor(train_fraction * len(ids))
    return ids[:n_train], ids[n_train:]


def split_patients(dataset: LabeledDataset, train_fraction: float, seed: int) -> SplitDataset:
    train_ids, _ = assign_patients(dataset.patient_ids, train_fraction, seed)
    mask = np.isin(dataset.patient_ids, train_ids)
    return SplitDataset(dataset.take(mask), dataset.take(~mask), seed)


def _demographic(schema: FeatureSchema, name: str, vec: np.ndarray) -> int:
    if name not in schema.names:
        return 0
    return int(vec[schema.index(name)] >= 0.5)


def build_dataset(schema: FeatureSchema, timelines: Sequence[PatientTimeline],
                  fallback: Sequence[float]) -> LabeledDataset:
    """Rows for every usable pre-ICU window of already-imputed timelines."""
    X, y, pids, wins, gender, age = [], [], [], [], [], []
    for tl in timelines:
        label, usable = derive_label(tl)
        for win, vec in zip(usable, encode_features(schema, tl, usable, fallback)):
            X.append(vec)
            y.append(label)
            pids.append(tl.patient_id)
            wins.append(int(win))
            gender.append(_demographic(schema, GENDER_COLUMN, vec))
            age.append(_demographic(schema, AGE65_COLUMN, vec))
    X = np.array(X, dtype=float).reshape(len(y), len(schema))
    return LabeledDataset(schema, X, y, pids, wins, gender, age)


@dataclass
class PreparedData:
    split: SplitDataset
    fallback: list[float]
    summary: dict


def prepare(schema: FeatureSchema, timelines: Sequence[PatientTimeline],
            train_fraction: float = 0.7, seed: int = 0) -> PreparedData:
    """Impute, label, drop patients without pre-ICU data, split by patient and encode.

    The residual-missing fallback is computed from training patients only.
    """
    imputed = [impute_forward(tl) for tl in timelines]
    usable: dict[str, list[WindowId]] = {}
    kept, excluded = [], []
    for tl in imputed:
        label, wins = derive_label(tl)
        if label == 1 and not wins:
            excluded.append(tl.patient_id)
        else:
            usable[tl.patient_id] = wins
            kept.append(tl)
    if not kept:
        raise DataError("zero usable patients")

    train_ids, test_ids = assign_patients([tl.patient_id for tl in kept], train_fraction, seed)
    train_set = set(train_ids)
    train_tl = [tl for tl in kept if tl.patient_id in train_set]
    test_tl = [tl for tl in kept if tl.patient_id not in train_set]
    fallback = fallback_medians(schema, train_tl, usable)

    split = SplitDataset(build_dataset(schema, train_tl, fallback),
                         build_dataset(schema, test_tl, fallback), seed)
    summary = ingest_summary(schema, timelines, imputed, excluded, split)
    return PreparedData(split, fallback, summary)


def missing_rates(schema: FeatureSchema, timelines: Sequence[PatientTimeline]) -> dict[str, float]:
    counts = np.zeros(len(schema))
    n = 0
    for tl in timelines:
        for rec in tl.windows.values():
            counts += [v is None for v in rec]
            n += 1
    rates = counts / n if n else counts
    return {name: float(r) for name, r in zip(schema.names, rates)}


def ingest_summary(schema, raw, imputed, excluded, split: SplitDataset) -> dict:
    records = sum(len(tl.windows) for tl in raw)
    g = schema.names.index(GENDER_COLUMN) if GENDER_COLUMN in schema.names else None
    gender_counts = {}
    if g is not None:
        for tl in raw:
            for rec in tl.windows.values():
                key = "missing" if rec[g] is None else str(int(rec[g]))
                gender_counts[key] = gender_counts.get(key, 0) + 1
    labels = [derive_label(tl)[0] for tl in raw]
    return {
        "patients": len(raw),
        "records": records,
        "positive_patients": int(sum(labels)),
        "excluded_patients": len(excluded),
        "excluded_patient_ids": sorted(excluded),
        "rows": len(split.train) + len(split.test),
        "train_patients": len(set(split.train.patient_ids)),
        "test_patients": len(set(split.test.patient_ids)),
        "train_rows": len(split.train),
        "test_rows": len(split.test),
        "features": len(schema),
        "schema_version": schema.version,
        "record_gender_counts": dict(sorted(gender_counts.items())),
        "missing_rate_before": missing_rates(schema, raw),
        "missing_rate_after": missing_rates(schema, imputed),
    }


# -- synthetic fixtures ------------------------------------------------------

def synthetic_schema(n_continuous: int = 20, n_binary: int = 4) -> FeatureSchema:
    feats = [Feature(AGE65_COLUMN, "binary"),
             Feature("AGE_PERCENTIL", "ordinal", tuple(AGE_PERCENTILE_LEVELS)),
             Feature(GENDER_COLUMN, "binary")]
    feats += [Feature(f"FLAG_{i}", "binary") for i in range(n_binary)]
    feats += [Feature(f"LAB_{i}", "continuous") for i in range(n_continuous)]
    return FeatureSchema(tuple(feats), 1)


_STATIC = {AGE65_COLUMN, "AGE_PERCENTIL", GENDER_COLUMN}


def synthesize_dataset(seed: int, n_patients: int, schema: FeatureSchema,
                       missing_rate: float = 0.0, n_signal: int = 4) -> list[PatientTimeline]:
    """Deterministic synthetic timelines with a planted ICU signal.

    A latent severity per patient drives the ICU flag and shifts the first
    ``n_signal`` continuous features. Demographic columns are static per
    patient and never missing; every other cell goes missing independently
    with probability ``missing_rate``.
    """
    if n_patients < 1:
        raise ValueError("n_patients must be at least 1")
    if not 0 <= missing_rate < 1:
        raise ValueError("missing_rate must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    cont = [j for j, f in enumerate(schema.features) if f.kind == "continuous"]
    signal = set(cont[:n_signal])
    timelines = []
    for p in range(n_patients):
        severity = rng.normal()
        age65 = float(rng.random() < 0.4)
        gender = float(rng.random() < 0.37)
        icu = severity + 0.5 * age65 + 0.5 * rng.normal() > 0.4
        onset = int(rng.integers(0, 5)) if icu else 5
        static = {}
        for j, f in enumerate(schema.features):
            if f.name == AGE65_COLUMN:
                static[j] = age65
            elif f.name == GENDER_COLUMN:
                static[j] = gender
            elif f.kind == "ordinal" and f.name in _STATIC:
                lo = len(f.levels) // 2 if age65 else 0
                hi = len(f.levels) if age65 else len(f.levels) // 2 + 1
                static[j] = f.levels[int(rng.integers(lo, hi))]
        tl = PatientTimeline(f"P{p:05d}")
        for win in WindowId:
            drift = 0.3 * int(win) * (1 if icu else -0.2)
            rec = []
            for j, f in enumerate(schema.features):
                if j in static:
                    rec.append(static[j])
                    continue
                if f.kind == "continuous":
                    v = rng.normal(scale=0.5) + (severity + drift if j in signal else 0.0)
                    v = float(np.tanh(v))
                elif f.kind == "binary":
                    v = float(rng.random() < 0.3)
                else:
                    v = f.levels[int(rng.integers(len(f.levels)))]
                if rng.random() < missing_rate:
                    v = None
                rec.append(v)
            tl.windows[win] = rec
            tl.icu_flags[win] = int(win) >= onset
        timelines.append(tl)
    return timelines
