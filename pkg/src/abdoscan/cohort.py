"""Participant records: CSV ingestion, synthetic cohorts and train/test/fold splits."""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .errors import ParameterError, RowError, SchemaError, StratificationError
from .fileio import atomic_write_text

logger = logging.getLogger(__name__)

CSV_COLUMNS = (
    "id", "height_m", "weight_kg", "ga_days", "mesh_path", "seq64", "z_low_m", "z_high_m",
    "vertical_axis", "csection", "preterm", "gdm", "pec", "efw_g", "mvp_cm", "waist_m", "hip_m",
)
BINARY_OUTCOMES = ("csection", "preterm", "gdm", "pec")
CONTINUOUS_OUTCOMES = ("efw_g", "mvp_cm")
# task name -> (outcome field, task kind)
TASKS = {
    "csection": ("csection", "classification"),
    "preterm": ("preterm", "classification"),
    "gdm": ("gdm", "classification"),
    "pec": ("pec", "classification"),
    "efw": ("efw_g", "regression"),
    "mvp": ("mvp_cm", "regression"),
}
# columns that may be given in centimetres instead (``<name>_cm``)
_LENGTH_COLUMNS = ("height_m", "z_low_m", "z_high_m", "waist_m", "hip_m")

HEIGHT_RANGE = (1.0, 2.2)
WEIGHT_RANGE = (30.0, 250.0)
GA_RANGE = (100.0, 220.0)
GA_WINDOW = (126.0, 168.0)


def task_info(task):
    try:
        return TASKS[task]
    except KeyError:
        raise ParameterError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None


@dataclass(frozen=True)
class Scan:
    mesh_path: str | None = None
    sequence: np.ndarray | None = None
    z_low: float | None = None
    z_high: float | None = None
    axis: str = "+Y"


@dataclass(frozen=True)
class ParticipantRecord:
    id: str
    height_m: float
    weight_kg: float
    ga_days: float
    scans: tuple = ()
    outcomes: dict = field(default_factory=dict)
    waist_m: float | None = None
    hip_m: float | None = None

    @property
    def sequence(self):
        """Element-wise mean of the scan sequences, or None if any scan is unresolved."""
        seqs = [s.sequence for s in self.scans]
        if not seqs or any(s is None for s in seqs):
            return None
        return np.mean(np.vstack(seqs), axis=0)

    @property
    def basic(self):
        return np.array([self.height_m, self.weight_kg, self.ga_days], dtype=np.float64)

    def label(self, task):
        return self.outcomes.get(task_info(task)[0])

    def resolved(self, base_dir="."):
        """Copy with every mesh-only scan turned into a circumference sequence."""
        scans = []
        for s in self.scans:
            if s.sequence is None:
                path = s.mesh_path if os.path.isabs(s.mesh_path) else os.path.join(base_dir, s.mesh_path)
                mesh = geometry.load_obj(path, s.axis)
                seq = geometry.extract_sequence(mesh, s.z_low, s.z_high).values
                s = replace(s, sequence=seq)
            scans.append(s)
        return replace(self, scans=tuple(scans))


def validate_record(rec):
    checks = (
        ("height_m", rec.height_m, HEIGHT_RANGE, False),
        ("weight_kg", rec.weight_kg, WEIGHT_RANGE, False),
        ("ga_days", rec.ga_days, GA_RANGE, True),
    )
    for col, val, (lo, hi), closed in checks:
        ok = lo <= val <= hi if closed else lo < val < hi
        if not ok:
            raise RowError(rec.id, col, f"value {val} outside {'[' if closed else '('}{lo}, {hi}{']' if closed else ')'}")
    if not GA_WINDOW[0] <= rec.ga_days <= GA_WINDOW[1]:
        logger.warning("record %s: gestational age %s days outside the 18-24 week window", rec.id, rec.ga_days)


def task_subset(records, task):
    """Records that carry a label for ``task``."""
    field_name, _ = task_info(task)
    return [r for r in records if r.outcomes.get(field_name) is not None]


# ---------------------------------------------------------------------------
# CSV


def _cell_float(row, col, rid, required=False):
    raw = (row.get(col) or "").strip()
    if raw == "":
        if required:
            raise RowError(rid, col, "missing value")
        return None
    try:
        val = float(raw)
    except ValueError:
        raise RowError(rid, col, f"cannot parse {raw!r} as a number") from None
    if not math.isfinite(val):
        raise RowError(rid, col, f"non-finite value {raw!r}")
    return val


def _length(row, col, rid, required=False):
    if col in row:
        return _cell_float(row, col, rid, required)
    cm = col[:-2] + "_cm"
    val = _cell_float(row, cm, rid, required)
    return None if val is None else val / 100.0


def _binary(row, col, rid):
    raw = (row.get(col) or "").strip()
    if raw == "":
        return None
    if raw not in ("0", "1"):
        raise RowError(rid, col, f"binary label must be 0, 1 or empty, got {raw!r}")
    return int(raw)


def _parse_row(row, line_no):
    rid = (row.get("id") or "").strip()
    if not rid:
        raise RowError(f"line {line_no}", "id", "missing id")
    seq = None
    raw_seq = (row.get("seq64") or "").strip()
    if raw_seq:
        try:
            seq = np.array([float(x) for x in raw_seq.split(";")], dtype=np.float64)
        except ValueError:
            raise RowError(rid, "seq64", "unparseable value") from None
        if seq.shape != (geometry.N_LEVELS,) or not np.all(np.isfinite(seq)) or np.any(seq <= 0):
            raise RowError(rid, "seq64", f"need {geometry.N_LEVELS} positive finite values, got {len(seq)}")
    mesh_path = (row.get("mesh_path") or "").strip() or None
    if seq is None and mesh_path is None:
        raise RowError(rid, "seq64", "row has neither a sequence nor a mesh path")
    z_low = _length(row, "z_low_m", rid, required=seq is None)
    z_high = _length(row, "z_high_m", rid, required=seq is None)
    try:
        axis = geometry.normalize_axis((row.get("vertical_axis") or "").strip() or "+Y")
    except ParameterError as exc:
        raise RowError(rid, "vertical_axis", str(exc)) from None
    outcomes = {c: _binary(row, c, rid) for c in BINARY_OUTCOMES}
    outcomes.update({c: _cell_float(row, c, rid) for c in CONTINUOUS_OUTCOMES})
    rec = ParticipantRecord(
        id=rid,
        height_m=_length(row, "height_m", rid, required=True),
        weight_kg=_cell_float(row, "weight_kg", rid, required=True),
        ga_days=_cell_float(row, "ga_days", rid, required=True),
        scans=(Scan(None if seq is not None else mesh_path, seq, z_low, z_high, axis),),
        outcomes=outcomes,
        waist_m=_length(row, "waist_m", rid),
        hip_m=_length(row, "hip_m", rid),
    )
    validate_record(rec)
    return rec


def _check_header(header):
    cols = set(header or ())
    missing = []
    for col in ("id", "weight_kg", "ga_days"):
        if col not in cols:
            missing.append(col)
    if "height_m" not in cols and "height_cm" not in cols:
        missing.append("height_m")
    if "seq64" not in cols and "mesh_path" not in cols:
        missing.append("seq64 or mesh_path")
    if missing:
        raise SchemaError(f"missing mandatory column(s): {', '.join(missing)}")


def load_cohort_csv(path):
    """Read a cohort CSV into records; repeated rows for one id become extra scans."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        _check_header(reader.fieldnames)
        by_id = {}
        for line_no, row in enumerate(reader, start=2):
            rec = _parse_row(row, line_no)
            if rec.id in by_id:
                prev = by_id[rec.id]
                by_id[rec.id] = replace(prev, scans=prev.scans + rec.scans)
            else:
                by_id[rec.id] = rec
    return list(by_id.values())


def _fmt(x):
    return "" if x is None else repr(float(x)) if not isinstance(x, int) else str(x)


def write_cohort_csv(records, path):
    rows = []
    for r in records:
        for s in r.scans:
            row = {
                "id": r.id,
                "height_m": _fmt(r.height_m),
                "weight_kg": _fmt(r.weight_kg),
                "ga_days": _fmt(r.ga_days),
                "mesh_path": s.mesh_path or "",
                "seq64": ";".join(repr(float(v)) for v in s.sequence)
                if s.sequence is not None and not s.mesh_path
                else "",
                "z_low_m": _fmt(s.z_low),
                "z_high_m": _fmt(s.z_high),
                "vertical_axis": s.axis,
                "waist_m": _fmt(r.waist_m),
                "hip_m": _fmt(r.hip_m),
            }
            for c in BINARY_OUTCOMES + CONTINUOUS_OUTCOMES:
                row[c] = _fmt(r.outcomes.get(c))
            rows.append(row)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(path, buf.getvalue())


# ---------------------------------------------------------------------------
# synthetic cohorts
#
# Profile over slab position t in [0, 1] (level k -> t = k / 63), in meters:
#   base + hip bump + gravid-abdomen bump + upper-slab growth + level noise
#   base   = 0.92 + 0.0008 (weight - 72.13) + 0.05 (height - 1.63) + N(0, 0.006)
#   hip    = 0.10 (1 + N(0, 0.1)) exp(-((t - 0.15) / 0.12)^2)
#   abdomen= A exp(-((t - 0.55) / 0.14)^2),
#            A = 0.18 (1 + 0.005 (GA - 146)) (1 + N(0, 0.04)), x1.15 for GDM
#   growth = g max(t - 0.5, 0) / 0.5,  g = 0.08 (1 + N(0, 0.1)), x0.6 for preterm
#   level noise N(0, 0.002)
# EFW (g) = 382.48 + 1500 (mid - 1.04) + 7 (GA - 146) + N(0, noise_sd),
#   mid = mean circumference over levels 21..42.
# MVP, C-section and PEC carry no planted shape signal.

DEFAULT_PREVALENCE = {
    "csection": 34 / 129,
    "preterm": 15 / 131,
    "gdm": 15 / 138,
    "pec": 13 / 130,
}
EFW_MEAN = 382.48
EFW_PER_METER = 1500.0
EFW_PER_DAY = 7.0
MID_REF = 1.04
MID_BAND = slice(21, 43)
WAIST_BAND = slice(30, 41)
GDM_INFLATION = 1.15
PRETERM_GROWTH = 0.6


@dataclass
class SyntheticCohort:
    records: list
    meshes: dict = field(default_factory=dict)

    def efw_formula(self, rec):
        """Noise-free planted EFW for ``rec``."""
        return planted_efw(rec.sequence, rec.ga_days)


def planted_efw(seq, ga):
    seq = np.asarray(seq, dtype=np.float64)
    return (
        EFW_MEAN
        + EFW_PER_METER * (seq[MID_BAND].mean() - MID_REF)
        + EFW_PER_DAY * (ga - 146)
    )


def _exact_positives(rng, n, prevalence, name):
    if not 0 < prevalence < 1:
        raise ParameterError(f"prevalence for {name} must lie in (0, 1), got {prevalence}")
    count = int(math.floor(n * prevalence + 0.5))
    if not 0 < count < n:
        raise ParameterError(f"prevalence {prevalence} for {name} gives {count} positives out of {n}")
    labels = np.zeros(n, dtype=int)
    labels[rng.permutation(n)[:count]] = 1
    return labels


def synthetic_profile(t, weight, height, ga, gdm, preterm, rng):
    base = 0.92 + 0.0008 * (weight - 72.13) + 0.05 * (height - 1.63) + rng.normal(0, 0.006)
    hip = 0.10 * (1 + rng.normal(0, 0.1)) * np.exp(-(((t - 0.15) / 0.12) ** 2))
    amp = 0.18 * (1 + 0.005 * (ga - 146)) * (1 + rng.normal(0, 0.04))
    if gdm:
        amp *= GDM_INFLATION
    abdomen = amp * np.exp(-(((t - 0.55) / 0.14) ** 2))
    growth = 0.08 * (1 + rng.normal(0, 0.1))
    if preterm:
        growth *= PRETERM_GROWTH
    upper = growth * np.maximum(t - 0.5, 0) / 0.5
    return base + hip + abdomen + upper + rng.normal(0, 0.002, size=t.shape)


def profile_mesh(seq, z_low, z_high, segments=96, pad=0.02):
    """Closed ring-stack mesh whose level sections have exactly the given perimeters."""
    seq = np.asarray(seq, dtype=np.float64)
    levels = geometry.level_heights(z_low, z_high, len(seq))
    radii = geometry.circumradius_for_perimeter(seq, segments)
    heights = np.concatenate([[z_low - pad], levels, [z_high + pad]])
    radii = np.concatenate([[radii[0]], radii, [radii[-1]]])
    return geometry.lathe_mesh(heights, radii, segments)


def generate_synthetic_cohort(n=200, prevalence=None, noise_sd=25.0, seed=0, meshes=False):
    """Seeded synthetic cohort with planted shape/outcome relationships (see module notes)."""
    if n < 10:
        raise ParameterError(f"synthetic cohort needs n >= 10, got {n}")
    if noise_sd < 0:
        raise ParameterError("noise_sd must be non-negative")
    prev = dict(DEFAULT_PREVALENCE)
    if prevalence:
        unknown = set(prevalence) - set(prev)
        if unknown:
            raise ParameterError(f"unknown outcomes in prevalence map: {sorted(unknown)}")
        prev.update(prevalence)
    rng = np.random.default_rng(seed)
    labels = {name: _exact_positives(rng, n, prev[name], name) for name in BINARY_OUTCOMES}
    height = np.clip(rng.normal(1.63, 0.07, n), 1.45, 1.85)
    weight = np.clip(rng.normal(72.13, 13.92, n), 45.0, 130.0)
    ga = np.clip(np.round(rng.normal(146.0, 7.92, n)), 126.0, 168.0)
    t = np.arange(geometry.N_LEVELS) / (geometry.N_LEVELS - 1)
    width = len(str(n - 1))
    records, mesh_map = [], {}
    for i in range(n):
        seq = synthetic_profile(t, weight[i], height[i], ga[i], labels["gdm"][i], labels["preterm"][i], rng)
        efw_noise = rng.normal(0, noise_sd) if noise_sd > 0 else 0.0
        efw = planted_efw(seq, ga[i]) + efw_noise
        mvp = max(4.75 + 0.95 * rng.normal(), 1.0)
        z_low, z_high = 0.50 * height[i], 0.72 * height[i]
        rid = f"S{i:0{width}d}"
        outcomes = {name: int(labels[name][i]) for name in BINARY_OUTCOMES}
        outcomes.update(efw_g=float(efw), mvp_cm=float(mvp))
        records.append(
            ParticipantRecord(
                id=rid,
                height_m=float(height[i]),
                weight_kg=float(weight[i]),
                ga_days=float(ga[i]),
                scans=(Scan(None, seq, float(z_low), float(z_high), "+Z"),),
                outcomes=outcomes,
            )
        )
        if meshes:
            mesh_map[rid] = profile_mesh(seq, z_low, z_high)
    return SyntheticCohort(records, mesh_map)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class CohortSplit:
    train_ids: tuple
    test_ids: tuple
    folds: dict
    seed: int

    def fold_ids(self, k):
        return [i for i in self.train_ids if self.folds[i] == k]


def split_cohort(records, task, test_fraction=0.3, folds=5, seed=0):
    """Participant-level split; stratified by label for classification tasks."""
    if not 0 < test_fraction < 1:
        raise ParameterError("test fraction must lie in (0, 1)")
    if folds < 2:
        raise ParameterError("need at least 2 folds")
    field_name, kind = task_info(task)
    usable = task_subset(records, task)
    if kind == "classification":
        strata = [[r.id for r in usable if r.outcomes[field_name] == c] for c in (0, 1)]
    else:
        strata = [[r.id for r in usable]]
    rng = np.random.default_rng(seed)
    train, test, fold_of = [], [], {}
    counter = 0
    for c, ids in enumerate(strata):
        ids = [ids[i] for i in rng.permutation(len(ids))]
        n_test = int(math.floor(len(ids) * test_fraction + 0.5))
        if kind == "classification" and not 0 < n_test < len(ids):
            raise StratificationError(
                f"class {c} has {len(ids)} records; cannot place it in both train and test"
            )
        if kind == "regression" and not 0 < n_test < len(ids):
            raise StratificationError(f"{len(ids)} records are too few for a {test_fraction} test split")
        test.extend(ids[:n_test])
        for rid in ids[n_test:]:
            train.append(rid)
            fold_of[rid] = counter % folds
            counter += 1
    return CohortSplit(tuple(train), tuple(test), fold_of, seed)


def records_to_rows(records):
    """``(n, 67)`` matrix of ``[sequence | height, weight, GA]``."""
    rows = []
    for r in records:
        seq = r.sequence
        if seq is None:
            raise ParameterError(f"record {r.id} has an unresolved mesh scan")
        rows.append(np.concatenate([seq, r.basic]))
    return np.array(rows, dtype=np.float64).reshape(len(rows), geometry.N_LEVELS + 3)


def anthropometrics(rec):
    """Baseline anthropometric features; waist/hip fall back to sequence-derived values.

    Returns ``(features, derived)`` with features ordered as
    height, weight, BMI, waist, hip, waist/hip, waist/height, GA.
    """
    seq = rec.sequence
    derived = []
    waist, hip = rec.waist_m, rec.hip_m
    half = geometry.N_LEVELS // 2
    if waist is None:
        waist = float(seq[half:].min())
        derived.append("waist")
    if hip is None:
        hip = float(seq[:half].max())
        derived.append("hip")
    bmi = rec.weight_kg / rec.height_m**2
    feats = np.array(
        [rec.height_m, rec.weight_kg, bmi, waist, hip, waist / hip, waist / rec.height_m, rec.ga_days]
    )
    return feats, tuple(derived)


ANTHRO_LABELS = ("height_m", "weight_kg", "bmi", "waist_m", "hip_m", "whr", "whtr", "ga_days")
