"""Load, validate, and clean consultation episodes into an interaction log.

The raw input is a delimited text file (comma by default) with a header row.
Each row is one episode of care. Cleaning drops canceled and emergency
episodes, keeps primary-care consultations as interaction events aggregated
per (patient, doctor, year), and retains the full record set so behavioral
features (hospitals visited, tenure) can be derived from it.
"""

from __future__ import annotations

import csv
import hashlib
import io
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import SchemaError, ValidationError

EPISODE_KINDS = ("consultation", "emergency", "canceled", "inpatient")
SPECIALTIES = ("primary_care", "other")

PATIENT_NAMESPACES = (
    "gender",
    "age_group",
    "region",
    "n_hospitals_bucket",
    "tenure_bucket",
    "mdc",
    "identity",
)
DOCTOR_NAMESPACES = (
    "gender",
    "age_group",
    "seniority",
    "tenure_bucket",
    "hospital",
    "identity",
)

# WHO age groups for patients; practitioner experience bands for doctors.
PATIENT_AGE_GROUPS = ((15, "child"), (25, "youth"), (60, "adult"), (None, "elderly"))
DOCTOR_AGE_GROUPS = ((40, "young"), (60, "experienced"), (None, "senior"))

DEFAULT_YEAR_WINDOW = (2012, 2017)

REQUIRED_COLUMNS = (
    "patient_id",
    "doctor_id",
    "year",
    "hospital_id",
    "episode_kind",
    "specialty",
)
OPTIONAL_COLUMNS = (
    "mdc_code",
    "patient_gender",
    "patient_age",
    "patient_region",
    "doctor_gender",
    "doctor_age",
    "doctor_seniority",
    "doctor_start_year",
)


@dataclass(frozen=True)
class Schema:
    """Column mapping and parse settings for episode files.

    ``columns`` maps canonical field names to the column names used in the
    file; fields not listed keep their canonical name. Optional columns may
    be absent from the file entirely.
    """

    columns: dict[str, str] = field(default_factory=dict)
    delimiter: str = ","
    year_window: tuple[int, int] = DEFAULT_YEAR_WINDOW

    def column_for(self, name: str) -> str:
        return self.columns.get(name, name)


@dataclass(frozen=True)
class EpisodeRecord:
    """One episode of care, as parsed from a single input row."""

    row: int
    patient_id: str
    doctor_id: str
    year: int
    hospital_id: str
    episode_kind: str
    specialty: str
    mdc_code: int | None = None
    patient_gender: str | None = None
    patient_age: int | None = None
    patient_region: str | None = None
    doctor_gender: str | None = None
    doctor_age: int | None = None
    doctor_seniority: str | None = None
    doctor_start_year: int | None = None


def _parse_year(raw: str, row: int) -> int:
    """Parse a year; date-like values (``2014-03-02``) truncate to the year."""
    value = raw.strip()
    if len(value) >= 4 and value[:4].isdigit() and (len(value) == 4 or not value[4].isdigit()):
        return int(value[:4])
    raise ValidationError(f"row {row}: field 'year': cannot parse {raw!r}")


def _parse_int(raw: str, row: int, name: str) -> int:
    try:
        return int(raw.strip())
    except ValueError:
        raise ValidationError(f"row {row}: field {name!r}: expected integer, got {raw!r}")


def load_episodes(
    path: str | Path,
    schema: Schema | None = None,
    merge_map: dict[tuple[str, str], str] | None = None,
) -> list[EpisodeRecord]:
    """Parse an episode file into validated records.

    ``merge_map`` optionally maps ("patient"|"doctor", alias_id) to a
    canonical id for inputs whose entity ids were reconciled upstream.
    """
    schema = schema or Schema()
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as handle:
        return _parse_episode_rows(handle, schema, merge_map, source=str(path))


def _parse_episode_rows(handle, schema, merge_map, source):
    reader = csv.reader(handle, delimiter=schema.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{source}: empty file (missing header row)")
    header = [h.strip() for h in header]
    dupes = [name for name, cnt in Counter(header).items() if cnt > 1]
    if dupes:
        raise SchemaError(f"{source}: duplicated header column(s): {', '.join(sorted(dupes))}")

    positions: dict[str, int] = {}
    for name in REQUIRED_COLUMNS:
        col = schema.column_for(name)
        if col not in header:
            raise SchemaError(f"{source}: missing required column {col!r}")
        positions[name] = header.index(col)
    for name in OPTIONAL_COLUMNS:
        col = schema.column_for(name)
        if col in header:
            positions[name] = header.index(col)

    lo, hi = schema.year_window
    merge_map = merge_map or {}
    records: list[EpisodeRecord] = []
    for row_no, cells in enumerate(reader, start=2):
        if not cells or all(not c.strip() for c in cells):
            continue
        if len(cells) < len(header):
            raise ValidationError(
                f"row {row_no}: expected {len(header)} fields, got {len(cells)}"
            )

        def cell(name: str) -> str:
            pos = positions.get(name)
            return cells[pos].strip() if pos is not None else ""

        for name in ("patient_id", "doctor_id", "hospital_id"):
            if not cell(name):
                raise ValidationError(f"row {row_no}: field {name!r}: empty value")

        year = _parse_year(cell("year"), row_no)
        if not lo <= year <= hi:
            raise ValidationError(
                f"row {row_no}: field 'year': {year} outside observation window "
                f"{lo}..{hi}"
            )

        kind = cell("episode_kind")
        if kind not in EPISODE_KINDS:
            raise ValidationError(
                f"row {row_no}: field 'episode_kind': unknown value {kind!r}"
            )
        specialty = cell("specialty")
        if specialty not in SPECIALTIES:
            raise ValidationError(
                f"row {row_no}: field 'specialty': unknown value {specialty!r}"
            )

        mdc_raw = cell("mdc_code")
        mdc = None
        if mdc_raw:
            if kind != "inpatient":
                raise ValidationError(
                    f"row {row_no}: field 'mdc_code': present on non-inpatient episode"
                )
            mdc = _parse_int(mdc_raw, row_no, "mdc_code")
            if not 1 <= mdc <= 24:
                raise ValidationError(
                    f"row {row_no}: field 'mdc_code': {mdc} outside 1..24"
                )

        patient_id = merge_map.get(("patient", cell("patient_id")), cell("patient_id"))
        doctor_id = merge_map.get(("doctor", cell("doctor_id")), cell("doctor_id"))

        records.append(
            EpisodeRecord(
                row=row_no,
                patient_id=patient_id,
                doctor_id=doctor_id,
                year=year,
                hospital_id=cell("hospital_id"),
                episode_kind=kind,
                specialty=specialty,
                mdc_code=mdc,
                patient_gender=cell("patient_gender") or None,
                patient_age=_parse_int(cell("patient_age"), row_no, "patient_age")
                if cell("patient_age")
                else None,
                patient_region=cell("patient_region") or None,
                doctor_gender=cell("doctor_gender") or None,
                doctor_age=_parse_int(cell("doctor_age"), row_no, "doctor_age")
                if cell("doctor_age")
                else None,
                doctor_seniority=cell("doctor_seniority") or None,
                doctor_start_year=_parse_int(
                    cell("doctor_start_year"), row_no, "doctor_start_year"
                )
                if cell("doctor_start_year")
                else None,
            )
        )
    if not records:
        raise ValidationError(f"{source}: no data rows")
    return records


def load_merge_map(path: str | Path) -> dict[tuple[str, str], str]:
    """Read an alias file with lines ``patient|doctor,alias_id,canonical_id``."""
    mapping: dict[tuple[str, str], str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3 or parts[0] not in ("patient", "doctor"):
            raise ValidationError(f"{path}:{lineno}: expected 'patient|doctor,alias,canonical'")
        mapping[(parts[0], parts[1])] = parts[2]
    return mapping


class InteractionLog:
    """Cleaned consultation events plus dense entity index maps.

    Events hold only primary-care consultations, aggregated to at most one
    entry per (patient, doctor, year) with a merge count. The patient map
    covers every patient retained by cleaning (including those whose episodes
    were all with specialists, so they stay addressable for cold-start
    routing); the doctor map covers family doctors only, i.e. doctors that
    appear in events.
    """

    def __init__(self, patients, doctors, years, hospitals, counts,
                 patient_ids, doctor_ids, hospital_ids):
        self.patients = np.asarray(patients, dtype=np.int32)
        self.doctors = np.asarray(doctors, dtype=np.int32)
        self.years = np.asarray(years, dtype=np.int32)
        self.hospitals = np.asarray(hospitals, dtype=np.int32)
        self.counts = np.asarray(counts, dtype=np.int32)
        self.patient_ids = list(patient_ids)
        self.doctor_ids = list(doctor_ids)
        self.hospital_ids = list(hospital_ids)
        self.patient_index = {pid: i for i, pid in enumerate(self.patient_ids)}
        self.doctor_index = {did: j for j, did in enumerate(self.doctor_ids)}
        self.hospital_index = {hid: k for k, hid in enumerate(self.hospital_ids)}

    @property
    def n_patients(self) -> int:
        return len(self.patient_ids)

    @property
    def n_doctors(self) -> int:
        return len(self.doctor_ids)

    @property
    def n_events(self) -> int:
        return len(self.patients)

    def year_span(self) -> tuple[int, int]:
        return int(self.years.min()), int(self.years.max())

    def restrict_years(self, lo: int, hi: int) -> "InteractionLog":
        """View of the log keeping events with lo <= year <= hi.

        Index maps are shared, so indices stay comparable across views.
        """
        mask = (self.years >= lo) & (self.years <= hi)
        return InteractionLog(
            self.patients[mask], self.doctors[mask], self.years[mask],
            self.hospitals[mask], self.counts[mask],
            self.patient_ids, self.doctor_ids, self.hospital_ids,
        )

    def pairs(self) -> set[tuple[int, int]]:
        return set(zip(self.patients.tolist(), self.doctors.tolist()))

    def doctors_of(self, patient: int) -> set[int]:
        return set(self.doctors[self.patients == patient].tolist())

    def patients_with_events(self) -> np.ndarray:
        return np.unique(self.patients)


def clean(records: list[EpisodeRecord]) -> InteractionLog:
    """Filter and aggregate validated episodes into an InteractionLog."""
    retained = [r for r in records if r.episode_kind not in ("canceled", "emergency")]

    patient_ids: list[str] = []
    patient_index: dict[str, int] = {}
    for r in retained:
        if r.patient_id not in patient_index:
            patient_index[r.patient_id] = len(patient_ids)
            patient_ids.append(r.patient_id)

    events = [
        r for r in retained
        if r.episode_kind == "consultation" and r.specialty == "primary_care"
    ]
    if not events:
        raise ValidationError("empty log after cleaning: no primary-care consultations")

    doctor_ids: list[str] = []
    doctor_index: dict[str, int] = {}
    hospital_ids: list[str] = []
    hospital_index: dict[str, int] = {}
    aggregated: dict[tuple[int, int, int], list[int]] = {}
    for r in events:
        if r.doctor_id not in doctor_index:
            doctor_index[r.doctor_id] = len(doctor_ids)
            doctor_ids.append(r.doctor_id)
        if r.hospital_id not in hospital_index:
            hospital_index[r.hospital_id] = len(hospital_ids)
            hospital_ids.append(r.hospital_id)
        key = (patient_index[r.patient_id], doctor_index[r.doctor_id], r.year)
        slot = aggregated.setdefault(key, [0, hospital_index[r.hospital_id]])
        slot[0] += 1

    keys = sorted(aggregated)
    return InteractionLog(
        patients=[k[0] for k in keys],
        doctors=[k[1] for k in keys],
        years=[k[2] for k in keys],
        hospitals=[aggregated[k][1] for k in keys],
        counts=[aggregated[k][0] for k in keys],
        patient_ids=patient_ids,
        doctor_ids=doctor_ids,
        hospital_ids=hospital_ids,
    )


@dataclass(frozen=True)
class FeatureConfig:
    """Which feature namespaces to assemble, and bucket granularity."""

    patient_namespaces: tuple[str, ...] = PATIENT_NAMESPACES
    doctor_namespaces: tuple[str, ...] = DOCTOR_NAMESPACES
    n_buckets: int = 4

    def __post_init__(self):
        for ns in self.patient_namespaces:
            if ns not in PATIENT_NAMESPACES:
                raise ValidationError(f"unknown patient feature namespace {ns!r}")
        for ns in self.doctor_namespaces:
            if ns not in DOCTOR_NAMESPACES:
                raise ValidationError(f"unknown doctor feature namespace {ns!r}")
        if self.n_buckets < 1:
            raise ValidationError("n_buckets must be >= 1")

    @classmethod
    def identity_only(cls) -> "FeatureConfig":
        return cls(patient_namespaces=("identity",), doctor_namespaces=("identity",))

    def without_identity(self) -> "FeatureConfig":
        return replace(
            self,
            patient_namespaces=tuple(n for n in self.patient_namespaces if n != "identity"),
            doctor_namespaces=tuple(n for n in self.doctor_namespaces if n != "identity"),
        )


class FeatureAssignments:
    """Per-entity categorical feature sets over two side-partitioned vocabularies."""

    def __init__(self, patient_vocab, doctor_vocab, patient_features, doctor_features,
                 config: FeatureConfig, boundaries: dict[str, tuple[float, ...]]):
        self.patient_vocab = list(patient_vocab)          # feature id per dense index
        self.doctor_vocab = list(doctor_vocab)
        self.patient_vocab_index = {f: i for i, f in enumerate(self.patient_vocab)}
        self.doctor_vocab_index = {f: i for i, f in enumerate(self.doctor_vocab)}
        self.patient_features = [tuple(f) for f in patient_features]  # sorted index tuples
        self.doctor_features = [tuple(f) for f in doctor_features]
        self.config = config
        self.boundaries = dict(boundaries)  # "patient.n_hospitals_bucket" -> cut points

    @property
    def n_patient_features(self) -> int:
        return len(self.patient_vocab)

    @property
    def n_doctor_features(self) -> int:
        return len(self.doctor_vocab)

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        for f in self.patient_vocab:
            digest.update(f.encode("utf-8") + b"\x00")
        digest.update(b"\x01")
        for f in self.doctor_vocab:
            digest.update(f.encode("utf-8") + b"\x00")
        return digest.hexdigest()

    def patient_feature_ids(self, patient: int) -> tuple[str, ...]:
        return tuple(self.patient_vocab[i] for i in self.patient_features[patient])

    def doctor_feature_ids(self, doctor: int) -> tuple[str, ...]:
        return tuple(self.doctor_vocab[i] for i in self.doctor_features[doctor])

    def patient_features_without(self, patient: int, namespace: str) -> tuple[int, ...]:
        prefix = namespace + ":"
        return tuple(
            i for i in self.patient_features[patient]
            if not self.patient_vocab[i].startswith(prefix)
        )

    def has_patient_namespace(self, patient: int, namespace: str) -> bool:
        prefix = namespace + ":"
        return any(
            self.patient_vocab[i].startswith(prefix) for i in self.patient_features[patient]
        )

    def lookup_patient_ids(self, feature_ids: list[str]) -> tuple[int, ...]:
        indices = []
        for fid in feature_ids:
            if fid not in self.patient_vocab_index:
                raise ValidationError(f"unknown patient feature {fid!r}")
            indices.append(self.patient_vocab_index[fid])
        return tuple(sorted(indices))


def _age_group(age: int, bands) -> str:
    for cutoff, label in bands:
        if cutoff is None or age < cutoff:
            return label
    raise AssertionError("unreachable")


def _quantile_cuts(values: list[int], n_buckets: int) -> tuple[float, ...]:
    if n_buckets <= 1 or not values:
        return ()
    qs = [k / n_buckets for k in range(1, n_buckets)]
    cuts = np.quantile(np.asarray(values, dtype=float), qs)
    # collapse duplicate cut points so empty buckets never appear
    uniq = []
    for c in cuts:
        if not uniq or c > uniq[-1]:
            uniq.append(float(c))
    return tuple(uniq)


def _bucket(value: float, cuts: tuple[float, ...]) -> int:
    return int(np.searchsorted(np.asarray(cuts), value, side="right")) if cuts else 0


def build_features(
    records: list[EpisodeRecord],
    log: InteractionLog,
    config: FeatureConfig | None = None,
    boundaries: dict[str, tuple[float, ...]] | None = None,
    behavioral_cutoff: int | None = None,
) -> FeatureAssignments:
    """Assemble per-entity feature sets from episode history and demographics.

    Demographic namespaces read the entity's most recent row. Behavioral
    namespaces (hospital counts, tenure, mdc, the doctor's modal hospital)
    only see rows with year <= ``behavioral_cutoff`` when one is given, so a
    temporal fold can be built without leaking future behavior. Quantile
    bucket boundaries are computed on the same restricted rows unless
    precomputed ``boundaries`` (for example from a saved model header) are
    passed in, which keeps bucket edges fixed when featurizing new data.
    """
    config = config or FeatureConfig()
    cutoff = behavioral_cutoff

    patient_rows: dict[int, list[EpisodeRecord]] = {i: [] for i in range(log.n_patients)}
    doctor_rows: dict[int, list[EpisodeRecord]] = {j: [] for j in range(log.n_doctors)}
    for r in records:
        if r.episode_kind in ("canceled", "emergency"):
            continue
        pi = log.patient_index.get(r.patient_id)
        if pi is not None:
            patient_rows[pi].append(r)
        dj = log.doctor_index.get(r.doctor_id)
        if dj is not None:
            doctor_rows[dj].append(r)

    def behavioral(rows):
        return [r for r in rows if cutoff is None or r.year <= cutoff]

    # patient-side behavioral statistics, then quantile cuts over observed values
    n_hosp_stat: dict[int, int] = {}
    tenure_stat: dict[int, int] = {}
    for i, rows in patient_rows.items():
        brows = behavioral(rows)
        if brows:
            n_hosp_stat[i] = len({r.hospital_id for r in brows})
            last = cutoff if cutoff is not None else max(r.year for r in brows)
            tenure_stat[i] = last - min(r.year for r in brows)

    doc_tenure_stat: dict[int, int] = {}
    for j, rows in doctor_rows.items():
        brows = behavioral(rows)
        starts = [r.doctor_start_year for r in brows if r.doctor_start_year is not None]
        if starts:
            last = cutoff if cutoff is not None else max(r.year for r in brows)
            doc_tenure_stat[j] = max(0, last - min(starts))

    if boundaries is None:
        boundaries = {
            "patient.n_hospitals_bucket": _quantile_cuts(list(n_hosp_stat.values()), config.n_buckets),
            "patient.tenure_bucket": _quantile_cuts(list(tenure_stat.values()), config.n_buckets),
            "doctor.tenure_bucket": _quantile_cuts(list(doc_tenure_stat.values()), config.n_buckets),
        }
    else:
        boundaries = {
            key: tuple(float(c) for c in boundaries.get(key, ()))
            for key in ("patient.n_hospitals_bucket", "patient.tenure_bucket",
                        "doctor.tenure_bucket")
        }

    def latest_row(rows):
        return max(rows, key=lambda r: (r.year, r.row)) if rows else None

    patient_sets: list[list[str]] = []
    for i in range(log.n_patients):
        rows = patient_rows[i]
        feats: list[str] = []
        demo = latest_row(rows)
        ns = config.patient_namespaces
        if "gender" in ns and demo is not None and demo.patient_gender:
            feats.append(f"gender:{demo.patient_gender}")
        if "age_group" in ns and demo is not None and demo.patient_age is not None:
            feats.append(f"age_group:{_age_group(demo.patient_age, PATIENT_AGE_GROUPS)}")
        if "region" in ns and demo is not None and demo.patient_region:
            feats.append(f"region:{demo.patient_region}")
        if "n_hospitals_bucket" in ns and i in n_hosp_stat:
            b = _bucket(n_hosp_stat[i], boundaries["patient.n_hospitals_bucket"])
            feats.append(f"n_hospitals_bucket:{b}")
        if "tenure_bucket" in ns and i in tenure_stat:
            b = _bucket(tenure_stat[i], boundaries["patient.tenure_bucket"])
            feats.append(f"tenure_bucket:{b}")
        if "mdc" in ns:
            codes = sorted({
                r.mdc_code for r in behavioral(rows)
                if r.episode_kind == "inpatient" and r.mdc_code is not None
            })
            feats.extend(f"mdc:{c}" for c in codes)
        if "identity" in ns:
            feats.append(f"identity:patient_{i}")
        if not feats:
            raise ValidationError(
                f"patient {log.patient_ids[i]!r} has no features under the enabled namespaces"
            )
        patient_sets.append(feats)

    doctor_sets: list[list[str]] = []
    for j in range(log.n_doctors):
        rows = doctor_rows[j]
        feats = []
        demo = latest_row(rows)
        ns = config.doctor_namespaces
        if "gender" in ns and demo is not None and demo.doctor_gender:
            feats.append(f"gender:{demo.doctor_gender}")
        if "age_group" in ns and demo is not None and demo.doctor_age is not None:
            feats.append(f"age_group:{_age_group(demo.doctor_age, DOCTOR_AGE_GROUPS)}")
        if "seniority" in ns and demo is not None and demo.doctor_seniority:
            feats.append(f"seniority:{demo.doctor_seniority}")
        if "tenure_bucket" in ns and j in doc_tenure_stat:
            b = _bucket(doc_tenure_stat[j], boundaries["doctor.tenure_bucket"])
            feats.append(f"tenure_bucket:{b}")
        if "hospital" in ns:
            brows = behavioral(rows)
            if brows:
                tally = Counter(r.hospital_id for r in brows)
                top = min(tally.items(), key=lambda kv: (-kv[1], kv[0]))[0]
                feats.append(f"hospital:{top}")
        if "identity" in ns:
            feats.append(f"identity:doctor_{j}")
        if not feats:
            raise ValidationError(
                f"doctor {log.doctor_ids[j]!r} has no features under the enabled namespaces"
            )
        doctor_sets.append(feats)

    patient_vocab = sorted({f for feats in patient_sets for f in feats})
    doctor_vocab = sorted({f for feats in doctor_sets for f in feats})
    p_index = {f: i for i, f in enumerate(patient_vocab)}
    d_index = {f: i for i, f in enumerate(doctor_vocab)}
    return FeatureAssignments(
        patient_vocab=patient_vocab,
        doctor_vocab=doctor_vocab,
        patient_features=[tuple(sorted(p_index[f] for f in feats)) for feats in patient_sets],
        doctor_features=[tuple(sorted(d_index[f] for f in feats)) for feats in doctor_sets],
        config=config,
        boundaries=boundaries,
    )


# ---------------------------------------------------------------------------
# Line-oriented artifact formats

LOG_FORMAT = "docmatch-log v1"
FEATURES_FORMAT = "docmatch-features v1"


def write_log(log: InteractionLog, path: str | Path, provenance: dict[str, str] | None = None):
    lines = [f"# format: {LOG_FORMAT}"]
    for key in sorted(provenance or {}):
        lines.append(f"# config: {key} = {provenance[key]}")
    lines.append(f"# patients: {log.n_patients} doctors: {log.n_doctors} "
                 f"hospitals: {len(log.hospital_ids)} events: {log.n_events}")
    lines.extend(f"P\t{pid}" for pid in log.patient_ids)
    lines.extend(f"D\t{did}" for did in log.doctor_ids)
    lines.extend(f"H\t{hid}" for hid in log.hospital_ids)
    order = np.lexsort((log.years, log.doctors, log.patients))
    for k in order:
        lines.append(
            "E\t{}\t{}\t{}\t{}\t{}".format(
                log.patient_ids[log.patients[k]],
                log.doctor_ids[log.doctors[k]],
                log.years[k],
                log.hospital_ids[log.hospitals[k]],
                log.counts[k],
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_log(path: str | Path) -> InteractionLog:
    patient_ids, doctor_ids, hospital_ids = [], [], []
    events = []
    text = Path(path).read_text(encoding="utf-8")
    _check_format_line(text, LOG_FORMAT, path)
    for raw in text.splitlines():
        if not raw or raw.startswith("#"):
            continue
        tag, _, rest = raw.partition("\t")
        if tag == "P":
            patient_ids.append(rest)
        elif tag == "D":
            doctor_ids.append(rest)
        elif tag == "H":
            hospital_ids.append(rest)
        elif tag == "E":
            events.append(rest.split("\t"))
        else:
            raise ValidationError(f"{path}: unknown line tag {tag!r}")
    p_index = {pid: i for i, pid in enumerate(patient_ids)}
    d_index = {did: j for j, did in enumerate(doctor_ids)}
    h_index = {hid: k for k, hid in enumerate(hospital_ids)}
    return InteractionLog(
        patients=[p_index[e[0]] for e in events],
        doctors=[d_index[e[1]] for e in events],
        years=[int(e[2]) for e in events],
        hospitals=[h_index[e[3]] for e in events],
        counts=[int(e[4]) for e in events],
        patient_ids=patient_ids,
        doctor_ids=doctor_ids,
        hospital_ids=hospital_ids,
    )


def write_features(features: FeatureAssignments, log: InteractionLog, path: str | Path,
                   provenance: dict[str, str] | None = None):
    lines = [f"# format: {FEATURES_FORMAT}"]
    for key in sorted(provenance or {}):
        lines.append(f"# config: {key} = {provenance[key]}")
    lines.append(f"# patient_namespaces: {','.join(features.config.patient_namespaces)}")
    lines.append(f"# doctor_namespaces: {','.join(features.config.doctor_namespaces)}")
    lines.append(f"# n_buckets: {features.config.n_buckets}")
    for key in sorted(features.boundaries):
        cuts = ",".join(repr(c) for c in features.boundaries[key])
        lines.append(f"B\t{key}\t{cuts}")
    lines.extend(f"V\tP\t{f}" for f in features.patient_vocab)
    lines.extend(f"V\tD\t{f}" for f in features.doctor_vocab)
    for i, feats in enumerate(features.patient_features):
        ids = ",".join(features.patient_vocab[k] for k in feats)
        lines.append(f"A\tP\t{log.patient_ids[i]}\t{ids}")
    for j, feats in enumerate(features.doctor_features):
        ids = ",".join(features.doctor_vocab[k] for k in feats)
        lines.append(f"A\tD\t{log.doctor_ids[j]}\t{ids}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_features(path: str | Path, log: InteractionLog) -> FeatureAssignments:
    text = Path(path).read_text(encoding="utf-8")
    _check_format_line(text, FEATURES_FORMAT, path)
    patient_vocab, doctor_vocab = [], []
    boundaries: dict[str, tuple[float, ...]] = {}
    p_feats: dict[str, list[str]] = {}
    d_feats: dict[str, list[str]] = {}
    p_ns, d_ns, n_buckets = PATIENT_NAMESPACES, DOCTOR_NAMESPACES, 4
    for raw in text.splitlines():
        if raw.startswith("# patient_namespaces: "):
            p_ns = tuple(raw.split(": ", 1)[1].split(","))
        elif raw.startswith("# doctor_namespaces: "):
            d_ns = tuple(raw.split(": ", 1)[1].split(","))
        elif raw.startswith("# n_buckets: "):
            n_buckets = int(raw.split(": ", 1)[1])
        if not raw or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if parts[0] == "B":
            boundaries[parts[1]] = tuple(float(c) for c in parts[2].split(",")) if parts[2] else ()
        elif parts[0] == "V":
            (patient_vocab if parts[1] == "P" else doctor_vocab).append(parts[2])
        elif parts[0] == "A":
            target = p_feats if parts[1] == "P" else d_feats
            target[parts[2]] = parts[3].split(",") if parts[3] else []
        else:
            raise ValidationError(f"{path}: unknown line tag {parts[0]!r}")
    config = FeatureConfig(patient_namespaces=p_ns, doctor_namespaces=d_ns, n_buckets=n_buckets)
    p_index = {f: i for i, f in enumerate(patient_vocab)}
    d_index = {f: i for i, f in enumerate(doctor_vocab)}
    patient_features = []
    for pid in log.patient_ids:
        if pid not in p_feats:
            raise ValidationError(f"{path}: no feature assignment for patient {pid!r}")
        patient_features.append(tuple(sorted(p_index[f] for f in p_feats[pid])))
    doctor_features = []
    for did in log.doctor_ids:
        if did not in d_feats:
            raise ValidationError(f"{path}: no feature assignment for doctor {did!r}")
        doctor_features.append(tuple(sorted(d_index[f] for f in d_feats[did])))
    return FeatureAssignments(patient_vocab, doctor_vocab, patient_features,
                              doctor_features, config, boundaries)


def _check_format_line(text: str, expected: str, path) -> None:
    first = text.splitlines()[0] if text else ""
    if first != f"# format: {expected}":
        raise ValidationError(f"{path}: not a {expected!r} file (header {first!r})")


def write_episode_csv(records: list[EpisodeRecord], path: str | Path,
                      delimiter: str = ",") -> None:
    """Serialize records back to the delimited input format."""
    columns = REQUIRED_COLUMNS + OPTIONAL_COLUMNS
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, delimiter=delimiter, lineterminator="\n")
        writer.writerow(columns)
        for r in records:
            writer.writerow([
                r.patient_id, r.doctor_id, r.year, r.hospital_id, r.episode_kind,
                r.specialty,
                "" if r.mdc_code is None else r.mdc_code,
                r.patient_gender or "",
                "" if r.patient_age is None else r.patient_age,
                r.patient_region or "",
                r.doctor_gender or "",
                "" if r.doctor_age is None else r.doctor_age,
                r.doctor_seniority or "",
                "" if r.doctor_start_year is None else r.doctor_start_year,
            ])


def episode_csv_text(records: list[EpisodeRecord]) -> str:
    buf = io.StringIO()
    columns = REQUIRED_COLUMNS + OPTIONAL_COLUMNS
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in records:
        writer.writerow([
            r.patient_id, r.doctor_id, r.year, r.hospital_id, r.episode_kind,
            r.specialty,
            "" if r.mdc_code is None else r.mdc_code,
            r.patient_gender or "",
            "" if r.patient_age is None else r.patient_age,
            r.patient_region or "",
            r.doctor_gender or "",
            "" if r.doctor_age is None else r.doctor_age,
            r.doctor_seniority or "",
            "" if r.doctor_start_year is None else r.doctor_start_year,
        ])
    return buf.getvalue()
