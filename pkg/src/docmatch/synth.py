"""Synthetic episode generator with planted preference structure.

Patients choose a primary-care doctor per year by softmax over an affinity
score: doctor popularity plus homophily bonuses for matching gender and for
the doctor practicing in the patient's home region, plus a persistence bonus
for last year's doctor unless the year is a switch year. Turning the bonus
knobs to zero removes the corresponding structure, which is what the
calibration tests rely on.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pathlib import Path

from .config import ConfigView
from .errors import ConfigError
from .ingest import EpisodeRecord

PATIENT_BANDS = ((15, "child"), (25, "youth"), (60, "adult"), (None, "elderly"))
DOCTOR_BANDS = ((40, "young"), (60, "experienced"), (None, "senior"))

AFFINITY_FORMAT = "docmatch-affinity v1"


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 200
    n_doctors: int = 20
    n_hospitals: int = 5
    n_regions: int = 4
    year_start: int = 2012
    year_end: int = 2017
    gender_homophily: float = 0.7
    region_locality: float = 0.7
    popularity_skew: float = 0.5
    persistence: float = 2.0
    switch_rate: float = 0.3
    temperature: float = 0.25
    visits_min: int = 1
    visits_max: int = 4
    activity_rate: float = 0.85
    cold_rate: float = 0.05
    inpatient_rate: float = 0.10
    emergency_rate: float = 0.05
    canceled_rate: float = 0.05
    specialist_rate: float = 0.10
    n_specialists: int = 10

    def __post_init__(self):
        for name in ("n_patients", "n_doctors", "n_hospitals", "n_regions",
                     "n_specialists", "visits_min"):
            if getattr(self, name) < 1:
                raise ConfigError(f"synth.{name} must be >= 1")
        if self.visits_max < self.visits_min:
            raise ConfigError("synth.visits_max must be >= synth.visits_min")
        if self.year_end < self.year_start:
            raise ConfigError("synth.year_end must be >= synth.year_start")
        if self.temperature <= 0:
            raise ConfigError("synth.temperature must be > 0")
        for name in ("gender_homophily", "region_locality", "switch_rate",
                     "activity_rate", "cold_rate", "inpatient_rate",
                     "emergency_rate", "canceled_rate", "specialist_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"synth.{name} must be in [0, 1]")

    @classmethod
    def from_config(cls, view: ConfigView) -> "SynthConfig":
        kwargs = {}
        ints = ("n_patients", "n_doctors", "n_hospitals", "n_regions", "year_start",
                "year_end", "visits_min", "visits_max", "n_specialists")
        floats = ("gender_homophily", "region_locality", "popularity_skew",
                  "persistence", "switch_rate", "temperature", "activity_rate",
                  "cold_rate", "inpatient_rate", "emergency_rate", "canceled_rate",
                  "specialist_rate")
        for name in ints:
            if view.has(f"synth.{name}"):
                kwargs[name] = view.get_int(f"synth.{name}")
        for name in floats:
            if view.has(f"synth.{name}"):
                kwargs[name] = view.get_float(f"synth.{name}")
        return cls(**kwargs)

    def echo(self) -> dict[str, str]:
        return {f"synth.{k}": repr(v) for k, v in vars(self).items()}


def _band(age: int, bands) -> str:
    for cutoff, label in bands:
        if cutoff is None or age < cutoff:
            return label
    raise AssertionError("unreachable")


def synth_generate(config: SynthConfig,
                   seed: int) -> tuple[list[EpisodeRecord], np.ndarray]:
    """Generate a validated episode list under the planted-structure model.

    Returns the records and the planted (n_patients, n_doctors) affinity
    table: popularity plus the gender and region match bonuses, before the
    per-year persistence bonus and softmax. All randomness flows from one
    generator seeded with ``seed``, so equal (config, seed) pairs produce
    identical outputs.
    """
    cfg = config
    rng = np.random.default_rng(seed)

    hospital_region = rng.integers(0, cfg.n_regions, size=cfg.n_hospitals)
    doc_hospital = rng.integers(0, cfg.n_hospitals, size=cfg.n_doctors)
    doc_region = hospital_region[doc_hospital]
    doc_gender = rng.integers(0, 2, size=cfg.n_doctors)
    doc_age = rng.integers(28, 71, size=cfg.n_doctors)
    doc_practice_years = rng.integers(0, 31, size=cfg.n_doctors)
    doc_start = cfg.year_start - doc_practice_years
    popularity = cfg.popularity_skew * rng.standard_normal(cfg.n_doctors)

    spec_gender = rng.integers(0, 2, size=cfg.n_specialists)
    spec_age = rng.integers(28, 71, size=cfg.n_specialists)
    spec_start = cfg.year_start - rng.integers(0, 31, size=cfg.n_specialists)

    pat_gender = rng.integers(0, 2, size=cfg.n_patients)
    pat_age = rng.integers(1, 91, size=cfg.n_patients)
    pat_region = rng.integers(0, cfg.n_regions, size=cfg.n_patients)
    cold = rng.random(cfg.n_patients) < cfg.cold_rate

    gender_label = ("M", "F")
    years = range(cfg.year_start, cfg.year_end + 1)

    def doctor_fields(j: int) -> dict:
        return {
            "doctor_gender": gender_label[doc_gender[j]],
            "doctor_age": int(doc_age[j]),
            "doctor_seniority": _band(int(doc_age[j]), DOCTOR_BANDS),
            "doctor_start_year": int(doc_start[j]),
        }

    def specialist_fields(s: int) -> dict:
        age = int(spec_age[s])
        return {
            "doctor_gender": gender_label[spec_gender[s]],
            "doctor_age": age,
            "doctor_seniority": _band(age, DOCTOR_BANDS),
            "doctor_start_year": int(spec_start[s]),
        }

    records: list[EpisodeRecord] = []
    row_no = 2

    def emit(patient: int, year: int, doctor_id: str, hospital: int, kind: str,
             specialty: str, doc_kw: dict, mdc: int | None = None):
        nonlocal row_no
        records.append(
            EpisodeRecord(
                row=row_no,
                patient_id=f"p{patient:05d}",
                doctor_id=doctor_id,
                year=year,
                hospital_id=f"h{hospital:03d}",
                episode_kind=kind,
                specialty=specialty,
                mdc_code=mdc,
                patient_gender=gender_label[pat_gender[patient]],
                patient_age=int(pat_age[patient]),
                patient_region=f"r{pat_region[patient]}",
                **doc_kw,
            )
        )
        row_no += 1

    affinity = (
        popularity[None, :]
        + cfg.gender_homophily * (doc_gender[None, :] == pat_gender[:, None])
        + cfg.region_locality * (doc_region[None, :] == pat_region[:, None])
    )

    for i in range(cfg.n_patients):
        base_affinity = affinity[i]

        prev_doctor = -1
        had_any = False
        for year in years:
            active = rng.random() < cfg.activity_rate
            if not active and not (cold[i] and year == cfg.year_end and not had_any):
                continue
            had_any = True

            if cold[i]:
                s = int(rng.integers(0, cfg.n_specialists))
                hosp = int(rng.integers(0, cfg.n_hospitals))
                emit(i, year, f"s{s:03d}", hosp, "consultation", "other",
                     specialist_fields(s))
            else:
                year_affinity = base_affinity.copy()
                if prev_doctor >= 0 and rng.random() >= cfg.switch_rate:
                    year_affinity[prev_doctor] += cfg.persistence
                logits = year_affinity / cfg.temperature
                logits -= logits.max()
                probs = np.exp(logits)
                probs /= probs.sum()
                j = int(rng.choice(cfg.n_doctors, p=probs))
                prev_doctor = j
                n_visits = int(rng.integers(cfg.visits_min, cfg.visits_max + 1))
                for _ in range(n_visits):
                    emit(i, year, f"d{j:03d}", int(doc_hospital[j]),
                         "consultation", "primary_care", doctor_fields(j))
                if rng.random() < cfg.canceled_rate:
                    emit(i, year, f"d{j:03d}", int(doc_hospital[j]),
                         "canceled", "primary_care", doctor_fields(j))
                if rng.random() < cfg.specialist_rate:
                    s = int(rng.integers(0, cfg.n_specialists))
                    hosp = int(rng.integers(0, cfg.n_hospitals))
                    emit(i, year, f"s{s:03d}", hosp, "consultation", "other",
                         specialist_fields(s))

            if rng.random() < cfg.inpatient_rate:
                s = int(rng.integers(0, cfg.n_specialists))
                hosp = int(rng.integers(0, cfg.n_hospitals))
                mdc = int(rng.integers(1, 25))
                emit(i, year, f"s{s:03d}", hosp, "inpatient", "other",
                     specialist_fields(s), mdc=mdc)
            if rng.random() < cfg.emergency_rate:
                s = int(rng.integers(0, cfg.n_specialists))
                hosp = int(rng.integers(0, cfg.n_hospitals))
                emit(i, year, f"s{s:03d}", hosp, "emergency", "other",
                     specialist_fields(s))

    if not records:
        raise ConfigError("synthetic generation produced no episodes under this config")
    return records, affinity


def write_affinity(affinity: np.ndarray, path: str | Path) -> None:
    """Serialize a planted affinity table, one (patient, doctor) pair per line.

    Entity names follow the generator's scheme (``p00000``, ``d000``), so the
    file lines up with the episode output of the same run.
    """
    n_patients, n_doctors = affinity.shape
    lines = [f"# format: {AFFINITY_FORMAT}",
             "# columns: patient_id\tdoctor_id\taffinity"]
    for i in range(n_patients):
        for j in range(n_doctors):
            lines.append(f"p{i:05d}\td{j:03d}\t{affinity[i, j]:.12g}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
