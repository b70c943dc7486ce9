"""Patient-doctor trust weights from consultation history.

Trust accumulates per (patient, doctor) pair: for each year up to the
reference year the doctor's share of that patient's consultations is decayed
by ``exp(-lam * (reference_year - year))`` and the decayed shares are summed.
Under ``per_year`` normalization the share denominator is the patient's
consultation total within each year; ``cumulative`` instead uses totals
accumulated from the first observed year through each year, which damps
early-history spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .ingest import InteractionLog

NORMALIZATIONS = ("per_year", "cumulative")

TRUST_FORMAT = "docmatch-trust v1"


@dataclass(frozen=True)
class TrustWeights:
    """Sparse trust map; a pair has an entry iff it has at least one
    consultation in or before the reference year, and all values are > 0."""

    reference_year: int
    lam: float
    normalization: str
    entries: dict[tuple[int, int], float] = field(default_factory=dict)

    def __contains__(self, pair: tuple[int, int]) -> bool:
        return pair in self.entries

    def __getitem__(self, pair: tuple[int, int]) -> float:
        return self.entries[pair]

    def __len__(self) -> int:
        return len(self.entries)

    def get(self, pair: tuple[int, int], default: float = 0.0) -> float:
        return self.entries.get(pair, default)

    def items(self):
        return self.entries.items()


def yearly_shares(log: InteractionLog, patient: int, year: int) -> dict[int, float]:
    """Share of the patient's consultations in ``year`` going to each doctor.

    Returns an empty dict for years with no consultations.
    """
    mask = (log.patients == patient) & (log.years == year)
    doctors = log.doctors[mask]
    counts = log.counts[mask]
    total = counts.sum()
    if total == 0:
        return {}
    return {int(d): int(c) / int(total) for d, c in zip(doctors, counts)}


def trust_matrix(
    log: InteractionLog,
    reference_year: int,
    lam: float,
    normalization: str = "per_year",
) -> TrustWeights:
    """Decayed trust for every (patient, doctor) pair observed by
    ``reference_year``."""
    if lam < 0:
        raise ValidationError(f"trust decay must be >= 0, got {lam}")
    if normalization not in NORMALIZATIONS:
        raise ValidationError(
            f"unknown trust normalization {normalization!r}; expected one of "
            f"{', '.join(NORMALIZATIONS)}"
        )

    mask = log.years <= reference_year
    patients = log.patients[mask]
    doctors = log.doctors[mask]
    years = log.years[mask]
    counts = log.counts[mask]

    entries: dict[tuple[int, int], float] = {}
    for patient in np.unique(patients):
        rows = patients == patient
        p_doctors = doctors[rows]
        p_years = years[rows]
        p_counts = counts[rows]
        year_values = np.unique(p_years)

        if normalization == "per_year":
            denominators = {
                int(y): int(p_counts[p_years == y].sum()) for y in year_values
            }
        else:
            running = 0
            denominators = {}
            for y in year_values:
                running += int(p_counts[p_years == y].sum())
                denominators[int(y)] = running

        for d, y, c in zip(p_doctors, p_years, p_counts):
            share = int(c) / denominators[int(y)]
            weight = share * math.exp(-lam * (reference_year - int(y)))
            key = (int(patient), int(d))
            entries[key] = entries.get(key, 0.0) + weight
    return TrustWeights(reference_year=reference_year, lam=lam,
                        normalization=normalization, entries=entries)


def trust_oracle(
    events: list[tuple[int, int, int]],
    patient: int,
    doctor: int,
    reference_year: int,
    lam: float,
    normalization: str = "per_year",
) -> float:
    """Brute-force trust for one pair from raw unaggregated events.

    ``events`` are (patient, doctor, year) triples, one per consultation.
    Everything is recomputed with plain loops so this can serve as an
    independent check of :func:`trust_matrix`; pairs with no history get 0.
    """
    if lam < 0:
        raise ValidationError(f"trust decay must be >= 0, got {lam}")
    if normalization not in NORMALIZATIONS:
        raise ValidationError(f"unknown trust normalization {normalization!r}")
    total = 0.0
    for year in range(min((e[2] for e in events), default=reference_year),
                      reference_year + 1):
        numerator = 0
        for (p, d, y) in events:
            if p == patient and d == doctor and y == year:
                numerator += 1
        if numerator == 0:
            continue
        denominator = 0
        for (p, _, y) in events:
            if p == patient:
                if normalization == "per_year" and y == year:
                    denominator += 1
                elif normalization == "cumulative" and y <= year:
                    denominator += 1
        total += (numerator / denominator) * math.exp(-lam * (reference_year - year))
    return total


def trust_vector(trust: TrustWeights, patient: int, n_doctors: int) -> np.ndarray:
    """Dense trust row for one patient (zeros where no history exists)."""
    row = np.zeros(n_doctors)
    for (p, d), value in trust.items():
        if p == patient:
            row[d] = value
    return row


def write_trust(trust: TrustWeights, log: InteractionLog, path: str | Path) -> None:
    """Serialize trust entries, 12 significant digits, sorted by index pair."""
    lines = [
        f"# format: {TRUST_FORMAT}",
        f"# config: trust.lambda = {trust.lam!r}",
        f"# config: trust.normalization = {trust.normalization}",
        f"# config: trust.reference_year = {trust.reference_year}",
    ]
    for p, d in sorted(trust.entries):
        lines.append(
            f"T\t{log.patient_ids[p]}\t{log.doctor_ids[d]}\t{trust.entries[(p, d)]:.12g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trust(path: str | Path, log: InteractionLog) -> TrustWeights:
    text = Path(path).read_text(encoding="utf-8")
    first = text.splitlines()[0] if text else ""
    if first != f"# format: {TRUST_FORMAT}":
        raise ValidationError(f"{path}: not a {TRUST_FORMAT!r} file (header {first!r})")
    lam = 0.0
    normalization = "per_year"
    reference_year = 0
    entries: dict[tuple[int, int], float] = {}
    for raw in text.splitlines():
        if raw.startswith("# config: trust.lambda = "):
            lam = float(raw.rsplit("= ", 1)[1])
        elif raw.startswith("# config: trust.normalization = "):
            normalization = raw.rsplit("= ", 1)[1]
        elif raw.startswith("# config: trust.reference_year = "):
            reference_year = int(raw.rsplit("= ", 1)[1])
        if not raw or raw.startswith("#"):
            continue
        tag, pid, did, value = raw.split("\t")
        if tag != "T":
            raise ValidationError(f"{path}: unknown line tag {tag!r}")
        entries[(log.patient_index[pid], log.doctor_index[did])] = float(value)
    return TrustWeights(reference_year=reference_year, lam=lam,
                        normalization=normalization, entries=entries)
