"""History-plus-popularity reference recommender.

Candidates are ordered by four rules applied in sequence, without
duplicates: the patient's own doctors by visit count (descending), then by
most recent visit year, then a seeded shuffle of what remains of the
patient's history, then globally popular doctors fill the list. Rules two
and three are tie-breakers inside rule one's count groups; in effect the
patient's past doctors are sorted by (count desc, recency desc, shuffled),
and popularity completes the list.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .ingest import InteractionLog


@dataclass(frozen=True)
class PopularityTable:
    """Doctors ranked by the number of distinct patients seen, descending;
    equal counts rank the lower doctor index first."""

    order: tuple[int, ...]
    distinct_patients: tuple[int, ...]

    @classmethod
    def from_log(cls, log: InteractionLog) -> "PopularityTable":
        seen: dict[int, set[int]] = {j: set() for j in range(log.n_doctors)}
        for p, d in zip(log.patients.tolist(), log.doctors.tolist()):
            seen[d].add(p)
        counts = [len(seen[j]) for j in range(log.n_doctors)]
        order = sorted(range(log.n_doctors), key=lambda j: (-counts[j], j))
        return cls(order=tuple(order), distinct_patients=tuple(counts))


def heuristic_recommend(
    log: InteractionLog,
    popularity: PopularityTable,
    patient: int,
    n: int,
    rng_seed: int = 0,
    candidates=None,
) -> list[int]:
    """Recommend ``n`` doctors for ``patient`` from its history plus popularity.

    ``log`` is the history visible to the recommender (a training window).
    ``candidates`` restricts the output to a doctor subset. The shuffle of
    equal (count, recency) history groups is seeded per patient so a fixed
    seed gives reproducible lists across runs.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    mask = log.patients == patient
    doctors = log.doctors[mask]
    years = log.years[mask]
    counts = log.counts[mask]

    visit_count: dict[int, int] = {}
    last_year: dict[int, int] = {}
    for d, y, c in zip(doctors.tolist(), years.tolist(), counts.tolist()):
        visit_count[d] = visit_count.get(d, 0) + c
        last_year[d] = max(last_year.get(d, y), y)

    allowed = None if candidates is None else {int(c) for c in candidates}

    rng = np.random.default_rng([rng_seed, patient])
    history = [d for d in visit_count if allowed is None or d in allowed]
    shuffle_key = {d: float(r) for d, r in zip(sorted(history), rng.random(len(history)))}
    history.sort(key=lambda d: (-visit_count[d], -last_year[d], shuffle_key[d]))

    out: list[int] = []
    for d in history:
        if len(out) == n:
            break
        out.append(d)
    if len(out) < n:
        for d in popularity.order:
            if len(out) == n:
                break
            if d in visit_count:
                continue
            if allowed is not None and d not in allowed:
                continue
            out.append(d)
    return out
