"""Shared fixtures and log-building helpers for the test suite."""

from types import SimpleNamespace

import pytest

from docmatch import InteractionLog, SynthConfig, build_features, clean, synth_generate


def make_log(events, n_patients=None, n_doctors=None, n_hospitals=1):
    """Build an InteractionLog from (patient, doctor, year[, count]) tuples.

    Duplicate (patient, doctor, year) keys aggregate their counts, matching
    what clean() produces. Every event sits in hospital 0; entity maps are
    sized from the largest index unless given explicitly.
    """
    agg = {}
    for ev in events:
        p, d, y = int(ev[0]), int(ev[1]), int(ev[2])
        c = int(ev[3]) if len(ev) > 3 else 1
        agg[(p, d, y)] = agg.get((p, d, y), 0) + c
    keys = sorted(agg)
    if n_patients is None:
        n_patients = max(k[0] for k in keys) + 1 if keys else 0
    if n_doctors is None:
        n_doctors = max(k[1] for k in keys) + 1 if keys else 0
    return InteractionLog(
        patients=[k[0] for k in keys],
        doctors=[k[1] for k in keys],
        years=[k[2] for k in keys],
        hospitals=[0] * len(keys),
        counts=[agg[k] for k in keys],
        patient_ids=[f"p{i}" for i in range(n_patients)],
        doctor_ids=[f"d{j}" for j in range(n_doctors)],
        hospital_ids=[f"h{k}" for k in range(n_hospitals)],
    )


@pytest.fixture(scope="session")
def synth_corpus():
    """Small generated corpus shared by tests that need realistic data."""
    config = SynthConfig(n_patients=80, n_doctors=12, n_hospitals=4, n_regions=3)
    records, affinity = synth_generate(config, seed=7)
    log = clean(records)
    features = build_features(records, log)
    return SimpleNamespace(config=config, records=records, affinity=affinity,
                           log=log, features=features)
