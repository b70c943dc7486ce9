"""Route recommendation requests by how much history a patient has.

One trained model serves every situation; what changes is which patient
features enter the query representation and which doctors are candidates:

  UC1_new              brand-new patient, demographics only
  UC2_no_primary       episodes exist, no primary-care history, no admission
                       diagnoses
  UC3_no_primary_icd   episodes exist, no primary-care history, with admission
                       diagnoses
  UC4_hybrid           primary-care history, no admission diagnoses
  UC5_hybrid_icd       primary-care history and admission diagnoses

For the first three cases the identity feature is excluded from the query: a
patient with no primary-care interactions has an untrained identity
embedding, which would only add initialization noise.
"""

from __future__ import annotations

import numpy as np

from .errors import ValidationError
from .ingest import FeatureAssignments, InteractionLog
from .model import HybridModel, ScoredDoctor

USE_CASES = (
    "UC1_new",
    "UC2_no_primary",
    "UC3_no_primary_icd",
    "UC4_hybrid",
    "UC5_hybrid_icd",
)

_BEHAVIOR_NAMESPACES = ("n_hospitals_bucket", "tenure_bucket", "mdc")

# Use cases whose query must not rely on the patient's identity feature.
_COLD_CASES = ("UC1_new", "UC2_no_primary", "UC3_no_primary_icd")


def classify(patient: int, log: InteractionLog, features: FeatureAssignments,
             reference_year: int | None = None) -> str:
    """Use case of a known patient.

    Primary-care history is read from ``log`` (restricted to years before
    ``reference_year`` when given). Evidence of other episode kinds comes
    from the behavioral feature namespaces, so ``features`` must have been
    built with a behavioral cutoff matching ``reference_year``.
    """
    if not 0 <= patient < log.n_patients:
        raise ValidationError(f"patient index {patient} out of range")
    window = log
    if reference_year is not None and len(log.years):
        window = log.restrict_years(int(log.years.min()), reference_year - 1)
    has_mdc = features.has_patient_namespace(patient, "mdc")
    if bool(np.any(window.patients == patient)):
        return "UC5_hybrid_icd" if has_mdc else "UC4_hybrid"
    if any(features.has_patient_namespace(patient, ns) for ns in _BEHAVIOR_NAMESPACES):
        return "UC3_no_primary_icd" if has_mdc else "UC2_no_primary"
    return "UC1_new"


def demographics_to_features(demographics: dict[str, str],
                             features: FeatureAssignments) -> tuple[int, ...]:
    """Resolve a demographics mapping to patient feature indices.

    Keys are namespaces (``gender``, ``age_group``, ``region``, ``mdc``);
    values must exist in the trained vocabulary. Identity is not allowed:
    a demographics query describes a patient the model has never seen.
    """
    if not demographics:
        raise ValidationError("demographics query is empty")
    ids = []
    for key, value in demographics.items():
        if key == "identity":
            raise ValidationError("identity is not a demographics field")
        ids.append(f"{key}:{value}")
    return features.lookup_patient_ids(ids)


def candidate_doctors(features: FeatureAssignments,
                      filters=None) -> np.ndarray:
    """All doctor indices, optionally intersected with a filter set.

    Each filter token is a doctor feature id (``hospital:h001``); a bare
    token is shorthand for the hospital namespace. A doctor passes when it
    carries any of the filter features, so a set of hospitals keeps the
    doctors affiliated with any of them.
    """
    n_doctors = len(features.doctor_features)
    if filters is None:
        return np.arange(n_doctors)
    if isinstance(filters, str):
        filters = [filters]
    wanted = set()
    for token in filters:
        token = str(token).strip()
        if not token:
            continue
        wanted.add(token if ":" in token else f"hospital:{token}")
    if not wanted:
        return np.arange(n_doctors)
    out = [
        j for j in range(n_doctors)
        if any(features.doctor_vocab[f] in wanted for f in features.doctor_features[j])
    ]
    if not out:
        raise ValidationError(
            f"filter {sorted(wanted)!r} leaves no candidate doctors"
        )
    return np.asarray(out)


def _query_features(patient, log: InteractionLog, features: FeatureAssignments,
                    reference_year: int | None) -> tuple[str, tuple[int, ...]]:
    """Use case and patient feature indices for a request.

    ``patient`` is a patient index, or a demographics mapping for a what-if
    query about a patient the system has never seen.
    """
    if isinstance(patient, dict):
        return "UC1_new", demographics_to_features(patient, features)
    use_case = classify(patient, log, features, reference_year)
    if use_case in _COLD_CASES:
        feature_indices = features.patient_features_without(patient, "identity")
        if not feature_indices:
            raise ValidationError(
                f"patient {log.patient_ids[patient]!r} has no non-identity "
                f"features; a model with identity-only patient features "
                f"cannot serve cold-start requests"
            )
        return use_case, feature_indices
    return use_case, features.patient_features[patient]


def recommend(
    patient,
    model: HybridModel,
    log: InteractionLog,
    features: FeatureAssignments,
    n: int = 10,
    filters=None,
    reference_year: int | None = None,
) -> list[ScoredDoctor]:
    """Top-n doctors for a patient index or a demographics mapping.

    The use case controls the query representation (identity is dropped for
    patients without primary-care history); candidates are all doctors,
    intersected with ``filters`` when given. Use :func:`classify` to report
    which case served the request.
    """
    _, feature_indices = _query_features(patient, log, features, reference_year)
    candidates = candidate_doctors(features, filters)
    return model.rank_doctors(n=n, candidates=candidates,
                              feature_indices=feature_indices)
