"""Walk-forward evaluation: temporal folds, ranking metrics, five-variant
comparison, and grid search.

Each fold trains on all years before its test year and scores patients who
consult a primary-care doctor in the test year. Five recommenders are
compared: a history-plus-popularity heuristic, collaborative filtering over
identity features (with and without trust weighting), and the full hybrid
model (with and without trust weighting). Switchers, the patients whose
test year includes a doctor they never visited in training, are reported as
a separate cohort; they are the population a recommender can actually help.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from . import router as router_mod
from .baseline import PopularityTable, heuristic_recommend
from .errors import NumericalError, ValidationError
from .ingest import (
    EpisodeRecord,
    FeatureAssignments,
    FeatureConfig,
    InteractionLog,
    build_features,
)
from .model import HybridModel, Hyperparams
from .trust import trust_matrix

VARIANTS = ("baseline", "cf", "cf_trust", "hybrid", "hybrid_trust")

REPORT_FORMAT = "docmatch-report v1"

MEAN_FOLD = "mean"


@dataclass(frozen=True)
class TemporalFold:
    """A chronological split: train on ``train_years``, test on the next year."""

    train_years: tuple[int, int]  # inclusive range, ends at test_year - 1
    test_year: int
    train_log: InteractionLog
    test_log: InteractionLog


def temporal_folds(log: InteractionLog, min_train_years: int = 2) -> list[TemporalFold]:
    """One fold per feasible split, ordered by test year.

    The training window always starts at the log's first year and grows; the
    test year is the year right after it.
    """
    if min_train_years < 1:
        raise ValidationError("min_train_years must be >= 1")
    if len(log.years) == 0:
        raise ValidationError("cannot build folds from an empty log")
    first, last = int(log.years.min()), int(log.years.max())
    span = last - first + 1
    if span < min_train_years + 1:
        raise ValidationError(
            f"log spans {span} year(s) ({first}-{last}); walk-forward evaluation "
            f"needs at least {min_train_years + 1}"
        )
    folds = []
    for test_year in range(first + min_train_years, last + 1):
        folds.append(TemporalFold(
            train_years=(first, test_year - 1),
            test_year=test_year,
            train_log=log.restrict_years(first, test_year - 1),
            test_log=log.restrict_years(test_year, test_year),
        ))
    return folds


def evaluated_patients(fold: TemporalFold) -> list[int]:
    """Patients with at least one test-year consultation."""
    return sorted(set(fold.test_log.patients.tolist()))


def switcher_patients(fold: TemporalFold) -> list[int]:
    """Evaluated patients with training history who visit at least one
    doctor in the test year that they never visited in training."""
    out = []
    for p in evaluated_patients(fold):
        train_docs = fold.train_log.doctors_of(p)
        if not train_docs:
            continue
        if fold.test_log.doctors_of(p) - train_docs:
            out.append(p)
    return out


def _cohort(recommendations, test_log: InteractionLog, patients) -> list[int]:
    if patients is None:
        patients = sorted(set(test_log.patients.tolist()))
    else:
        patients = list(patients)
    if not patients:
        raise ValidationError("zero evaluated patients")
    for p in patients:
        if p not in recommendations:
            raise ValidationError(f"no recommendation list for patient index {p}")
    return patients


def _test_doctor_sets(test_log: InteractionLog) -> dict[int, set[int]]:
    sets: dict[int, set[int]] = {}
    for p, d in zip(test_log.patients.tolist(), test_log.doctors.tolist()):
        sets.setdefault(p, set()).add(d)
    return sets


def hit_rate_at_n(recommendations: dict[int, list[int]], test_log: InteractionLog,
                  n: int, patients=None) -> float:
    """Fraction of evaluated patients whose top-n list contains any doctor
    they actually visit in the test year."""
    patients = _cohort(recommendations, test_log, patients)
    visited = _test_doctor_sets(test_log)
    hits = 0
    for p in patients:
        top = set(list(recommendations[p])[:n])
        if top & visited.get(p, set()):
            hits += 1
    return hits / len(patients)


def precision_at_n(recommendations: dict[int, list[int]], test_log: InteractionLog,
                   n: int, patients=None) -> float:
    """Mean over evaluated patients of |top-n ∩ test-year doctors| / n."""
    patients = _cohort(recommendations, test_log, patients)
    visited = _test_doctor_sets(test_log)
    total = 0.0
    for p in patients:
        top = set(list(recommendations[p])[:n])
        total += len(top & visited.get(p, set())) / n
    return total / len(patients)


@dataclass(frozen=True)
class EvalRow:
    """One report cell. ``fold`` is the test year as text, or ``"mean"``.
    Switcher-cohort cells use the ``_switchers`` metric suffix."""

    variant: str
    fold: str
    n: int
    metric: str
    value: float


@dataclass(frozen=True)
class EvalReport:
    rows: tuple[EvalRow, ...]
    config_echo: tuple[tuple[str, str], ...] = ()

    def get(self, variant: str, fold: str, n: int, metric: str) -> float:
        for row in self.rows:
            if (row.variant, row.fold, row.n, row.metric) == (variant, fold, n, metric):
                return row.value
        raise KeyError((variant, fold, n, metric))

    def variants(self) -> list[str]:
        seen = []
        for row in self.rows:
            if row.variant not in seen:
                seen.append(row.variant)
        return seen

    def n_values(self) -> list[int]:
        return sorted({row.n for row in self.rows})

    def fold_labels(self) -> list[str]:
        labels = []
        for row in self.rows:
            if row.fold != MEAN_FOLD and row.fold not in labels:
                labels.append(row.fold)
        return labels

    @staticmethod
    def _format_value(metric: str, value: float) -> str:
        if metric.startswith("n_patients") and float(value).is_integer():
            return str(int(value))
        return f"{value:.6f}"

    def to_records_text(self) -> str:
        """Line-delimited cells: variant, fold, n, metric, value (tab-separated)."""
        lines = [f"# format: {REPORT_FORMAT}"]
        for key, val in self.config_echo:
            lines.append(f"# config: {key}={val}")
        lines.append("# columns: variant\tfold\tn\tmetric\tvalue")
        for row in self.rows:
            lines.append(
                f"{row.variant}\t{row.fold}\t{row.n}\t{row.metric}\t"
                f"{self._format_value(row.metric, row.value)}"
            )
        return "\n".join(lines) + "\n"

    def to_table_text(self) -> str:
        """Aligned table of the mean-over-folds cells, one block per cohort."""
        n_values = self.n_values()
        variants = self.variants()
        blocks = []
        head = [f"# format: {REPORT_FORMAT}"]
        head.extend(f"# config: {key}={val}" for key, val in self.config_echo)
        blocks.append("\n".join(head))
        for suffix, title in (("", "all evaluated patients"),
                              ("_switchers", "switchers")):
            header = ["variant"] + [
                f"{m}@{n}" for n in n_values for m in ("hr", "p")
            ] + ["patients"]
            lines = [f"cohort: {title}"]
            body = []
            for variant in variants:
                cells = [variant]
                missing = False
                for n in n_values:
                    for metric in (f"hit_rate{suffix}", f"precision{suffix}"):
                        try:
                            cells.append(f"{self.get(variant, MEAN_FOLD, n, metric):.4f}")
                        except KeyError:
                            cells.append("-")
                            missing = True
                try:
                    count = self.get(variant, MEAN_FOLD, n_values[0],
                                     f"n_patients{suffix}")
                    cells.append(self._format_value("n_patients", count))
                except KeyError:
                    cells.append("-")
                if not (missing and all(c == "-" for c in cells[1:-1])):
                    body.append(cells)
            if not body:
                continue
            widths = [max(len(r[k]) for r in [header] + body) for k in range(len(header))]
            for r in [header] + body:
                lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
            blocks.append("\n".join(lines))
        return "\n\n".join(blocks) + "\n"


def write_report(report: EvalReport, path) -> None:
    from pathlib import Path

    Path(path).write_text(report.to_records_text(), encoding="utf-8")


def identity_features(log: InteractionLog) -> FeatureAssignments:
    """Identity-only feature sets over the log's entity maps (pure
    collaborative filtering: one feature per patient, one per doctor)."""
    patient_vocab = [f"identity:patient_{i}" for i in range(log.n_patients)]
    doctor_vocab = [f"identity:doctor_{j}" for j in range(log.n_doctors)]
    return FeatureAssignments(
        patient_vocab=patient_vocab,
        doctor_vocab=doctor_vocab,
        patient_features=[(i,) for i in range(log.n_patients)],
        doctor_features=[(j,) for j in range(log.n_doctors)],
        config=FeatureConfig.identity_only(),
        boundaries={},
    )


def _trust_hyperparams(hyperparams: Hyperparams) -> Hyperparams:
    if hyperparams.trust_mode != "off":
        return hyperparams
    return replace(hyperparams, trust_mode="sample")


def _fit_for_fold(fold: TemporalFold, features: FeatureAssignments,
                  hyperparams: Hyperparams, trusted: bool,
                  trust_normalization: str) -> HybridModel:
    hp = _trust_hyperparams(hyperparams) if trusted else replace(
        hyperparams, trust_mode="off")
    trust = None
    if trusted:
        trust = trust_matrix(fold.train_log, fold.train_years[1],
                             hp.lam, trust_normalization)
    model = HybridModel(features, hp)
    return model.fit(fold.train_log, trust=trust)


def _recommend_all(variant: str, fold: TemporalFold, patients: list[int],
                   n_max: int, model: HybridModel | None,
                   features: FeatureAssignments | None,
                   popularity: PopularityTable | None,
                   baseline_seed: int) -> dict[int, list[int]]:
    recs: dict[int, list[int]] = {}
    if variant == "baseline":
        for p in patients:
            recs[p] = heuristic_recommend(fold.train_log, popularity, p, n_max,
                                          rng_seed=baseline_seed)
        return recs
    # one doctor table for the whole cohort; parameters are frozen here
    table = model.doctor_representation_table()
    for p in patients:
        if variant in ("cf", "cf_trust"):
            feats = features.patient_features[p]
        else:
            _, feats = router_mod._query_features(p, fold.train_log, features,
                                                  fold.test_year)
        ranked = model.rank_doctors(n=n_max, feature_indices=feats, table=table)
        recs[p] = [s.doctor_index for s in ranked]
    return recs


def run_comparison(
    log: InteractionLog,
    features: FeatureAssignments,
    hyperparams: Hyperparams,
    n_list: tuple[int, ...] = (3, 5, 10),
    records: list[EpisodeRecord] | None = None,
    min_train_years: int = 2,
    variants: tuple[str, ...] = VARIANTS,
    trust_normalization: str = "per_year",
    baseline_seed: int = 0,
    config_echo: tuple[tuple[str, str], ...] = (),
) -> EvalReport:
    """Train and evaluate the five recommender variants on temporal folds.

    ``features`` describes the hybrid variants' namespaces and buckets. When
    ``records`` is passed, hybrid features are rebuilt per fold with the
    behavioral cutoff at the last training year so no post-cutoff behavior
    leaks into the query representations; without records the given
    assignments are used unchanged for every fold. Trust weights always use
    the fold's last training year as reference. Returns per-fold cells plus a
    mean row per (variant, n, metric).
    """
    for v in variants:
        if v not in VARIANTS:
            raise ValidationError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    if not n_list:
        raise ValidationError("n_list must not be empty")
    n_list = tuple(sorted(set(int(n) for n in n_list)))
    if n_list[0] < 1:
        raise ValidationError("n values must be >= 1")
    folds = temporal_folds(log, min_train_years)
    n_max = n_list[-1]
    cf_features = identity_features(log)

    rows: list[EvalRow] = []
    sums: dict[tuple[str, int, str], list[float]] = {}

    def emit(variant: str, fold_label: str, n: int, metric: str, value: float):
        if not np.isfinite(value):
            raise NumericalError(
                f"non-finite metric {metric}={value!r} for variant {variant}, "
                f"fold {fold_label}, n={n}"
            )
        rows.append(EvalRow(variant, fold_label, n, metric, float(value)))
        sums.setdefault((variant, n, metric), []).append(float(value))

    for fold in folds:
        label = str(fold.test_year)
        patients = evaluated_patients(fold)
        if not patients:
            raise ValidationError(f"test year {fold.test_year} has no consultations")
        switchers = switcher_patients(fold)
        cutoff = fold.train_years[1]

        if records is not None:
            fold_features = build_features(records, log, config=features.config,
                                           behavioral_cutoff=cutoff)
        else:
            fold_features = features

        models: dict[str, HybridModel] = {}
        for variant in variants:
            if variant == "baseline":
                continue
            trusted = variant.endswith("_trust")
            vfeatures = cf_features if variant.startswith("cf") else fold_features
            models[variant] = _fit_for_fold(fold, vfeatures, hyperparams,
                                            trusted, trust_normalization)

        popularity = PopularityTable.from_log(fold.train_log)
        for variant in variants:
            model = models.get(variant)
            vfeatures = None
            if variant.startswith("cf"):
                vfeatures = cf_features
            elif variant != "baseline":
                vfeatures = fold_features
            recs = _recommend_all(variant, fold, patients, n_max, model,
                                  vfeatures, popularity, baseline_seed)
            for n in n_list:
                emit(variant, label, n, "hit_rate",
                     hit_rate_at_n(recs, fold.test_log, n, patients))
                emit(variant, label, n, "precision",
                     precision_at_n(recs, fold.test_log, n, patients))
                emit(variant, label, n, "n_patients", len(patients))
                emit(variant, label, n, "n_patients_switchers", len(switchers))
                if switchers:
                    emit(variant, label, n, "hit_rate_switchers",
                         hit_rate_at_n(recs, fold.test_log, n, switchers))
                    emit(variant, label, n, "precision_switchers",
                         precision_at_n(recs, fold.test_log, n, switchers))

    for (variant, n, metric), values in sums.items():
        rows.append(EvalRow(variant, MEAN_FOLD, n, metric,
                            float(sum(values) / len(values))))

    ordered = sorted(
        rows,
        key=lambda r: (
            r.fold == MEAN_FOLD, r.fold, VARIANTS.index(r.variant), r.n, r.metric,
        ),
    )
    return EvalReport(rows=tuple(ordered), config_echo=tuple(config_echo))


@dataclass(frozen=True)
class GridCell:
    hyperparams: Hyperparams
    mean_hit_rate: float


GRID_FORMAT = "docmatch-grid v1"


@dataclass(frozen=True)
class GridResult:
    best: Hyperparams
    table: tuple[GridCell, ...]

    def to_records_text(self, axes: tuple[str, ...],
                        config_echo: tuple[tuple[str, str], ...] = ()) -> str:
        lines = [f"# format: {GRID_FORMAT}"]
        lines.extend(f"# config: {key}={val}" for key, val in config_echo)
        lines.append("# columns: " + "\t".join(axes) + "\tmean_hit_rate")
        for cell in self.table:
            values = [str(getattr(cell.hyperparams, a)) for a in axes]
            lines.append("\t".join(values) + f"\t{cell.mean_hit_rate:.6f}")
        best = ", ".join(f"{a}={getattr(self.best, a)}" for a in axes)
        lines.append(f"# best: {best}")
        return "\n".join(lines) + "\n"


def grid_search(
    log: InteractionLog,
    features: FeatureAssignments,
    grid: dict[str, list],
    base_hyperparams: Hyperparams | None = None,
    records: list[EpisodeRecord] | None = None,
    n: int = 10,
    min_train_years: int = 2,
    trust_normalization: str = "per_year",
) -> GridResult:
    """Evaluate every point of a hyperparameter lattice with temporal folds.

    ``grid`` maps Hyperparams field names to candidate values; every
    combination is trained as the hybrid variant (trust weighting per the
    point's ``trust_mode``) and scored by mean hit rate at ``n`` over folds.
    Ties prefer fewer components, then a lower learning rate, then earlier
    lattice order.
    """
    if not grid:
        raise ValidationError("grid must have at least one axis")
    for axis, values in grid.items():
        if not isinstance(values, (list, tuple)) or len(values) == 0:
            raise ValidationError(f"grid axis {axis!r} must list at least one value")
        if axis not in Hyperparams.__dataclass_fields__:
            raise ValidationError(f"unknown hyperparameter {axis!r}")
    base = base_hyperparams if base_hyperparams is not None else Hyperparams()
    folds = temporal_folds(log, min_train_years)
    axes = tuple(grid.keys())

    table: list[GridCell] = []
    for combo in itertools.product(*(grid[a] for a in axes)):
        hp = replace(base, **dict(zip(axes, combo)))
        rates = []
        for fold in folds:
            cutoff = fold.train_years[1]
            if records is not None:
                fold_features = build_features(records, log, config=features.config,
                                               behavioral_cutoff=cutoff)
            else:
                fold_features = features
            trusted = hp.trust_mode != "off"
            model = _fit_for_fold(fold, fold_features, hp, trusted,
                                  trust_normalization)
            patients = evaluated_patients(fold)
            recs = _recommend_all("hybrid", fold, patients, n, model,
                                  fold_features, None, 0)
            rates.append(hit_rate_at_n(recs, fold.test_log, n, patients))
        table.append(GridCell(hyperparams=hp,
                              mean_hit_rate=float(sum(rates) / len(rates))))

    best = min(
        range(len(table)),
        key=lambda k: (-table[k].mean_hit_rate,
                       table[k].hyperparams.no_components,
                       table[k].hyperparams.learning_rate,
                       k),
    )
    return GridResult(best=table[best].hyperparams, table=tuple(table))
