"""Figure and summary-table rendering for reports and generated corpora.

Rendering is headless (Agg) and writes PNG files next to the delimited
outputs; the numbers behind every figure are also written as tab-separated
text so the plots never hold data the files do not.
"""

from __future__ import annotations

from collections import Counter
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .evaluation import MEAN_FOLD, EvalReport
from .ingest import EpisodeRecord


def render_report_figures(report: EvalReport, out_dir: str | Path,
                          stem: str = "report") -> list[Path]:
    """One grouped bar chart per metric: x groups the list length, bars are
    variants, values are means over folds. Cohorts get separate panels."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    n_values = report.n_values()
    variants = report.variants()
    cohorts = [("", "all")]
    if any(r.metric == "hit_rate_switchers" for r in report.rows):
        cohorts.append(("_switchers", "switchers"))
    for metric in ("hit_rate", "precision"):
        fig, axes = plt.subplots(1, len(cohorts), figsize=(5.5 * len(cohorts), 4.0),
                                 squeeze=False)
        for ax, (suffix, cohort) in zip(axes[0], cohorts):
            width = 0.8 / len(variants)
            for v_idx, variant in enumerate(variants):
                xs, ys = [], []
                for n_idx, n in enumerate(n_values):
                    try:
                        ys.append(report.get(variant, MEAN_FOLD, n, metric + suffix))
                    except KeyError:
                        continue
                    xs.append(n_idx + (v_idx - (len(variants) - 1) / 2) * width)
                ax.bar(xs, ys, width=width, label=variant)
            ax.set_xticks(range(len(n_values)))
            ax.set_xticklabels([str(n) for n in n_values])
            ax.set_xlabel("list length n")
            ax.set_ylabel(metric.replace("_", " "))
            ax.set_title(f"{metric.replace('_', ' ')} ({cohort})")
            ax.set_ylim(0, 1)
            ax.legend(fontsize=8)
        fig.tight_layout()
        target = out_dir / f"{stem}.{metric}.png"
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return written


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)]
    for row in rows:
        lines.append("\t".join(str(c) for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def summarize_episodes(records: list[EpisodeRecord], out_dir: str | Path,
                       stem: str = "corpus") -> list[Path]:
    """Descriptive tables and figures for an episode set.

    Covers primary-care consultations only: events per year, load per
    doctor, breadth per patient, and the gender and region-to-hospital
    contingency tables.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    primary = [
        r for r in records
        if r.episode_kind == "consultation" and r.specialty == "primary_care"
    ]
    written: list[Path] = []

    by_year = Counter(r.year for r in primary)
    years = sorted(by_year)
    path = out_dir / f"{stem}.visits_by_year.tsv"
    _write_tsv(path, ["year", "consultations"], [[y, by_year[y]] for y in years])
    written.append(path)

    patients_per_doctor = Counter()
    seen_pd = set()
    for r in primary:
        if (r.doctor_id, r.patient_id) not in seen_pd:
            seen_pd.add((r.doctor_id, r.patient_id))
            patients_per_doctor[r.doctor_id] += 1
    doctors_per_patient = Counter()
    seen_dp = set()
    for r in primary:
        if (r.patient_id, r.doctor_id) not in seen_dp:
            seen_dp.add((r.patient_id, r.doctor_id))
            doctors_per_patient[r.patient_id] += 1

    path = out_dir / f"{stem}.patients_per_doctor.tsv"
    _write_tsv(path, ["doctor_id", "distinct_patients"],
               [[d, patients_per_doctor[d]] for d in sorted(patients_per_doctor)])
    written.append(path)
    path = out_dir / f"{stem}.doctors_per_patient.tsv"
    _write_tsv(path, ["patient_id", "distinct_doctors"],
               [[p, doctors_per_patient[p]] for p in sorted(doctors_per_patient)])
    written.append(path)

    gender_flow = Counter(
        (r.patient_gender or "?", r.doctor_gender or "?") for r in primary
    )
    path = out_dir / f"{stem}.gender_flow.tsv"
    _write_tsv(path, ["patient_gender", "doctor_gender", "consultations"],
               [[a, b, gender_flow[(a, b)]] for a, b in sorted(gender_flow)])
    written.append(path)

    region_flow = Counter((r.patient_region or "?", r.hospital_id) for r in primary)
    path = out_dir / f"{stem}.region_hospital_flow.tsv"
    _write_tsv(path, ["patient_region", "hospital_id", "consultations"],
               [[a, b, region_flow[(a, b)]] for a, b in sorted(region_flow)])
    written.append(path)

    fig, axes = plt.subplots(1, 3, figsize=(13.5, 4.0))
    axes[0].bar([str(y) for y in years], [by_year[y] for y in years])
    axes[0].set_title("primary-care consultations by year")
    axes[0].set_xlabel("year")
    axes[0].set_ylabel("consultations")
    axes[1].hist(list(patients_per_doctor.values()) or [0], bins=20)
    axes[1].set_title("distinct patients per doctor")
    axes[1].set_xlabel("patients")
    axes[1].set_ylabel("doctors")
    axes[2].hist(list(doctors_per_patient.values()) or [0],
                 bins=range(1, max(doctors_per_patient.values(), default=1) + 2))
    axes[2].set_title("distinct doctors per patient")
    axes[2].set_xlabel("doctors")
    axes[2].set_ylabel("patients")
    fig.tight_layout()
    target = out_dir / f"{stem}.summary.png"
    fig.savefig(target, dpi=120)
    plt.close(fig)
    written.append(target)
    return written
