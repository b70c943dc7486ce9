"""Command-line interface.

Exit codes: 0 success, 2 file and I/O problems, 3 schema, validation, or
configuration errors, 4 numerical aborts during training. Commands take a
flat key-value config file; command-line flags override file values. All
outputs are deterministic given the same inputs, config, and seeds.
"""

from __future__ import annotations

import sys
from collections import Counter
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from pathlib import Path

import click

from . import router as router_mod
from .config import ConfigView, load_config
from .errors import ConfigError, NumericalError, SchemaError, ValidationError
from .evaluation import VARIANTS, grid_search, run_comparison, write_report
from .ingest import (
    REQUIRED_COLUMNS,
    OPTIONAL_COLUMNS,
    FeatureConfig,
    Schema,
    build_features,
    clean,
    load_episodes,
    load_merge_map,
    read_features,
    read_log,
    write_episode_csv,
    write_features,
    write_log,
)
from .model import HybridModel, Hyperparams
from .plots import render_report_figures, summarize_episodes
from .synth import SynthConfig, synth_generate, write_affinity
from .trust import read_trust

_DELIMITERS = {"comma": ",", "tab": "\t", "semicolon": ";"}


def _view(config_path: str | None) -> ConfigView:
    return ConfigView(load_config(config_path) if config_path else {})


def _schema(view: ConfigView) -> Schema:
    columns = {}
    for name in REQUIRED_COLUMNS + OPTIONAL_COLUMNS:
        key = f"schema.{name}"
        if view.has(key):
            columns[name] = view.get_str(key, name)
    raw_delim = view.get_str("ingest.delimiter", "comma")
    delimiter = _DELIMITERS.get(raw_delim, raw_delim)
    if len(delimiter) != 1:
        raise ConfigError(f"ingest.delimiter must be a single character, got {raw_delim!r}")
    window = (view.get_int("ingest.year_min", 2012), view.get_int("ingest.year_max", 2017))
    return Schema(columns=columns, delimiter=delimiter, year_window=window)


def _feature_config(view: ConfigView) -> FeatureConfig:
    kwargs = {}
    if view.has("features.patient_namespaces"):
        kwargs["patient_namespaces"] = view.get_list("features.patient_namespaces", ())
    if view.has("features.doctor_namespaces"):
        kwargs["doctor_namespaces"] = view.get_list("features.doctor_namespaces", ())
    if view.has("features.n_buckets"):
        kwargs["n_buckets"] = view.get_int("features.n_buckets", 4)
    return FeatureConfig(**kwargs)


def _provenance(view: ConfigView, **flags) -> dict[str, str]:
    out = {k: str(v) for k, v in view.values.items()}
    for key, value in flags.items():
        if value is not None:
            out[f"cli.{key}"] = str(value)
    return out


def _echo_tuple(provenance: dict[str, str]) -> tuple[tuple[str, str], ...]:
    return tuple(sorted(provenance.items()))


def _fail(code: int, exc: BaseException) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(code)


def _guarded(fn):
    try:
        fn()
    except NumericalError as exc:
        _fail(4, exc)
    except (SchemaError, ValidationError, ConfigError) as exc:
        _fail(3, exc)
    except OSError as exc:
        _fail(2, exc)


@click.group()
def main():
    """Match patients to primary-care doctors from consultation history."""


@main.command("ingest")
@click.argument("episodes", type=click.Path())
@click.option("--out-log", required=True, type=click.Path(),
              help="Cleaned interaction log output path.")
@click.option("--out-features", required=True, type=click.Path(),
              help="Feature assignment output path.")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Flat key-value config file.")
@click.option("--merge-map", "merge_map_path", type=click.Path(), default=None,
              help="Entity alias file: kind,alias,canonical per line.")
def ingest_cmd(episodes, out_log, out_features, config_path, merge_map_path):
    """Validate raw EPISODES, write the cleaned log and feature assignments."""
    def body():
        view = _view(config_path)
        merge_map = load_merge_map(merge_map_path) if merge_map_path else None
        records = load_episodes(episodes, _schema(view), merge_map)
        log = clean(records)
        features = build_features(records, log, _feature_config(view))
        provenance = _provenance(view, episodes=episodes)
        write_log(log, out_log, provenance)
        write_features(features, log, out_features, provenance)
        click.echo(
            f"ingested {len(records)} episodes: {log.n_patients} patients, "
            f"{log.n_doctors} doctors, {log.n_events} events -> {out_log}"
        )
    _guarded(body)


def _visit_histogram(records) -> list[tuple[int, int]]:
    per_patient = Counter()
    for r in records:
        if r.episode_kind == "consultation" and r.specialty == "primary_care":
            per_patient[r.patient_id] += 1
    histogram = Counter(per_patient.values())
    return sorted(histogram.items())


@main.command("synth")
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Flat key-value config file (synth.* keys).")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Episode CSV output path.")
@click.option("--out-affinity", "affinity_path", type=click.Path(), default=None,
              help="Planted affinity table path [default: <out>.affinity.tsv].")
@click.option("--summary", is_flag=True,
              help="Print visit-count histogram data for the generated corpus.")
@click.option("--summary-dir", type=click.Path(), default=None,
              help="Also write summary tables and figures to this directory.")
def synth_cmd(config_path, seed, out_path, affinity_path, summary, summary_dir):
    """Generate a synthetic episode corpus with planted preference structure."""
    def body():
        view = _view(config_path)
        cfg = SynthConfig.from_config(view)
        records, affinity = synth_generate(cfg, seed)
        write_episode_csv(records, out_path)
        target = affinity_path or str(Path(out_path).with_suffix("")) + ".affinity.tsv"
        write_affinity(affinity, target)
        click.echo(f"wrote {len(records)} episodes -> {out_path}")
        click.echo(f"wrote affinity table -> {target}")
        if summary:
            click.echo("# primary-care visits per patient")
            click.echo("visits\tn_patients")
            for visits, count in _visit_histogram(records):
                click.echo(f"{visits}\t{count}")
        if summary_dir:
            written = summarize_episodes(records, summary_dir, stem=Path(out_path).stem)
            for path in written:
                click.echo(f"wrote {path}")
    _guarded(body)


@main.command("train")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--features", "features_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Model artifact output path.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides model.rng_seed.")
@click.option("--trust-mode", type=click.Choice(["off", "sample", "gradient"]),
              default=None, help="Overrides model.trust_mode.")
@click.option("--trust", "trust_path", type=click.Path(), default=None,
              help="Precomputed trust file; default derives trust from the log.")
def train_cmd(log_path, features_path, out_path, config_path, seed, trust_mode,
              trust_path):
    """Train the ranking model on a cleaned log."""
    def body():
        view = _view(config_path)
        log = read_log(log_path)
        features = read_features(features_path, log)
        hp = Hyperparams.from_config(view)
        if seed is not None:
            hp = replace(hp, rng_seed=seed)
        if trust_mode is not None:
            hp = replace(hp, trust_mode=trust_mode)
        trust = read_trust(trust_path, log) if trust_path else None
        model = HybridModel(features, hp)
        model.fit(log, trust=trust,
                  trust_normalization=view.get_str("trust.normalization", "per_year"))
        model.save(out_path, _provenance(view, seed=seed, trust_mode=trust_mode))
        last = model.history[-1].mean_loss if model.history else float("nan")
        click.echo(
            f"trained {hp.epochs} epochs on {log.n_events} events "
            f"(final mean loss {last:.4f}) -> {out_path}"
        )
    _guarded(body)


@main.command("evaluate")
@click.argument("episodes", type=click.Path())
@click.option("--out-dir", required=True, type=click.Path(),
              help="Directory for the report files and figures.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides model.rng_seed.")
@click.option("--trust-mode", type=click.Choice(["sample", "gradient"]),
              default=None, help="Trust mechanism used by the *_trust variants.")
@click.option("--variants", default=",".join(VARIANTS), show_default=True,
              help="Comma-separated variant subset.")
@click.option("--format", "out_format", type=click.Choice(["table", "records"]),
              default="table", show_default=True, help="What to print to stdout.")
def evaluate_cmd(episodes, out_dir, config_path, seed, trust_mode, variants,
                 out_format):
    """Walk-forward comparison of the recommender variants on raw EPISODES."""
    def body():
        view = _view(config_path)
        records = load_episodes(episodes, _schema(view))
        log = clean(records)
        features = build_features(records, log, _feature_config(view))
        hp = Hyperparams.from_config(view)
        if seed is not None:
            hp = replace(hp, rng_seed=seed)
        if trust_mode is not None:
            hp = replace(hp, trust_mode=trust_mode)
        chosen = tuple(v.strip() for v in variants.split(",") if v.strip())
        n_list = tuple(int(x) for x in view.get_list("eval.n_list", ("3", "5", "10")))
        provenance = _provenance(view, seed=seed, trust_mode=trust_mode,
                                 variants=variants, episodes=episodes)
        report = run_comparison(
            log, features, hp,
            n_list=n_list,
            records=records,
            min_train_years=view.get_int("eval.min_train_years", 2),
            variants=chosen,
            trust_normalization=view.get_str("trust.normalization", "per_year"),
            baseline_seed=view.get_int("eval.baseline_seed", 0),
            config_echo=_echo_tuple(provenance),
        )
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "report.tsv")
        (out / "report.txt").write_text(report.to_table_text(), encoding="utf-8")
        figures = render_report_figures(report, out, stem="report")
        if out_format == "records":
            click.echo(report.to_records_text(), nl=False)
        else:
            click.echo(report.to_table_text(), nl=False)
        for path in [out / "report.tsv", out / "report.txt"] + figures:
            click.echo(f"wrote {path}", err=True)
    _guarded(body)


@main.command("recommend")
@click.option("--log", "log_path", required=True, type=click.Path())
@click.option("--features", "features_path", required=True, type=click.Path())
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--patient", "patient_id", default=None,
              help="Patient id from the log.")
@click.option("--demographics", default=None,
              help="What-if query, e.g. 'gender=F,age_group=elderly,region=r3'.")
@click.option("--n", type=int, default=10, show_default=True)
@click.option("--filter-hospital", default=None,
              help="Comma-separated hospital ids; candidates must practice at one.")
@click.option("--format", "out_format", type=click.Choice(["table", "records"]),
              default="table", show_default=True)
def recommend_cmd(log_path, features_path, model_path, patient_id, demographics,
                  n, filter_hospital, out_format):
    """Rank doctors for one patient (by id) or a demographics query."""
    def body():
        log = read_log(log_path)
        features = read_features(features_path, log)
        model = HybridModel.load(model_path, features)
        if (patient_id is None) == (demographics is None):
            raise ValidationError("provide exactly one of --patient or --demographics")
        if patient_id is not None:
            if patient_id not in log.patient_index:
                raise ValidationError(f"unknown patient id {patient_id!r}")
            query = log.patient_index[patient_id]
            use_case = router_mod.classify(query, log, features)
        else:
            query = _parse_demographics(demographics)
            use_case = "UC1_new"
        filters = None
        if filter_hospital:
            filters = [t.strip() for t in filter_hospital.split(",") if t.strip()]
        ranked = router_mod.recommend(query, model, log, features, n=n,
                                      filters=filters)
        rows = [
            (rank + 1, log.doctor_ids[s.doctor_index], s.score, s.raw)
            for rank, s in enumerate(ranked)
        ]
        if out_format == "records":
            click.echo(f"# use_case: {use_case}")
            click.echo("rank\tdoctor_id\tscore\traw")
            for rank, did, score, raw in rows:
                click.echo(f"{rank}\t{did}\t{score:.6f}\t{raw:.6f}")
        else:
            click.echo(f"use case: {use_case}")
            width = max([len("doctor_id")] + [len(r[1]) for r in rows])
            click.echo(f"rank  {'doctor_id'.ljust(width)}  score")
            for rank, did, score, _ in rows:
                click.echo(f"{str(rank).rjust(4)}  {did.ljust(width)}  {score:.6f}")
    _guarded(body)


def _grid_axes(view: ConfigView) -> dict[str, list]:
    """Extra lattice axes from ``grid.<field>`` config keys (comma lists)."""
    casts = {f.name: f.type for f in dataclass_fields(Hyperparams)}
    grid: dict[str, list] = {}
    for key, raw in sorted(view.values.items()):
        if not key.startswith("grid."):
            continue
        field = key[len("grid."):]
        if field not in casts:
            raise ConfigError(f"unknown hyperparameter in config key {key!r}")
        tokens = [t.strip() for t in str(raw).split(",") if t.strip()]
        if not tokens:
            raise ConfigError(f"config key {key!r} lists no values")
        kind = casts[field]
        if kind == "int":
            grid[field] = [int(t) for t in tokens]
        elif kind == "float":
            grid[field] = [float(t) for t in tokens]
        elif kind == "bool":
            grid[field] = [t.lower() in ("1", "true", "yes") for t in tokens]
        else:
            grid[field] = tokens
    return grid


@main.command("gridsearch")
@click.argument("episodes", type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Grid table output path.")
@click.option("--config", "config_path", type=click.Path(), default=None)
@click.option("--seed", type=int, default=None, help="Overrides model.rng_seed.")
@click.option("--learning-rates", default=None,
              help="Comma-separated learning rates [default: 0.012,0.05].")
@click.option("--no-components", "component_counts", default=None,
              help="Comma-separated embedding sizes [default: 16,32].")
@click.option("--trust-mode", type=click.Choice(["off", "sample", "gradient"]),
              default=None, help="Trust mode of every lattice point.")
def gridsearch_cmd(episodes, out_path, config_path, seed, learning_rates,
                   component_counts, trust_mode):
    """Tune hyperparameters by mean hit rate at 10 over temporal folds.

    The lattice is learning rates x embedding sizes; additional axes come
    from grid.<field> config keys (comma-separated values).
    """
    def body():
        view = _view(config_path)
        records = load_episodes(episodes, _schema(view))
        log = clean(records)
        features = build_features(records, log, _feature_config(view))
        hp = Hyperparams.from_config(view)
        if seed is not None:
            hp = replace(hp, rng_seed=seed)
        if trust_mode is not None:
            hp = replace(hp, trust_mode=trust_mode)
        grid = _grid_axes(view)
        if learning_rates is not None:
            grid["learning_rate"] = [float(x) for x in learning_rates.split(",")
                                     if x.strip()]
        elif "learning_rate" not in grid:
            grid["learning_rate"] = [0.012, 0.05]
        if component_counts is not None:
            grid["no_components"] = [int(x) for x in component_counts.split(",")
                                     if x.strip()]
        elif "no_components" not in grid:
            grid["no_components"] = [16, 32]
        result = grid_search(
            records=records,
            log=log,
            features=features,
            grid=grid,
            base_hyperparams=hp,
            min_train_years=view.get_int("eval.min_train_years", 2),
            trust_normalization=view.get_str("trust.normalization", "per_year"),
        )
        provenance = _provenance(view, seed=seed, trust_mode=trust_mode,
                                 episodes=episodes)
        axes = tuple(grid.keys())
        Path(out_path).write_text(
            result.to_records_text(axes, _echo_tuple(provenance)), encoding="utf-8")
        best = ", ".join(f"{a}={getattr(result.best, a)}" for a in axes)
        click.echo(f"best: {best} -> {out_path}")
    _guarded(body)


def _parse_demographics(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for token in text.split(","):
        token = token.strip()
        if not token:
            continue
        if "=" not in token:
            raise ValidationError(
                f"demographics token {token!r} is not of the form key=value"
            )
        key, _, value = token.partition("=")
        key, value = key.strip(), value.strip()
        if not key or not value:
            raise ValidationError(f"demographics token {token!r} has an empty side")
        if key in out:
            raise ValidationError(f"demographics key {key!r} given twice")
        out[key] = value
    return out


if __name__ == "__main__":
    main()
