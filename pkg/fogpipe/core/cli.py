"""
Command-line interface for fogpipe.

This module runs the detection pipeline stage by stage: preprocessing raw
recordings into window and GASF archives, centralised and federated
training, evaluation with channel ranking, fallback inference and image
export. Every subcommand reads the same YAML configuration.
"""

import functools
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import pandas as pd
import yaml

from fogpipe.core import __version__
from fogpipe.core.archive import (
    find_window,
    load_gaf_archive,
    load_window_archive,
    save_gaf_archive,
    save_window_archive,
)
from fogpipe.core.config_manager import (
    ConfigManager,
    RunConfig,
    configure_logging,
    thread_count,
)
from fogpipe.core.errors import BadConfig, DataError, FogPipeError, MissingColumn
from fogpipe.core.evaluation import (
    ChannelRanking,
    EvalReport,
    average_reports,
    episodes_to_csv,
    evaluate_predictions,
    infer_with_fallback,
    rank_channels,
    reports_to_csv,
)
from fogpipe.core.federated import (
    RoundConfig,
    partition_clients,
    run_rounds,
    shard_summary,
    write_round_history_csv,
)
from fogpipe.core.gaf import (
    GafImage,
    GafTensorSet,
    export_difference_png,
    export_png,
    gaf_difference,
    transform_window_set,
    window_planes,
)
from fogpipe.core.ingest import (
    CHANNELS,
    consolidate_labels,
    downsample,
    load_recording,
    load_subject_map,
    repetition_splits,
)
from fogpipe.core.model import (
    ModelConfig,
    channel_subsets,
    load_model,
    save_model,
    train,
    trainable_subset,
    write_history_csv,
)
from fogpipe.core.windowing import (
    Window,
    WindowSet,
    center_window,
    class_counts,
    dhwt_gain,
    segment_recordings,
    session_offsets,
)

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MODEL_SUFFIX = ".fogw"


def handle_errors(func):
    """
    Report fogpipe errors on stderr and exit with their code.

    File system errors count as data errors.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except FogPipeError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(e.exit_code)
        except OSError as e:
            click.echo(f"Error: {e}", err=True)
            sys.exit(DataError.exit_code)

    return wrapper


def _load(ctx: click.Context, require_paths: Tuple[str, ...] = ()) -> RunConfig:
    manager = ConfigManager(ctx.obj["config_path"], ctx.obj["overrides"])
    cfg = manager.run_config()
    cfg.validate(require_paths)
    configure_logging(cfg.logging)
    return cfg


def _rep_dir(cfg: RunConfig, repetition: int) -> Path:
    return cfg.paths.out_dir / f"rep{repetition}"


def _model_config(cfg: RunConfig, channels: Sequence[str], repetition: int) -> ModelConfig:
    return ModelConfig(
        channels=tuple(channels),
        epochs=cfg.model.epochs,
        batch_size=cfg.model.batch_size,
        learning_rate=cfg.model.learning_rate,
        l2_lambda=cfg.model.l2_lambda,
        image_size=cfg.gaf.image_size,
        angle_source=cfg.gaf.angle_source,
        seed=cfg.seed + repetition,
    )


def _repetitions(cfg: RunConfig, repetition: Optional[int]) -> List[int]:
    if repetition is None:
        return list(range(cfg.repetitions))
    if not 0 <= repetition < cfg.repetitions:
        raise BadConfig(f"repetition must be in [0, {cfg.repetitions}), got {repetition}")
    return [repetition]


def _write_yaml(path: Path, data: object) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(data, default_flow_style=False, sort_keys=True))


def _with_split(ws: WindowSet, subjects, split: str) -> WindowSet:
    return WindowSet(ws.subset(subjects).windows, split=split)


def _gaf_with_split(gs: GafTensorSet, subjects, split: str) -> GafTensorSet:
    return replace(gs.subset_subjects(sorted(subjects)), split=split)


@click.group()
@click.version_option(version=__version__)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML configuration file")
@click.option("--seed", type=int, help="Root seed (overrides the configuration)")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Output directory (overrides the configuration)")
@click.pass_context
def main(ctx: click.Context, config_path: Optional[str], seed: Optional[int], out_dir: Optional[str]):
    """fogpipe - freezing-of-gait detection from accelerometer recordings."""
    ctx.ensure_object(dict)
    overrides: Dict[str, object] = {}
    if seed is not None:
        overrides["seed"] = seed
    if out_dir is not None:
        overrides["paths"] = {"out_dir": out_dir}
    ctx.obj["config_path"] = config_path
    ctx.obj["overrides"] = overrides


@main.command()
@click.pass_context
@handle_errors
def preprocess(ctx: click.Context):
    """Turn raw recordings into window and GASF archives per repetition."""
    cfg = _load(ctx, ("data_dir",))
    workers = thread_count()
    metadata = cfg.paths.metadata_csv.resolve() if cfg.paths.metadata_csv else None
    files = [p for p in sorted(cfg.paths.data_dir.glob("*.csv")) if p.resolve() != metadata]
    if not files:
        raise DataError(f"no recordings (*.csv) in {cfg.paths.data_dir}")
    subject_map = load_subject_map(cfg.paths.metadata_csv) if cfg.paths.metadata_csv else None

    recordings = []
    for path in files:
        raw = load_recording(path, cfg.ingest.input_rate_hz, subject_map)
        recordings.append(downsample(consolidate_labels(raw), cfg.ingest.downsample_factor))
    logger.info("Loaded %d recordings of %d subjects", len(recordings), len({r.subject_id for r in recordings}))

    w = cfg.windowing
    offsets = session_offsets(recordings, w.window_len)
    hopped = segment_recordings(
        recordings, "train", w.window_len, w.fog_overlap, w.nofog_overlap, workers=workers, offsets=offsets
    )
    fixed = segment_recordings(
        recordings, "test", w.window_len, labeling=w.eval_labeling, workers=workers, offsets=offsets
    )
    hopped_gaf = transform_window_set(hopped, cfg.gaf.image_size, cfg.gaf.angle_source, CHANNELS, workers)
    fixed_gaf = transform_window_set(fixed, cfg.gaf.image_size, cfg.gaf.angle_source, CHANNELS, workers)

    out = cfg.paths.out_dir
    gain = dhwt_gain(recordings, w.window_len, w.fog_overlap)
    _write_yaml(out / "rebalance.yaml", gain.to_dict())

    count_rows = []
    registry = sorted({r.subject_id for r in recordings})
    for split in repetition_splits(registry, cfg.ingest.split_ratios, cfg.seed, cfg.repetitions):
        rep = _rep_dir(cfg, split.repetition_index)
        _write_yaml(rep / "split.yaml", split.to_dict())
        members = {"train": split.train_subjects, "val": split.val_subjects, "test": split.test_subjects}
        for name in SPLITS:
            source, source_gaf = (hopped, hopped_gaf) if name == "train" else (fixed, fixed_gaf)
            ws = _with_split(source, members[name], name)
            save_window_archive(ws, rep / "windows" / name)
            save_gaf_archive(_gaf_with_split(source_gaf, members[name], name), rep / "gaf" / name)
            n_fog, n_nofog = class_counts(ws)
            count_rows.append((split.repetition_index, name, n_fog, n_nofog))

    counts = pd.DataFrame(count_rows, columns=["repetition", "split", "n_fog", "n_nofog"])
    counts.to_csv(out / "class_counts.csv", index=False, lineterminator="\n")

    click.echo(f"Preprocessed {len(recordings)} recordings into {out}")
    click.echo(
        f"FOG windows: {gain.baseline_fog} without hopping, {gain.dhwt_fog} with hopping"
        + (f" (+{gain.fog_increase_percent:.1f}%)" if gain.fog_increase_percent is not None else "")
    )
    for repetition, name, n_fog, n_nofog in count_rows:
        click.echo(f"  rep{repetition} {name}: {n_fog} FOG, {n_nofog} no-FOG")


@main.command("train")
@click.option("--repetition", type=int, default=None, help="Only this repetition")
@click.option("--all-subsets", is_flag=True, help="Train every non-empty channel combination")
@click.pass_context
@handle_errors
def train_cmd(ctx: click.Context, repetition: Optional[int], all_subsets: bool):
    """Train one model per configured channel set."""
    cfg = _load(ctx)
    channel_sets = channel_subsets(CHANNELS) if all_subsets else cfg.model.channel_sets
    workers = thread_count()

    for index in _repetitions(cfg, repetition):
        rep = _rep_dir(cfg, index)
        train_set = load_gaf_archive(rep / "gaf" / "train", "train")
        val_set = load_gaf_archive(rep / "gaf" / "val", "val")
        models_dir = rep / "models"
        models_dir.mkdir(parents=True, exist_ok=True)

        def run(channels: Sequence[str]):
            model = train(_model_config(cfg, channels, index), train_set, val_set)
            name = model.config.name
            save_model(model, models_dir / f"{name}{MODEL_SUFFIX}")
            write_history_csv(model.history, models_dir / f"{name}_history.csv")
            return model

        with ThreadPoolExecutor(max_workers=workers) as pool:
            models = list(pool.map(run, channel_sets))

        rows = []
        for model in models:
            seconds = [r.seconds for r in model.history]
            rows.append(
                (
                    model.config.name,
                    len(model.history),
                    float(np.mean(seconds)) if seconds else None,
                    model.metadata.get("val_f1"),
                )
            )
            click.echo(f"rep{index} {model.config.name}: {len(model.history)} epochs, val F1 {model.metadata.get('val_f1')}")
        timing = pd.DataFrame(rows, columns=["channels", "epochs", "seconds_per_epoch", "val_f1"])
        timing.to_csv(models_dir / "timing.csv", index=False, lineterminator="\n")


@main.command()
@click.option("--repetition", type=int, default=None, help="Only this repetition")
@click.pass_context
@handle_errors
def federate(ctx: click.Context, repetition: Optional[int]):
    """Simulate federated training over client shards."""
    cfg = _load(ctx)
    fed = cfg.federated
    for index in _repetitions(cfg, repetition):
        rep = _rep_dir(cfg, index)
        train_set = load_gaf_archive(rep / "gaf" / "train", "train")
        val_set = load_gaf_archive(rep / "gaf" / "val", "val")
        model_cfg = _model_config(cfg, fed.channels, index)
        round_cfg = RoundConfig(
            num_clients=fed.num_clients,
            local_epochs=fed.local_epochs,
            rounds=fed.rounds,
            seed=model_cfg.seed,
            workers=thread_count(),
        )
        round_cfg.validate()
        shards = partition_clients(train_set, round_cfg.num_clients, round_cfg.seed)
        result = run_rounds(round_cfg, model_cfg, shards, val=val_set)

        fed_dir = rep / "federated"
        save_model(result.model, fed_dir / f"global{MODEL_SUFFIX}")
        write_round_history_csv(result.history, fed_dir / "round_history.csv")
        _write_yaml(fed_dir / "shards.yaml", shard_summary(shards))
        click.echo(
            f"rep{index}: {round_cfg.rounds} rounds x {len(shards)} clients, "
            f"global val F1 {result.model.metadata.get('val_f1')}"
        )


def _discover_models(rep: Path) -> List[Path]:
    found = sorted((rep / "models").glob(f"*{MODEL_SUFFIX}")) + sorted((rep / "federated").glob(f"*{MODEL_SUFFIX}"))
    return found


def _model_key(path: Path) -> str:
    return f"{path.parent.name}/{path.stem}"


@main.command()
@click.argument("model_paths", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.option("--repetition", type=int, default=None, help="Only this repetition (default 0 for explicit models)")
@click.pass_context
@handle_errors
def evaluate(ctx: click.Context, model_paths: Tuple[str, ...], repetition: Optional[int]):
    """Score models on the test split, rank channels and average repetitions."""
    cfg = _load(ctx)
    if model_paths:
        groups = {repetition or 0: [Path(p) for p in model_paths]}
    else:
        groups = {index: _discover_models(_rep_dir(cfg, index)) for index in _repetitions(cfg, repetition)}
    if not any(groups.values()):
        raise DataError(f"no trained models found under {cfg.paths.out_dir}")

    window_rows: List[Tuple[str, EvalReport]] = []
    episode_rows: List[Tuple[str, EvalReport]] = []
    per_key: Dict[str, Dict[str, List[EvalReport]]] = {}
    reports_dir = cfg.paths.out_dir / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)

    for index, paths in sorted(groups.items()):
        rep = _rep_dir(cfg, index)
        test = load_gaf_archive(rep / "gaf" / "test", "test")
        single = []
        for path in paths:
            model = load_model(path)
            data = trainable_subset(test, model.channels)
            if len(data) == 0:
                logger.warning("No usable test windows for %s", path)
                continue
            window_report, episode_report, episodes = evaluate_predictions(
                data.keys, model.predict(data), data.labels, cfg.windowing.window_len
            )
            model.test_f1 = window_report.f1
            save_model(model, path)

            key = _model_key(path)
            window_rows.append((f"rep{index}/{key}", window_report))
            episode_rows.append((f"rep{index}/{key}", episode_report))
            per_key.setdefault(key, {"window": [], "episode": []})
            per_key[key]["window"].append(window_report)
            per_key[key]["episode"].append(episode_report)
            episode_file = reports_dir / f"rep{index}" / f"{key.replace('/', '_')}_episodes.csv"
            episode_file.parent.mkdir(parents=True, exist_ok=True)
            episode_file.write_text(episodes_to_csv(episodes))

            # the fallback ranking is built from centrally trained single-channel models only
            if len(model.channels) == 1 and "federated" not in model.metadata:
                if model.test_f1 is None:
                    logger.warning("%s has an undefined test F1 and is left out of the ranking", path)
                else:
                    single.append((model, path))

        if single:
            ranking = rank_channels([m for m, _ in single], [_relative_to(p, rep) for _, p in single])
            (rep / "ranking.csv").write_text(ranking.to_csv())
            click.echo(f"rep{index} ranking: {', '.join(ranking.channels)}")

    summary_rows = []
    for key in sorted(per_key):
        for level in ("window", "episode"):
            summary_rows.append((key, average_reports(per_key[key][level])))
    (reports_dir / "window_reports.csv").write_text(reports_to_csv(window_rows))
    (reports_dir / "episode_reports.csv").write_text(reports_to_csv(episode_rows))
    (reports_dir / "summary.csv").write_text(reports_to_csv(summary_rows))
    text = "\n\n".join(f"{key}\n{report.to_text()}" for key, report in summary_rows)
    (reports_dir / "summary.txt").write_text(text + "\n")
    click.echo(text)


def _relative_to(path: Path, directory: Path) -> str:
    """Path of a model as stored in a ranking file next to ``directory``."""
    resolved = Path(path).resolve()
    try:
        return str(resolved.relative_to(directory.resolve()))
    except ValueError:
        return str(resolved)


def _read_window_file(path: Path) -> Window:
    try:
        frame = pd.read_csv(path, dtype="float64", float_precision="round_trip")
    except (ValueError, pd.errors.ParserError) as e:
        raise DataError(f"malformed window file {path}: {e}") from e
    absent = [name for name in CHANNELS if name not in frame.columns]
    if absent:
        raise MissingColumn(f"window file lacks column(s): {', '.join(absent)}")
    data = {name: frame[name].to_numpy(dtype=np.float64, copy=True) for name in CHANNELS}
    # no ground truth for a deployed window
    return center_window(Window(subject_id=path.stem, start_index=0, data=data, label=-1, fog_fraction=0.0))


@main.command()
@click.argument("window_file", type=click.Path(exists=True, dir_okay=False))
@click.option("--ranking", "ranking_path", type=click.Path(dir_okay=False), help="Ranking CSV (default: rep<N>/ranking.csv)")
@click.option("--repetition", type=int, default=0, help="Repetition whose ranking is used by default")
@click.pass_context
@handle_errors
def infer(ctx: click.Context, window_file: str, ranking_path: Optional[str], repetition: int):
    """Classify one window with the best functional channel."""
    cfg = _load(ctx)
    path = Path(ranking_path) if ranking_path else _rep_dir(cfg, repetition) / "ranking.csv"
    if not path.exists():
        raise DataError(f"ranking file not found: {path}")
    ranking = ChannelRanking.from_csv(path.read_text(), base_dir=path.parent)
    window = _read_window_file(Path(window_file))
    prediction, channel = infer_with_fallback(ranking, window, cfg.evaluation.max_missing_fraction)
    click.echo(f"prediction={prediction}")
    click.echo(f"channel_used={channel}")


def _parse_key(text: str) -> Tuple[str, int]:
    subject, sep, start = text.rpartition("@")
    if not sep or not subject or not start.lstrip("-").isdigit():
        raise BadConfig(f"window key must look like SUBJECT@START, got {text!r}")
    return subject, int(start)


@main.command("gaf-export")
@click.argument("window_keys", nargs=-1, required=True)
@click.option("--split", type=click.Choice(SPLITS), default="test", help="Split holding the windows")
@click.option("--repetition", type=int, default=0, help="Repetition holding the windows")
@click.option("--channel", "channels", multiple=True, type=click.Choice(CHANNELS), help="Channels to export (default all)")
@click.option("--diff-against", default=None, help="Also write difference maps against this window key")
@click.pass_context
@handle_errors
def gaf_export(
    ctx: click.Context,
    window_keys: Tuple[str, ...],
    split: str,
    repetition: int,
    channels: Tuple[str, ...],
    diff_against: Optional[str],
):
    """Write GASF images of archived windows as PNG (keys are SUBJECT@START)."""
    cfg = _load(ctx)
    channels = channels or CHANNELS
    keys = [_parse_key(k) for k in window_keys]
    other_key = _parse_key(diff_against) if diff_against else None
    ws = load_window_archive(_rep_dir(cfg, repetition) / "windows" / split, split)
    out = cfg.paths.out_dir / "gaf_png"
    out.mkdir(parents=True, exist_ok=True)

    def images(key: Tuple[str, int]) -> Dict[str, GafImage]:
        w = find_window(ws, key)
        planes = window_planes(w, cfg.gaf.image_size, cfg.gaf.angle_source, channels)
        return {name: GafImage(planes[name], name, key) for name in channels}

    other = images(other_key) if other_key else None
    written = 0
    for key in keys:
        stem = f"{key[0]}_{key[1]}"
        for name, img in images(key).items():
            (out / f"{stem}_{name}.png").write_bytes(export_png(img))
            written += 1
            if other is not None:
                diff_stem = f"{stem}_vs_{other_key[0]}_{other_key[1]}_{name}"
                (out / f"{diff_stem}_diff.png").write_bytes(export_difference_png(img, other[name]))
                top = gaf_difference(img, other[name], cfg.evaluation.top_k)
                frame = pd.DataFrame(top, columns=["i", "j", "abs_diff"])
                frame.to_csv(out / f"{diff_stem}_top{cfg.evaluation.top_k}.csv", index=False, lineterminator="\n")
                written += 1
    click.echo(f"Wrote {written} images to {out}")


@main.group()
def config():
    """Inspect the effective configuration."""
    pass


@config.command("show")
@click.pass_context
@handle_errors
def config_show(ctx: click.Context):
    """Print the merged configuration as YAML."""
    manager = ConfigManager(ctx.obj["config_path"], ctx.obj["overrides"])
    manager.run_config().validate()
    click.echo(manager.dump())


@config.command("get")
@click.argument("key_path", required=True)
@click.pass_context
@handle_errors
def config_get(ctx: click.Context, key_path: str):
    """Get a configuration value (e.g. windowing.window_len)."""
    manager = ConfigManager(ctx.obj["config_path"], ctx.obj["overrides"])
    value = manager.get_config_value(key_path)
    if value is None:
        click.echo(f"Key '{key_path}' not found in configuration", err=True)
        sys.exit(1)
    if isinstance(value, (dict, list)):
        click.echo(yaml.safe_dump(value, default_flow_style=False))
    else:
        click.echo(value)


if __name__ == "__main__":
    main()
