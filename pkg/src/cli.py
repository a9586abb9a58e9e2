"""
Earmark - Command Line Interface

Pipeline, one subcommand per stage:

    synth     write a synthetic dataset (and optionally a ratings sidecar)
    screen    screen listeners on anchors, aggregate scores into a dataset
    split     stamp train/val/test tags with a seeded permutation
    train     fine-tune the toy dual encoder, keep the best epoch
    evaluate  CLAPScore vs listener targets, stratified metric tables
    report    merge metric record files into one comparison table

Every command accepts --config (KEY=value file) and --log-level through
the group. Flags override the file, the file overrides the defaults.

Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.
"""

import logging
import sys
from pathlib import Path

import click
import colorama
from colorama import Fore, Style

try:
    from config import DESK_SPLIT, LOG_LEVELS, SYNTH_AUDIO_DIM, SYNTH_ITEMS, SYNTH_LATENT_DIM, SYNTH_NOISE_SIGMA, SYNTH_TEXT_DIM
    from config import RunConfig, load_config_file
    from dataset import (
        ScreeningPolicy,
        Split,
        aggregate_and_rescale,
        filter_split,
        generate_listener_pool,
        generate_synthetic,
        load_dataset,
        load_ratings,
        save_dataset,
        save_ratings,
        screen_listeners,
        split_train_val_test,
    )
    from errors import (
        DatasetFormatError, EarmarkError, ModelStateError, NonFiniteError, RejectedInputError, TrainingDivergedError,
    )
    from losses import LOSS_PRESETS
    from metrics import ScorePairSeries, format_table, read_reports, stratified_report, write_reports
    from model import embed, init_model, load_checkpoint, save_checkpoint
    from scoring import clap_scores
    from trainer import TrainConfig, train, write_loss_curve
except ModuleNotFoundError:
    from src.config import DESK_SPLIT, LOG_LEVELS, SYNTH_AUDIO_DIM, SYNTH_ITEMS, SYNTH_LATENT_DIM, SYNTH_NOISE_SIGMA, SYNTH_TEXT_DIM
    from src.config import RunConfig, load_config_file
    from src.dataset import (
        ScreeningPolicy,
        Split,
        aggregate_and_rescale,
        filter_split,
        generate_listener_pool,
        generate_synthetic,
        load_dataset,
        load_ratings,
        save_dataset,
        save_ratings,
        screen_listeners,
        split_train_val_test,
    )
    from src.errors import (
        DatasetFormatError, EarmarkError, ModelStateError, NonFiniteError, RejectedInputError, TrainingDivergedError,
    )
    from src.losses import LOSS_PRESETS
    from src.metrics import ScorePairSeries, format_table, read_reports, stratified_report, write_reports
    from src.model import embed, init_model, load_checkpoint, save_checkpoint
    from src.scoring import clap_scores
    from src.trainer import TrainConfig, train, write_loss_curve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUNTIME = 3


# =============================================================================
# OUTPUT HELPERS
# =============================================================================

def _ok(message: str):
    click.echo(f"{Fore.GREEN}[OK]{Style.RESET_ALL} {message}")


def _skip(message: str):
    click.echo(f"{Fore.YELLOW}[SKIP]{Style.RESET_ALL} {message}")


def _error(message: str):
    click.echo(f"{Fore.RED}[ERROR]{Style.RESET_ALL} {message}", err=True)


def configure_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper()),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def _run_config(ctx: click.Context, **flags) -> RunConfig:
    return RunConfig.from_sources(flags, ctx.obj["file_values"]).validate()


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# =============================================================================
# COMMANDS
# =============================================================================

@click.group()
@click.option("--config", "config_path", default=None, help="KEY=value file with run parameters.")
@click.option("--log-level", type=click.Choice(LOG_LEVELS, case_sensitive=False), default=None)
@click.pass_context
def cli(ctx, config_path, log_level):
    """Earmark: listener-weighted audio-text relevance training and evaluation."""
    file_values = load_config_file(config_path) if config_path else {}
    ctx.obj = {"file_values": file_values}
    # only the log level is settled here; the full merge happens per command
    level = str(log_level or file_values.get("log_level") or "INFO").upper()
    if level not in LOG_LEVELS:
        raise RejectedInputError(f"log level must be one of {LOG_LEVELS}, got {level!r}")
    configure_logging(level)


@cli.command("synth")
@click.option("--n", "n_items", type=int, default=SYNTH_ITEMS, show_default=True)
@click.option("--sigma", type=float, default=SYNTH_NOISE_SIGMA, show_default=True, help="Listener noise (score points).")
@click.option("--seed", type=int, default=None)
@click.option("--text-dim", type=int, default=SYNTH_TEXT_DIM, show_default=True)
@click.option("--audio-dim", type=int, default=SYNTH_AUDIO_DIM, show_default=True)
@click.option("--latent-dim", type=int, default=SYNTH_LATENT_DIM, show_default=True)
@click.option("--out", required=True, help="Dataset file to write.")
@click.option("--ratings-out", default=None, help="Also write a listener-ratings CSV for `screen`.")
@click.option("--catalog-out", default=None, help="Unscored item catalog for `screen` (default: next to --ratings-out).")
@click.pass_context
def cmd_synth(ctx, n_items, sigma, seed, text_dim, audio_dim, latent_dim, out, ratings_out, catalog_out):
    """Generate a synthetic scored dataset."""
    rc = _run_config(ctx, seed=seed, out=out)
    records = generate_synthetic(n_items, text_dim, audio_dim, sigma, rc.seed, latent_dim=latent_dim)
    save_dataset(records, rc.out)
    _ok(f"wrote {len(records)} records to {rc.out}")

    if ratings_out:
        ratings = generate_listener_pool(records, seed=rc.seed)
        save_ratings(ratings, ratings_out)
        catalog_path = Path(catalog_out) if catalog_out else Path(ratings_out).with_suffix(".items.tsv")
        save_dataset([r.with_scores(()) for r in records], catalog_path)
        _ok(f"wrote {len(ratings)} ratings to {ratings_out} and the item catalog to {catalog_path}")
    return EXIT_OK


@cli.command("screen")
@click.option("--ratings", "ratings_path", required=True, help="Listener-ratings CSV.")
@click.option("--items", "items_path", required=True, help="Item catalog (record file, scores may be empty).")
@click.option("--anchor-threshold", type=float, default=None)
@click.option("--out", required=True, help="Dataset file to write.")
@click.pass_context
def cmd_screen(ctx, ratings_path, items_path, anchor_threshold, out):
    """Screen listeners on anchor samples and aggregate surviving scores."""
    rc = _run_config(ctx, anchor_threshold=anchor_threshold, out=out)
    ratings = load_ratings(_require_file(ratings_path, "ratings file"))
    catalog = load_dataset(_require_file(items_path, "item catalog"), allow_unscored=True)

    screening = screen_listeners(ratings, ScreeningPolicy(rc.anchor_threshold))
    aggregated = aggregate_and_rescale(ratings, screening.kept, catalog)
    save_dataset(aggregated.records, rc.out)

    _ok(f"listeners kept: {len(screening.kept)}, removed: {len(screening.removed)}")
    if screening.unscreenable:
        _skip(f"{len(screening.unscreenable)} listener(s) had no anchor ratings and were excluded")
    if aggregated.dropped_item_ids:
        _skip(f"{len(aggregated.dropped_item_ids)} item(s) lost every rating and were dropped")
    _ok(f"wrote {len(aggregated.records)} records to {rc.out}")
    return EXIT_OK


@cli.command("split")
@click.option("--dataset", required=True)
@click.option("--n-train", type=int, default=DESK_SPLIT[0], show_default=True)
@click.option("--n-val", type=int, default=DESK_SPLIT[1], show_default=True)
@click.option("--n-test", type=int, default=DESK_SPLIT[2], show_default=True)
@click.option("--seed", type=int, default=None)
@click.option("--out", required=True)
@click.pass_context
def cmd_split(ctx, dataset, n_train, n_val, n_test, seed, out):
    """Assign train/val/test tags (records beyond the three sizes are left out)."""
    rc = _run_config(ctx, dataset=dataset, seed=seed, out=out)
    records = load_dataset(_require_file(rc.dataset, "dataset"))
    train_set, val_set, test_set = split_train_val_test(records, n_train, n_val, n_test, rc.seed)
    save_dataset(train_set + val_set + test_set, rc.out)
    _ok(f"split {len(train_set)}/{len(val_set)}/{len(test_set)} -> {rc.out}")
    return EXIT_OK


@cli.command("train")
@click.option("--dataset", default=None, help="Record file with train and val splits.")
@click.option("--preset", type=click.Choice(sorted(LOSS_PRESETS)), default=None, help="Loss configuration.")
@click.option("--epochs", type=int, default=None)
@click.option("--lambda1", type=float, default=None)
@click.option("--lambda2", type=float, default=None)
@click.option("--reg", type=click.Choice(["mse", "mae", "none"], case_sensitive=False), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", default=None, help="Output directory.")
@click.pass_context
def cmd_train(ctx, dataset, preset, epochs, lambda1, lambda2, reg, lr, batch_size, seed, out):
    """Fine-tune on the train split, select the epoch with lowest val loss."""
    if preset is not None:
        preset_l1, preset_l2, preset_reg = LOSS_PRESETS[preset]
        lambda1 = preset_l1 if lambda1 is None else lambda1
        lambda2 = preset_l2 if lambda2 is None else lambda2
        reg = preset_reg.value if reg is None else reg
    rc = _run_config(
        ctx, dataset=dataset, epochs=epochs, lambda1=lambda1, lambda2=lambda2, reg=reg,
        lr=lr, batch_size=batch_size, seed=seed, out=out,
    )
    if rc.dataset is None or rc.out is None:
        raise click.UsageError("train needs --dataset and --out (flag or config file)")
    dataset_path = _require_file(rc.dataset, "dataset")
    out_dir = Path(rc.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(dataset_path)
    train_set = filter_split(records, Split.TRAIN)
    val_set = filter_split(records, Split.VAL)
    if not train_set or not val_set:
        raise DatasetFormatError("needs records tagged split=train and split=val (run `split` first)", dataset_path)

    tcfg = TrainConfig(
        lr=rc.lr, batch_size=rc.batch_size, epochs=rc.epochs, lambda1=rc.lambda1, lambda2=rc.lambda2,
        reg=rc.reg, seed=rc.seed, shuffle=rc.shuffle, weight_decay=rc.weight_decay, normalize=rc.normalize,
    ).validate()
    model = init_model(
        train_set[0].text_features.size, train_set[0].audio_features.size, rc.embed_dim, rc.hidden, rc.seed
    )
    best, report = train(model, train_set, val_set, tcfg)

    checkpoint_config = {"train": tcfg.to_dict(), "embed_dim": rc.embed_dim, "hidden": list(rc.hidden)}
    save_checkpoint(out_dir / "checkpoint.json", best, report.optimizer_state, checkpoint_config)
    report.write(out_dir / "train_report.json")
    write_loss_curve(out_dir / "loss_train.tsv", report.train_losses)
    write_loss_curve(out_dir / "loss_val.tsv", [report.initial_val_loss, *report.val_losses], start_epoch=0)

    _ok(f"best epoch {report.best_epoch}/{tcfg.epochs}: val loss {report.best_val_loss:.6f} "
        f"(untrained {report.initial_val_loss:.6f})")
    _ok(f"wrote checkpoint, report and loss curves to {out_dir}")
    return EXIT_OK


@cli.command("evaluate")
@click.option("--checkpoint", "checkpoint_path", default=None, help="Checkpoint from `train`; omit for an untrained model.")
@click.option("--dataset", default=None)
@click.option("--split", "split_name", type=click.Choice(["train", "val", "test", "all"]), default="test", show_default=True)
@click.option("--scheme", default=None, help="all | natural_vs_synth | per_system | score_split_at_5")
@click.option("--label", default=None, help="Model label stored in the metric records.")
@click.option("--seed", type=int, default=None, help="Initialization seed when no checkpoint is given.")
@click.option("--out", default=None, help="Output directory.")
@click.pass_context
def cmd_evaluate(ctx, checkpoint_path, dataset, split_name, scheme, label, seed, out):
    """CLAPScore every item and correlate with listener targets."""
    rc = _run_config(ctx, dataset=dataset, scheme=scheme, seed=seed, out=out)
    if rc.dataset is None or rc.out is None:
        raise click.UsageError("evaluate needs --dataset and --out (flag or config file)")
    dataset_path = _require_file(rc.dataset, "dataset")
    out_dir = Path(rc.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = load_dataset(dataset_path)
    if split_name != "all":
        records = filter_split(records, Split(split_name))
    if not records:
        raise DatasetFormatError(f"no records in split {split_name!r}", dataset_path)

    text_dim, audio_dim = records[0].text_features.size, records[0].audio_features.size
    if checkpoint_path:
        model = load_checkpoint(_require_file(checkpoint_path, "checkpoint")).model
        label = label or "trained"
    else:
        model = init_model(text_dim, audio_dim, rc.embed_dim, rc.hidden, rc.seed)
        label = label or "untrained"
    if (text_dim, audio_dim) != (model.text_dim, model.audio_dim):
        raise DatasetFormatError(
            f"features are {text_dim}/{audio_dim} wide but the checkpoint expects {model.text_dim}/{model.audio_dim}",
            dataset_path,
        )

    emb = embed(
        model,
        [r.text_features for r in records],
        [r.audio_features for r in records],
    )
    predicted = clap_scores(emb.audio, emb.text)
    series = ScorePairSeries.from_records(records, predicted)
    reports = stratified_report(series, rc.scheme)

    table = format_table(reports, title=f"{label} on {dataset_path.name} ({split_name}, {rc.scheme})")
    (out_dir / "metrics.txt").write_text(table, encoding="utf-8")
    write_reports(out_dir / "metrics.jsonl", reports, label=label)
    _write_scatter(out_dir / "scatter.tsv", records, predicted)

    click.echo(table, nl=False)
    _ok(f"wrote metrics.txt, metrics.jsonl and scatter.tsv to {out_dir}")
    return EXIT_OK


def _write_scatter(path: Path, records, predicted):
    lines = ["item_id\tsource\tclap_score\ttarget"]
    for record, score in zip(records, predicted):
        lines.append(f"{record.item_id}\t{record.source.value}\t{float(score)!r}\t{record.target!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


@cli.command("report")
@click.argument("record_files", nargs=-1, required=True)
@click.option("--title", default=None)
@click.option("--out", default=None, help="Write the combined table here as well.")
@click.pass_context
def cmd_report(ctx, record_files, title, out):
    """Render one or more metrics.jsonl files as a single table."""
    reports = []
    for path in record_files:
        path = _require_file(path, "metric record file")
        for report in read_reports(path):
            report.label = report.label or path.parent.name or path.stem
            reports.append(report)
    table = format_table(reports, title=title)
    click.echo(table, nl=False)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(table, encoding="utf-8")
        _ok(f"wrote {out}")
    return EXIT_OK


# =============================================================================
# ENTRY POINT
# =============================================================================

def main(argv=None) -> int:
    """Run the CLI and return the exit code instead of exiting."""
    colorama.just_fix_windows_console()
    try:
        cli.main(args=argv, prog_name="earmark", standalone_mode=False)
        return EXIT_OK
    except click.exceptions.Abort:
        _error("aborted")
        return EXIT_USAGE
    except click.ClickException as e:
        _error(e.format_message())
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _error(str(e))
        return EXIT_DATA
    except DatasetFormatError as e:
        _error(str(e))
        return EXIT_DATA
    except NonFiniteError as e:
        _error(str(e))
        return EXIT_RUNTIME
    except RejectedInputError as e:
        _error(str(e))
        return EXIT_USAGE
    except (TrainingDivergedError, ModelStateError, EarmarkError) as e:
        _error(str(e))
        return EXIT_RUNTIME
    except Exception as e:
        logger.exception("unexpected failure")
        _error(f"unexpected error: {e}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
