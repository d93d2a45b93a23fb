"""Command-line entry point: ``peft-forge {train,eval,audit-params,gradcheck}``."""

from __future__ import annotations

import contextlib
import csv
import json
import os
import sys
from pathlib import Path

import click
from threadpoolctl import threadpool_limits

from . import gradcheck as gc
from . import runner
from .config import ExperimentConfig, experiment_to_dict, load_experiment
from .errors import ConfigError, TrainingDiverged
from .multitask import VOCAB
from .sharing import audit, describe, table1_rows

THREADS_ENV = "PEFT_FORGE_THREADS"
AUDIT_COLUMNS = ("regime", "config", "trainable_count", "denominator", "percent")

EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_CHECK_FAILED = 1


def _threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise click.UsageError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def _limits():
    return threadpool_limits(limits=_threads())


def _fail(msg: str, code: int):
    click.echo(f"error: {msg}", err=True)
    sys.exit(code)


def _load(path) -> ExperimentConfig:
    try:
        return load_experiment(path)
    except ConfigError as e:
        _fail(str(e), EXIT_CONFIG)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Parameter-efficient fine-tuning experiments on a small encoder-decoder."""


@main.command("train")
@click.option("--config", "config_path", required=True, type=click.Path(dir_okay=False), help="Experiment JSON.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None, help="Overrides output_dir.")
def train_cmd(config_path, out_dir):
    """Train, then write metrics.jsonl, checkpoint.npz and report.json."""
    cfg = _load(config_path)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl"
    with _limits():
        try:
            exp = runner.build_experiment(cfg)
        except ConfigError as e:
            _fail(f"{config_path}: {e}", EXIT_CONFIG)
        with open(metrics_path, "w", encoding="utf-8") as fh:

            def log(rec):
                fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
                fh.flush()
                click.echo(f"epoch {rec.epoch} loss {rec.train_loss:.4f} val {rec.val_average:.2f}", err=True)

            try:
                result = runner.run_training(exp, on_epoch=log)
            except TrainingDiverged as e:
                _fail(f"training diverged: {e}", EXIT_DIVERGED)
        runner.save(exp, out / "checkpoint.npz")
        scores = runner.evaluate_split(exp, "test")
    report = runner.final_report(exp, result, scores)
    runner.write_json(out / "report.json", report)
    click.echo(runner.dumps({"test": report["test"], "test_average": report["test_average"],
                             "updated_percent": report["audit"]["updated_percent"]}))


@main.command("eval")
@click.option("--checkpoint", "ckpt", required=True, type=click.Path(dir_okay=False))
@click.option("--split", type=click.Choice(["train", "val", "test"]), default="test", show_default=True)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="Optional; must match the checkpoint's embedded config.")
def eval_cmd(ckpt, split, config_path):
    """Print per-task and average exact match for a checkpoint as JSON."""
    if not Path(ckpt).is_file():
        _fail(f"checkpoint {ckpt} not found", EXIT_CONFIG)
    with _limits():
        try:
            exp = runner.load(ckpt)
        except (ValueError, KeyError, OSError) as e:
            _fail(f"cannot load checkpoint {ckpt}: {e}", EXIT_CONFIG)
        if config_path is not None:
            cfg = _load(config_path)
            if experiment_to_dict(cfg) != experiment_to_dict(exp.cfg):
                _fail(f"config {config_path} does not match checkpoint {ckpt}", EXIT_CONFIG)
        scores = runner.evaluate_split(exp, split)
    click.echo(runner.dumps({"split": split, "scores": scores}))


@main.command("audit-params")
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None)
@click.option("--table1", is_flag=True, help="All main-table regimes on the bart-base-like descriptor.")
def audit_cmd(config_path, table1):
    """Updated-parameter accounting as CSV on stdout."""
    if table1 == (config_path is not None):
        _fail("give exactly one of --config or --table1", EXIT_CONFIG)
    if table1:
        rows = table1_rows()
    else:
        cfg = _load(config_path)
        model_cfg = cfg.model.build(len(VOCAB))
        rep = audit(model_cfg, cfg.peft, len(cfg.tasks.names))
        rows = [{
            "regime": cfg.peft.kind,
            "config": f"{cfg.peft.kind} {describe(cfg.peft)}".strip(),
            "trainable_count": rep.trainable_total,
            "denominator": rep.denominator_total,
            "percent": rep.updated_percent,
        }]
    writer = csv.DictWriter(sys.stdout, fieldnames=AUDIT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({**row, "percent": f"{row['percent']:.2f}"})


@main.command("gradcheck")
@click.option("--regime", type=click.Choice(list(gc.REGIMES) + ["all"]), default=None,
              help="Check one PEFT regime instead of the numerics ops.")
@click.option("--seed", type=int, default=0, show_default=True)
def gradcheck_cmd(regime, seed):
    """Finite-difference checks at f64; nonzero exit on any failure."""
    with _limits():
        results = gc.run(regime, seed)
    for r in results:
        click.echo(r.line())
    failed = [r for r in results if not r.passed]
    click.echo(f"{len(results) - len(failed)}/{len(results)} checks passed", err=True)
    if failed:
        sys.exit(EXIT_CHECK_FAILED)


if __name__ == "__main__":  # pragma: no cover
    main()
