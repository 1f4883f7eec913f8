"""Command line interface: ``crossmodal gen-data | train-corr | train | eval | suite | report``.

Every ExperimentConfig field is available as a flag (``--batch-size``,
``--sched-patience`` ...) and as a key in the ``--config`` file; flags win.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import BACKBONES, VARIANTS, ExperimentConfig, build_config, parse_kv_text
from .correlation import CorrelationTower
from .data import SynthConfig, debug_dump, generate_corpus, load_corpus, save_corpus
from .errors import (
    ConfigError,
    ContractError,
    CrossModalError,
    DataError,
    EvaluationError,
    NumericError,
    SuiteError,
)
from .metrics import METRICS
from .report import render, suite_payload
from .training import evaluate, run_experiment_suite, train_classifier, train_tower

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def exit_code_for(exc: BaseException) -> int:
    root = exc.__cause__ if isinstance(exc, SuiteError) and exc.__cause__ is not None else exc
    if isinstance(root, (NumericError, EvaluationError)):
        return EXIT_NUMERIC
    if isinstance(root, (ConfigError, ContractError)):
        return EXIT_CONFIG
    if isinstance(root, DataError):
        return EXIT_DATA
    return 1


def _dataclass_options(cls, skip=()):
    """click options for every field of ``cls`` (all parsed as strings, coerced later)."""

    def decorate(fn):
        for f in reversed(dataclasses.fields(cls)):
            if f.name in skip:
                continue
            default = f.default
            shown = ",".join(map(str, default)) if isinstance(default, tuple) else default
            fn = click.option(f"--{f.name.replace('_', '-')}", f.name, default=None, type=str,
                              help=f"default: {shown}")(fn)
        return fn

    return decorate


def _file_values(config_file, cls) -> dict:
    """Keys of ``cls`` from a config file.  Keys of the other config class are
    skipped so one file can hold both data and experiment settings."""
    if not config_file:
        return {}
    try:
        values = parse_kv_text(Path(config_file).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_file}: {exc}") from exc
    exp = {f.name for f in dataclasses.fields(ExperimentConfig)}
    synth = {f.name for f in dataclasses.fields(SynthConfig)}
    unknown = sorted(set(values) - exp - synth)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    mine = {f.name for f in dataclasses.fields(cls)}
    return {k: v for k, v in values.items() if k in mine}


def _experiment_config(config_file, overrides: dict) -> ExperimentConfig:
    return build_config(ExperimentConfig, _file_values(config_file, ExperimentConfig), overrides)


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def save_tower(tower: CorrelationTower, path, report: dict | None = None, seed: int = 0) -> None:
    cfg = {"arch": tower.config(), "seed": seed}
    state = {"report": report or {}}
    save_checkpoint(Checkpoint(cfg, {k: t.data.copy() for k, t in tower.params.items()}, state), path)


def load_tower(path) -> CorrelationTower:
    ckpt = load_checkpoint(path)
    arch = ckpt.arch
    if arch.get("kind") != "correlation_tower":
        raise DataError(f"{path} is not a correlation tower checkpoint")
    tower = CorrelationTower(arch["video_dim"], arch["audio_dim"], tuple(arch["hidden"]), ckpt.config.get("seed", 0))
    if set(ckpt.params) != set(tower.params):
        raise DataError(f"{path}: tower parameter names do not match")
    for name, arr in ckpt.params.items():
        if tower.params[name].shape != arr.shape:
            raise DataError(f"{path}: tower parameter {name} has shape {arr.shape}")
        tower.params[name].data[...] = arr
    return tower.freeze()


def _emit(text: str, out_dir, name: str) -> None:
    click.echo(text, nl=False)
    if out_dir:
        (_out_dir(out_dir) / name).write_text(text, encoding="utf-8")


class _Group(click.Group):
    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except CrossModalError as exc:
            click.echo(f"error: {exc}", err=True)
            ctx.exit(exit_code_for(exc))


@click.group(cls=_Group)
@click.version_option(package_name="artifact")
def main():
    """Cross-modal fusion experiments on synthetic audio/video corpora."""


@main.command("gen-data")
@_dataclass_options(SynthConfig, skip=("seed",))
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_file", type=click.Path(), default=None, help="flat key = value file")
@click.option("--out-dir", type=click.Path(), required=True)
@click.option("--dump/--no-dump", default=True, help="also write a plain-text debug dump")
def gen_data(seed, config_file, out_dir, dump, **kwargs):
    """Generate a synthetic corpus and its separability certificate."""
    cfg = build_config(SynthConfig, _file_values(config_file, SynthConfig), {**kwargs, "seed": seed})
    corpus = generate_corpus(cfg)
    out = _out_dir(out_dir)
    save_corpus(corpus, out / "corpus.bin")
    (out / "certificate.json").write_text(json.dumps(corpus.certificate, indent=2, sort_keys=True) + "\n")
    if dump:
        (out / "corpus.txt").write_text(debug_dump(corpus))
    click.echo(f"wrote {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} examples to {out / 'corpus.bin'}")
    click.echo("certificate " + json.dumps(corpus.certificate, sort_keys=True))


@main.command("train-corr")
@_dataclass_options(ExperimentConfig)
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
def train_corr(corpus_path, seed, config_file, out_dir, **kwargs):
    """Train and freeze the correlation tower."""
    cfg = _experiment_config(config_file, kwargs)
    corpus = load_corpus(corpus_path)
    tower, report = train_tower(corpus, cfg, seed)
    out = _out_dir(out_dir)
    save_tower(tower, out / "tower.ckpt", report.as_dict(), seed)
    (out / "tower_report.json").write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True) + "\n")
    click.echo(f"tower accuracy {report.accuracy:.4f} fpr {report.fpr:.4f} fnr {report.fnr:.4f}")


@main.command("train")
@_dataclass_options(ExperimentConfig)
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--tower", "tower_path", type=click.Path(), default=None, help="frozen tower (CM-G / CM-C)")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--out-dir", type=click.Path(), required=True)
def train(corpus_path, tower_path, seed, config_file, out_dir, **kwargs):
    """Train one classifier and save its best-validation checkpoint."""
    cfg = _experiment_config(config_file, kwargs)
    corpus = load_corpus(corpus_path)
    tower = load_tower(tower_path) if tower_path else None
    echo = lambda e: click.echo(
        f"epoch {e['epoch']} train_loss {e['train_loss']:.6f} valid_loss {e['valid_loss']:.6f} lr {e['lr']:.3g}"
    )
    result = train_classifier(cfg, corpus, tower, seed, on_epoch=echo)
    out = _out_dir(out_dir)
    save_checkpoint(result.checkpoint, out / "model.ckpt")
    (out / "train_log.json").write_text(json.dumps(result.log, indent=2) + "\n")
    click.echo(f"best epoch {result.checkpoint.state['epoch']} valid_loss {result.checkpoint.state['best_val']:.6f}")


def _report_text(report, fmt: str) -> str:
    if fmt == "csv":
        lines = ["scope,metric,n_examples,value,error,error_std"]
        for rec in report.to_records():
            lines.append(f"{rec['scope']},{rec['metric']},{rec['n_examples']},{rec['value']:.6f},"
                         f"{rec['error']:.6f},{rec['error_std']:.6f}")
        return "\n".join(lines) + "\n"
    lines = [f"{'scope':<16}{'n':>6}" + "".join(f"{m + '_err':>12}" for m in METRICS)]
    for row in report.rows:
        cells = "".join(f"{row.error(m):>12.2f}" for m in METRICS)
        lines.append(f"{row.scope:<16}{row.n_examples:>6}{cells}")
    return "\n".join(lines) + "\n"


@main.command("eval")
@click.option("--corpus", "corpus_path", type=click.Path(), required=True)
@click.option("--checkpoint", "ckpt_path", type=click.Path(), required=True)
@click.option("--tower", "tower_path", type=click.Path(), default=None)
@click.option("--split", type=click.Choice(["train", "valid", "test"]), default="test", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text", show_default=True)
@click.option("--out-dir", type=click.Path(), default=None)
def eval_cmd(corpus_path, ckpt_path, tower_path, split, seed, fmt, out_dir):
    """Evaluate a checkpoint: overall, per-level and per-category error rates."""
    corpus = load_corpus(corpus_path)
    ckpt = load_checkpoint(ckpt_path)
    arch = ckpt.arch
    if (arch.get("video_dim"), arch.get("audio_dim")) != (corpus.video_dim, corpus.audio_dim):
        raise ConfigError(
            f"checkpoint expects video/audio widths {arch.get('video_dim')}/{arch.get('audio_dim')}, "
            f"corpus has {corpus.video_dim}/{corpus.audio_dim}"
        )
    tower = load_tower(tower_path) if tower_path else None
    report = evaluate(ckpt, corpus.split(split), corpus.taxonomy, tower, seed=seed)
    _emit(_report_text(report, fmt), out_dir, f"eval.{'csv' if fmt == 'csv' else 'txt'}")


@main.command("suite")
@_dataclass_options(ExperimentConfig, skip=("backbone", "variant"))
@click.option("--corpus", "corpus_path", type=click.Path(), default=None,
              help="corpus file; generated from synthetic defaults when omitted")
@click.option("--data-seed", type=int, default=0, show_default=True)
@click.option("--backbones", default="transformer", show_default=True, help="comma-separated")
@click.option("--variants", default=",".join(VARIANTS), show_default=True, help="comma-separated")
@click.option("--seed", type=int, default=None, help="run a single seed instead of --seeds")
@click.option("--config", "config_file", type=click.Path(), default=None)
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text", show_default=True)
@click.option("--out-dir", type=click.Path(), required=True)
def suite(corpus_path, data_seed, backbones, variants, seed, config_file, fmt, out_dir, **kwargs):
    """Train and evaluate backbones x variants x seeds; write comparison tables."""
    base = _experiment_config(config_file, kwargs)
    bbs = [b.strip() for b in backbones.split(",") if b.strip()]
    vs = [v.strip() for v in variants.split(",") if v.strip()]
    for b in bbs:
        if b not in BACKBONES:
            raise ConfigError(f"unknown backbone {b!r}")
    configs = [base.replace(backbone=b, variant=v) for b in bbs for v in vs]
    corpus = load_corpus(corpus_path) if corpus_path else generate_corpus(SynthConfig(seed=data_seed))
    seeds = [seed] if seed is not None else list(base.seeds)
    out = _out_dir(out_dir)
    try:
        result = run_experiment_suite(configs, corpus, seeds, progress=lambda s: click.echo(s, err=True))
    except SuiteError as exc:
        if exc.partial is not None and exc.partial.runs:
            payload = suite_payload(exc.partial)
            (out / "suite.partial.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        raise
    payload = suite_payload(result)
    (out / "suite.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(render(payload["summary"], "text", result.towers, result.certificate))
    (out / "report.csv").write_text(render(payload["summary"], "csv"))
    click.echo(render(payload["summary"], fmt, result.towers, result.certificate), nl=False)


@main.command("report")
@click.option("--suite", "suite_path", type=click.Path(), required=True, help="suite.json from `suite`")
@click.option("--format", "fmt", type=click.Choice(["text", "csv"]), default="text", show_default=True)
@click.option("--out-dir", type=click.Path(), default=None)
def report(suite_path, fmt, out_dir):
    """Re-render the comparison tables of a finished suite."""
    try:
        payload = json.loads(Path(suite_path).read_text(encoding="utf-8"))
        summary = payload["summary"]
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read suite results {suite_path}: {exc}") from exc
    text = render(summary, fmt, payload.get("towers"), payload.get("certificate"))
    _emit(text, out_dir, f"report.{'csv' if fmt == 'csv' else 'txt'}")


if __name__ == "__main__":
    sys.exit(main())
