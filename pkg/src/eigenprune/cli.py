"""Command line entry point: ``eigenprune <command> ...``."""

from __future__ import annotations

import functools
import logging
import sys
from pathlib import Path

import click
import yaml

from . import checkpoint
from .attribution import PairSampling, capture_taps, decompose, read_scores, score_terms, write_scores
from .data import Dataset, build_vocab, load_task, read_jsonl, split, write_jsonl
from .harness import StageError, calibrate_corruption, corrupt_model, emit_report, run_sweep
from .model import MatrixSelector, ModelConfig, PrunedModel, init_model
from .pruner import P_GRID, apply_freeze, make_freeze_plan
from .trainer import PRESETS, accuracy, preset, train

TASK_CHOICES = click.Choice(["sum", "sum-small", "mult"])


def staged(stage: str):
    """Report failures as ``error [stage]: ...`` with exit code 1."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except (click.ClickException, click.exceptions.Exit):
                raise
            except StageError as e:
                click.echo(f"error {e}", err=True)
                sys.exit(1)
            except Exception as e:  # noqa: BLE001
                click.echo(f"error [{stage}] {type(e).__name__}: {e}", err=True)
                sys.exit(1)

        return inner

    return wrap


def _load_config(ctx, param, value):
    if value is None:
        return None
    data = yaml.safe_load(Path(value).read_text()) or {}
    if not isinstance(data, dict):
        raise click.BadParameter("config must be a key-value mapping")
    ctx.default_map = {**(ctx.default_map or {}), **{k.replace("_", "-"): v for k, v in data.items()}}
    return value


def _splits(ctx, task: str, data_dir: str | None) -> tuple[Dataset, Dataset]:
    if data_dir:
        d = Path(data_dir)
        return read_jsonl(d / "train.jsonl"), read_jsonl(d / "test.jsonl")
    return split(load_task(task), 0.8, ctx.obj["seed"])


def _out(ctx, path: str) -> Path:
    p = Path(path)
    if not p.is_absolute():
        p = ctx.obj["out_dir"] / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _base_model(ckpt):
    return ckpt.model if isinstance(ckpt, PrunedModel) else ckpt


data_option = click.option("--data", "data_dir", default=None, help="Directory with train.jsonl/test.jsonl.")
task_option = click.option("--task", type=TASK_CHOICES, default="sum-small", show_default=True)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for data splits and sampling.")
@click.option("--out-dir", type=click.Path(file_okay=False), default=".", show_default=True)
@click.option("--config", type=click.Path(exists=True, dir_okay=False), callback=_load_config,
              is_eager=True, expose_value=False, help="YAML file of per-command option defaults.")
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx, seed, out_dir, verbose):
    """Eigenpruning of a toy transformer on synthetic arithmetic tasks."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(message)s")
    ctx.obj = {"seed": seed, "out_dir": Path(out_dir)}


@main.command("gen-data")
@task_option
@click.option("--out", default="data", show_default=True)
@click.pass_context
@staged("gen-data")
def gen_data(ctx, task, out):
    """Write the full dataset, its 80/20 split and the vocabulary table."""
    d = _out(ctx, out)
    d.mkdir(parents=True, exist_ok=True)
    full = load_task(task)
    tr, te = split(full, 0.8, ctx.obj["seed"])
    write_jsonl(full, d / "all.jsonl")
    write_jsonl(tr, d / "train.jsonl")
    write_jsonl(te, d / "test.jsonl")
    build_vocab(task).write(d / "vocab.tsv")
    click.echo(f"{task}: {len(full)} examples -> {len(tr)} train / {len(te)} test in {d}")


@main.command("train")
@task_option
@data_option
@click.option("--preset", "preset_name", type=click.Choice(sorted(PRESETS)), default="scratch", show_default=True)
@click.option("--init", "init_ckpt", default=None, help="Start from this checkpoint (finetuning).")
@click.option("--epochs", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--early-stop", type=float, default=None, help="Train-accuracy threshold to stop at.")
@click.option("--layers", type=int, default=2, show_default=True)
@click.option("--heads", type=int, default=4, show_default=True)
@click.option("--d-model", type=int, default=64, show_default=True)
@click.option("--d-ff", type=int, default=256, show_default=True)
@click.option("--out", default="model.epck", show_default=True)
@click.option("--trace", default=None, help="Loss trace CSV (default: <out>.loss.csv).")
@click.pass_context
@staged("train")
def train_cmd(ctx, task, data_dir, preset_name, init_ckpt, epochs, lr, batch_size, early_stop,
              layers, heads, d_model, d_ff, out, trace):
    """Train a model (from scratch or from --init) and save an EPCK checkpoint."""
    tr, te = _splits(ctx, task, data_dir)
    overrides = {"seed": ctx.obj["seed"]}
    for key, val in (("epochs", epochs), ("learning_rate", lr), ("batch_size", batch_size),
                     ("early_stop_accuracy", early_stop)):
        if val is not None:
            overrides[key] = val
    cfg = preset(preset_name, **overrides)
    if init_ckpt:
        model = _base_model(checkpoint.load(init_ckpt))
    else:
        model = init_model(ModelConfig(n_layers=layers, n_heads=heads, d_model=d_model, d_ff=d_ff,
                                       seed=ctx.obj["seed"]))
    result = train(model, tr, cfg)
    path = _out(ctx, out)
    checkpoint.save(result.model, path)
    result.write_trace(_out(ctx, trace) if trace else path.with_suffix(".loss.csv"))
    click.echo(f"epochs={result.epochs_run} train_acc={result.train_accuracy:.4f} "
               f"test_acc={accuracy(result.model, te):.4f} -> {path}")


@main.command("attribute")
@click.option("--checkpoint", "ckpt", required=True)
@task_option
@data_option
@click.option("--selector", default="key", show_default=True, help="Role, optionally ':blocks', e.g. key:0,1.")
@click.option("--pairs", type=int, default=256, show_default=True)
@click.option("--out", default="scores.csv", show_default=True)
@click.pass_context
@staged("attribute")
def attribute_cmd(ctx, ckpt, task, data_dir, selector, pairs, out):
    """Score every rank-one term of the selected matrices on the training split."""
    model = _base_model(checkpoint.load(ckpt))
    tr, _ = _splits(ctx, task, data_dir)
    names = MatrixSelector.parse(selector).select(model)
    cap = capture_taps(model, tr, names)
    scores = score_terms(cap, PairSampling(pairs, ctx.obj["seed"]), decompose(model, names))
    path = _out(ctx, out)
    write_scores(scores, path)
    click.echo(f"{len(scores)} scores over {len(names)} matrices -> {path}")


@main.command("prune")
@click.option("--checkpoint", "ckpt", required=True)
@click.option("--scores", required=True)
@click.option("--p", "p", type=float, required=True)
@task_option
@data_option
@click.option("--out", default="pruned.epck", show_default=True)
@click.option("--plan", default=None, help="Also write the freeze plan as JSON.")
@click.pass_context
@staged("prune")
def prune_cmd(ctx, ckpt, scores, p, task, data_dir, out, plan):
    """Freeze the lowest-scoring fraction p of terms into token-indexed biases."""
    model = _base_model(checkpoint.load(ckpt))
    tr, te = _splits(ctx, task, data_dir)
    sc = read_scores(scores)
    names = sorted({s.matrix for s in sc})
    cap = capture_taps(model, tr, names)
    fp = make_freeze_plan(sc, p, cap.mean_x)
    pruned = apply_freeze(model, fp, decompose(model, names))
    if not isinstance(pruned, PrunedModel) or pruned.model is model:
        pruned = PrunedModel(model=model, delta_bias=dict(pruned.delta_bias))
    path = _out(ctx, out)
    checkpoint.save(pruned, path)
    if plan:
        _out(ctx, plan).write_text(fp.to_json() + "\n")
    click.echo(f"p={p} froze {fp.n_frozen} terms; test_acc={accuracy(pruned, te):.4f} -> {path}")


@main.command("eval")
@click.option("--checkpoint", "ckpt", required=True)
@task_option
@data_option
@click.option("--split", "which", type=click.Choice(["train", "test"]), default="test", show_default=True)
@click.pass_context
@staged("eval")
def eval_cmd(ctx, ckpt, task, data_dir, which):
    """Print argmax accuracy of a (possibly pruned) checkpoint."""
    model = checkpoint.load(ckpt)
    tr, te = _splits(ctx, task, data_dir)
    click.echo(f"{accuracy(model, tr if which == 'train' else te):.6f}")


@main.command("sweep")
@click.option("--checkpoint", "ckpt", required=True)
@task_option
@data_option
@click.option("--selector", default="key", show_default=True)
@click.option("--p-grid", default=",".join(str(p) for p in P_GRID), show_default=True)
@click.option("--pairs", type=int, default=256, show_default=True)
@click.option("--out", default="report.csv", show_default=True)
@click.option("--scores-out", default=None, help="Also write the attribution scores CSV.")
@click.pass_context
@staged("sweep")
def sweep_cmd(ctx, ckpt, task, data_dir, selector, p_grid, pairs, out, scores_out):
    """Score once, then prune and evaluate for every p in the grid."""
    model = _base_model(checkpoint.load(ckpt))
    tr, te = _splits(ctx, task, data_dir)
    grid = [float(p) for p in p_grid.split(",") if p.strip()]
    report = run_sweep(model, tr, te, MatrixSelector.parse(selector), grid,
                       PairSampling(pairs, ctx.obj["seed"]), task=task)
    emit_report(report, _out(ctx, out))
    if scores_out:
        write_scores(report.scores, _out(ctx, scores_out))
    click.echo(f"base {report.base_accuracy:.4f}")
    for r in report.rows:
        click.echo(f"p={r.p:<5} frozen={r.n_frozen:<4} acc={r.accuracy:.4f}")


@main.command("corrupt")
@click.option("--checkpoint", "ckpt", required=True)
@click.option("--matrix", default="blocks.0.key", show_default=True)
@click.option("--strength", type=float, default=None, help="Multiple of the matrix's largest singular value.")
@click.option("--target-drop", type=float, default=None, help="Calibrate strength to this test-accuracy drop.")
@task_option
@data_option
@click.option("--out", default="corrupted.epck", show_default=True)
@click.pass_context
@staged("corrupt")
def corrupt_cmd(ctx, ckpt, matrix, strength, target_drop, task, data_dir, out):
    """Add a seeded rank-one perturbation to one matrix."""
    if (strength is None) == (target_drop is None):
        raise click.UsageError("give exactly one of --strength or --target-drop")
    model = _base_model(checkpoint.load(ckpt))
    _, te = _splits(ctx, task, data_dir)
    if target_drop is not None:
        strength, _ = calibrate_corruption(model, matrix, te, target_drop, seed=ctx.obj["seed"])
    bad = corrupt_model(model, matrix, strength, ctx.obj["seed"])
    path = _out(ctx, out)
    checkpoint.save(bad, path)
    click.echo(f"strength={strength:.6g} test_acc {accuracy(model, te):.4f} -> "
               f"{accuracy(bad, te):.4f} -> {path}")


if __name__ == "__main__":
    main()
