"""Command-line pipeline: split, train, predict, evaluate, benchmark, grid.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Training commands emit machine-readable ``iter=<i> obj=<v>`` progress lines
on standard error.  Artifacts are written atomically (temp file + rename),
and report commands render a matplotlib figure next to the delimited
output unless ``--no-figure`` is given.
"""

import os
import sys
from pathlib import Path

import click

from . import binarycodes, evalbench, fmcore, report
from .data import parse_libfm, serialize_libfm, split_per_user
from .dfmopt import load_checkpoint, save_checkpoint, train_dfm
from .exceptions import DataError, NumericError
from .fileio import DFM_MAGIC, FM_MAGIC, atomic_write_text, sniff_magic
from .fmcore import TrainConfig

THREADS_ENV = "DFMREC_THREADS"


def _parse_field(_ctx, _param, value):
    if value is None:
        return None
    try:
        off, width = value.split(":")
        return (int(off), int(width))
    except ValueError:
        raise click.BadParameter(f"expected OFFSET:WIDTH, got {value!r}")


def _load_dataset(path, user_field=None, item_field=None):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_libfm(fh, user_field=user_field, item_field=item_field)


def _progress(i, obj, *_):
    print(f"iter={i} obj={obj:.10g}", file=sys.stderr)


def _default_threads():
    return int(os.environ.get(THREADS_ENV, "1"))


def _figure_path(out_path):
    return str(Path(out_path).with_suffix(".png"))


@click.group()
def cli():
    """Binary-code factorization machines: train, score, evaluate."""


@cli.command()
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--train-out", required=True, type=click.Path())
@click.option("--test-out", required=True, type=click.Path())
@click.option("--user-field", callback=_parse_field, required=True,
              help="OFFSET:WIDTH of the one-hot user block")
@click.option("--item-field", callback=_parse_field, default=None,
              help="OFFSET:WIDTH of the one-hot item block")
@click.option("--split-fraction", default=0.5, show_default=True)
@click.option("--seed", default=0, show_default=True)
def split(input_path, train_out, test_out, user_field, item_field, split_fraction, seed):
    """Split ratings per user into train and test files."""
    d = _load_dataset(input_path, user_field, item_field)
    train, test = split_per_user(d, split_fraction, seed)
    atomic_write_text(train_out, serialize_libfm(train))
    atomic_write_text(test_out, serialize_libfm(test))
    click.echo(f"train={len(train)} test={len(test)}")


def _train_options(fn):
    for deco in reversed([
        click.option("--input", "input_path", required=True, type=click.Path(exists=True)),
        click.option("--out", "out_path", required=True, type=click.Path()),
        click.option("--k", default=16, show_default=True,
                     help="code length / embedding dimension (8/16/32/64 typical)"),
        click.option("--alpha", default=1e-2, show_default=True,
                     help="l2 strength on linear weights (grid 1e-4..1e2)"),
        click.option("--seed", default=0, show_default=True),
        click.option("--init-scale", default=0.01, show_default=True),
    ]):
        fn = deco(fn)
    return fn


@cli.command("train-fm")
@_train_options
@click.option("--embed-l2", default=0.0, show_default=True,
              help="optional l2 on the real embeddings (baseline only)")
@click.option("--solver", type=click.Choice(["cd", "sgd"]), default="cd", show_default=True)
@click.option("--iters", default=50, show_default=True)
@click.option("--tol", default=1e-6, show_default=True)
def train_fm_cmd(input_path, out_path, k, alpha, seed, init_scale, embed_l2, solver, iters, tol):
    """Train the real-valued baseline model."""
    d = _load_dataset(input_path)
    cfg = TrainConfig(alpha=alpha, k=k, seed=seed, init_scale=init_scale,
                      embed_l2=embed_l2, solver=solver,
                      max_outer_iters=iters, tol=tol)
    model = fmcore.fm_train(d, cfg, on_iter=_progress)
    fmcore.save_fm(model, out_path)
    click.echo(f"wrote {out_path}")


@cli.command("train-dfm")
@_train_options
@click.option("--beta", default=1e-2, show_default=True,
              help="de-correlation coupling strength (grid 1e-4..1e2)")
@click.option("--iters", default=30, show_default=True)
@click.option("--tol", default=1e-5, show_default=True)
@click.option("--init-iters", default=3, show_default=True,
              help="relaxed warm-start rounds")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), default=None,
              help="write a resumable snapshot after every outer iteration")
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None)
def train_dfm_cmd(input_path, out_path, k, alpha, seed, init_scale, beta, iters,
                  tol, init_iters, checkpoint_path, resume_path):
    """Train the binary-code model by discrete alternating optimization."""
    d = _load_dataset(input_path)
    cfg = TrainConfig(alpha=alpha, beta=beta, k=k, seed=seed,
                      init_scale=init_scale, max_outer_iters=iters, tol=tol,
                      init_iters=init_iters)
    state = load_checkpoint(resume_path) if resume_path else None

    def on_iter(i, obj, st):
        _progress(i, obj)
        if checkpoint_path:
            save_checkpoint(st, checkpoint_path)

    model = train_dfm(d, cfg, on_iter=on_iter, state=state)
    binarycodes.save_dfm(model, out_path)
    click.echo(f"wrote {out_path}")


def _load_model(path):
    magic = sniff_magic(path)
    if magic == FM_MAGIC:
        return fmcore.load_fm(path)
    if magic == DFM_MAGIC:
        return binarycodes.load_dfm(path)
    raise DataError(f"{path}: unrecognized model file")


def _score(model, d):
    if isinstance(model, fmcore.FmModel):
        return fmcore.score_dataset(model, d)
    return binarycodes.score_dataset(model, d, path="st")


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def predict(model_path, input_path, out_path):
    """Score every input instance, one score per line, input order."""
    model = _load_model(model_path)
    d = _load_dataset(input_path)
    scores = _score(model, d)
    atomic_write_text(out_path, "".join(f"{s:.12g}\n" for s in scores))
    click.echo(f"wrote {out_path} ({len(d)} scores)")


@cli.command("eval")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--user-field", callback=_parse_field, required=True)
@click.option("--item-field", callback=_parse_field, required=True)
@click.option("--kmax", default=10, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--figure/--no-figure", default=True, show_default=True)
@click.option("--threads", default=_default_threads, show_default="$" + THREADS_ENV)
def eval_cmd(model_path, input_path, user_field, item_field, kmax, out_path, figure, threads):
    """Rank each user's test items and report NDCG@1..kmax as CSV."""
    model = _load_model(model_path)
    d = _load_dataset(input_path, user_field, item_field)
    scores = _score(model, d)
    run = evalbench.ranking_run_from_scores(d, scores, k_max=kmax)
    means = [evalbench.ndcg_at_k(run, K).mean for K in range(1, kmax + 1)]
    atomic_write_text(out_path, evalbench.ndcg_csv(means))
    click.echo(f"ndcg@{kmax}={means[-1]:.6g} users={len(run.per_user)} threads={threads}")
    if figure:
        fig = report.save_ndcg_figure({Path(model_path).stem: means}, _figure_path(out_path))
        click.echo(f"wrote {fig}")


@cli.command()
@click.option("--model-fm", "fm_path", required=True, type=click.Path(exists=True))
@click.option("--model-dfm", "dfm_path", required=True, type=click.Path(exists=True))
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--user-field", callback=_parse_field, default=None)
@click.option("--item-field", callback=_parse_field, default=None)
@click.option("--reps", default=3, show_default=True)
@click.option("--binary-path", type=click.Choice(["pairs", "st"]), default="pairs",
              show_default=True)
@click.option("--out", "out_path", default=None, type=click.Path(),
              help="also write the text report here (plus .csv and figure)")
@click.option("--figure/--no-figure", default=True, show_default=True)
@click.option("--threads", default=_default_threads, show_default="$" + THREADS_ENV)
def bench(fm_path, dfm_path, input_path, user_field, item_field, reps,
          binary_path, out_path, figure, threads):
    """Time float vs binary scoring over the same test stream."""
    fm_model = fmcore.load_fm(fm_path)
    dfm_model = binarycodes.load_dfm(dfm_path)
    d = _load_dataset(input_path, user_field, item_field)
    rep = evalbench.measure_ttc(
        fm_model, dfm_model, d, repetitions=reps,
        binary_path=binary_path, threads=threads,
    )
    text = evalbench.format_bench_text([rep])
    click.echo(text, nl=False)
    if out_path:
        atomic_write_text(out_path, text)
        csv_path = str(Path(out_path).with_suffix(".csv"))
        atomic_write_text(csv_path, _bench_csv(rep))
        if figure:
            report.save_bench_figure([rep], _figure_path(out_path))


def _bench_csv(r) -> str:
    head = ("code_length,ttc_float,ttc_binary,acceleration_ratio,"
            "instance_count,n_features,nnz_mean,repetitions,binary_path,threads")
    row = (f"{r.code_length},{r.ttc_float:.6g},{r.ttc_binary:.6g},"
           f"{r.acceleration_ratio:.6g},{r.instance_count},{r.n_features},"
           f"{r.nnz_mean:.6g},{r.repetitions},{r.binary_path},{r.threads}")
    return head + "\n" + row + "\n"


@cli.command()
@click.option("--train", "train_path", required=True, type=click.Path(exists=True))
@click.option("--test", "test_path", required=True, type=click.Path(exists=True))
@click.option("--user-field", callback=_parse_field, required=True)
@click.option("--item-field", callback=_parse_field, required=True)
@click.option("--betas", default="0,1e-4,1e-3,1e-2,1e-1,1,10,100", show_default=True)
@click.option("--ks", default="8,16,32,64", show_default=True)
@click.option("--alpha", default=1e-2, show_default=True)
@click.option("--iters", default=30, show_default=True)
@click.option("--tol", default=1e-5, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--figure/--no-figure", default=True, show_default=True)
def grid(train_path, test_path, user_field, item_field, betas, ks, alpha,
         iters, tol, seed, out_path, figure):
    """Sweep (beta, k); one CSV row of NDCG@1..10 per trained model."""
    train = _load_dataset(train_path, user_field, item_field)
    test = _load_dataset(test_path, user_field, item_field)
    try:
        beta_values = [float(v) for v in betas.split(",") if v.strip() != ""]
        k_values = [int(v) for v in ks.split(",") if v.strip() != ""]
    except ValueError:
        raise click.BadParameter("--betas/--ks must be comma-separated numbers")
    cfg = TrainConfig(alpha=alpha, seed=seed, max_outer_iters=iters, tol=tol)

    def on_cell(row):
        print(f"cell beta={row.beta:g} k={row.k} status={row.status}", file=sys.stderr)

    rows = evalbench.eval_grid(train, test, cfg, beta_values, k_values, on_cell=on_cell)
    atomic_write_text(out_path, evalbench.grid_csv(rows))
    click.echo(f"wrote {out_path} ({len(rows)} cells)")
    if figure:
        fig = report.save_grid_figure(rows, _figure_path(out_path))
        click.echo(f"wrote {fig}")


def run(argv) -> int:
    """Execute the CLI on argv (no program name); returns the exit code."""
    try:
        cli.main(args=list(argv), prog_name="dfmrec", standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.ClickException as exc:
        print(f"error: {exc.format_message()}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
