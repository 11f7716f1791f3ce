"""
Command-line entry point for the normalization experiments.

    python cli.py gen-data --spec configs/data_mixture.json --out data/mixture.json
    python cli.py cluster --data data/mixture.json --k 4 --seed 0 --out data/kmeans.json
    python cli.py train --config configs/mixture_k4.json --out reports/mixture-k4
    python cli.py compare --report reports/mixture-k4

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
"""

import json
import logging
import os
import sys

import click

from context_builder.context_builder import DEFAULT_N_INIT, kmeans_assign, kmeans_fit
from errors import ConfigError, NormError
from experiment.config import load_config
from experiment.runner import run_experiment
from reporting.csv_writer import read_report, write_summary
from reporting.report_builder import check_consistency, compare_table
from synthetic_data.dataset_store import load_dataset, save_dataset
from synthetic_data.generators import generate

logger = logging.getLogger(__name__)

EXIT_USAGE = 1
EXIT_DATA = 2


class ExperimentCli(click.Group):
    """Click group mapping failures onto the documented exit codes."""

    def main(self, args=None, prog_name=None, complete_var=None, standalone_mode=True, **extra):
        try:
            result = super().main(args=args, prog_name=prog_name, complete_var=complete_var,
                                  standalone_mode=False, **extra)
        except click.ClickException as exc:
            exc.show()
            sys.exit(EXIT_USAGE)
        except click.Abort:
            click.echo("Aborted!", err=True)
            sys.exit(EXIT_USAGE)
        except NormError as exc:
            logger.error(f"{exc.code.value}: {exc.message}")
            click.echo(f"error [{exc.code.value}]: {exc.message}", err=True)
            sys.exit(EXIT_DATA)
        except OSError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(EXIT_DATA)
        sys.exit(result if isinstance(result, int) else 0)


@click.group(cls=ExperimentCli)
@click.option("--verbose", "-v", is_flag=True, help="Log per-iteration details.")
def cli(verbose):
    """Batch, layer, instance, mixture and supervised batch normalization experiments."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


@cli.command("gen-data")
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True, dir_okay=False),
              help="JSON {generator, params} describing the dataset.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False),
              help="Where to write the dataset JSON.")
def gen_data(spec_path, out_path):
    """Generate a synthetic dataset."""
    with open(spec_path, "r", encoding="utf-8") as handle:
        try:
            spec = json.load(handle)
        except json.JSONDecodeError as exc:
            raise ConfigError("spec", f"line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(spec, dict) or "generator" not in spec:
        raise ConfigError("generator", "the data spec must name a generator")
    ds = generate(spec["generator"], spec.get("params") or {})
    save_dataset(ds, out_path)
    click.echo(f"Wrote {ds.n} samples (D={ds.dim}, classes={ds.classes}, "
               f"K_true={ds.k_true}) to {out_path}")


@cli.command()
@click.option("--data", "data_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--k", required=True, type=click.IntRange(min=1), help="Number of clusters.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--max-iter", default=100, show_default=True, type=click.IntRange(min=1))
@click.option("--tol", default=1e-4, show_default=True, type=click.FloatRange(min=0.0))
@click.option("--n-init", default=DEFAULT_N_INIT, show_default=True, type=click.IntRange(min=1),
              help="k-means++ restarts; the lowest inertia wins.")
@click.option("--out", "out_path", required=True, type=click.Path(dir_okay=False))
def cluster(data_path, k, seed, max_iter, tol, n_init, out_path):
    """Fit k-means contexts on a dataset's features."""
    ds = load_dataset(data_path)
    model = kmeans_fit(ds.features, k, max_iter=max_iter, tol=tol, seed=seed, n_init=n_init)
    assignment = kmeans_assign(model, ds.features)
    # the model fields sit at the top level so KMeansModel.from_dict reads the file back
    payload = model.to_dict()
    payload.update({
        "lambda": assignment.lam.tolist(),
        "counts": assignment.counts().tolist(),
        "seed": seed,
        "n_init": n_init,
    })
    with open(out_path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
    click.echo(f"k-means K={k}: inertia {model.inertia:.6g} after {model.iterations_run} "
               f"iterations; lambda = {[round(v, 4) for v in assignment.lam.tolist()]}")


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def train(config_path, out_dir):
    """Train every configured method and seed; write the run directory."""
    config = load_config(config_path)
    report = run_experiment(config, out_dir=out_dir)
    text, _ = compare_table(report)
    click.echo(text, nl=False)
    click.echo(f"Run files written to {os.path.abspath(out_dir)}")


@cli.command()
@click.option("--report", "report_dir", required=True, type=click.Path(exists=True, file_okay=False))
def compare(report_dir):
    """Rebuild the comparison table from a run directory."""
    report = read_report(report_dir)
    for problem in check_consistency(report):
        logger.warning(problem)
    text, summary_csv = compare_table(report)
    write_summary(report_dir, summary_csv)
    click.echo(text, nl=False)


if __name__ == "__main__":
    cli()
