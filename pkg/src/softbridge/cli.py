"""Command line entry point.

Verbs:
    run              execute one or more run configs end to end
    report           combine finished run directories into CSV + table
    frames           render SVG scatter frames from a finished run
    validate-config  parse and check configs without executing

Config arguments accept a filesystem path or the name of a packaged config
(see `softbridge/configs/`). Exit status is nonzero iff any requested run
failed, including config errors and per-seed failures.
"""
from __future__ import annotations

import logging
import sys
from importlib import resources
from pathlib import Path

import click

from .bench import emit_frames, execute_run, report
from .config import ConfigError, load_run_config

log = logging.getLogger("softbridge")


def resolve_config_path(name: str) -> Path:
    """A real path wins; otherwise fall back to the packaged configs."""
    p = Path(name)
    if p.is_file():
        return p
    packaged = resources.files("softbridge") / "configs"
    for candidate in (name, f"{name}.yaml"):
        cp = Path(str(packaged / candidate))
        if cp.is_file():
            return cp
    raise FileNotFoundError(f"no config file or packaged config named {name!r}")


def _parse_seeds(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(s) for s in text.split(",") if s.strip() != ""]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {text!r}",
                                 param_hint="--seeds")


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="debug logging")
def cli(verbose: bool):
    """Law-constrained bridge benchmark harness."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")


@cli.command("run")
@click.argument("configs", nargs=-1, required=True)
@click.option("--output-dir", default="runs", show_default=True,
              help="root directory for run outputs")
@click.option("--seeds", default=None, help="comma-separated seed override, e.g. 0,1,2")
@click.option("--parallelism", default=1, show_default=True,
              help="max concurrent seed workers per run")
@click.option("--paper-scale", is_flag=True,
              help="apply each config's paper section instead of desk")
def run_cmd(configs, output_dir, seeds, parallelism, paper_scale):
    """Execute each config across its seeds and aggregate."""
    seed_override = _parse_seeds(seeds)
    failed = False
    for name in configs:
        try:
            path = resolve_config_path(name)
            cfg = load_run_config(path, paper_scale=paper_scale, seed_override=seed_override)
        except (ConfigError, OSError) as exc:
            log.error("%s: %s", name, exc)
            failed = True
            continue
        records = execute_run(cfg, output_dir, parallelism=parallelism)
        if any(r["status"] != "ok" for r in records):
            failed = True
    sys.exit(1 if failed else 0)


@cli.command("report")
@click.argument("run_dirs", nargs=-1, required=True)
@click.option("--csv", "csv_path", default=None, help="also write the CSV here")
def report_cmd(run_dirs, csv_path):
    """Combine finished run directories into a comparison table."""
    csv_text, table, missing = report(list(run_dirs))
    click.echo(table, nl=False)
    if csv_path is not None:
        Path(csv_path).write_text(csv_text)
        log.info("wrote %s", csv_path)
    sys.exit(1 if missing else 0)


@cli.command("frames")
@click.argument("run_dir")
@click.option("--times", default=None, help="comma-separated times (default: 6 evenly spaced)")
@click.option("--output-dir", default=None, help="default: <run_dir>/frames")
@click.option("--samples", default=2000, show_default=True)
@click.option("--seed", default=None, type=int, help="which seed's checkpoint to render")
def frames_cmd(run_dir, times, output_dir, samples, seed):
    """Render one SVG scatter frame per time from a finished run."""
    time_list = None
    if times is not None:
        time_list = [float(t) for t in times.split(",") if t.strip() != ""]
    written = emit_frames(run_dir, times=time_list, out_dir=output_dir,
                          samples=samples, seed=seed)
    for p in written:
        click.echo(str(p))


@cli.command("validate-config")
@click.argument("configs", nargs=-1, required=True)
@click.option("--paper-scale", is_flag=True)
def validate_cmd(configs, paper_scale):
    """Parse and validate configs without executing anything."""
    status = 0
    for name in configs:
        try:
            path = resolve_config_path(name)
            cfg = load_run_config(path, paper_scale=paper_scale)
        except (ConfigError, OSError) as exc:
            click.echo(f"{name}: INVALID: {exc}")
            status = 1
            continue
        click.echo(f"{name}: ok ({cfg.method} on {cfg.task}, seeds {list(cfg.seeds)})")
    sys.exit(status)


def main():
    cli()


if __name__ == "__main__":
    main()
