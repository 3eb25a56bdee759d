"""Command line entry point: ``jangmass <subcommand> --config cfg.json --out DIR``."""

from __future__ import annotations

import json
import sys

import click
import numpy as np

from .pipeline import ConfigError, PipelineConfig, StageError, run_stages

SUBCOMMAND_STAGES = {
    "constraints": ["constraints"],
    "barriers": ["barriers"],
    "solve": ["barriers", "solve"],
    "geometry": ["barriers", "solve", "geometry"],
    "conformal": ["barriers", "solve", "geometry", "conformal"],
    "pipeline": None,  # the config's own stage list
    "convergence": ["convergence"],
}


def _load_config(config_path, family, tolerance):
    if config_path and family:
        raise click.UsageError("give either --config or --family, not both")
    try:
        if config_path:
            cfg = PipelineConfig.from_file(config_path)
        elif family:
            cfg = PipelineConfig.from_dict({"data": family})
        else:
            raise click.UsageError("one of --config or --family is required")
        if tolerance is not None:
            cfg = cfg.with_overrides(tolerance=tolerance)
    except (ConfigError, OSError) as exc:
        raise click.UsageError(f"malformed config: {exc}") from None
    return cfg


def _summaries(ctx):
    return {name: res.get("summary") for name, res in ctx.results.items() if isinstance(res, dict)}


def _runner(name):
    @click.command(name=name, help=f"Run the '{name}' stage(s) and write artifacts to --out.")
    @click.option("--config", "config_path", type=click.Path(dir_okay=False), help="JSON pipeline config.")
    @click.option("--family", help="Builtin family name instead of a config file.")
    @click.option("--out", "out_dir", default="jangmass_out", show_default=True, type=click.Path(file_okay=False))
    @click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="Worker bound.")
    @click.option("--tolerance", type=float, default=None, help="Global Newton tolerance override.")
    @click.option("--seed", type=int, default=0, show_default=True, help="Reserved; runs are deterministic.")
    def cmd(config_path, family, out_dir, jobs, tolerance, seed):
        cfg = _load_config(config_path, family, tolerance)
        stages = SUBCOMMAND_STAGES[name]
        if name == "pipeline" and "convergence" in cfg["stages"]:
            stages = list(cfg["stages"])
        try:
            ctx = run_stages(cfg, out_dir, stages, jobs)
        except StageError as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(1)
        report = _summaries(ctx)
        if "conformal" in ctx.results:
            click.echo(ctx.results["conformal"]["chain"].table())
        click.echo(json.dumps({k: v for k, v in report.items() if v is not None}, indent=2,
                              default=_default, sort_keys=True))

    return cmd


def _default(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return x.item()
    return str(x)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Jang-equation pipeline on asymptotically hyperbolic initial data."""


for _name in SUBCOMMAND_STAGES:
    main.add_command(_runner(_name))


if __name__ == "__main__":  # pragma: no cover
    main()
