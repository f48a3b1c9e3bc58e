"""Command-line entry point: ``rtmpc synthesize|run|sweep|report``."""

from __future__ import annotations

import json
import logging
import sys
from pathlib import Path

import click

from .experiment import ScenarioConfig, build_suite, load_config, run_scenario
from .mpc import Variant
from .synthesis import SynthesisError

EXIT_SYNTHESIS = 2
EXIT_IO = 3


def _config(config, variant, plant, rho, seeds, out, master_seed) -> ScenarioConfig:
    cfg = load_config(config) if config else ScenarioConfig()
    d = cfg.to_dict()
    if variant:
        d["variant"] = variant
    if plant:
        d["plant"] = plant
    if rho:
        d["rhos"] = list(rho)
    if seeds is not None:
        d["seeds"] = seeds
    if out:
        d["out_dir"] = out
    if master_seed is not None:
        d["master_seed"] = master_seed
    if d.get("cache_dir") is None and d.get("out_dir"):
        d["cache_dir"] = str(Path(d["out_dir"]) / "cache")
    return ScenarioConfig.from_dict(d)


def _common(f):
    opts = [
        click.option("--config", type=click.Path(dir_okay=False), help="YAML scenario file."),
        click.option("--variant", type=click.Choice([v.value for v in Variant])),
        click.option("--plant", type=click.Choice(["linear", "nonlinear"])),
        click.option("--rho", type=float, multiple=True, help="Loss probability (repeatable)."),
        click.option("--seeds", type=int, help="Runs per loss probability."),
        click.option("--out", type=click.Path(file_okay=False), help="Output directory."),
        click.option("--master-seed", type=int),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _guard(fn):
    try:
        return fn()
    except SynthesisError as exc:
        click.echo(f"synthesis failed: {exc}", err=True)
        sys.exit(EXIT_SYNTHESIS)
    except OSError as exc:
        click.echo(f"I/O failure: {exc}", err=True)
        sys.exit(EXIT_IO)


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """Remote tube-based tracking MPC experiments on the cart-pole."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_common
def synthesize(config, variant, plant, rho, seeds, out, master_seed):
    """Compute gains and sets; writes synthesis.json into --out."""
    def go():
        cfg = _config(config, variant, plant, rho, seeds, out, master_seed)
        suite = build_suite(cfg)
        sets = suite.synthesis.sets
        click.echo(f"Z: {sets.Z.m} rows, X_f: {sets.X_f.m} rows, "
                   f"determination index {sets.determination_index}")
        if cfg.out_dir:
            path = Path(cfg.out_dir)
            path.mkdir(parents=True, exist_ok=True)
            (path / "synthesis.json").write_text(json.dumps(suite.synthesis.to_dict()))
    _guard(go)


def _run(cfg: ScenarioConfig):
    traces = run_scenario(cfg)
    for t in traces:
        s = t.summary
        click.echo(f"{t.name}: err={s['avg_tracking_error']:.4f} "
                   f"infeasible={s['infeasible_steps']} tube_viol={s.get('tube_violations', 0)}")
    if cfg.out_dir is None:
        click.echo("no --out given; nothing written")


@main.command()
@_common
def run(config, variant, plant, rho, seeds, out, master_seed):
    """Runs for a single loss probability (the first --rho)."""
    _guard(lambda: _run(_config(config, variant, plant, rho[:1], seeds, out, master_seed)))


@main.command()
@_common
def sweep(config, variant, plant, rho, seeds, out, master_seed):
    """Runs over every loss probability in the config (or each --rho)."""
    _guard(lambda: _run(_config(config, variant, plant, rho, seeds, out, master_seed)))


@main.command()
@click.option("--out", type=click.Path(file_okay=False), required=True)
def report(out):
    """Print the per-rho summary of a finished sweep."""
    def go():
        summary = json.loads((Path(out) / "summary.json").read_text())
        if not summary:
            click.echo("empty summary")
            return
        click.echo(f"{'rho':>5} {'runs':>5} {'median err':>11} {'q1':>8} {'q3':>8} {'infeas':>7}")
        for rho, row in summary["per_rho"].items():
            q = row["avg_tracking_error"]
            click.echo(f"{rho:>5} {row['runs']:>5} {q['median']:>11.4f} {q['q1']:>8.4f} "
                       f"{q['q3']:>8.4f} {row['infeasible_runs']:>7}")
        hist = Path(out) / "solve_time_histogram.json"
        if hist.exists():
            h = json.loads(hist.read_text())
            if h.get("n"):
                click.echo(f"solve time: median {h['median_ms']:.2f} ms, "
                           f"95% {h['q95_ms']:.2f} ms over {h['n']} solves")
    _guard(go)


if __name__ == "__main__":
    main()
