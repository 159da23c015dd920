"""Command line for scenario runs, suite sweeps, and the live demo service.

Exit codes: 0 all expectations met, 1 expectations failed, 2 the scenario
could not be parsed or built.
"""

from __future__ import annotations

import json
import os
import pathlib
import sys

import click
import tomli

from imdauth.harness.report import render_text, report_json, scenario_report
from imdauth.scenario import (
    ScenarioError,
    apply_override,
    run_scenario,
    scenario_from_dict,
)

DEFAULT_BIND = "127.0.0.1:8787"


def _load_scenario(path: str, seed: int | None, overrides: tuple[str, ...]):
    try:
        data = tomli.loads(pathlib.Path(path).read_text())
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc}") from exc
    except tomli.TOMLDecodeError as exc:
        raise ScenarioError(f"bad scenario file: {exc}") from exc
    if seed is not None:
        apply_override(data, "seed", str(seed))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ScenarioError(f"override {item!r} is not KEY=VALUE")
        apply_override(data, key, value)
    return scenario_from_dict(data)


@click.group()
def main() -> None:
    """Simulated dual-factor authentication runs for an implanted device."""


@main.command()
@click.argument("scenario", type=click.Path(dir_okay=False))
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option(
    "--override", "-o", "overrides", multiple=True, metavar="KEY=VALUE",
    help="Override any scenario value by dotted path (repeatable).",
)
@click.option(
    "--report", "report_path", type=click.Path(dir_okay=False), default=None,
    help="Also write the machine-readable report to this file.",
)
@click.option(
    "--format", "fmt", type=click.Choice(["text", "machine"]), default="text",
    show_default=True, help="What to print on stdout.",
)
@click.option(
    "--trace", "trace_path", type=click.Path(dir_okay=False), default=None,
    help="Write the event trace to this file.",
)
def run(scenario, seed, overrides, report_path, fmt, trace_path) -> None:
    """Run one scenario file and grade it against its expectations."""
    try:
        sc = _load_scenario(scenario, seed, overrides)
        result = run_scenario(sc)
    except ScenarioError as exc:
        click.echo(f"scenario error: {exc}", err=True)
        sys.exit(2)
    report = scenario_report(result)
    if report_path:
        pathlib.Path(report_path).write_text(report_json(report))
    if trace_path:
        pathlib.Path(trace_path).write_text(result.world.trace_text())
    if fmt == "machine":
        click.echo(report_json(report), nl=False)
    else:
        click.echo(render_text(report), nl=False)
    sys.exit(0 if result.passed else 1)


@main.command()
@click.argument(
    "directory", type=click.Path(exists=True, file_okay=False), default="scenarios"
)
@click.option(
    "--format", "fmt", type=click.Choice(["text", "machine"]), default="text",
    show_default=True,
)
def suite(directory, fmt) -> None:
    """Run every scenario in a directory and summarize."""
    paths = sorted(pathlib.Path(directory).glob("*.toml"))
    if not paths:
        click.echo(f"no scenario files in {directory}", err=True)
        sys.exit(2)
    rows = []
    parse_failed = False
    for path in paths:
        try:
            result = run_scenario(_load_scenario(str(path), None, ()))
        except ScenarioError as exc:
            rows.append({"scenario": path.stem, "error": str(exc)})
            parse_failed = True
            continue
        rows.append({
            "scenario": path.stem,
            "passed": result.passed,
            "outcomes": result.outcomes,
            "auth_latency_s": result.auth_latency_s,
            "failures": result.expectation_failures,
        })
    if fmt == "machine":
        click.echo(json.dumps(rows, indent=2))
    else:
        width = max(len(r["scenario"]) for r in rows)
        for row in rows:
            if "error" in row:
                click.echo(f"{row['scenario']:<{width}}  ERROR  {row['error']}")
                continue
            verdict = "PASS" if row["passed"] else "FAIL"
            latency = (
                f"{row['auth_latency_s']:.3f}s" if row["auth_latency_s"] is not None
                else "-"
            )
            click.echo(
                f"{row['scenario']:<{width}}  {verdict}  "
                f"outcomes={','.join(row['outcomes']) or '-'}  latency={latency}"
            )
            for failure in row["failures"]:
                click.echo(f"{'':<{width}}        {failure}")
    if parse_failed:
        sys.exit(2)
    if not all(r.get("passed") for r in rows):
        sys.exit(1)


@main.command()
@click.option("--host", default=None, help="Bind host (overrides IMD_SIM_BIND).")
@click.option("--port", type=int, default=None, help="Bind port (overrides IMD_SIM_BIND).")
def serve(host, port) -> None:
    """Serve the live-session API for the tap console."""
    import uvicorn

    from imdauth.harness.service import create_app

    bind = os.environ.get("IMD_SIM_BIND", DEFAULT_BIND)
    env_host, _, env_port = bind.rpartition(":")
    final_host = host or env_host or "127.0.0.1"
    final_port = port if port is not None else int(env_port)
    uvicorn.run(create_app(), host=final_host, port=final_port, log_level="info")


if __name__ == "__main__":
    main()
