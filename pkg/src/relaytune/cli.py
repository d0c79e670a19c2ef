"""Operator CLI: a thin client over the HTTP service.

Without ``--server`` the CLI mounts the service in-process (ASGI transport),
so single-machine use needs no daemon; with ``--server URL`` (or the
RELAYTUNE_SERVER env var) the same commands drive a remote instance. All
business logic lives behind the service; this module only shapes requests,
prints responses, and maps error classes onto exit codes:

    0 ok, 10 config error, 20 stage failure, 30 resume error, 40 auth error
"""

from __future__ import annotations

import asyncio
import sys

import click
import httpx

from .errors import EXIT_AUTH, EXIT_CONFIG, EXIT_RESUME, EXIT_STAGE

_EXIT_BY_CLASS = {
    "config": EXIT_CONFIG,
    "auth": EXIT_AUTH,
    "resume": EXIT_RESUME,
}


class _InProcessTransport(httpx.BaseTransport):
    """Sync bridge onto the ASGI app so no daemon is needed locally."""

    def __init__(self, app):
        self._asgi = httpx.ASGITransport(app=app)

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        async def call():
            response = await self._asgi.handle_async_request(request)
            await response.aread()
            return response

        response = asyncio.run(call())
        return httpx.Response(status_code=response.status_code,
                              headers=response.headers,
                              content=response.content)


def _client(server: str | None) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from .service import create_app

    return httpx.Client(transport=_InProcessTransport(create_app()),
                        base_url="http://relaytune.local", timeout=None)


def _call(ctx: click.Context, method: str, path: str, payload: dict | None = None) -> dict:
    client: httpx.Client = ctx.obj["client"]
    try:
        response = client.request(method, path, json=payload)
    except httpx.TransportError as exc:
        click.echo(f"error[transport]: {exc}", err=True)
        sys.exit(EXIT_STAGE)
    if response.status_code >= 400:
        try:
            body = response.json()
            error_class = body.get("error_class", "stage")
            message = body.get("message", response.text)
        except ValueError:
            error_class, message = "stage", response.text
        click.echo(f"error[{error_class}]: {message}", err=True)
        sys.exit(_EXIT_BY_CLASS.get(error_class, EXIT_STAGE))
    return response.json()


@click.group()
@click.option("--server", envvar="RELAYTUNE_SERVER", default=None,
              help="URL of a running relaytune service; default is in-process.")
@click.pass_context
def main(ctx, server):
    """Migrate service-model capability into a small local model."""
    ctx.ensure_object(dict)
    ctx.obj["client"] = _client(server)


@main.command()
@click.argument("directory")
@click.pass_context
def init(ctx, directory):
    """Scaffold DIRECTORY with a commented run config."""
    body = _call(ctx, "POST", "/workspace/init", {"dir": directory})
    for path in body["created"]:
        click.echo(f"created {path}")


@main.command()
@click.option("--input", "input_", required=True, help="Dataset file to split.")
@click.option("--task", required=True)
@click.option("--train-count", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out-train", required=True)
@click.option("--out-test", required=True)
@click.pass_context
def split(ctx, input_, task, train_count, seed, out_train, out_test):
    """Deterministically split a dataset into train and test views."""
    body = _call(ctx, "POST", "/datasets/split", {
        "input": input_, "task": task, "train_count": train_count,
        "seed": seed, "out_train": out_train, "out_test": out_test})
    click.echo(f"split {body['total']} records into {body['train_count']} train / "
               f"{body['test_count']} test (ratio {body['split_ratio']:.4f})")


@main.command()
@click.argument("paths", nargs=-1, required=True)
@click.pass_context
def stats(ctx, paths):
    """Token statistics per dataset file (min / max / mean / std)."""
    body = _call(ctx, "POST", "/datasets/stats", {"paths": list(paths)})
    click.echo(f"{'dataset':32s} {'count':>7s} {'min':>6s} {'max':>6s} "
               f"{'avg':>8s} {'std':>8s}")
    for row in body["rows"]:
        click.echo(f"{row['name']:32s} {row['count']:>7d} {row['min']:>6d} "
                   f"{row['max']:>6d} {row['mean']:>8.1f} {row['std']:>8.1f}")


@main.command()
@click.option("--config", required=True)
@click.option("--seeds", required=True, help="Train-split records used as seeds.")
@click.option("--target", type=int, required=True)
@click.option("--cycle", type=int, default=1, show_default=True)
@click.option("--out", required=True)
@click.pass_context
def synth(ctx, config, seeds, target, cycle, out):
    """Generate synthetic candidates from seed pairs."""
    body = _call(ctx, "POST", "/synthesis/run", {
        "config": config, "seeds": seeds, "target": target,
        "cycle": cycle, "out": out})
    status = "complete" if body["complete"] else "incomplete"
    click.echo(f"{body['produced']}/{body['requested']} candidates in "
               f"{body['calls_made']} calls ({status}) -> {body['out']}")


@main.command()
@click.option("--config", required=True)
@click.option("--candidates", required=True)
@click.option("--pool", multiple=True, help="Accumulated pool files (repeatable).")
@click.option("--test", "test_", required=True)
@click.option("--out", required=True)
@click.option("--report", "report_", default=None, help="Write the report JSON here.")
@click.pass_context
def curate(ctx, config, candidates, pool, test_, out, report_):
    """Dedup, quality-filter, and decontaminate candidates."""
    body = _call(ctx, "POST", "/curation/run", {
        "config": config, "candidates": candidates, "pool": list(pool),
        "test": test_, "out": out, "report_out": report_})
    click.echo(f"{body['survivors']}/{body['input_count']} survived "
               f"(dedup {body['dedup_removed']}, quality {body['quality_removed']}, "
               f"decontam {body['decontam_removed']}) -> {body['out']}")


@main.command()
@click.option("--config", required=True)
@click.option("--ref", "refs", multiple=True, required=True,
              help="Training data refs in cycle order (repeatable).")
@click.option("--cycle", type=int, default=0, show_default=True)
@click.option("--base-dir", default=".", show_default=True)
@click.option("--output-dir", required=True,
              help="Executor output dir, relative to --base-dir.")
@click.pass_context
def train(ctx, config, refs, cycle, base_dir, output_dir):
    """Build a manifest and run the configured executor."""
    body = _call(ctx, "POST", "/tuning/run", {
        "config": config, "refs": list(refs), "cycle": cycle,
        "base_dir": base_dir, "output_dir": output_dir})
    click.echo(f"trained {body['handle_id']} (rank {body['lora_rank']}/"
               f"alpha {body['lora_alpha']}, loss {body['final_loss']:.4f}, "
               f"steps {body['steps']})")


@main.command()
@click.option("--config", required=True)
@click.option("--model-result", required=True, help="Executor result document.")
@click.option("--test", "test_", required=True)
@click.option("--k", type=int, default=None, help="Responses per prompt.")
@click.option("--base-dir", default=".", show_default=True)
@click.option("--out", required=True)
@click.pass_context
def infer(ctx, config, model_result, test_, k, base_dir, out):
    """Generate K responses for every held-out prompt."""
    body = _call(ctx, "POST", "/rollout/run", {
        "config": config, "model_result": model_result, "test": test_,
        "k": k, "base_dir": base_dir, "out": out})
    click.echo(f"{body['records']} generation records -> {body['out']}")


@main.command()
@click.option("--config", required=True)
@click.option("--generations", required=True)
@click.option("--test", "test_", required=True)
@click.option("--out-verdicts", default=None)
@click.option("--out-summary", default=None)
@click.pass_context
def judge(ctx, config, generations, test_, out_verdicts, out_summary):
    """Judge generations M times each and aggregate scores."""
    body = _call(ctx, "POST", "/judging/run", {
        "config": config, "generations": generations, "test": test_,
        "out_verdicts": out_verdicts, "out_summary": out_summary})
    click.echo(f"{body['verdicts']} verdicts from {body['judge_calls']} judge calls")
    for name, cells in sorted(body["metrics"].items()):
        coverage = " ".join(f"C@{z}={c:.2f}" for z, c in sorted(
            cells["coverage"].items(), key=lambda kv: float(kv[0])))
        click.echo(f"  {name:10s} V={cells['mean_score']:.2f} {coverage}")


@main.command()
@click.option("--config", required=True)
@click.option("--run-dir", required=True)
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--dry-run", is_flag=True,
              help="Print the planned schedule without side effects.")
@click.pass_context
def run(ctx, config, run_dir, seed, dry_run):
    """Execute the full loop until pass or budget exhaustion."""
    body = _call(ctx, "POST", "/runs/start", {
        "config": config, "run_dir": run_dir, "seed": seed, "dry_run": dry_run})
    if dry_run:
        click.echo(f"{'t':>3s} {'volume':>8s} {'cumulative':>11s} {'rank':>5s} {'alpha':>6s}")
        for row in body["rows"]:
            click.echo(f"{row['t']:>3d} {row['volume']:>8d} "
                       f"{row['cumulative_training']:>11d} {row['lora_rank']:>5d} "
                       f"{row['lora_alpha']:>6d}")
        return
    _echo_run(body)


def _echo_run(body: dict) -> None:
    volumes = ", ".join(f"cycle {t}: {v}" for t, v in sorted(
        body["volumes"].items(), key=lambda kv: int(kv[0]))) or "none"
    click.echo(f"run {body['run_id']} finished: {body['decision']} at t={body['t']}")
    click.echo(f"curated volumes: {volumes}")
    if body.get("metrics"):
        for name, cells in sorted(body["metrics"].items()):
            coverage = " ".join(f"C@{z}={c:.2f}" for z, c in sorted(
                cells["coverage"].items(), key=lambda kv: float(kv[0])))
            click.echo(f"  {name:10s} V={cells['mean_score']:.2f} {coverage}")


@main.command()
@click.argument("run_dir")
@click.pass_context
def resume(ctx, run_dir):
    """Continue an interrupted run from its last durable phase."""
    body = _call(ctx, "POST", "/runs/resume", {"run_dir": run_dir})
    _echo_run(body)


@main.command()
@click.option("--run-dir", required=True)
@click.pass_context
def report(ctx, run_dir):
    """Per-cycle volumes, scores, and decisions for a run."""
    body = _call(ctx, "POST", "/runs/report", {"run_dir": run_dir})
    click.echo(f"run {body['run_id']}: {body['decision'] or 'in progress'}")
    click.echo(f"{'t':>3s} {'volume':>8s} {'cumulative':>11s} "
               f"{'V(prec)':>8s} {'C@50':>6s} {'C@70':>6s}  decision")
    for row in body["rows"]:
        m = row["metrics"].get("precision")
        v = f"{m['mean_score']:.2f}" if m else "-"
        c50 = f"{m['coverage'].get('50', 0):.2f}" if m else "-"
        c70 = f"{m['coverage'].get('70', 0):.2f}" if m else "-"
        click.echo(f"{row['t']:>3d} {row['volume']:>8d} "
                   f"{row['cumulative_training']:>11d} {v:>8s} {c50:>6s} "
                   f"{c70:>6s}  {row['decision']}")


@main.command()
@click.option("--sheet", default="default", show_default=True,
              help="Price sheet: 'default' or a TOML path.")
@click.option("--months", type=int, default=12, show_default=True)
@click.option("--out", default=None, help="Also write table + series files here.")
@click.pass_context
def cost(ctx, sheet, months, out):
    """API-vs-local deployment cost table with break-even markers."""
    body = _call(ctx, "POST", "/economics/report", {
        "sheet": sheet, "months": months, "out_dir": out})
    click.echo(body["table"], nl=False)
    if body["files"]:
        for kind, path in sorted(body["files"].items()):
            click.echo(f"wrote {kind}: {path}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", type=int, default=8321, show_default=True)
def serve(host, port):
    """Run the HTTP service for remote clients."""
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=host, port=port)


if __name__ == "__main__":
    main()
