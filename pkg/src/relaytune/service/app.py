"""HTTP service wrapping the pipeline.

Every endpoint is a thin shell over core module operations; paths in request
bodies refer to the service's filesystem (this is a local orchestrator
daemon, not a multi-tenant API). The CLI talks to this app in-process by
default, so nothing here assumes a long-lived deployment.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__
from ..controller import LoopController, plan_schedule
from ..corpus import load_dataset, read_records, split, token_stats, write_records
from ..curation import curate
from ..economics import emit_report, render_table, scenarios_from_config
from ..errors import (
    ConfigError,
    MissingInputError,
    RelaytuneError,
    ResumeError,
    StageError,
)
from ..judging import aggregate, evaluate, write_verdicts
from ..rollout import batch_infer, read_generations, write_generations
from ..runconfig import CONFIG_TEMPLATE, load_stack
from ..synthesis import generate_candidates
from ..textutil import stable_seed
from ..tuning import ModelHandle, build_manifest, run_executor, validate_result_doc
from . import schemas

logger = logging.getLogger(__name__)

_STATUS = {
    "config": 400,
    "auth": 401,
    "missing_input": 404,
    "resume": 409,
}


def create_app() -> FastAPI:
    app = FastAPI(title="relaytune", version=__version__,
                  description="Capability-migration pipeline orchestrator")

    @app.exception_handler(RelaytuneError)
    async def pipeline_error(request: Request, exc: RelaytuneError):
        status = _STATUS.get(exc.error_class, 422)
        return JSONResponse(status_code=status,
                            content={"error_class": exc.error_class,
                                     "message": str(exc)})

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(version=__version__)

    @app.post("/workspace/init", response_model=schemas.InitResponse)
    def workspace_init(req: schemas.InitRequest):
        target = Path(req.dir)
        target.mkdir(parents=True, exist_ok=True)
        config_path = target / "run.toml"
        if config_path.exists():
            raise ConfigError(f"refusing to overwrite {config_path}")
        config_path.write_text(CONFIG_TEMPLATE, encoding="utf-8")
        return schemas.InitResponse(created=[str(config_path)])

    @app.post("/datasets/split", response_model=schemas.SplitResponse)
    def datasets_split(req: schemas.SplitRequest):
        dataset = load_dataset(req.input, req.task)
        train, test = split(dataset, req.train_count, req.seed)
        write_records(req.out_train, train)
        write_records(req.out_test, test)
        return schemas.SplitResponse(total=len(dataset), train_count=len(train),
                                     test_count=len(test),
                                     split_ratio=float(dataset.split_ratio))

    @app.post("/datasets/stats", response_model=schemas.StatsResponse)
    def datasets_stats(req: schemas.StatsRequest):
        rows = []
        for path in req.paths:
            pairs = read_records(path)
            if not pairs:
                raise StageError(f"no records in {path}")
            stats = token_stats(pairs)
            rows.append(schemas.StatsRow(name=Path(path).name, count=stats.count,
                                         min=stats.min, max=stats.max,
                                         mean=stats.mean, std=stats.std))
        return schemas.StatsResponse(rows=rows)

    @app.post("/synthesis/run", response_model=schemas.SynthResponse)
    def synthesis_run(req: schemas.SynthRequest):
        stack = load_stack(req.config)
        seeds = read_records(req.seeds)
        batch = generate_candidates(
            seeds, req.target, stack.generator_model, req.cycle,
            gateway=stack.gateway, template=stack.synthesis_template,
            samples_per_call=stack.loop.samples_per_call,
            rng_seed=stable_seed(stack.seed, "synth", req.cycle),
            max_in_flight=stack.loop.max_in_flight,
            temperature=stack.decoding.temperature, top_p=stack.decoding.top_p,
            max_new_tokens=stack.decoding.max_new_tokens)
        write_records(req.out, batch.candidates)
        return schemas.SynthResponse(produced=len(batch.candidates),
                                     requested=batch.requested,
                                     calls_made=batch.calls_made,
                                     failed_calls=batch.failed_calls,
                                     parse_skipped=batch.parse_skipped,
                                     complete=batch.complete, out=req.out)

    @app.post("/curation/run", response_model=schemas.CurateResponse)
    def curation_run(req: schemas.CurateRequest):
        stack = load_stack(req.config)
        candidates = read_records(req.candidates)
        pool = []
        for ref in req.pool:
            pool.extend(read_records(ref))
        test_set = read_records(req.test)
        survivors, report = curate(candidates, pool, test_set, stack.curation)
        write_records(req.out, survivors)
        if req.report_out:
            Path(req.report_out).write_text(
                json.dumps(report.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        return schemas.CurateResponse(out=req.out, **report.to_dict())

    @app.post("/tuning/run", response_model=schemas.TrainResponse)
    def tuning_run(req: schemas.TrainRequest):
        stack = load_stack(req.config)
        manifest = build_manifest(req.cycle, req.refs, stack.executor_spec,
                                  req.output_dir, req.base_dir,
                                  seed=stable_seed(stack.seed, "train", req.cycle))
        handle = run_executor(manifest, stack.executor, req.base_dir)
        return schemas.TrainResponse(handle_id=handle.handle_id,
                                     base_model=handle.base_model,
                                     cycle=handle.cycle,
                                     artifact_uri=handle.artifact_uri,
                                     final_loss=handle.training_metrics["final_loss"],
                                     steps=handle.training_metrics["steps"],
                                     lora_rank=manifest.spec.lora_rank,
                                     lora_alpha=manifest.spec.lora_alpha)

    @app.post("/rollout/run", response_model=schemas.InferResponse)
    def rollout_run(req: schemas.InferRequest):
        stack = load_stack(req.config)
        result_path = Path(req.model_result)
        if not result_path.exists():
            raise MissingInputError(f"model result not found: {result_path}")
        doc = validate_result_doc(json.loads(result_path.read_text("utf-8")))
        handle = ModelHandle(handle_id=doc["handle_id"],
                             base_model=stack.executor_spec.base_model, cycle=0,
                             artifact_uri=doc["artifact_uri"],
                             training_metrics={"final_loss": doc["final_loss"],
                                               "steps": doc["steps"]})
        test_view = read_records(req.test)
        k = req.k or stack.loop.k
        records = batch_infer(handle, test_view, k, stack.decoding,
                              stack.inference_backend, req.base_dir,
                              workdir=Path(req.base_dir) / "rollout_work")
        write_generations(req.out, records)
        return schemas.InferResponse(records=len(records), out=req.out)

    @app.post("/judging/run", response_model=schemas.JudgeResponse)
    def judging_run(req: schemas.JudgeRequest):
        stack = load_stack(req.config)
        records = read_generations(req.generations)
        test_view = read_records(req.test)
        ledger_before = len(stack.gateway.ledger.entries())
        verdicts = evaluate(records, test_view, stack.judge_model,
                            stack.loop.m_repeats, gateway=stack.gateway,
                            template=stack.judge_template,
                            max_in_flight=stack.loop.max_in_flight)
        judge_calls = len(stack.gateway.ledger.entries()) - ledger_before
        if req.out_verdicts:
            write_verdicts(req.out_verdicts, verdicts)
        summary = aggregate(verdicts, stack.loop.zeta_list, stack.judge_model)
        if req.out_summary:
            Path(req.out_summary).write_text(
                json.dumps(summary.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
        metrics = {
            name: schemas.MetricCells(
                mean_score=ms.mean_score,
                coverage={str(z): c for z, c in ms.coverage.items()})
            for name, ms in summary.metrics.items()
        }
        return schemas.JudgeResponse(verdicts=len(verdicts), judge_calls=judge_calls,
                                     metrics=metrics)

    @app.post("/runs/start", response_model=schemas.RunResponse | schemas.PlanResponse)
    def runs_start(req: schemas.RunRequest):
        stack = load_stack(req.config, seed_override=req.seed)
        if req.dry_run:
            rows = plan_schedule(stack.loop, stack.train_count, stack.executor_spec)
            return schemas.PlanResponse(rows=[schemas.PlanRow(**r) for r in rows])
        controller = LoopController(stack, req.run_dir)
        state = controller.start()
        return _run_response(state)

    @app.post("/runs/resume", response_model=schemas.RunResponse)
    def runs_resume(req: schemas.ResumeRequest):
        stack = _stack_from_run_dir(req.run_dir)
        controller = LoopController(stack, req.run_dir)
        state = controller.resume()
        return _run_response(state)

    @app.post("/runs/report", response_model=schemas.ReportResponse)
    def runs_report(req: schemas.ReportRequest):
        from ..controller import read_state

        state = read_state(Path(req.run_dir) / "state")
        rows = []
        for entry in state.history:
            metrics = {
                name: schemas.MetricCells(mean_score=m["mean_score"],
                                          coverage=m["coverage"])
                for name, m in entry.get("metrics", {}).items()
            }
            rows.append(schemas.CycleReportRow(
                t=entry["t"], volume=entry.get("volume", 0),
                cumulative_training=entry.get("cumulative_training", 0),
                decision=entry["decision"], metrics=metrics))
        return schemas.ReportResponse(run_id=state.run_id, decision=state.decision,
                                      rows=rows)

    @app.post("/economics/report", response_model=schemas.CostResponse)
    def economics_report(req: schemas.CostRequest):
        scenarios = scenarios_from_config(req.sheet, req.months)
        table = render_table(scenarios)
        files = emit_report(scenarios, req.out_dir) if req.out_dir else {}
        be = {
            s.name: (float(s.break_even_month)
                     if s.break_even_month is not None else None)
            for s in scenarios
        }
        return schemas.CostResponse(table=table, break_even=be, files=files)

    return app


def _stack_from_run_dir(run_dir: str):
    config_path = Path(run_dir) / "config"
    if not config_path.exists():
        raise ResumeError(f"run directory has no config snapshot: {run_dir}")
    from ..controller import read_state
    from ..runconfig import build_stack

    # The recorded seed wins over the snapshot's [run] seed so runs started
    # with --seed resume identically.
    state = read_state(Path(run_dir) / "state")
    return build_stack(config_path.read_text("utf-8"), base_dir=Path(run_dir),
                       seed_override=state.seed)


def _run_response(state) -> schemas.RunResponse:
    metrics = None
    if state.summary:
        metrics = {
            name: schemas.MetricCells(mean_score=m["mean_score"],
                                      coverage=m["coverage"])
            for name, m in state.summary.items()
        }
    return schemas.RunResponse(run_id=state.run_id, t=state.t,
                               decision=state.decision,
                               volumes={str(k): v for k, v in state.volumes.items()},
                               history=state.history, metrics=metrics)
