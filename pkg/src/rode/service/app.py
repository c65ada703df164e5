"""HTTP wrapper around the library. Handlers are plain functions over the
schema models; create_app() binds them to routes and maps the library's
error types onto a JSON envelope (validation -> 400, divergence -> 500)."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .. import data, dynamics, harness
from ..config import RunConfig
from ..errors import NumericalDivergence, ValidationError
from . import schemas

logger = logging.getLogger("rode.service")


def _resolve_num_users(ref: schemas.DatasetRef) -> int:
    if ref.num_users is not None:
        if ref.num_users < 1:
            raise ValidationError(f"num_users must be positive, got {ref.num_users}")
        return ref.num_users
    if ref.features is not None:
        return sum(1 for _ in data._data_lines(ref.features))
    # fall back to the largest node id named by an edge
    top = -1
    for ln, line in data._data_lines(ref.graph):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{ref.graph}:{ln}: expected `src<TAB>dst`")
        try:
            top = max(top, int(parts[0]), int(parts[1]))
        except ValueError:
            raise ValidationError(f"{ref.graph}:{ln}: non-integer node id") from None
    if top < 0:
        raise ValidationError(f"{ref.graph}: empty graph and no num_users given")
    return top + 1


def load_dataset(ref: schemas.DatasetRef) -> data.SocialGraph:
    return data.load_graph(ref.graph, _resolve_num_users(ref), ref.features)


def _patched(cfg: RunConfig, encounter: str | None, grid: int | None) -> RunConfig:
    changes: dict = {}
    if encounter is not None:
        changes["encounter"] = encounter
    if grid is not None:
        changes["grid"] = grid
    return dataclasses.replace(cfg, **changes) if changes else cfg


def handle_synth(req: schemas.SynthRequest) -> schemas.SynthResponse:
    import os

    synth = harness.generate_synthetic(
        req.users,
        req.cascades,
        seed=req.seed,
        mean_length=req.mean_length,
        beta=req.beta,
        pace=req.pace,
        jitter=req.jitter,
        latency_sigma=req.latency_sigma,
        dist_power=req.dist_power,
        scale_sigma=req.scale_sigma,
        feature_dim=req.feature_dim,
        teacher_d=req.teacher_d,
        teacher_time_dim=req.teacher_time_dim,
        out_dir=req.out_dir,
    )
    mean_len = float(np.mean([c.length for c in synth.cascades])) if synth.cascades else 0.0
    files = {
        name: os.path.join(req.out_dir, fname)
        for name, fname in [
            ("graph", "graph.tsv"),
            ("features", "features.tsv"),
            ("cascades", "cascades.tsv"),
            ("teacher", "teacher.ckpt"),
        ]
    }
    return schemas.SynthResponse(
        num_users=req.users,
        num_cascades=len(synth.cascades),
        mean_length=mean_len,
        files=files,
    )


def handle_train(req: schemas.TrainRequest) -> schemas.TrainResponse:
    cfg = RunConfig(**req.config.overrides())
    graph = load_dataset(req.dataset)
    cascades = data.load_cascades(req.cascades)
    train_c, val_c, _ = data.split_cascades(cascades, cfg.split)
    if not train_c:
        raise ValidationError(
            f"training split is empty ({len(cascades)} cascades, ratios {cfg.split})"
        )
    result = harness.train(cfg, graph, train_c, val_c)
    harness.save_model(result.params, cfg, req.out)
    last = result.log[-1] if result.log else {"ricci": 0.0, "ode": 0.0, "total": 0.0}
    return schemas.TrainResponse(
        checkpoint=req.out,
        epochs=len(result.log),
        best_epoch=result.best_epoch,
        best_val=None if result.best_val == float("inf") else result.best_val,
        split_sizes=(len(train_c), len(val_c), len(cascades) - len(train_c) - len(val_c)),
        final_ricci=last["ricci"],
        final_ode=last["ode"],
        final_total=last["total"],
    )


def _pick_split(cascades, cfg: RunConfig, which: str):
    if which == "all":
        return cascades
    train_c, val_c, test_c = data.split_cascades(cascades, cfg.split)
    chosen = {"train": train_c, "val": val_c, "test": test_c}[which]
    if not chosen:
        raise ValidationError(
            f"{which} split is empty ({len(cascades)} cascades, ratios {cfg.split})"
        )
    return chosen


def handle_eval(req: schemas.EvalRequest) -> schemas.EvalResponse:
    graph = load_dataset(req.dataset)
    params, cfg = harness.load_model(req.ckpt, graph)
    cfg = _patched(cfg, req.encounter, req.grid)
    cascades = _pick_split(data.load_cascades(req.cascades), cfg, req.eval_split)
    report = harness.evaluate(
        graph, params, cfg, cascades,
        ks=req.ks, with_time=req.with_time, wallclock=req.wallclock,
    )
    return schemas.EvalResponse(
        report=report.to_dict(), table=report.to_table(), evaluated_cascades=len(cascades)
    )


def handle_predict_next(req: schemas.PredictNextRequest) -> schemas.PredictNextResponse:
    graph = load_dataset(req.dataset)
    params, cfg = harness.load_model(req.ckpt, graph)
    cascades = data.load_cascades(req.cascades)
    entries = []
    for c in cascades:
        for step, ranking in harness.rank_next_users(graph, params, cfg, c):
            entries.append(
                schemas.StepRanking(message_id=c.message_id, step=step, ranking=ranking)
            )
    return schemas.PredictNextResponse(entries=entries)


def handle_predict_time(req: schemas.PredictTimeRequest) -> schemas.PredictTimeResponse:
    graph = load_dataset(req.dataset)
    params, cfg = harness.load_model(req.ckpt, graph)
    cfg = _patched(cfg, req.encounter, None)
    prefix = data.load_cascade_prefix(req.prefix)
    targets = req.targets
    if targets is None:
        infected = set(prefix.users)
        targets = [u for u in range(graph.num_users) if u not in infected]
        if not targets:
            raise ValidationError("every user is already infected in the prefix")
    results = dynamics.predict_infection_times(
        graph, params, cfg, prefix, targets, req.horizon, grid=req.grid
    )
    return schemas.PredictTimeResponse(
        predictions=[
            schemas.TimePrediction(
                target=r.target,
                t_sys=r.t_sys,
                t_wallclock=r.wallclock,
                min_distance=r.min_distance,
            )
            for r in results
        ]
    )


def create_app():
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.responses import JSONResponse

    from .. import __version__

    app = FastAPI(title="rode", version=__version__)

    @app.exception_handler(ValidationError)
    async def _validation(request: Request, exc: ValidationError):
        body = schemas.ErrorBody(kind="validation", message=str(exc))
        return JSONResponse(status_code=400, content={"error": body.model_dump()})

    @app.exception_handler(NumericalDivergence)
    async def _divergence(request: Request, exc: NumericalDivergence):
        body = schemas.ErrorBody(kind="divergence", message=str(exc), step=exc.step)
        return JSONResponse(status_code=500, content={"error": body.model_dump()})

    @app.exception_handler(RequestValidationError)
    async def _request_validation(request: Request, exc: RequestValidationError):
        # str(exc) embeds the handler's source location; report field paths only
        parts = []
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"] if p != "body")
            parts.append(f"{loc or 'body'}: {err['msg']}")
        body = schemas.ErrorBody(kind="validation", message="invalid request: " + "; ".join(parts))
        return JSONResponse(status_code=400, content={"error": body.model_dump()})

    @app.get("/health", response_model=schemas.HealthResponse)
    async def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/synth", response_model=schemas.SynthResponse)
    async def synth(req: schemas.SynthRequest):
        return handle_synth(req)

    @app.post("/train", response_model=schemas.TrainResponse)
    async def train(req: schemas.TrainRequest):
        return handle_train(req)

    @app.post("/eval", response_model=schemas.EvalResponse)
    async def evaluate(req: schemas.EvalRequest):
        return handle_eval(req)

    @app.post("/predict/next", response_model=schemas.PredictNextResponse)
    async def predict_next(req: schemas.PredictNextRequest):
        return handle_predict_next(req)

    @app.post("/predict/time", response_model=schemas.PredictTimeResponse)
    async def predict_time(req: schemas.PredictTimeRequest):
        return handle_predict_time(req)

    return app
