"""Command line front end.

Each subcommand builds the same request model the HTTP service accepts and
either calls the handler in-process (default) or POSTs it to a running
service (--server). Exit codes: 0 success, 1 validation error, 2 numerical
divergence.
"""

from __future__ import annotations

import argparse
import json
import sys

from .errors import NumericalDivergence, ValidationError
from .service import app as service
from .service import schemas


def _add_dataset_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--graph", required=True, help="edge list TSV")
    p.add_argument("--features", default=None, help="node feature TSV")
    p.add_argument(
        "--num-users", type=int, default=None,
        help="defaults to the feature row count, else max node id + 1",
    )


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model config (defaults from RunConfig)")
    g.add_argument("--d", type=int)
    g.add_argument("--time-dim", type=int)
    g.add_argument("--alpha", type=float)
    g.add_argument("--dropout", type=float)
    g.add_argument("--lr", type=float)
    g.add_argument("--epochs", type=int)
    g.add_argument("--solver-steps", type=int)
    g.add_argument("--grid", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--split", help="three comma-separated ratios, e.g. 0.8,0.1,0.1")
    g.add_argument("--m0", choices=("root", "mean"))
    g.add_argument("--rescale", choices=("max", "offset"))
    g.add_argument("--encounter", help="argmin or threshold:<radius>")
    g.add_argument("--clamp-negative-w", choices=("on", "off"))
    g.add_argument("--lambda-ode", type=float)


def _config_patch(args: argparse.Namespace) -> schemas.ConfigPatch:
    fields = dict(
        d=args.d, time_dim=args.time_dim, alpha=args.alpha, dropout=args.dropout,
        lr=args.lr, epochs=args.epochs, solver_steps=args.solver_steps,
        grid=args.grid, seed=args.seed, m0=args.m0, rescale=args.rescale,
        encounter=args.encounter, lambda_ode=args.lambda_ode,
    )
    if args.split is not None:
        parts = args.split.split(",")
        if len(parts) != 3:
            raise ValidationError(f"--split needs three ratios, got {args.split!r}")
        try:
            fields["split"] = tuple(float(x) for x in parts)
        except ValueError:
            raise ValidationError(f"non-numeric ratio in --split {args.split!r}") from None
    if args.clamp_negative_w is not None:
        fields["clamp_negative_w"] = args.clamp_negative_w == "on"
    return schemas.ConfigPatch(**{k: v for k, v in fields.items() if v is not None})


def _dataset(args: argparse.Namespace) -> schemas.DatasetRef:
    return schemas.DatasetRef(
        graph=args.graph, features=args.features, num_users=args.num_users
    )


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ValidationError(f"non-integer K in --ks {text!r}") from None
    if not ks:
        raise ValidationError("--ks needs at least one value")
    return ks


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rode",
        description="curvature-guided diffusion prediction: training, "
        "evaluation, next-user ranking, infection-time prediction",
    )
    parser.add_argument(
        "--server", default=None, metavar="URL",
        help="send the request to a running service instead of computing in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic teacher dataset")
    p.add_argument("--users", type=int, required=True)
    p.add_argument("--cascades", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--mean-length", type=float, default=8.0)
    p.add_argument("--beta", type=float, default=200.0)
    p.add_argument("--pace", type=float, default=0.35)
    p.add_argument("--jitter", type=float, default=0.03)
    p.add_argument("--latency-sigma", type=float, default=0.8)
    p.add_argument("--dist-power", type=float, default=0.25)
    p.add_argument("--scale-sigma", type=float, default=0.9)
    p.add_argument("--feature-dim", type=int, default=16)

    p = sub.add_parser("train", help="fit a model and write a checkpoint")
    _add_dataset_flags(p)
    p.add_argument("--cascades", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="rank/time metrics for a checkpoint")
    p.add_argument("--ckpt", required=True)
    _add_dataset_flags(p)
    p.add_argument("--cascades", required=True)
    p.add_argument("--ks", default="10,50")
    p.add_argument(
        "--eval-split", default="test", choices=("train", "val", "test", "all"),
        help="which slice of the cascade file to score (split ratios from the checkpoint)",
    )
    p.add_argument("--no-time", action="store_true", help="skip RMSE evaluation")
    p.add_argument("--rmse-wallclock", action="store_true",
                   help="report RMSE in wall-clock units instead of rescaled time")
    p.add_argument("--encounter", help="override the checkpoint's encounter rule")
    p.add_argument("--grid", type=int, help="override the checkpoint's grid")
    p.add_argument("--json", default=None, metavar="FILE",
                   help="also write the report as JSON ('-' for stdout)")

    p = sub.add_parser("predict-next", help="ranked next-user lists per step")
    p.add_argument("--ckpt", required=True)
    _add_dataset_flags(p)
    p.add_argument("--cascades", required=True)

    p = sub.add_parser("predict-time", help="infection-time prediction for targets")
    p.add_argument("--ckpt", required=True)
    _add_dataset_flags(p)
    p.add_argument("--cascade-prefix", required=True,
                   help="cascade file holding the single observed prefix")
    p.add_argument("--target-user", type=int, action="append", default=None,
                   help="repeatable; default: every uninfected user")
    p.add_argument("--horizon", type=float, required=True,
                   help="wall-clock seconds that system time 1.0 corresponds to")
    p.add_argument("--grid", type=int, default=None)
    p.add_argument("--encounter", help="override the checkpoint's encounter rule")

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)

    return parser


# -- request construction ------------------------------------------------------


def _build_request(args: argparse.Namespace):
    if args.command == "synth":
        return "/synth", schemas.SynthRequest(
            users=args.users, cascades=args.cascades, seed=args.seed,
            out_dir=args.out_dir, mean_length=args.mean_length, beta=args.beta,
            pace=args.pace, jitter=args.jitter, latency_sigma=args.latency_sigma,
            dist_power=args.dist_power, scale_sigma=args.scale_sigma,
            feature_dim=args.feature_dim,
        )
    if args.command == "train":
        return "/train", schemas.TrainRequest(
            dataset=_dataset(args), cascades=args.cascades, out=args.out,
            config=_config_patch(args),
        )
    if args.command == "eval":
        return "/eval", schemas.EvalRequest(
            ckpt=args.ckpt, dataset=_dataset(args), cascades=args.cascades,
            ks=_parse_ks(args.ks), eval_split=args.eval_split,
            with_time=not args.no_time, wallclock=args.rmse_wallclock,
            encounter=args.encounter, grid=args.grid,
        )
    if args.command == "predict-next":
        return "/predict/next", schemas.PredictNextRequest(
            ckpt=args.ckpt, dataset=_dataset(args), cascades=args.cascades,
        )
    if args.command == "predict-time":
        return "/predict/time", schemas.PredictTimeRequest(
            ckpt=args.ckpt, dataset=_dataset(args), prefix=args.cascade_prefix,
            targets=args.target_user, horizon=args.horizon, grid=args.grid,
            encounter=args.encounter,
        )
    raise AssertionError(f"unhandled command {args.command}")


_HANDLERS = {
    "/synth": (service.handle_synth, schemas.SynthResponse),
    "/train": (service.handle_train, schemas.TrainResponse),
    "/eval": (service.handle_eval, schemas.EvalResponse),
    "/predict/next": (service.handle_predict_next, schemas.PredictNextResponse),
    "/predict/time": (service.handle_predict_time, schemas.PredictTimeResponse),
}


def _call_server(server: str, path: str, request) -> tuple[int, object]:
    import httpx

    resp = httpx.post(
        server.rstrip("/") + path, json=request.model_dump(mode="json"), timeout=None
    )
    if resp.status_code >= 400:
        try:
            err = schemas.ErrorBody.model_validate(resp.json()["error"])
        except Exception:
            print(f"error: HTTP {resp.status_code}: {resp.text}", file=sys.stderr)
            return 1, None
        print(f"error: {err.message}", file=sys.stderr)
        return (2 if err.kind == "divergence" else 1), None
    return 0, _HANDLERS[path][1].model_validate(resp.json())


# -- output rendering ----------------------------------------------------------


def _render(args: argparse.Namespace, path: str, resp) -> None:
    if path == "/synth":
        print(f"num_users\t{resp.num_users}")
        print(f"num_cascades\t{resp.num_cascades}")
        print(f"mean_length\t{resp.mean_length:.2f}")
        for name, fname in sorted(resp.files.items()):
            print(f"file:{name}\t{fname}")
        return
    if path == "/train":
        print(f"checkpoint\t{resp.checkpoint}")
        print(f"epochs\t{resp.epochs}")
        print(f"split\t{resp.split_sizes[0]}/{resp.split_sizes[1]}/{resp.split_sizes[2]}")
        print(f"final_ricci\t{resp.final_ricci:.6f}")
        print(f"final_ode\t{resp.final_ode:.6f}")
        print(f"final_total\t{resp.final_total:.6f}")
        if resp.best_val is not None:
            print(f"best_val\t{resp.best_val:.6f}\t(epoch {resp.best_epoch})")
        return
    if path == "/eval":
        print(resp.table)
        if args.json == "-":
            print(json.dumps(resp.report, indent=2, sort_keys=True))
        elif args.json:
            with open(args.json, "w", encoding="utf-8") as fh:
                json.dump(resp.report, fh, indent=2, sort_keys=True)
                fh.write("\n")
        return
    if path == "/predict/next":
        for entry in resp.entries:
            ranked = ",".join(f"{u}:{s:.6f}" for u, s in entry.ranking)
            print(f"{entry.message_id}\t{entry.step}\t{ranked}")
        return
    if path == "/predict/time":
        for pr in resp.predictions:
            print(
                f"{pr.target}\t{pr.t_sys:.6f}\t{pr.t_wallclock:.6f}"
                f"\t{pr.min_distance:.6f}"
            )
        return
    raise AssertionError(f"unhandled path {path}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "serve":
        import uvicorn

        uvicorn.run(service.create_app(), host=args.host, port=args.port)
        return 0
    try:
        path, request = _build_request(args)
        if args.server:
            code, resp = _call_server(args.server, path, request)
            if code != 0:
                return code
        else:
            resp = _HANDLERS[path][0](request)
        _render(args, path, resp)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalDivergence as exc:
        print(f"error: diverged: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
