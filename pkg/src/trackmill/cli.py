"""Command-line front end.

Every subcommand prints a JSON report on stdout. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 stage failure. ``TRACKMILL_THREADS``
caps the BLAS/OpenMP thread pools.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from contextlib import nullcontext

from threadpoolctl import threadpool_limits

from .association import DEFAULT_WINDOW, associate
from .clustering import DEFAULT_MIN_PTS, ClusterConfig
from .core import NoiseRates, atomic_target, finalize, load_manifest
from .evaluation import evaluate_retrieval
from .exceptions import ConfigError
from .isolation import DEFAULT_EPS_INTRA, isolate_tracklets
from .losses import LossConfig
from .noise import measurement_report
from .oracle import OracleConfig, generate_embeddings, separation_report
from .pipeline import (
    EXIT_OK,
    StageError,
    dumps,
    epochs_csv,
    exit_code_for,
    retrieval_inputs,
    run_pipeline,
    write_manifest,
    write_text,
)
from .simulator import generate_noisy_dataset, parse_distribution, plan_simulation
from .trainer import (
    TrainConfig,
    load_model,
    pseudo_label_quality,
    save_model,
    tracklet_features,
    train,
)

logger = logging.getLogger("trackmill")

THREADS_ENV = "TRACKMILL_THREADS"


def _emit(report: dict, path=None) -> None:
    text = dumps(report)
    if path is not None:
        write_text(path, text)
    sys.stdout.write(text)


def _ranks(text: str):
    try:
        ranks = [int(r) for r in text.split(",") if r.strip()]
    except ValueError as exc:
        raise ConfigError(f"--ranks must be comma-separated integers, got {text!r}") from exc
    if not ranks or min(ranks) < 1:
        raise ConfigError("--ranks needs positive integers")
    return ranks


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args) -> dict:
    ds = load_manifest(args.input)
    dist = parse_distribution(args.dist) if args.dist else None
    plan = plan_simulation(ds, NoiseRates(args.rfm, args.rsw), dist, args.seed)
    noisy = generate_noisy_dataset(ds, plan)
    write_manifest(noisy, args.output)
    report = measurement_report(noisy, args.counting)
    report["config"] = {
        "r_fm": args.rfm,
        "r_sw": args.rsw,
        "seed": args.seed,
        "dist": {str(k): v for k, v in plan.ids_per_noisy_dist},
        "counting": args.counting,
    }
    report["plan"] = {"m_units": plan.m_units, "n_total": plan.n_total, "n_noisy": plan.n_noisy}
    return report


def cmd_measure(args) -> dict:
    return measurement_report(load_manifest(args.input), args.counting)


def cmd_embed(args) -> dict:
    ds = load_manifest(args.input)
    cfg = OracleConfig(
        dim=args.dim,
        sigma_intra=args.sigma,
        sigma_camera=args.sigma_camera,
        drift=args.drift,
        seed=args.seed,
        separation_ratio=args.separation_ratio,
    )
    write_manifest(ds.with_embeddings(generate_embeddings(ds, cfg)), args.output)
    return {"config": vars_of(cfg), "oracle": separation_report(ds, cfg)}


def cmd_isolate(args) -> dict:
    ds = load_manifest(args.input)
    cfg = ClusterConfig(eps=args.eps, min_pts=args.min_pts)
    out, report = isolate_tracklets(ds, cfg=cfg, return_report=True)
    write_manifest(out, args.output)
    return {"config": {"eps": cfg.eps, "min_pts": cfg.min_pts}, **report.to_dict()}


def cmd_associate(args) -> dict:
    ds = load_manifest(args.input)
    cfg = ClusterConfig.parse_policy(args.eps_policy, args.min_pts)
    pseudo = associate(ds, cfg=cfg, n=args.n_frames, seed=args.seed)
    labels = {
        "config": {
            "eps_policy": cfg.describe(),
            "min_pts": cfg.min_pts,
            "n_frames": args.n_frames,
            "seed": args.seed,
        },
        **pseudo.to_dict(),
        "quality": pseudo_label_quality(pseudo, ds),
    }
    write_text(args.output, dumps(labels))
    return {k: v for k, v in labels.items() if k != "labels"}


def cmd_train(args) -> dict:
    ds = load_manifest(args.input)
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.weight_decay,
        alpha=args.alpha,
        p_ids=args.p_ids,
        s_samples=args.s_samples,
        n_frames=args.n_frames,
        embed_dim=args.embed_dim,
        loss=LossConfig(args.margin, args.lambda_id, args.lambda_tri),
        seed=args.seed,
    )
    cluster_cfg = ClusterConfig.parse_policy(args.eps_policy, args.min_pts)
    net, ema, report = train(ds, cfg=cfg, cluster_cfg=cluster_cfg)
    partial = atomic_target(args.output)
    save_model(partial, net, ema, meta={"seed": args.seed})
    finalize(partial, args.output)
    if args.report:
        write_text(args.report, dumps(report))
    if args.csv:
        write_text(args.csv, epochs_csv(report))
    return {k: v for k, v in report.items() if k not in ("epochs", "final_labels")}


def cmd_eval(args) -> dict:
    ranks = _ranks(args.ranks)
    query, gallery = load_manifest(args.query), load_manifest(args.gallery)
    model = None
    if args.model:
        net, ema, _ = load_model(args.model)
        if args.use == "mean" and ema is None:
            raise ConfigError(f"{args.model} holds no mean-net weights; use --use net")
        model = ema.model if args.use == "mean" else net
    q = retrieval_inputs(query, tracklet_features(query, model))
    g = retrieval_inputs(gallery, tracklet_features(gallery, model))
    result = evaluate_retrieval(*q, *g, ranks=ranks).to_dict()
    result["config"] = {"ranks": ranks, "model": args.model, "use": args.use if args.model else None}
    return result


def cmd_pipeline(args) -> dict:
    return run_pipeline(args.config, args.out_dir, overrides=args.set or ())


def vars_of(cfg) -> dict:
    return {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trackmill", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="inject fragmentation and ID switches into a clean manifest")
    s.add_argument("--rfm", type=float, required=True, help="target fragmentation rate")
    s.add_argument("--rsw", type=float, required=True, help="target switch rate")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--dist", help="IDs per noisy tracklet, e.g. 2:0.8,3:0.15,4:0.05")
    s.add_argument("--counting", choices=("camera", "global"), default="camera")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--report")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("measure", help="report fragmentation/switch rates of a labelled manifest")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("--counting", choices=("camera", "global"), default="camera")
    s.add_argument("--report")
    s.set_defaults(func=cmd_measure)

    s = sub.add_parser("embed", help="attach synthetic oracle embeddings")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--dim", type=int, default=64)
    s.add_argument("--sigma", type=float, default=0.15, help="intra-identity noise norm")
    s.add_argument("--sigma-camera", type=float, default=0.05)
    s.add_argument("--drift", type=float, default=0.01)
    s.add_argument("--separation-ratio", type=float, help="derive --sigma from centre spacing")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_embed)

    s = sub.add_parser("isolate", help="split tracklets into per-identity sub-tracklets")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--eps", type=float, default=DEFAULT_EPS_INTRA)
    s.add_argument("--min-pts", type=int, default=DEFAULT_MIN_PTS)
    s.add_argument("--report")
    s.set_defaults(func=cmd_isolate)

    s = sub.add_parser("associate", help="cluster tracklets into pseudo labels")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--eps-policy", default="p0.1", help="pN (percentile) or fixed:V")
    s.add_argument("--min-pts", type=int, default=DEFAULT_MIN_PTS)
    s.add_argument("--n-frames", type=int, default=DEFAULT_WINDOW)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.set_defaults(func=cmd_associate)

    t = TrainConfig()
    loss = LossConfig()
    s = sub.add_parser("train", help="self-train the linear feature model")
    s.add_argument("-i", "--input", required=True)
    s.add_argument("-o", "--output", required=True, help="model file")
    s.add_argument("--report")
    s.add_argument("--csv", help="per-epoch table")
    s.add_argument("--epochs", type=int, default=t.epochs)
    s.add_argument("--lr", type=float, default=t.lr)
    s.add_argument("--weight-decay", type=float, default=t.weight_decay)
    s.add_argument("--alpha", type=float, default=t.alpha)
    s.add_argument("--p-ids", type=int, default=t.p_ids)
    s.add_argument("--s-samples", type=int, default=t.s_samples)
    s.add_argument("--n-frames", type=int, default=t.n_frames)
    s.add_argument("--embed-dim", type=int)
    s.add_argument("--margin", type=float, default=loss.margin)
    s.add_argument("--lambda-id", type=float, default=loss.lambda_id)
    s.add_argument("--lambda-tri", type=float, default=loss.lambda_tri)
    s.add_argument("--eps-policy", default="p0.1")
    s.add_argument("--min-pts", type=int, default=DEFAULT_MIN_PTS)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="mAP / CMC of query against gallery tracklets")
    s.add_argument("--query", required=True)
    s.add_argument("--gallery", required=True)
    s.add_argument("--ranks", default="1,5,10,20")
    s.add_argument("--model", help="model file; raw embeddings are pooled when omitted")
    s.add_argument("--use", choices=("mean", "net"), default="mean")
    s.add_argument("--report")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", help="run every stage from a JSON config")
    s.add_argument("--config", help="JSON config file (defaults apply when omitted)")
    s.add_argument("--out-dir", help="output directory (overrides output.dir)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    s.set_defaults(func=cmd_pipeline)
    return p


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return nullcontext()
    try:
        n = int(value)
    except ValueError as exc:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}") from exc
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {value!r}")
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        with _thread_limit():
            report = args.func(args)
        _emit(report, getattr(args, "report", None))
    except Exception as exc:
        code = exit_code_for(exc)
        if isinstance(exc, StageError):
            logger.debug("stage failure", exc_info=exc.cause)
        else:
            logger.debug("failure", exc_info=exc)
        print(f"trackmill {args.command}: error: {exc}", file=sys.stderr)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
