"""End-to-end run driven by a JSON config.

Stages run in order: data -> simulate -> embed -> isolate -> train (which
associates every epoch) -> eval. Each stage writes a JSON report under
``<out>/reports``; the combined report goes to ``<out>/pipeline.json``.
Reports carry the fully resolved config and no timestamps, so a fixed seed
gives byte-identical files.

Config schema (every key optional; defaults shown by :func:`default_config`)::

    {
      "seed": 0,
      "skip_isolation": false,
      "data": {"input": null | "clean.jsonl",
               "synthetic": {"n_ids", "n_cameras", "length_range", "cameras_per_id"}},
      "simulate": {"enabled", "r_fm", "r_sw", "dist", "counting"},
      "embed": {"enabled", "dim", "sigma_intra", "sigma_camera", "drift", "separation_ratio"},
      "isolate": {"enabled", "eps", "min_pts"},
      "associate": {"eps_policy", "min_pts"},
      "train": {"epochs", "lr", "weight_decay", "alpha", "p_ids", "s_samples",
                "n_frames", "embed_dim", "margin", "lambda_id", "lambda_tri"},
      "eval": {"enabled", "query", "gallery", "n_ids", "ranks", "model"},
      "output": {"dir", "write_manifests", "csv"}
    }
"""

from __future__ import annotations

import copy
import csv
import io
import json
import logging
from pathlib import Path
from typing import Optional

import numpy as np

from .association import DEFAULT_WINDOW
from .clustering import ClusterConfig
from .core import Dataset, NoiseRates, atomic_target, finalize, load_manifest, save_manifest
from .evaluation import evaluate_retrieval
from .exceptions import (
    ConfigError,
    DegenerateInputError,
    FeasibilityError,
    IntegrityError,
    LabelsRequiredError,
    ManifestParseError,
    TrackmillError,
)
from .isolation import DEFAULT_EPS_INTRA, isolate_tracklets
from .losses import LossConfig
from .noise import majority_labels, measurement_report
from .oracle import OracleConfig, generate_embeddings, resolve_sigma, separation_report
from .simulator import generate_noisy_dataset, make_clean_dataset, plan_simulation
from .trainer import TrainConfig, save_model, tracklet_features, train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_STAGE = 4

DATA_ERRORS = (
    ManifestParseError,
    IntegrityError,
    LabelsRequiredError,
    FeasibilityError,
    DegenerateInputError,
    OSError,
)


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, StageError):
        return exit_code_for(exc.cause)
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, DATA_ERRORS):
        return EXIT_DATA
    return EXIT_STAGE


class StageError(TrackmillError):
    """A pipeline stage failed; ``cause`` is the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


def default_config() -> dict:
    t = TrainConfig()
    loss = LossConfig()
    return {
        "seed": 0,
        "skip_isolation": False,
        "data": {
            "input": None,
            "synthetic": {
                "n_ids": 200,
                "n_cameras": 4,
                "length_range": [20, 60],
                "cameras_per_id": [2, 4],
            },
        },
        "simulate": {"enabled": True, "r_fm": 2.5, "r_sw": 1.5, "dist": None, "counting": "camera"},
        "embed": {
            "enabled": True,
            "dim": 64,
            "sigma_intra": 0.15,
            "sigma_camera": 0.05,
            "drift": 0.01,
            "separation_ratio": None,
        },
        "isolate": {"enabled": True, "eps": DEFAULT_EPS_INTRA, "min_pts": 4},
        "associate": {"eps_policy": "p0.1", "min_pts": 4},
        "train": {
            "epochs": t.epochs,
            "lr": t.lr,
            "weight_decay": t.weight_decay,
            "alpha": t.alpha,
            "p_ids": t.p_ids,
            "s_samples": t.s_samples,
            "n_frames": DEFAULT_WINDOW,
            "embed_dim": None,
            "margin": loss.margin,
            "lambda_id": loss.lambda_id,
            "lambda_tri": loss.lambda_tri,
        },
        "eval": {
            "enabled": True,
            "query": None,
            "gallery": None,
            "n_ids": 100,
            "ranks": [1, 5, 10, 20],
            "model": "mean",
        },
        "output": {"dir": None, "write_manifests": True, "csv": True},
    }


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if not isinstance(base[key], dict) or (key == "synthetic" and value is None):
            out[key] = copy.deepcopy(value)
        elif isinstance(value, dict):
            out[key] = _merge(base[key], value, where + ".")
        else:
            raise ConfigError(f"config key {where!r} must be an object")
    return out


def set_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override; ``value`` is parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    key, text = assignment.split("=", 1)
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    node = {}
    root = node
    parts = key.split(".")
    for p in parts[:-1]:
        node[p] = {}
        node = node[p]
    node[parts[-1]] = value
    return _merge(cfg, root)


def resolve_config(user: Optional[dict] = None, overrides=()) -> dict:
    """Fill defaults, apply overrides and check every value that can be checked early."""
    if user is not None and not isinstance(user, dict):
        raise ConfigError("config must be a JSON object")
    cfg = _merge(default_config(), user or {})
    for item in overrides:
        cfg = set_override(cfg, item)
    if cfg["skip_isolation"]:
        cfg["isolate"]["enabled"] = False
    cfg["skip_isolation"] = not cfg["isolate"]["enabled"]
    if cfg["data"]["input"] is not None:
        cfg["data"]["synthetic"] = None
    elif cfg["data"]["synthetic"] is None:
        raise ConfigError("data needs either 'input' or 'synthetic'")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError(f"seed must be an integer, got {cfg['seed']!r}")
    if cfg["eval"]["model"] not in ("mean", "net"):
        raise ConfigError("eval.model must be 'mean' or 'net'")
    has_files = cfg["eval"]["query"] is not None or cfg["eval"]["gallery"] is not None
    if cfg["eval"]["enabled"] and has_files:
        if cfg["eval"]["query"] is None or cfg["eval"]["gallery"] is None:
            raise ConfigError("eval needs both 'query' and 'gallery' when either is given")
    elif cfg["eval"]["enabled"] and cfg["data"]["input"] is not None:
        raise ConfigError("eval on file input needs eval.query and eval.gallery manifests")
    if cfg["eval"]["enabled"] and not has_files and not cfg["embed"]["enabled"]:
        raise ConfigError("the held-out synthetic test split needs the embed stage")
    # construct the typed configs once so bad values fail before any work starts
    _cluster_cfg(cfg)
    _train_cfg(cfg)
    _oracle_cfg(cfg)
    ClusterConfig(eps=cfg["isolate"]["eps"], min_pts=cfg["isolate"]["min_pts"])
    if cfg["simulate"]["enabled"]:
        NoiseRates(cfg["simulate"]["r_fm"], cfg["simulate"]["r_sw"])
    return cfg


def _cluster_cfg(cfg) -> ClusterConfig:
    a = cfg["associate"]
    return ClusterConfig.parse_policy(a["eps_policy"], a["min_pts"])


def _train_cfg(cfg) -> TrainConfig:
    t = cfg["train"]
    try:
        return TrainConfig(
            epochs=t["epochs"],
            lr=t["lr"],
            weight_decay=t["weight_decay"],
            alpha=t["alpha"],
            p_ids=t["p_ids"],
            s_samples=t["s_samples"],
            n_frames=t["n_frames"],
            embed_dim=t["embed_dim"],
            loss=LossConfig(t["margin"], t["lambda_id"], t["lambda_tri"]),
            seed=cfg["seed"],
        )
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc


def _oracle_cfg(cfg, sigma: Optional[float] = None) -> OracleConfig:
    e = cfg["embed"]
    return OracleConfig(
        dim=e["dim"],
        sigma_intra=e["sigma_intra"] if sigma is None else sigma,
        sigma_camera=e["sigma_camera"],
        drift=e["drift"],
        seed=cfg["seed"],
        separation_ratio=e["separation_ratio"] if sigma is None else None,
    )


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n"


def write_text(path, text: str) -> None:
    """Write through a ``.partial`` file that is renamed only on success."""
    path = Path(path)
    partial = atomic_target(path)
    partial.write_text(text, encoding="utf-8")
    finalize(partial, path)


def write_manifest(ds: Dataset, path) -> None:
    path = Path(path)
    partial = atomic_target(path)
    save_manifest(ds, partial)
    finalize(partial, path)


def epochs_csv(report: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "n_classes", "n_noise", "eps", "mean_loss", "purity", "tracklet_purity"])
    for e in report["epochs"]:
        writer.writerow(
            [e["epoch"], e["n_classes"], e["n_noise"], repr(e["eps"]), repr(e["mean_loss"]),
             repr(e["purity"]), repr(e["tracklet_purity"])]
        )
    return buf.getvalue()


def retrieval_inputs(ds: Dataset, features: np.ndarray):
    """Tracklet labels (majority identity) and cameras aligned with ``features``."""
    majority = majority_labels(ds)
    labels = np.array([majority[t.id] for t in ds.tracklets])
    cams = np.array([t.camera_id for t in ds.tracklets])
    return features, labels, cams


def split_query_gallery(ds: Dataset):
    """First tracklet of every identity is a query; all others form the gallery."""
    seen = set()
    query, gallery = [], []
    for t in ds.tracklets:
        pid = t.frames[0].gt_pid
        (gallery if pid in seen else query).append(t)
        seen.add(pid)
    return Dataset(tuple(query)), Dataset(tuple(gallery))


class Pipeline:
    """Stateful runner; ``run`` returns the combined report."""

    def __init__(self, cfg: dict, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.reports = self.out / "reports"
        self.summary = {}
        self.sigma = None

    def _stage(self, name, fn, *args):
        logger.info("stage %s", name)
        try:
            result, report = fn(*args)
        except Exception as exc:
            raise StageError(name, exc) from exc
        report = {"stage": name, **report}
        write_text(self.reports / f"{name}.json", dumps(report))
        self.summary[name] = report
        return result

    # stages -------------------------------------------------------------

    def load_data(self):
        d = self.cfg["data"]
        if d["input"] is not None:
            ds = load_manifest(d["input"])
            return ds, {"source": "file", "input": str(d["input"]), "n_tracklets": ds.n_tracklets}
        s = d["synthetic"]
        ds = make_clean_dataset(
            s["n_ids"], s["n_cameras"], tuple(s["length_range"]), tuple(s["cameras_per_id"]),
            seed=self.cfg["seed"],
        )
        return ds, {"source": "synthetic", "n_tracklets": ds.n_tracklets, "n_frames": ds.n_frames}

    def simulate(self, ds):
        s = self.cfg["simulate"]
        plan = plan_simulation(ds, NoiseRates(s["r_fm"], s["r_sw"]), s["dist"], self.cfg["seed"])
        noisy = generate_noisy_dataset(ds, plan)
        report = {
            "plan": {
                "m_units": plan.m_units,
                "n_total": plan.n_total,
                "n_noisy": plan.n_noisy,
                "incidence": plan.incidence,
            },
            "measured": measurement_report(noisy, s["counting"]),
        }
        if self.cfg["output"]["write_manifests"]:
            write_manifest(noisy, self.out / "noisy.jsonl")
        return noisy, report

    def embed(self, ds):
        ocfg = _oracle_cfg(self.cfg)
        self.sigma = resolve_sigma(ds.ids, ocfg)
        out = ds.with_embeddings(generate_embeddings(ds, ocfg))
        if self.cfg["output"]["write_manifests"]:
            write_manifest(out, self.out / "embedded.jsonl")
        return out, {"oracle": separation_report(ds, ocfg)}

    def isolate(self, ds):
        i = self.cfg["isolate"]
        out, rep = isolate_tracklets(
            ds, cfg=ClusterConfig(eps=i["eps"], min_pts=i["min_pts"]), return_report=True
        )
        if self.cfg["output"]["write_manifests"]:
            write_manifest(out, self.out / "isolated.jsonl")
        return out, rep.to_dict()

    def train(self, ds):
        tcfg = _train_cfg(self.cfg)
        net, ema, report = train(ds, cfg=tcfg, cluster_cfg=_cluster_cfg(self.cfg))
        partial = atomic_target(self.out / "model.bin")
        save_model(partial, net, ema, meta={"seed": self.cfg["seed"]})
        finalize(partial, self.out / "model.bin")
        write_text(self.out / "labels.json", dumps(report["final_labels"]))
        if self.cfg["output"]["csv"]:
            write_text(self.out / "epochs.csv", epochs_csv(report))
        return (net, ema), report

    def evaluate(self, models):
        e = self.cfg["eval"]
        if e["query"] is not None:
            query, gallery = load_manifest(e["query"]), load_manifest(e["gallery"])
            source = {"source": "files", "query": str(e["query"]), "gallery": str(e["gallery"])}
        else:
            query, gallery, source = self._test_split()
        net, ema = models
        model = ema.model if e["model"] == "mean" else net
        result = {"test": source, "model": e["model"]}
        for key, m in (("trained", model), ("untrained", None)):
            q = retrieval_inputs(query, tracklet_features(query, m))
            g = retrieval_inputs(gallery, tracklet_features(gallery, m))
            result[key] = evaluate_retrieval(*q, *g, ranks=e["ranks"]).to_dict()
        return result, result

    def _test_split(self):
        s = self.cfg["data"]["synthetic"]
        e = self.cfg["eval"]
        clean = make_clean_dataset(
            e["n_ids"], s["n_cameras"], tuple(s["length_range"]), (2, None),
            seed=[self.cfg["seed"], 1], pid_offset=s["n_ids"],
        )
        # same oracle, same noise scale as the training data, unseen identities
        emb = clean.with_embeddings(generate_embeddings(clean, _oracle_cfg(self.cfg, self.sigma)))
        query, gallery = split_query_gallery(emb)
        source = {
            "source": "synthetic",
            "n_ids": e["n_ids"],
            "n_query": query.n_tracklets,
            "n_gallery": gallery.n_tracklets,
        }
        return query, gallery, source

    # driver -------------------------------------------------------------

    def run(self) -> dict:
        self.out.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(exist_ok=True)
        cfg = self.cfg
        try:
            ds = self._stage("data", self.load_data)
            if cfg["simulate"]["enabled"]:
                ds = self._stage("simulate", self.simulate, ds)
            if cfg["embed"]["enabled"]:
                ds = self._stage("embed", self.embed, ds)
            if cfg["isolate"]["enabled"]:
                ds = self._stage("isolate", self.isolate, ds)
            models = self._stage("train", self.train, ds)
            if cfg["eval"]["enabled"]:
                self._stage("eval", self.evaluate, models)
        except StageError:
            write_text_partial(self.out / "pipeline.json", dumps(self._final(failed=True)))
            raise
        final = self._final()
        write_text(self.out / "pipeline.json", dumps(final))
        return final

    def _final(self, failed: bool = False) -> dict:
        train_rep = self.summary.get("train")
        eval_rep = self.summary.get("eval")
        out = {
            "config": self.cfg,
            "completed": not failed,
            "isolation_skipped": self.cfg["skip_isolation"],
            "stages": {k: v for k, v in self.summary.items() if k != "train"},
        }
        if train_rep is not None:
            last = train_rep["epochs"][-1]
            out["train"] = {k: v for k, v in train_rep.items() if k != "final_labels"}
            out["purity"] = last["purity"]
            out["tracklet_purity"] = last["tracklet_purity"]
            out["loss_curve"] = train_rep["loss_curve"]
        if eval_rep is not None:
            out["mAP"] = eval_rep["trained"]["mAP"]
            out["cmc"] = eval_rep["trained"]["cmc"]
        return out


def write_text_partial(path, text: str) -> None:
    atomic_target(path).write_text(text, encoding="utf-8")


def run_pipeline(config_path=None, out_dir=None, overrides=(), config: Optional[dict] = None) -> dict:
    """Load and resolve a config, run every enabled stage, return the final report."""
    user = config
    if config_path is not None:
        path = Path(config_path)
        try:
            user = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc
    cfg = resolve_config(user, overrides)
    out = out_dir or cfg["output"]["dir"]
    if out is None:
        raise ConfigError("no output directory: pass --out-dir or set output.dir")
    cfg["output"]["dir"] = None  # run location is not part of the experiment
    return Pipeline(cfg, out).run()
