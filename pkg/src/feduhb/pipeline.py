"""Experiment orchestration: train -> unlearn -> attack -> verify, plus reports.

Output layout under ``output_dir``::

    config.json                canonical config
    manifest.json              hash, version, seeds, timestamps, file inventory
    timings.json               wall-clock per stage and round (not a metric file)
    train/metrics.csv          round,test_loss,test_acc
    train/model.bin            final global model
    history/rounds.bin         per-round global model, aggregate, client updates
    history/history.json
    unlearn/<method>.csv       round,delta,sigma,stopped,test_loss,test_acc
    unlearn/<method>.bin
    unlearn/<method>.json      rounds used, stop reason, notes
    attack/attacks.csv         method,misr,asr,clean_acc
    attack/attacks.json
    verify/bound.csv           t,gap,bound,rho,limit
    verify/verify.json

Every file except ``timings.json`` and ``manifest.json`` is a pure function
of the config, so reruns reproduce it byte for byte.
"""

from __future__ import annotations

import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import __version__, attacks, checkpoint, models, theory
from .config import ExperimentConfig
from .datasets import Dataset, client_datasets, gen_quadratic, inject_backdoor, load_mnist, partition_iid
from .errors import ConfigError, FedUHBError
from .fl_engine import run_training
from .numerics import rng_stream
from .unlearning import CSV_COLUMNS, run_federaser, run_fedrecover_lbfgs, run_feduhb, run_retrain

logger = logging.getLogger(__name__)

TRAIN_COLUMNS = ("round", "test_loss", "test_acc")
ATTACK_COLUMNS = ("method", "misr", "asr", "clean_acc")
BOUND_COLUMNS = ("t", "gap", "bound", "rho", "limit")
PRE_UNLEARNING = "pretrained"

# every purpose tag the pipeline draws random numbers for
STREAMS = ("partition", "poison", "init", "train-batches", "reinit", "unlearn-batches",
           "federaser-calibration", "mia", "quadratic", "verify-problem", "verify-init", "spectrum")


class ReportError(FedUHBError, ValueError):
    pass


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    seed: int
    streams: List[str]
    started: str
    finished: str = ""
    stages_requested: List[str] = field(default_factory=list)
    stages_completed: List[str] = field(default_factory=list)
    failed_stage: Optional[str] = None
    error: Optional[str] = None
    files: List[Dict] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.failed_stage is None

    def to_dict(self) -> Dict:
        return dict(self.__dict__)


# ---------------------------------------------------------------------------
# formatting helpers


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path: Path, columns: Sequence[str], rows: Sequence[Dict]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    path.write_text(buf.getvalue())
    return path


def read_csv(path: Path, columns: Optional[Sequence[str]] = None) -> List[Dict[str, str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ReportError(f"{path}: empty CSV") from None
        if columns is not None and tuple(header) != tuple(columns):
            raise ReportError(f"{path}: columns {header} do not match expected {list(columns)}")
        return [dict(zip(header, r)) for r in reader]


def _plain(obj):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats become null."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, (np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    return obj


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")
    return path


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# data


@dataclass
class Workspace:
    spec: models.ModelSpec
    shards: list
    test: object
    pre_model: Optional[np.ndarray] = None
    history: Optional[list] = None
    results: Dict[str, np.ndarray] = field(default_factory=dict)
    # what unlearned models are scored on; differs from ``test`` for quadratics
    unlearn_test: object = None


def build_workspace(cfg: ExperimentConfig) -> Workspace:
    """Clients, test set and model spec, all derived deterministically from ``cfg``."""
    fl = cfg.fl_config()
    ds = cfg["dataset"]
    if ds["name"] == "quadratic":
        problem = gen_quadratic(fl.num_clients, ds["dim"], ds["mu"], ds["L"], rng_stream(cfg.seed, "quadratic"),
                                heterogeneity=ds["heterogeneity"])
        return Workspace(cfg.model_spec(ds["dim"]), list(problem.shards), problem,
                         unlearn_test=problem.restrict(fl.remaining_clients))
    train = load_mnist(ds["data_dir"], "train")
    test = load_mnist(ds["data_dir"], "test")
    if ds["train_size"] is not None:
        train = train.subset(np.arange(min(ds["train_size"], len(train))))
    if ds["test_size"] is not None:
        test = test.subset(np.arange(min(ds["test_size"], len(test))))
    plan = partition_iid(len(train), fl.num_clients, rng_stream(cfg.seed, "partition"))
    shards = client_datasets(train, plan)
    if cfg["attack"]["backdoor"]:
        trig = cfg.trigger()
        for c in fl.target_clients:
            shards[c], _ = inject_backdoor(shards[c], trig, rng_stream(cfg.seed, "poison", c))
    return Workspace(cfg.model_spec(train.dim), shards, test, unlearn_test=test)


def target_data(cfg: ExperimentConfig, ws: Workspace) -> Dataset:
    parts = [ws.shards[c] for c in cfg.fl_config().target_clients]
    return Dataset(np.vstack([p.X for p in parts]), np.concatenate([p.y for p in parts]),
                   parts[0].num_classes, parts[0].image_shape)


# ---------------------------------------------------------------------------
# stages


def _stage_train(cfg, ws: Workspace, out: Path, timings: Dict) -> None:
    log, history = run_training(cfg.fl_config(), ws.shards, ws.spec, ws.test)
    rows = [{"round": t, "test_loss": l, "test_acc": a} for t, l, a in zip(log.rounds, log.test_loss, log.test_acc)]
    write_csv(out / "train" / "metrics.csv", TRAIN_COLUMNS, rows)
    checkpoint.save_vector(out / "train" / "model.bin", log.final_model, len(log.rounds))
    checkpoint.save_history(out / "history", history, {"config_hash": cfg.config_hash(), "seed": cfg.seed,
                                                      "num_clients": cfg.fl_config().num_clients})
    timings["train_rounds"] = log.wall_clock
    ws.pre_model, ws.history = log.final_model, history


def _load_history(ws: Workspace, history_dir: Path) -> list:
    if ws.history is None:
        ws.history, _ = checkpoint.load_history(history_dir)
    return ws.history


def _stage_unlearn(cfg, ws: Workspace, out: Path, timings: Dict, methods: Sequence[str], history_dir: Path) -> None:
    fl, ucfg = cfg.fl_config(), cfg.unlearn_config()
    remaining = {c: ws.shards[c] for c in fl.remaining_clients}
    for method in methods:
        start = time.perf_counter()
        if method == "feduhb":
            res = run_feduhb(ws.spec, remaining, ucfg, fl, ws.unlearn_test)
        elif method == "retrain":
            res = run_retrain(ws.spec, remaining, ucfg, fl, ws.unlearn_test)
        elif method == "federaser":
            res = run_federaser(ws.spec, _load_history(ws, history_dir), remaining, ucfg, fl, ws.unlearn_test)
        elif method == "fedrecover":
            res = run_fedrecover_lbfgs(ws.spec, _load_history(ws, history_dir), remaining, ucfg, fl, ws.unlearn_test)
        else:
            raise ConfigError(f"unknown method {method!r}")
        timings[f"unlearn_{method}"] = time.perf_counter() - start
        write_csv(out / "unlearn" / f"{method}.csv", CSV_COLUMNS, res.log)
        checkpoint.save_vector(out / "unlearn" / f"{method}.bin", res.final_model, res.rounds_used)
        last = res.log[-1] if res.log else {"test_loss": float("nan"), "test_acc": float("nan")}
        _write_json(out / "unlearn" / f"{method}.json", {
            "method": method, "rounds_used": res.rounds_used, "stop_reason": res.stop_reason,
            "final_test_loss": last["test_loss"], "final_test_acc": last["test_acc"], "notes": res.notes})
        ws.results[method] = res.final_model


def _model_for(ws: Workspace, out: Path, method: str) -> np.ndarray:
    if method == PRE_UNLEARNING:
        if ws.pre_model is None:
            ws.pre_model = checkpoint.load_vector(out / "train" / "model.bin")
        return ws.pre_model
    if method not in ws.results:
        ws.results[method] = checkpoint.load_vector(out / "unlearn" / f"{method}.bin")
    return ws.results[method]


def _stage_attack(cfg, ws: Workspace, out: Path, methods: Sequence[str]) -> None:
    a = cfg["attack"]
    names = [PRE_UNLEARNING] + [m for m in methods if (out / "unlearn" / f"{m}.bin").exists() or m in ws.results]
    pre = _model_for(ws, out, PRE_UNLEARNING)
    tgt = target_data(cfg, ws)
    shadow = attacks.train_shadow_attack(ws.spec, pre, tgt, ws.test, rng_stream(cfg.seed, "mia"), l2=a["l2"]) \
        if a["mia"] else None
    trig = cfg.trigger()
    rows, details = [], {}
    for name in names:
        w = _model_for(ws, out, name)
        row = {"method": name, "misr": float("nan"), "asr": float("nan"),
               "clean_acc": models.accuracy(ws.spec, w, ws.test)}
        if shadow is not None:
            row["misr"] = attacks.misr(shadow, ws.spec, w, tgt).misr
        if a["backdoor"]:
            rep = attacks.asr(ws.spec, w, ws.test, trig)
            row["asr"] = rep.asr
            details[name] = {"eligible": rep.eligible, "excluded": rep.excluded, "hits": rep.hits}
        rows.append(row)
    write_csv(out / "attack" / "attacks.csv", ATTACK_COLUMNS, rows)
    summary = {"backdoor": details}
    if shadow is not None:
        nonmembers = ws.test
        summary["mia"] = {
            "attack_train_accuracy": shadow.train_accuracy,
            "attack_accuracy_pre": attacks.attack_accuracy(shadow, ws.spec, pre, tgt, nonmembers),
            "members": shadow.num_members, "nonmembers": shadow.num_nonmembers}
    _write_json(out / "attack" / "attacks.json", summary)


def _stage_verify(cfg, out: Path) -> None:
    v = cfg["verify"]
    problem = gen_quadratic(v["num_clients"], v["dim"], v["mu"], v["L"], rng_stream(cfg.seed, "verify-problem"),
                            heterogeneity=v["heterogeneity"])
    alpha = v["alpha"] if v["alpha"] is not None else 1.0 / problem.L
    beta = v["beta"] if v["beta"] is not None else cfg["unlearn"]["momentum"]
    rng = rng_stream(cfg.seed, "verify-init")
    w_hb = rng.uniform(-1, 1, problem.dim)
    w_gd = rng.uniform(-1, 1, problem.dim) if v["distinct_inits"] else w_hb
    traj = theory.divergence_trace(problem, alpha, beta, v["rounds"], w_hb, w_gd, seed=cfg.seed)
    write_csv(out / "verify" / "bound.csv", BOUND_COLUMNS, list(traj.rows()))
    ratio = max((g / b for g, b in zip(traj.gap, traj.bound) if b > 0), default=0.0)
    _write_json(out / "verify" / "verify.json", {
        "mu": traj.constants.mu, "L": traj.constants.L, "G": traj.constants.G, "alpha": alpha, "beta": beta,
        "d0": traj.d0, "rho": traj.rho, "limit": traj.limit, "rounds": v["rounds"],
        "violations": len(traj.violations()), "max_gap_over_bound": ratio})


# ---------------------------------------------------------------------------


def _inventory(out: Path) -> List[Dict]:
    files = []
    for p in sorted(out.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(out).as_posix()
        if rel == "manifest.json":
            continue
        files.append({"path": rel, "bytes": p.stat().st_size, "sha256": _sha256(p)})
    files.append({"path": "manifest.json", "bytes": None, "sha256": None})
    return sorted(files, key=lambda f: f["path"])


def run_experiment(cfg: ExperimentConfig, out_dir=None, stages: Optional[Sequence[str]] = None,
                   methods: Optional[Sequence[str]] = None, history_dir=None) -> RunManifest:
    """Run the requested stages in canonical order and write the manifest.

    On a stage failure the manifest records the completed stages and the
    error, then the exception propagates.
    """
    out = Path(out_dir if out_dir is not None else cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    stages = [s for s in ("train", "unlearn", "attack", "verify") if s in (stages or cfg.stages)]
    methods = list(methods or cfg.methods)
    history_dir = Path(history_dir) if history_dir is not None else out / "history"

    previous = {}
    if (out / "manifest.json").exists():
        previous = json.loads((out / "manifest.json").read_text())
    manifest = RunManifest(cfg.config_hash(), __version__, cfg.seed, list(STREAMS), _now(), stages_requested=stages)
    if previous.get("config_hash") == manifest.config_hash:
        manifest.stages_completed = [s for s in previous.get("stages_completed", []) if s not in stages]
    (out / "config.json").write_text(cfg.to_json())

    timings: Dict[str, object] = {}
    ws: Optional[Workspace] = None
    try:
        for stage in stages:
            manifest.failed_stage = stage
            start = time.perf_counter()
            if stage != "verify" and ws is None:
                ws = build_workspace(cfg)
            if stage == "train":
                _stage_train(cfg, ws, out, timings)
            elif stage == "unlearn":
                _stage_unlearn(cfg, ws, out, timings, methods, history_dir)
            elif stage == "attack":
                _stage_attack(cfg, ws, out, methods)
            else:
                _stage_verify(cfg, out)
            timings[stage] = time.perf_counter() - start
            manifest.stages_completed.append(stage)
            manifest.failed_stage = None
            logger.info("stage %s done in %.2fs", stage, timings[stage])
    except (FedUHBError, OSError) as exc:
        manifest.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        _write_json(out / "timings.json", timings)
        manifest.finished = _now()
        manifest.stages_completed = [s for s in ("train", "unlearn", "attack", "verify")
                                     if s in manifest.stages_completed]
        manifest.files = _inventory(out)
        _write_json(out / "manifest.json", manifest.to_dict())
    return manifest


# ---------------------------------------------------------------------------
# reports


def _rounds_to(values: List[float], ok) -> Optional[int]:
    for i, v in enumerate(values):
        if not math.isnan(v) and ok(v):
            return i + 1
    return None


def emit_report(run_dirs: Sequence, out_dir=None, acc_threshold: float = 0.8,
                loss_threshold: float = 1e-6) -> Dict[str, List[Dict]]:
    """Merge per-method CSVs of one or more runs into plot-ready tables.

    Returns ``{"convergence", "rounds_to_threshold", "attacks"}``; with
    ``out_dir`` each table is also written as CSV. Accuracy thresholds are
    used for classifiers; runs whose accuracy column is all ``nan``
    (quadratic problems) are measured by ``test_loss <= loss_threshold``.
    """
    if not run_dirs:
        raise ReportError("report needs at least one run directory")
    convergence, thresholds, attack_rows = [], [], []
    for run in run_dirs:
        run = Path(run)
        csvs = sorted((run / "unlearn").glob("*.csv"))
        attack_csv = run / "attack" / "attacks.csv"
        if not csvs and not attack_csv.exists():
            raise ReportError(f"{run}: no completed unlearn or attack outputs")
        for path in csvs:
            method = path.stem
            rows = read_csv(path, CSV_COLUMNS)
            for r in rows:
                convergence.append({"run": run.name, "method": method, **r})
            acc = [float(r["test_acc"]) for r in rows]
            loss = [float(r["test_loss"]) for r in rows]
            if all(math.isnan(a) for a in acc):
                metric, thr, hit = "test_loss", loss_threshold, _rounds_to(loss, lambda v: v <= loss_threshold)
            else:
                metric, thr, hit = "test_acc", acc_threshold, _rounds_to(acc, lambda v: v >= acc_threshold)
            thresholds.append({"run": run.name, "method": method, "metric": metric, "threshold": thr,
                               "rounds": "" if hit is None else hit, "rounds_used": len(rows)})
        if attack_csv.exists():
            for r in read_csv(attack_csv, ATTACK_COLUMNS):
                attack_rows.append({"run": run.name, **r})
    tables = {"convergence": convergence, "rounds_to_threshold": thresholds, "attacks": attack_rows}
    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "convergence.csv", ("run", "method") + CSV_COLUMNS, convergence)
        write_csv(out / "rounds_to_threshold.csv",
                  ("run", "method", "metric", "threshold", "rounds", "rounds_used"), thresholds)
        write_csv(out / "attacks.csv", ("run",) + ATTACK_COLUMNS, attack_rows)
    return tables


# ---------------------------------------------------------------------------
# standalone entry points used by the CLI


def standalone_attack(cfg: ExperimentConfig, kind: str, pre_path, post_path, out_json) -> Dict:
    """One attack against a pre/post checkpoint pair, reported as JSON."""
    ws = build_workspace(cfg)
    pre, post = checkpoint.load_vector(pre_path), checkpoint.load_vector(post_path)
    for w in (pre, post):
        if len(w) != ws.spec.num_params:
            raise ConfigError(f"checkpoint has {len(w)} parameters, config model needs {ws.spec.num_params}")
    if kind == "mia":
        tgt = target_data(cfg, ws)
        shadow = attacks.train_shadow_attack(ws.spec, pre, tgt, ws.test, rng_stream(cfg.seed, "mia"),
                                             l2=cfg["attack"]["l2"])
        report = {"kind": kind, "attack_train_accuracy": shadow.train_accuracy,
                  "pre": attacks.misr(shadow, ws.spec, pre, tgt).to_dict(),
                  "post": attacks.misr(shadow, ws.spec, post, tgt).to_dict()}
    elif kind == "backdoor":
        trig = cfg.trigger()
        report = {"kind": kind, "pre": attacks.asr(ws.spec, pre, ws.test, trig).to_dict(),
                  "post": attacks.asr(ws.spec, post, ws.test, trig).to_dict()}
    else:
        raise ConfigError(f"unknown attack kind {kind!r}")
    _write_json(Path(out_json), report)
    return report


def standalone_verify(cfg: ExperimentConfig, out_csv) -> Path:
    """Write the bound CSV straight to ``out_csv`` (plus a JSON summary beside it)."""
    out_csv = Path(out_csv)
    tmp = out_csv.parent / (out_csv.stem + "_verify")
    _stage_verify(cfg, tmp)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    (tmp / "verify" / "bound.csv").replace(out_csv)
    (tmp / "verify" / "verify.json").replace(out_csv.with_suffix(".json"))
    (tmp / "verify").rmdir()
    tmp.rmdir()
    return out_csv
