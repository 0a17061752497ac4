"""Config-driven experiment runs: data preparation, training, evaluation,
sweeps, and report tables.

Run directory layout::

    <out>/config.json           resolved configuration
    <out>/points.json           sweep points and their overrides
    <out>/results.csv           every metric of every (point, seed)
    <out>/runs/<point>/s<seed>/ results.csv, manifest.json, telemetry.jsonl,
                                checkpoints/, data/ (when requested)
    <out>/report/               tables written by :func:`report`
"""

from __future__ import annotations

import csv
import itertools
import json
import logging
import traceback
from dataclasses import dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any

import numpy as np

from . import data as ddata
from .evaluation import EvalResult, evaluate_run, write_results_csv
from .federation import TrainConfig, init_client, run_federation
from .model import load_checkpoint, save_checkpoint
from .privacy import PrivacyConfig, decode_broadcast, encode_broadcast

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METRIC_COLUMNS = ("HR@5", "NDCG@5", "HR@10", "NDCG@10")


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # "synthetic" or "files"
    synthetic: ddata.SyntheticSpec = ddata.SyntheticSpec()
    paths: tuple[str, ...] = ()
    format: str | None = None
    filter: bool = True
    embed_mode: str = "hashing"
    embed_path: str | None = None
    embed_seed: int = 0
    # Training-set density m; None keeps every training interaction.
    density_m: float | None = None
    # Synthetic data is regenerated per run seed (spec seed + run seed).
    reseed_synthetic: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    seeds: tuple[int, ...] = (0,)
    sweep: dict = field(default_factory=dict)
    out: str = "runs/default"
    save_checkpoints: bool = False
    save_data: bool = False
    eval_mixed: bool = False
    schema_version: int = SCHEMA_VERSION

    def validate(self) -> "ExperimentConfig":
        if not self.seeds:
            raise ConfigError("seed list must be non-empty", "seeds")
        if self.data.source not in ("synthetic", "files"):
            raise ConfigError(f"unknown data source {self.data.source!r}", "data.source")
        if self.data.source == "files" and not self.data.paths:
            raise ConfigError("data.paths must list one file per domain", "data.paths")
        for axis, values in self.sweep.items():
            if not isinstance(values, (list, tuple)) or not values:
                raise ConfigError(f"sweep axis {axis!r} needs a non-empty list of values", f"sweep.{axis}")
            for v in values:
                set_path(self, axis, v)
        return self


# ---------------------------------------------------------------------------
# (De)serialisation
# ---------------------------------------------------------------------------


def to_dict(cfg) -> dict:
    def conv(x):
        if is_dataclass(x):
            return {f.name: conv(getattr(x, f.name)) for f in fields(x)}
        if isinstance(x, (list, tuple)):
            return [conv(v) for v in x]
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(cfg)


def from_dict(cls, data: dict, path: str = ""):
    """Build a (nested) frozen dataclass, rejecting unknown keys with their dotted path."""
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {path or '<root>'}", path or None)
    known = {f.name: f for f in fields(cls)}
    defaults = cls()
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in known:
            raise ConfigError(f"unknown config field {where!r}", where)
        current = getattr(defaults, key)
        if is_dataclass(current):
            kwargs[key] = from_dict(type(current), value, where)
        elif isinstance(current, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{where} must be a list", where)
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}", path or None) from None


def load_config(path: str | Path) -> ExperimentConfig:
    raw = json.loads(Path(path).read_text())
    version = raw.pop("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}", "schema_version")
    return from_dict(ExperimentConfig, raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(to_dict(cfg), indent=2, sort_keys=True)


def parse_config(text: str) -> ExperimentConfig:
    raw = json.loads(text)
    raw.pop("schema_version", None)
    return from_dict(ExperimentConfig, raw)


def set_path(cfg, dotted: str, value: Any, _prefix: str = ""):
    """Return a copy of ``cfg`` with the dotted field replaced (validated)."""
    head, _, rest = dotted.partition(".")
    full = _prefix + dotted
    names = {f.name for f in fields(cfg)}
    if head not in names:
        raise ConfigError(f"unknown config field {full!r}", full)
    current = getattr(cfg, head)
    if rest:
        if not is_dataclass(current):
            raise ConfigError(f"{_prefix + head!r} has no sub-fields", full)
        new = set_path(current, rest, value, f"{_prefix}{head}.")
    elif is_dataclass(current):
        new = from_dict(type(current), value, full)
    elif isinstance(current, tuple) and isinstance(value, list):
        new = tuple(value)
    else:
        new = value
    try:
        return replace(cfg, **{head: new})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{full}: {exc}", full) from None


# ---------------------------------------------------------------------------
# Running
# ---------------------------------------------------------------------------


def sweep_points(cfg: ExperimentConfig) -> list[tuple[str, dict]]:
    axes = sorted(cfg.sweep)
    combos = itertools.product(*(cfg.sweep[a] for a in axes)) if axes else [()]
    return [(f"p{k:03d}", dict(zip(axes, combo))) for k, combo in enumerate(combos)]


def prepare_data(cfg: ExperimentConfig, seed: int) -> list[ddata.DomainDataset]:
    dc = cfg.data
    if dc.source == "synthetic":
        spec = dc.synthetic
        if dc.reseed_synthetic:
            spec = replace(spec, seed=spec.seed + seed)
        if spec.dim != cfg.train.dim:
            spec = replace(spec, dim=cfg.train.dim)
        datasets = ddata.generate_synthetic(spec)
    else:
        datasets = [ddata.load_domain(p, dc.format, dc.filter, domain_id=k) for k, p in enumerate(dc.paths)]
        datasets = ddata.align_users(datasets)
        datasets = [ddata.embed_reviews(d, dc.embed_mode, cfg.train.dim, dc.embed_path, dc.embed_seed)
                    for d in datasets]
    datasets = [ddata.split_leave_one_out(d, seed) for d in datasets]
    if dc.density_m is not None:
        datasets = [ddata.apply_density(d, dc.density_m, seed) for d in datasets]
    return datasets


def train_one(cfg: ExperimentConfig, seed: int, run_dir: Path | None = None):
    """Prepare data and train for one seed; optionally persist artefacts."""
    datasets = prepare_data(cfg, seed)
    tcfg = replace(cfg.train, fed=replace(cfg.train.fed, seed=seed))
    result = run_federation(datasets, tcfg)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = dict(result.manifest, seed=seed)
        (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        with open(run_dir / "telemetry.jsonl", "w") as fh:
            for row in result.telemetry:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        if cfg.save_checkpoints:
            for c in result.clients:
                save_checkpoint(c.params, run_dir / "checkpoints" / f"d{c.domain}", {"seed": seed})
            (run_dir / "checkpoints" / "global_prototypes.json").write_bytes(encode_broadcast(result.G))
        if cfg.save_data or cfg.save_checkpoints:
            (run_dir / "data").mkdir(exist_ok=True)
            for d in datasets:
                ddata.save_dataset(d, run_dir / "data" / f"d{d.domain_id}.npz")
    return datasets, result


def run_experiment(cfg: ExperimentConfig, evaluate: bool = True) -> Path:
    """Train (and evaluate) every seed x sweep point; returns the output directory.

    A failing run leaves ``FAILED.json`` in its directory; the others continue.
    Raises :class:`RuntimeError` at the end if any run failed.
    """
    cfg.validate()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(dump_config(cfg))
    points = sweep_points(cfg)
    (out / "points.json").write_text(json.dumps([{"point": p, "params": v} for p, v in points],
                                                indent=2, sort_keys=True))
    rows, failures = [], []
    for point, overrides in points:
        pcfg = cfg
        for axis, value in overrides.items():
            pcfg = set_path(pcfg, axis, value)
        for run_idx, seed in enumerate(cfg.seeds):
            run_dir = out / "runs" / point / f"s{seed}"
            try:
                _, result = train_one(pcfg, seed, run_dir)
                if evaluate:
                    ev = evaluate_run(result.clients, seed=seed, run=run_idx, mixed=cfg.eval_mixed)
                    write_results_csv([ev], run_dir / "results.csv")
                    rows.extend(_point_rows(point, overrides, seed, ev))
            except Exception as exc:
                logger.exception("run %s seed %s failed", point, seed)
                failures.append((point, seed))
                run_dir.mkdir(parents=True, exist_ok=True)
                (run_dir / "FAILED.json").write_text(json.dumps(
                    {"error": type(exc).__name__, "message": str(exc), "traceback": traceback.format_exc()},
                    indent=2))
    if evaluate:
        _write_rows(out / "results.csv", rows)
    if failures:
        raise RuntimeError(f"{len(failures)} run(s) failed: {failures}")
    return out


def evaluate_saved(out: str | Path, mixed: bool = False) -> Path:
    """Re-evaluate checkpoints written by a ``train`` invocation."""
    out = Path(out)
    cfg = load_config(out / "config.json")
    rows = []
    for point, overrides in sweep_points(cfg):
        pcfg = cfg
        for axis, value in overrides.items():
            pcfg = set_path(pcfg, axis, value)
        for run_idx, seed in enumerate(cfg.seeds):
            run_dir = out / "runs" / point / f"s{seed}"
            ck = run_dir / "checkpoints"
            if not ck.exists():
                raise FileNotFoundError(f"{ck}: no checkpoints (train with save_checkpoints=true)")
            tcfg = replace(pcfg.train, fed=replace(pcfg.train.fed, seed=seed))
            G = decode_broadcast((ck / "global_prototypes.json").read_bytes())
            clients = []
            for path in sorted((run_dir / "data").glob("d*.npz")):
                ds = ddata.load_dataset(path)
                c = init_client(ds, tcfg)
                c.params = load_checkpoint(ck / f"d{ds.domain_id}")
                c.G = G
                clients.append(c)
            ev = evaluate_run(clients, seed=seed, run=run_idx, mixed=mixed)
            write_results_csv([ev], run_dir / "results.csv")
            rows.extend(_point_rows(point, overrides, seed, ev))
    _write_rows(out / "results.csv", rows)
    return out


def _point_rows(point: str, overrides: dict, seed: int, ev: EvalResult) -> list[dict]:
    return [{"point": point, "params": json.dumps(overrides, sort_keys=True), "seed": seed, **r}
            for r in ev.rows()]


def _write_rows(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["point", "params", "seed", "run", "domain", "metric", "N", "value"],
                           lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({**r, "value": repr(float(r["value"]))})


# ---------------------------------------------------------------------------
# Reporting
# ---------------------------------------------------------------------------


def _read_rows(out: Path) -> list[dict]:
    path = out / "results.csv"
    if not path.exists():
        raise FileNotFoundError(f"{path}: no results; run an experiment with evaluation first")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{path}: no completed runs")
    for r in rows:
        r["params"] = json.loads(r["params"])
        r["value"] = float(r["value"])
        r["N"] = int(r["N"])
    return rows


def _mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


def report(out: str | Path) -> dict[str, Path]:
    """Write summary tables (markdown + CSV) and one plot-ready CSV per sweep axis."""
    out = Path(out)
    rows = _read_rows(out)
    cfg = load_config(out / "config.json")
    axes = sorted({a for r in rows for a in r["params"]})
    # Columns with no values anywhere are omitted.
    axes = [a for a in axes if any(r["params"].get(a) not in (None, "") for r in rows)]
    rep = out / "report"
    rep.mkdir(exist_ok=True)

    groups: dict[tuple, list[float]] = {}
    for r in rows:
        key = (r["point"], int(r["domain"]), f"{r['metric']}@{r['N']}")
        groups.setdefault(key, []).append(r["value"])
    point_params = {r["point"]: r["params"] for r in rows}

    summary_rows = []
    for (point, dom, metric), vals in sorted(groups.items()):
        mean, std = _mean_std(vals)
        summary_rows.append({"point": point, **{a: point_params[point].get(a, "") for a in axes},
                             "domain": dom, "metric": metric, "mean": mean, "std": std, "n": len(vals)})

    written = {}
    summary_csv = rep / "summary.csv"
    _write_dicts(summary_csv, summary_rows, ["point", *axes, "domain", "metric", "mean", "std", "n"])
    written["summary_csv"] = summary_csv

    lines = ["| point | " + " | ".join(axes + ["domain"] + list(METRIC_COLUMNS)) + " |",
             "|" + "---|" * (len(axes) + 2 + len(METRIC_COLUMNS))]
    by_pd: dict[tuple, dict] = {}
    for s in summary_rows:
        by_pd.setdefault((s["point"], s["domain"]), {})[s["metric"]] = s
    for (point, dom), metrics in sorted(by_pd.items()):
        cells = [point, *[_fmt(point_params[point].get(a, "")) for a in axes], str(dom)]
        for m in METRIC_COLUMNS:
            s = metrics.get(m)
            cells.append(f"{s['mean']:.4f} ± {s['std']:.4f}" if s else "")
        lines.append("| " + " | ".join(cells) + " |")
    md = rep / "summary.md"
    md.write_text("\n".join(lines) + "\n")
    written["summary_md"] = md

    privacy_axes = {"train.privacy.clip_c", "train.privacy.noise_eta"}
    for axis in axes:
        others = [a for a in axes if a != axis]
        sweep_rows = []
        for s in summary_rows:
            row = {"x": s[axis], **{a: s[a] for a in others}, "domain": s["domain"], "metric": s["metric"],
                   "y": s["mean"], "err": s["std"]}
            if axis in privacy_axes or privacy_axes & set(others):
                p = point_params[s["point"]]
                c = p.get("train.privacy.clip_c", cfg.train.privacy.clip_c)
                eta = p.get("train.privacy.noise_eta", cfg.train.privacy.noise_eta)
                row["epsilon"] = PrivacyConfig(clip_c=c, noise_eta=eta).epsilon()
            sweep_rows.append(row)
        path = rep / f"sweep_{axis.replace('.', '_')}.csv"
        cols = ["x", *others, "domain", "metric", "y", "err"] + (["epsilon"] if sweep_rows and "epsilon" in sweep_rows[0] else [])
        _write_dicts(path, sweep_rows, cols)
        written[f"sweep:{axis}"] = path
    return written


def _fmt(v) -> str:
    return json.dumps(v) if not isinstance(v, str) else v


def _write_dicts(path: Path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
