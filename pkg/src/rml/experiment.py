"""Seeded experiment grids and their summary tables.

A spec is a flat ``key = value`` text file; list-valued keys take comma
separated values. Every grid cell regenerates the dataset, injects noise into
its training split, trains, and evaluates on the clean test split. Cells are
independent and may run in worker processes (``RML_THREADS``); the summary is
always written in grid order so reruns are byte-identical.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import data
from . import encoder as enc
from .evaluation import evaluate_model
from .losses import VARIANTS, LossConfig
from .trainer import TrainConfig, train

log = logging.getLogger(__name__)


class ExperimentConfigError(ValueError):
    pass


class ReportError(ValueError):
    pass


SUMMARY_COLUMNS = (
    "cell", "noise_rate", "variant", "ccd", "margin", "tau", "select_ratio", "seed",
    "rank1", "rank5", "rank10", "mAP", "mINP", "division_precision", "division_recall", "sim_std",
    "best_epoch", "best_rank1", "best_mAP", "best_mINP", "status",
)
GRID_COLUMNS = ("noise_rate", "variant", "ccd", "margin", "tau", "select_ratio", "seed")
METRIC_COLUMNS = ("rank1", "rank5", "rank10", "mAP", "mINP", "division_precision", "division_recall",
                  "sim_std", "best_epoch", "best_rank1", "best_mAP", "best_mINP")
SWEEP_AXES = ("margin", "tau", "select_ratio", "noise_rate")


@dataclass(frozen=True)
class ExperimentSpec:
    name: str = "experiment"
    dataset: data.DatasetConfig = field(default_factory=data.DatasetConfig)
    noise_rates: tuple = (0.5,)
    variants: tuple = ("tal",)
    ccd: tuple = (True,)
    margins: tuple = (0.1,)
    taus: tuple = (0.015,)
    ratios: tuple = (0.3,)
    repetitions: int = 1
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        self.dataset.validate()
        axes = (self.noise_rates, self.variants, self.ccd, self.margins, self.taus, self.ratios)
        if self.repetitions < 1 or any(len(a) == 0 for a in axes):
            raise ExperimentConfigError("experiment grid is empty")
        for r in self.noise_rates:
            if not 0.0 <= r < 1.0:
                raise ExperimentConfigError(f"noise rate {r} outside [0, 1)")
        for v in self.variants:
            if v not in VARIANTS:
                raise ExperimentConfigError(f"unknown loss variant {v!r}")
        for m, t, r in itertools.product(self.margins, self.taus, self.ratios):
            try:
                LossConfig(m, t)
                dataclasses.replace(self.train, select_ratio=r)
            except ValueError as exc:
                raise ExperimentConfigError(str(exc)) from None

    def cells(self) -> list:
        """Grid cells in summary order: one dict of grid coordinates per cell."""
        out = []
        grid = itertools.product(range(self.repetitions), self.noise_rates, self.variants, self.ccd,
                                 self.margins, self.taus, self.ratios)
        for rep, rate, variant, ccd, m, t, r in grid:
            out.append(dict(noise_rate=rate, variant=variant, ccd=ccd, margin=m, tau=t, select_ratio=r,
                            seed=self.seed + rep))
        return out


# key -> (section, field, parser); sections: spec, dataset, train
def _floats(s):
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s):
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _bools(s):
    return tuple(_bool(x) for x in s.split(",") if x.strip())


def _bool(s):
    s = s.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s.strip().lower() in ("", "none") else int(s)


KEYS = {
    "name": ("spec", "name", str.strip),
    "noise_rates": ("spec", "noise_rates", _floats),
    "variants": ("spec", "variants", _strs),
    "ccd": ("spec", "ccd", _bools),
    "margins": ("spec", "margins", _floats),
    "taus": ("spec", "taus", _floats),
    "ratios": ("spec", "ratios", _floats),
    "repetitions": ("spec", "repetitions", int),
    "seed": ("spec", "seed", int),
    "identities": ("dataset", "num_identities", int),
    "images_per_id": ("dataset", "images_per_identity", int),
    "captions_per_image": ("dataset", "captions_per_image", int),
    "raw_dim": ("dataset", "raw_dim", int),
    "noise_std": ("dataset", "intra_identity_noise_std", float),
    "latent_dim": ("dataset", "latent_dim", _opt_int),
    "data_seed": ("dataset", "seed", int),
    "epochs": ("train", "epochs", int),
    "batch_size": ("train", "batch_size", int),
    "learning_rate": ("train", "learning_rate", float),
    "tse_lr_scale": ("train", "tse_lr_scale", float),
    "lr_schedule": ("train", "lr_schedule", str.strip),
    "lr_warmup_epochs": ("train", "lr_warmup_epochs", int),
    "warmup_epochs": ("train", "warmup_epochs", int),
    "delta": ("train", "delta", float),
    "dim": ("train", "dim", int),
    "n_tokens": ("train", "n_tokens", int),
    "shared_init": ("train", "shared_init", _bool),
    "init_cone": ("train", "init_cone", float),
}


def parse_config(text: str, source: str = "<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment. Returns raw strings."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ExperimentConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ExperimentConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def build_spec(values: dict) -> ExperimentSpec:
    """Spec from raw ``key -> string`` values (config file merged with overrides)."""
    sections = {"spec": {}, "dataset": {}, "train": {}}
    for key, raw in values.items():
        if key not in KEYS:
            raise ExperimentConfigError(f"unknown key {key!r}")
        section, name, parse = KEYS[key]
        try:
            sections[section][name] = parse(raw)
        except ValueError as exc:
            raise ExperimentConfigError(f"{key}: {exc}") from None
    try:
        ds = data.DatasetConfig(**sections["dataset"])
        tr = TrainConfig(**sections["train"])
    except (TypeError, ValueError) as exc:
        raise ExperimentConfigError(str(exc)) from None
    spec = ExperimentSpec(dataset=ds, train=tr, **sections["spec"])
    spec.validate()
    return spec


def load_spec(path, overrides: dict | None = None) -> ExperimentSpec:
    values = parse_config(Path(path).read_text(), str(path))
    values.update(overrides or {})
    return build_spec(values)


def cell_name(index: int, cell: dict) -> str:
    return (f"{index:03d}_{cell['variant']}_{'ccd' if cell['ccd'] else 'noccd'}_r{cell['noise_rate']:g}"
            f"_m{cell['margin']:g}_t{cell['tau']:g}_R{cell['select_ratio']:g}_s{cell['seed']}")


def _fmt(x) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float):
        return repr(x)
    return str(x)


def run_cell(spec: ExperimentSpec, index: int, cell: dict, out_dir) -> dict:
    """Train and evaluate one grid cell; artifacts go to ``out_dir/cells/<name>``."""
    name = cell_name(index, cell)
    row = {"cell": name, **{k: cell[k] for k in GRID_COLUMNS}}
    cell_dir = Path(out_dir) / "cells" / name
    try:
        cell_dir.mkdir(parents=True, exist_ok=True)
        full = data.generate(spec.dataset)
        tr, va, te = data.split_by_identity(full, seed=spec.dataset.seed)
        tr = data.inject_noise(tr, data.NoiseSpec(cell["noise_rate"], cell["seed"]))
        cfg = dataclasses.replace(
            spec.train, loss=LossConfig(cell["margin"], cell["tau"]), select_ratio=cell["select_ratio"],
            loss_variant=cell["variant"], use_ccd=cell["ccd"], seed=cell["seed"])
        state = train(tr, cfg, val=va, audit_path=cell_dir / "division_audit.csv")
        write_history(state, cell_dir / "history.csv")
        final = evaluate_model(state.params, te, cfg.select_ratio)
        best = evaluate_model(state.best_params, te, cfg.select_ratio)
        meta = {"select_ratio": cfg.select_ratio, "epoch": state.epoch}
        enc.save_checkpoint(state.params, cell_dir / "checkpoint.txt", meta)
        enc.save_checkpoint(state.best_params, cell_dir / "best_checkpoint.txt", dict(meta, epoch=state.best["epoch"]))
        data.save(te, cell_dir / "test.tsv")
        last = state.metric_history[-1]
        row.update({k: final[k] for k in ("rank1", "rank5", "rank10", "mAP", "mINP", "sim_std")})
        row.update(division_precision=last["division_precision"], division_recall=last["division_recall"],
                   best_epoch=state.best["epoch"], best_rank1=best["rank1"], best_mAP=best["mAP"],
                   best_mINP=best["mINP"], status="ok")
    except Exception as exc:  # a failed cell is reported, not fatal to the grid
        log.exception("cell %s failed", name)
        row["status"] = f"error: {type(exc).__name__}: {exc}".replace("\n", " ")
    return row


def write_history(state, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "L_m", "rank1", "mAP", "mINP", "division_precision", "division_recall"])
        for epoch, (loss, m) in enumerate(zip(state.loss_history, state.metric_history), start=1):
            w.writerow([epoch, repr(float(loss))] + [_fmt(m.get(k, "")) for k in
                        ("rank1", "mAP", "mINP", "division_precision", "division_recall")])


def _worker(args):
    return run_cell(*args)


def thread_count() -> int:
    raw = os.environ.get("RML_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ExperimentConfigError(f"RML_THREADS must be an integer, got {raw!r}") from None


def run_experiment(spec: ExperimentSpec, out_dir, threads: int | None = None) -> list:
    """Run every cell, write ``summary.csv`` and return the rows."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(spec, i, cell, out_dir) for i, cell in enumerate(spec.cells())]
    threads = thread_count() if threads is None else threads
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            rows = list(pool.map(_worker, jobs))
    else:
        rows = [_worker(j) for j in jobs]
    write_summary(rows, out_dir / "summary.csv")
    return rows


def write_summary(rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) if c in r else "" for c in SUMMARY_COLUMNS])
    Path(path).write_text(buf.getvalue())


def read_summary(path) -> list:
    """Parse a summary CSV; errors name the offending line."""
    text = Path(path).read_text()
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ReportError(f"{path}:1: empty file") from None
    missing = [c for c in ("cell", *GRID_COLUMNS, "status") if c not in header]
    if missing:
        raise ReportError(f"{path}:1: missing columns {missing}")
    rows = []
    for fields in reader:
        lineno = reader.line_num
        if not fields:
            continue
        if len(fields) != len(header):
            raise ReportError(f"{path}:{lineno}: expected {len(header)} fields, got {len(fields)}")
        rec = dict(zip(header, fields))
        try:
            for c in ("noise_rate", "margin", "tau", "select_ratio"):
                rec[c] = float(rec[c])
            rec["seed"] = int(rec["seed"])
            rec["ccd"] = bool(int(rec["ccd"]))
            for c in METRIC_COLUMNS:
                if c in rec:
                    rec[c] = float(rec[c]) if rec[c] != "" else None
        except ValueError as exc:
            raise ReportError(f"{path}:{lineno}: {exc}") from None
        rows.append(rec)
    return rows


def _series(rec: dict, axis: str) -> str:
    parts = [f"variant={rec['variant']}", f"ccd={int(rec['ccd'])}"]
    parts += [f"{k}={rec[k]!r}" for k in ("noise_rate", "margin", "tau", "select_ratio") if k != axis]
    parts.append(f"seed={rec['seed']}")
    return ";".join(parts)


def sweep_axes(rows) -> list:
    """Axes along which completed cells vary; noise_rate when nothing varies."""
    varying = [a for a in SWEEP_AXES if len({r[a] for r in rows}) > 1]
    return varying or ["noise_rate"]


def sweep_report(rows) -> list:
    """Long-format (sweep, x, series, metric, value) rows, sorted by x within each sweep."""
    done = [r for r in rows if r["status"] == "ok"]
    out = []
    if not done:
        return out
    for axis in sweep_axes(done):
        block = []
        for r in done:
            series = _series(r, axis)
            for m in METRIC_COLUMNS:
                if r.get(m) is not None:
                    block.append({"sweep": axis, "x": r[axis], "series": series, "metric": m, "value": r[m]})
        block.sort(key=lambda b: (b["x"], b["series"], METRIC_COLUMNS.index(b["metric"])))
        out.extend(block)
    return out


def unpivot(long_rows) -> dict:
    """Inverse of :func:`sweep_report` for one sweep: ``{(axis value, series): {metric: value}}``."""
    out = {}
    for b in long_rows:
        out.setdefault((b["sweep"], b["x"], b["series"]), {})[b["metric"]] = b["value"]
    return out


def write_report(long_rows, path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sweep", "x", "series", "metric", "value"])
    for b in long_rows:
        w.writerow([b["sweep"], repr(b["x"]), b["series"], b["metric"], repr(b["value"])])
    Path(path).write_text(buf.getvalue())
