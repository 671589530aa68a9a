"""Run-directory artifacts.

A run directory holds::

    config.json        materialized config (every default filled in)
    metrics.csv        step,phase,loss,lr,live_groups_q,live_groups_v,params
    merges.jsonl       one merge event per line
    similarity.jsonl   full pairwise report at every firing step
    evals.jsonl        held-out metrics every eval_every steps
    assignment.json    per-type layer -> group map and group members
    summary.json       written when the run finishes
    checkpoint/        latest checkpoint (see ``checkpoint``)

Writes are buffered and appended at eval points, phase changes and
checkpoints.  Resuming truncates every log to the checkpoint step first, so
an interrupted run ends with the same bytes as an uninterrupted one.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from pathlib import Path

from . import checkpoint
from . import config as C
from .adapters import AdapterBank, MergeEvent, snapshot_assignment
from .errors import ConfigError
from .merging import SimilarityReport
from .train import METRIC_FIELDS, RunReport, Trainer, format_metric_row

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "ASLORA_RUN_ROOT"
CHECKPOINT_DIR = "checkpoint"


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def default_run_dir(cfg: dict, stem: str = "run") -> Path:
    name = cfg["run_name"] or f"{stem}-{C.config_hash(cfg)[:8]}"
    return run_root() / name


def _truncate_jsonl(path: Path, step: int) -> None:
    if not path.exists():
        return
    kept = [ln for ln in path.read_text().splitlines(keepends=True) if ln.strip() and json.loads(ln)["step"] <= step]
    path.write_text("".join(kept))


def _truncate_csv(path: Path, step: int) -> None:
    if not path.exists():
        return
    lines = path.read_text().splitlines(keepends=True)
    kept = lines[:1] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) <= step]
    path.write_text("".join(kept))


def _jsonl(obj: dict) -> str:
    return json.dumps(obj) + "\n"


class RunWriter:
    """File-backed :class:`~aslora.train.Recorder` for one run directory."""

    def __init__(self, run_dir: str | Path, cfg: dict, resume_step: int | None = None, overwrite: bool = False):
        self.dir = Path(run_dir)
        self.cfg = cfg
        self.hash = C.config_hash(cfg)
        self.banks: dict[str, AdapterBank] | None = None
        self._rows: list[dict] = []
        self._merges: list[MergeEvent] = []
        self._reports: list[SimilarityReport] = []
        self._evals: list[tuple[int, dict]] = []
        if resume_step is None:
            self._fresh(overwrite)
        else:
            self._resume(resume_step)

    @property
    def checkpoint_dir(self) -> Path:
        return self.dir / CHECKPOINT_DIR

    def _fresh(self, overwrite: bool) -> None:
        if (self.dir / "metrics.csv").exists() and not overwrite:
            raise FileExistsError(f"{self.dir} already holds a run; pass --force to overwrite or --resume")
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "config.json").write_text(C.dumps(self.cfg))
        with open(self.dir / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow(METRIC_FIELDS)
        for name in ("merges.jsonl", "similarity.jsonl", "evals.jsonl"):
            (self.dir / name).write_text("")
        for stale in ("summary.json", "assignment.json"):
            (self.dir / stale).unlink(missing_ok=True)

    def _resume(self, step: int) -> None:
        saved = C.load_config(self.dir / "config.json")
        if C.config_hash(saved) != self.hash:
            raise ConfigError("<resume>", f"{self.dir}/config.json does not match the config being resumed")
        _truncate_csv(self.dir / "metrics.csv", step)
        for name in ("merges.jsonl", "similarity.jsonl", "evals.jsonl"):
            _truncate_jsonl(self.dir / name, step)
        (self.dir / "summary.json").unlink(missing_ok=True)

    def attach(self, trainer: Trainer) -> None:
        self.banks = trainer.model.banks
        self._write_assignment()

    # -- Recorder ------------------------------------------------------------

    def on_step(self, row: dict) -> None:
        self._rows.append(row)

    def on_merges(self, events: list[MergeEvent], reports: list[SimilarityReport]) -> None:
        self._merges.extend(events)
        self._reports.extend(reports)

    def on_eval(self, step: int, metrics: dict) -> None:
        self._evals.append((step, metrics))
        log.info("step %d  %s", step, "  ".join(f"{k} {v:.4f}" for k, v in metrics.items()))

    def flush(self) -> None:
        if self._rows:
            buf = io.StringIO()
            w = csv.writer(buf, lineterminator="\n")
            for row in self._rows:
                w.writerow(format_metric_row(row))
            with open(self.dir / "metrics.csv", "a", newline="") as fh:
                fh.write(buf.getvalue())
        if self._merges:
            with open(self.dir / "merges.jsonl", "a") as fh:
                fh.writelines(_jsonl(e.to_json()) for e in self._merges)
            self._write_assignment()
        if self._reports:
            with open(self.dir / "similarity.jsonl", "a") as fh:
                fh.writelines(_jsonl(r.to_json()) for r in self._reports)
        if self._evals:
            with open(self.dir / "evals.jsonl", "a") as fh:
                fh.writelines(_jsonl({"step": s, **m}) for s, m in self._evals)
        self._rows, self._merges, self._reports, self._evals = [], [], [], []

    def on_checkpoint(self, trainer: Trainer) -> None:
        self.flush()
        arrays, meta = trainer.state()
        checkpoint.save(self.checkpoint_dir, arrays, meta, self.hash)

    # -- artifacts -----------------------------------------------------------

    def _write_assignment(self) -> None:
        if self.banks is None:
            return
        doc = {
            proj: {
                "assignment": {str(layer): gid for layer, gid in snapshot_assignment(bank).items()},
                "groups": {str(gid): g.member_layers for gid, g in sorted(bank.groups.items())},
                "live_groups": bank.live_groups,
            }
            for proj, bank in sorted(self.banks.items())
        }
        (self.dir / "assignment.json").write_text(json.dumps(doc, indent=1) + "\n")

    def write_summary(self, report: RunReport) -> dict:
        summary = summarize(self.cfg, report)
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
        return summary


def eval_metric(cfg: dict, metrics: dict) -> tuple[str, float | None]:
    name = "accuracy" if cfg["task_head"] == "classification" else "mse"
    return name, metrics.get(name)


def summarize(cfg: dict, report: RunReport) -> dict:
    metric, value = eval_metric(cfg, report.eval_metrics)
    return {
        "mode": cfg["mode"],
        "seed": cfg["seed"],
        "config_hash": C.config_hash(cfg),
        "adapter_params": report.adapter_params,
        "initial_train_loss": report.initial_train_loss,
        "final_train_loss": report.final_train_loss,
        "eval": report.eval_metrics,
        "eval_metric": metric,
        "eval_value": value,
        "merges": len(report.merge_events),
        "phase_boundaries": report.phase_boundaries,
    }


def format_table(header: list[str], rows: list[list]) -> str:
    """Plain left-aligned text table."""
    cells = [header] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _cell(v) -> str:
    if isinstance(v, bool):
        return str(v)
    if isinstance(v, int):
        return f"{v:,}"
    if isinstance(v, float):
        return f"{v:.4f}"
    return "-" if v is None else str(v)
