"""Training loop: shared training, adaptive merging, final optimization.

Each step runs forward, loss, backward, an AdamW update at the scheduled
learning rate, and then the merge hook.  Merges therefore see averages that
include the just-updated weights.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from . import config as C
from . import tensor as T
from .adapters import AdapterBank, MergeEvent, ShareGroup, snapshot_assignment, trainable_param_count
from .errors import NumericalAbort
from .merging import MergeEngine, MergeSchedule, RunningAverage, SimilarityReport
from .model import Transformer
from .optim import AdamW, lr_at
from .rng import derive_seed, make_rng, restore_rng, rng_state
from .tasks import TaskData, evaluate, generate

log = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "phase", "loss", "lr", "live_groups_q", "live_groups_v", "params")


@dataclass(frozen=True)
class TrainPlan:
    total_steps: int
    merge_start: int
    merge_interval: int
    merge_budget: int
    lr: float
    warmup_steps: int
    batch_size: int
    weight_decay: float
    seed: int
    eval_every: int
    pair_scope: str = "all_pairs"
    checkpoint_every: int = 0

    @classmethod
    def from_config(cls, cfg: dict) -> "TrainPlan":
        return cls(
            total_steps=cfg["total_steps"], merge_start=cfg["merge_start"], merge_interval=cfg["merge_interval"],
            merge_budget=C.effective_budget(cfg), lr=float(cfg["lr"]), warmup_steps=cfg["warmup_steps"],
            batch_size=cfg["batch_size"], weight_decay=float(cfg["weight_decay"]), seed=cfg["seed"],
            eval_every=cfg["eval_every"], pair_scope=cfg["pair_scope"], checkpoint_every=cfg["checkpoint_every"],
        )

    def lr_at(self, t: int) -> float:
        return lr_at(t, self.lr, self.warmup_steps, self.total_steps)

    def schedule(self) -> MergeSchedule:
        return MergeSchedule(self.merge_start, self.merge_interval, self.merge_budget, self.pair_scope)


class Recorder(Protocol):
    def on_step(self, row: dict) -> None: ...
    def on_merges(self, events: list[MergeEvent], reports: list[SimilarityReport]) -> None: ...
    def on_eval(self, step: int, metrics: dict) -> None: ...
    def flush(self) -> None: ...
    def on_checkpoint(self, trainer: "Trainer") -> None: ...


@dataclass
class RunReport:
    metrics: list[dict]
    merge_events: list[MergeEvent]
    similarity_reports: list[SimilarityReport]
    assignments: dict[str, dict[int, int]]
    phase_boundaries: dict[str, int | None]
    initial_train_loss: float
    final_train_loss: float
    eval_metrics: dict[str, float]
    eval_history: list[tuple[int, dict]] = field(default_factory=list)
    adapter_params: int = 0


def format_metric_row(row: dict) -> list[str]:
    return [
        str(row["step"]), row["phase"], repr(float(row["loss"])), repr(float(row["lr"])),
        str(row["live_groups_q"]), str(row["live_groups_v"]), str(row["params"]),
    ]


class Trainer:
    def __init__(self, plan: TrainPlan, model: Transformer, data: TaskData, recorder: Recorder | None = None):
        self.plan = plan
        self.model = model
        self.data = data
        self.recorder = recorder
        self.mode = model.adapter_cfg.mode
        self.engine = MergeEngine(plan.schedule(), model.banks)
        self.optimizer = AdamW(weight_decay=plan.weight_decay)
        self.optimizer.sync(model.named_trainables())
        self.rng = make_rng(derive_seed(plan.seed, 3))
        self.step = 0
        self.metrics: list[dict] = []
        self.eval_history: list[tuple[int, dict]] = []
        self.initial_train_loss: float | None = None
        self.final_merge_step: int | None = None

    # -- bookkeeping -------------------------------------------------------

    @property
    def adaptive(self) -> bool:
        return self.mode == "aslora" and self.plan.merge_budget > 0

    def phase_at(self, t: int) -> str:
        if self.mode in ("lora", "fixed_share"):
            return "train"
        if not self.adaptive or t <= self.plan.merge_start:
            return "shared"
        if self.final_merge_step is not None and t > self.final_merge_step:
            return "final"
        return "merging"

    def phase_boundaries(self) -> dict[str, int | None]:
        if not self.adaptive:
            return {"merge_start": None, "final_start": None}
        return {"merge_start": self.plan.merge_start, "final_start": self.final_merge_step}

    def live_groups(self, proj: str) -> int:
        bank = self.model.banks.get(proj)
        return bank.live_groups if bank is not None else 0

    def adapter_params(self) -> int:
        merges = max((b.merges_done for b in self.model.banks.values()), default=0)
        return trainable_param_count(self.model.adapter_cfg, merges)

    # -- loop --------------------------------------------------------------

    def train_step(self) -> dict:
        t = self.step + 1
        plan = self.plan
        idx = self.rng.integers(0, len(self.data.train), size=plan.batch_size)
        batch = self.data.train.subset(idx)
        T.reset_tape()
        loss = self.model.loss(batch.tokens, batch.labels)
        value = loss.item()
        if not math.isfinite(value):
            T.reset_tape()
            raise NumericalAbort(t, value)
        T.backward(loss)
        lr = plan.lr_at(t)
        params = self.model.named_trainables()
        self.optimizer.step(params, lr)
        events = self.engine.step_hook(t)
        if events:
            # absorbed B's are gone from the trainables; their moments go too
            self.optimizer.sync(self.model.named_trainables())
            if self.engine.done:
                self.final_merge_step = t
        self.step = t
        row = {
            "step": t,
            "phase": self.phase_at(t),
            "loss": value,
            "lr": lr,
            "live_groups_q": self.live_groups("query"),
            "live_groups_v": self.live_groups("value"),
            "params": self.adapter_params(),
        }
        self.metrics.append(row)
        if self.recorder is not None:
            self.recorder.on_step(row)
            if events:
                n = len(events)
                self.recorder.on_merges(events, self.engine.reports[-n:])
        return row

    def train_loss(self) -> float:
        return evaluate(self.model, self.data.train)["loss"]

    def run(self, until: int | None = None) -> RunReport:
        until = self.plan.total_steps if until is None else until
        before = self.model.base_fingerprint()
        if self.initial_train_loss is None:
            self.initial_train_loss = self.train_loss()
        while self.step < until:
            prev_phase = self.phase_at(self.step) if self.step else None
            row = self.train_step()
            t = self.step
            if t % self.plan.eval_every == 0 and len(self.data.eval):
                ev = evaluate(self.model, self.data.eval)
                self.eval_history.append((t, ev))
                if self.recorder is not None:
                    self.recorder.on_eval(t, ev)
            if self.recorder is not None:
                if t % self.plan.eval_every == 0 or row["phase"] != prev_phase:
                    self.recorder.flush()
                if self.plan.checkpoint_every and t % self.plan.checkpoint_every == 0 and t < self.plan.total_steps:
                    self.recorder.on_checkpoint(self)
        if self.model.base_fingerprint() != before:
            raise AssertionError("frozen base weights changed during training")
        final_loss = self.train_loss()
        ev = evaluate(self.model, self.data.eval) if len(self.data.eval) else {}
        if self.recorder is not None:
            self.recorder.flush()
            self.recorder.on_checkpoint(self)
        return RunReport(
            metrics=list(self.metrics),
            merge_events=list(self.engine.events),
            similarity_reports=list(self.engine.reports),
            assignments={p: snapshot_assignment(b) for p, b in self.model.banks.items()},
            phase_boundaries=self.phase_boundaries(),
            initial_train_loss=float(self.initial_train_loss),
            final_train_loss=final_loss,
            eval_metrics=ev,
            eval_history=list(self.eval_history),
            adapter_params=self.adapter_params(),
        )

    # -- state ---------------------------------------------------------------

    def state(self) -> tuple[dict[str, np.ndarray], dict]:
        """Every array and scalar needed to resume bit-exactly."""
        arrays: dict[str, np.ndarray] = {}
        for name, p in self.model.base.items():
            arrays[f"base.{name}"] = p.data
        for name, p in self.model.named_trainables().items():
            arrays[f"param.{name}"] = p.data
        for name in self.optimizer.m:
            arrays[f"adam.m.{name}"] = self.optimizer.m[name]
            arrays[f"adam.v.{name}"] = self.optimizer.v[name]
        counts: dict[str, dict[str, int]] = {}
        for proj, avgs in self.engine.averages.items():
            counts[proj] = {}
            for gid, avg in avgs.items():
                arrays[f"avg.{proj}.g{gid}"] = avg.mean
                counts[proj][str(gid)] = avg.count
        meta = {
            "step": self.step,
            "rng": rng_state(self.rng),
            "optimizer_step": self.optimizer.step_count,
            "banks": {
                proj: {
                    "assignment": list(b.assignment),
                    "merges_done": b.merges_done,
                    "groups": {str(gid): g.member_layers for gid, g in sorted(b.groups.items())},
                }
                for proj, b in self.model.banks.items()
            },
            "merge_remaining": dict(self.engine.remaining),
            "average_counts": counts,
            "merge_events": [e.to_json() for e in self.engine.events],
            "final_merge_step": self.final_merge_step,
            "initial_train_loss": self.initial_train_loss,
            "eval_history": [[t, ev] for t, ev in self.eval_history],
        }
        return arrays, meta

    def restore(self, arrays: dict[str, np.ndarray], meta: dict) -> None:
        model = self.model
        for name, p in model.base.items():
            p.data = arrays[f"base.{name}"].copy()
        for name, p in model.head.items():
            p.data = arrays[f"param.{name}"].copy()
        for proj, bank in model.banks.items():
            bm = meta["banks"][proj]
            for i, a in enumerate(bank.a_list):
                a.data = arrays[f"param.{bank.a_name(i)}"].copy()
            bank.assignment = list(bm["assignment"])
            bank.merges_done = bm["merges_done"]
            bank.groups = {}
            for gid_s, members in bm["groups"].items():
                gid = int(gid_s)
                B = T.Tensor(arrays[f"param.{bank.b_name(gid)}"], requires_grad=True, name=bank.b_name(gid))
                bank.groups[gid] = ShareGroup(gid, list(members), B)
        self.optimizer = AdamW(weight_decay=self.plan.weight_decay)
        self.optimizer.step_count = meta["optimizer_step"]
        for name in model.named_trainables():
            self.optimizer.m[name] = arrays[f"adam.m.{name}"].copy()
            self.optimizer.v[name] = arrays[f"adam.v.{name}"].copy()
        eng = self.engine
        eng.remaining = {p: int(v) for p, v in meta["merge_remaining"].items()}
        eng.averages = {
            proj: {
                int(g): RunningAverage(int(g), arrays[f"avg.{proj}.g{g}"].copy(), int(c)) for g, c in cnt.items()
            }
            for proj, cnt in meta["average_counts"].items()
        }
        eng.events = [MergeEvent(e["step"], e["type"], e["absorbed"], e["survivor"], tuple(e["absorbed_members"]),
                                 tuple(e["survivor_members"]), e["similarity"]) for e in meta["merge_events"]]
        eng.reports = []
        eng.last_merge_step = eng.events[-1].step if eng.events else None
        self.final_merge_step = meta["final_merge_step"]
        self.initial_train_loss = meta["initial_train_loss"]
        self.eval_history = [(int(t), dict(ev)) for t, ev in meta.get("eval_history", [])]
        self.rng = restore_rng(meta["rng"])
        self.step = meta["step"]


def build_trainer(cfg: dict, recorder: Recorder | None = None) -> Trainer:
    """Model, data and trainer for a materialized config."""
    with T.precision(C.float_type(cfg)):
        model = Transformer(C.model_config(cfg), C.adapter_config(cfg), cfg["seed"])
    data = generate(C.task_spec(cfg))
    return Trainer(TrainPlan.from_config(cfg), model, data, recorder)


def run(cfg: dict, recorder: Recorder | None = None) -> RunReport:
    trainer = build_trainer(cfg, recorder)
    with T.precision(C.float_type(cfg)):
        return trainer.run()
