"""Low-rank adapter state: shared A, per-group B, and the layer->group table.

For one adapted projection type the increment at layer ``i`` is
``(alpha / r) * B[group(i)] @ A @ x``.  ``A`` is ``r x d`` and ``B`` is
``d x r``; every ``B`` starts at zero so the increment starts at zero.

Modes:

``lora``
    one A and one B per layer (no sharing).
``shared_a``
    one A for all layers, one B per layer, never merged.
``fixed_share``
    one A; every ``share_n`` consecutive layers share a B.
``aslora``
    one A; B starts per layer and groups are merged during training.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError
from .rng import derive_seed, make_rng
from .tensor import Tensor

MODES = ("lora", "shared_a", "fixed_share", "aslora")
PROJECTION_TYPES = ("query", "value")

_FIXED_RE = re.compile(r"^fixed_share\((\d+)\)$")


def parse_mode(text: str) -> tuple[str, int]:
    """``"fixed_share(3)"`` -> ``("fixed_share", 3)``; other modes get ``share_n=1``."""
    m = _FIXED_RE.match(text.strip())
    if m:
        return "fixed_share", int(m.group(1))
    if text not in MODES:
        raise ContractError(f"unknown adapter mode {text!r}; expected one of {MODES}")
    return text, 1


@dataclass(frozen=True)
class AdapterConfig:
    rank: int
    alpha: float
    num_layers: int
    model_dim: int
    adapted_types: tuple[str, ...] = PROJECTION_TYPES
    mode: str = "aslora"
    share_n: int = 1
    a_init_std: float | None = None  # None -> 1/sqrt(rank)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown adapter mode {self.mode!r}")
        for name in ("rank", "num_layers", "model_dim", "share_n"):
            if int(getattr(self, name)) < 1:
                raise ContractError(f"{name} must be a positive integer")
        if self.rank >= self.model_dim:
            raise ContractError(f"rank {self.rank} must be smaller than model_dim {self.model_dim}")
        if self.alpha < 0:
            raise ContractError("alpha must be non-negative")
        if not self.adapted_types or len(set(self.adapted_types)) != len(self.adapted_types):
            raise ContractError("adapted_types must be a non-empty set")
        for t in self.adapted_types:
            if t not in PROJECTION_TYPES:
                raise ContractError(f"unknown projection type {t!r}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @property
    def init_std(self) -> float:
        return 1.0 / math.sqrt(self.rank) if self.a_init_std is None else float(self.a_init_std)

    @property
    def label(self) -> str:
        return f"fixed_share({self.share_n})" if self.mode == "fixed_share" else self.mode

    def initial_groups(self) -> list[list[int]]:
        L = self.num_layers
        if self.mode == "fixed_share":
            n = self.share_n
            return [list(range(s, min(s + n, L))) for s in range(0, L, n)]
        return [[i] for i in range(L)]


@dataclass
class ShareGroup:
    group_id: int
    member_layers: list[int]
    B: Tensor

    @property
    def representative_layer(self) -> int:
        return max(self.member_layers)


@dataclass(frozen=True)
class MergeEvent:
    step: int
    proj: str
    absorbed: int
    survivor: int
    absorbed_members: tuple[int, ...]
    survivor_members: tuple[int, ...]
    similarity: float

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "type": self.proj,
            "absorbed": self.absorbed,
            "survivor": self.survivor,
            "absorbed_members": list(self.absorbed_members),
            "survivor_members": list(self.survivor_members),
            "similarity": self.similarity,
        }


@dataclass
class AdapterBank:
    cfg: AdapterConfig
    proj: str
    a_list: list[Tensor]
    groups: dict[int, ShareGroup] = field(default_factory=dict)
    assignment: list[int] = field(default_factory=list)
    merges_done: int = 0

    @property
    def A(self) -> Tensor:
        if len(self.a_list) != 1:
            raise ContractError("lora mode has one A per layer; use a_for(layer)")
        return self.a_list[0]

    def a_for(self, layer: int) -> Tensor:
        return self.a_list[layer] if len(self.a_list) > 1 else self.a_list[0]

    def check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.cfg.num_layers:
            raise IndexError(f"layer {layer} outside [0, {self.cfg.num_layers})")

    def group_of(self, layer: int) -> ShareGroup:
        self.check_layer(layer)
        return self.groups[self.assignment[layer]]

    @property
    def live_groups(self) -> int:
        return len(self.groups)

    def a_name(self, index: int = 0) -> str:
        return f"{self.proj}.A.{index}" if len(self.a_list) > 1 else f"{self.proj}.A"

    def b_name(self, group_id: int) -> str:
        return f"{self.proj}.B.g{group_id}"

    def named_parameters(self) -> dict[str, Tensor]:
        out = {self.a_name(i): a for i, a in enumerate(self.a_list)}
        for gid in sorted(self.groups):
            out[self.b_name(gid)] = self.groups[gid].B
        return out

    def delta_weight(self, layer: int) -> np.ndarray:
        """The effective ``d x d`` increment ``(alpha/r) * B A`` used at ``layer``."""
        g = self.group_of(layer)
        return self.cfg.scaling * (g.B.data @ self.a_for(layer).data)


def init_bank(cfg: AdapterConfig, seed: int, proj: str | None = None) -> AdapterBank:
    """Gaussian A (std ``cfg.init_std``), zero B, groups per ``cfg.mode``."""
    proj = proj or cfg.adapted_types[0]
    if proj not in cfg.adapted_types:
        raise ContractError(f"{proj!r} is not an adapted type of this config")
    rng = make_rng(derive_seed(seed, PROJECTION_TYPES.index(proj)))
    r, d, dt = cfg.rank, cfg.model_dim, T.default_dtype()
    n_a = cfg.num_layers if cfg.mode == "lora" else 1
    a_list = [
        Tensor(rng.normal(0.0, cfg.init_std, size=(r, d)).astype(dt), requires_grad=True)
        for _ in range(n_a)
    ]
    bank = AdapterBank(cfg=cfg, proj=proj, a_list=a_list, assignment=[0] * cfg.num_layers)
    for gid, members in enumerate(cfg.initial_groups()):
        bank.groups[gid] = ShareGroup(gid, list(members), Tensor(np.zeros((d, r), dtype=dt), requires_grad=True))
        for layer in members:
            bank.assignment[layer] = gid
    for name, p in bank.named_parameters().items():
        p.name = name
    return bank


def init_banks(cfg: AdapterConfig, seed: int) -> dict[str, AdapterBank]:
    return {proj: init_bank(cfg, seed, proj) for proj in cfg.adapted_types}


def adapter_forward(bank: AdapterBank, layer: int, x: Tensor) -> Tensor:
    """The increment ``(alpha/r) * B~(layer) A x`` for inputs ``x[..., d]``."""
    g = bank.group_of(layer)
    squeeze = x.ndim == 1
    if squeeze:
        x = T.reshape(x, (1, x.shape[0]))
    h = T.matmul(x, T.transpose(bank.a_for(layer)))
    out = T.mul(T.matmul(h, T.transpose(g.B)), bank.cfg.scaling)
    if squeeze:
        out = T.reshape(out, (out.shape[-1],))
    return out


def trainable_param_count(cfg: AdapterConfig, merges_done: int = 0) -> int:
    """Adapter entries that receive gradient updates (task head excluded)."""
    L, dr = cfg.num_layers, cfg.model_dim * cfg.rank
    if not 0 <= merges_done < L:
        raise ContractError(f"merges_done must lie in [0, {L - 1}], got {merges_done}")
    if cfg.mode == "lora":
        per_type = 2 * L * dr
    elif cfg.mode == "fixed_share":
        per_type = (1 + math.ceil(L / cfg.share_n)) * dr
    else:
        per_type = (1 + (L - merges_done)) * dr
    return per_type * len(cfg.adapted_types)


def apply_merge(bank: AdapterBank, g_low: int, g_high: int, step: int = 0, similarity: float = float("nan")) -> MergeEvent:
    """Fold group ``g_low`` into ``g_high``; the upper group's B is kept unchanged."""
    if g_low == g_high:
        raise ContractError("cannot merge a group with itself")
    if g_low not in bank.groups or g_high not in bank.groups:
        raise ContractError(f"unknown group id in merge ({g_low}, {g_high})")
    low, high = bank.groups[g_low], bank.groups[g_high]
    if high.representative_layer <= low.representative_layer:
        raise ContractError(
            f"survivor g{g_high} (rep {high.representative_layer}) must sit above "
            f"g{g_low} (rep {low.representative_layer})"
        )
    event = MergeEvent(
        step=step,
        proj=bank.proj,
        absorbed=g_low,
        survivor=g_high,
        absorbed_members=tuple(low.member_layers),
        survivor_members=tuple(high.member_layers),
        similarity=float(similarity),
    )
    for layer in low.member_layers:
        bank.assignment[layer] = g_high
    high.member_layers = sorted(high.member_layers + low.member_layers)
    del bank.groups[g_low]
    bank.merges_done += 1
    return event


def snapshot_assignment(bank: AdapterBank) -> dict[int, int]:
    return {layer: gid for layer, gid in enumerate(bank.assignment)}
