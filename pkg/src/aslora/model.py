"""Desk-scale pre-norm transformer encoder with adapted query/value projections.

All base weights are random and frozen; only adapters and the task head train.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adapters import AdapterBank, AdapterConfig, adapter_forward, init_banks
from .errors import ContractError, InputError
from .rng import derive_seed, make_rng
from .tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 12
    model_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 64
    max_seq_len: int = 32
    task_head: str = "classification"
    num_classes: int = 2

    def __post_init__(self):
        for name in ("num_layers", "model_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ContractError(f"{name} must be positive")
        if self.model_dim % self.num_heads:
            raise ContractError(f"model_dim {self.model_dim} not divisible by num_heads {self.num_heads}")
        if self.task_head not in ("classification", "regression"):
            raise ContractError(f"unknown task head {self.task_head!r}")
        if self.task_head == "classification" and self.num_classes < 2:
            raise ContractError("classification needs at least two classes")

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task_head == "classification" else 1


def _frozen(rng, shape, std, dt) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape).astype(dt))


class Transformer:
    def __init__(self, cfg: ModelConfig, adapter_cfg: AdapterConfig, seed: int):
        if adapter_cfg.num_layers != cfg.num_layers or adapter_cfg.model_dim != cfg.model_dim:
            raise ContractError("adapter config does not match the model's depth/width")
        self.cfg = cfg
        self.adapter_cfg = adapter_cfg
        self.seed = seed
        dt = T.default_dtype()
        self.dtype = dt
        d, f, L = cfg.model_dim, cfg.ffn_dim, cfg.num_layers
        rng = make_rng(derive_seed(seed, 0))
        res = 1.0 / math.sqrt(2 * L)

        base: dict[str, Tensor] = {
            "tok_emb": _frozen(rng, (cfg.vocab_size, d), 1.0, dt),
            "pos_emb": _frozen(rng, (cfg.max_seq_len, d), 0.1, dt),
        }
        for i in range(L):
            p = f"layer{i}."
            base[p + "ln1.g"] = Tensor(np.ones(d, dt))
            base[p + "ln1.b"] = Tensor(np.zeros(d, dt))
            for w in ("wq", "wk", "wv"):
                base[p + w] = _frozen(rng, (d, d), 1.0 / math.sqrt(d), dt)
            base[p + "wo"] = _frozen(rng, (d, d), res / math.sqrt(d), dt)
            base[p + "ln2.g"] = Tensor(np.ones(d, dt))
            base[p + "ln2.b"] = Tensor(np.zeros(d, dt))
            base[p + "w1"] = _frozen(rng, (d, f), 1.0 / math.sqrt(d), dt)
            base[p + "b1"] = Tensor(np.zeros(f, dt))
            base[p + "w2"] = _frozen(rng, (f, d), res / math.sqrt(f), dt)
            base[p + "b2"] = Tensor(np.zeros(d, dt))
        base["lnf.g"] = Tensor(np.ones(d, dt))
        base["lnf.b"] = Tensor(np.zeros(d, dt))
        self.base = base

        head_rng = make_rng(derive_seed(seed, 1))
        self.head = {
            "head.W": Tensor(head_rng.normal(0.0, 0.02, size=(d, cfg.out_dim)).astype(dt), requires_grad=True, name="head.W"),
            "head.b": Tensor(np.zeros(cfg.out_dim, dt), requires_grad=True, name="head.b"),
        }
        self.banks: dict[str, AdapterBank] = init_banks(adapter_cfg, derive_seed(seed, 2))

    # -- parameters ----------------------------------------------------------

    def named_trainables(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for proj in sorted(self.banks):
            out.update(self.banks[proj].named_parameters())
        out.update(self.head)
        return out

    def trainable_parameters(self) -> list[Tensor]:
        return list(self.named_trainables().values())

    def adapter_param_count(self) -> int:
        return sum(
            p.data.size for name, p in self.named_trainables().items() if not name.startswith("head.")
        )

    def base_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.base):
            h.update(name.encode())
            h.update(self.base[name].data.tobytes())
        return h.hexdigest()

    def delta_weight(self, proj: str, layer: int) -> np.ndarray:
        return self.banks[proj].delta_weight(layer)

    # -- forward -------------------------------------------------------------

    def check_inputs(self, ids) -> np.ndarray:
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None, :]
        if ids.ndim != 2 or ids.dtype.kind not in "iu":
            raise InputError(f"token ids must be an integer [batch, seq] array, got {ids.dtype} {ids.shape}")
        if ids.shape[1] > self.cfg.max_seq_len:
            raise InputError(f"sequence length {ids.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise InputError(f"token id outside vocabulary [0, {self.cfg.vocab_size})")
        return ids

    def _project(self, h: Tensor, layer: int, name: str, proj: str | None, use_adapters: bool) -> Tensor:
        out = T.matmul(h, self.base[f"layer{layer}.{name}"])
        if use_adapters and proj in self.banks:
            out = T.add(out, adapter_forward(self.banks[proj], layer, h))
        return out

    def features(self, ids, use_adapters: bool = True) -> Tensor:
        ids = self.check_inputs(ids)
        cfg, b = self.cfg, self.base
        B, S = ids.shape
        H = cfg.num_heads
        x = T.add(T.embedding(b["tok_emb"], ids), Tensor(b["pos_emb"].data[:S]))
        for i in range(cfg.num_layers):
            p = f"layer{i}."
            h = T.layer_norm(x, b[p + "ln1.g"], b[p + "ln1.b"])
            q = self._project(h, i, "wq", "query", use_adapters)
            k = self._project(h, i, "wk", None, use_adapters)
            v = self._project(h, i, "wv", "value", use_adapters)
            ctx = T.attention(q, k, v, H)
            x = T.add(x, T.matmul(ctx, b[p + "wo"]))
            h2 = T.layer_norm(x, b[p + "ln2.g"], b[p + "ln2.b"])
            ff = T.gelu(T.add(T.matmul(h2, b[p + "w1"]), b[p + "b1"]))
            x = T.add(x, T.add(T.matmul(ff, b[p + "w2"]), b[p + "b2"]))
        x = T.layer_norm(x, b["lnf.g"], b["lnf.b"])
        return T.mean(x, axis=1)

    def forward(self, ids, use_adapters: bool = True) -> Tensor:
        """Logits ``[batch, classes]`` or regression outputs ``[batch]``."""
        pooled = self.features(ids, use_adapters)
        out = T.add(T.matmul(pooled, self.head["head.W"]), self.head["head.b"])
        if self.cfg.task_head == "regression":
            out = T.reshape(out, (out.shape[0],))
        return out

    def base_forward(self, ids) -> Tensor:
        return self.forward(ids, use_adapters=False)

    def loss(self, ids, labels) -> Tensor:
        out = self.forward(ids)
        if self.cfg.task_head == "classification":
            return T.cross_entropy(out, np.asarray(labels, dtype=np.int64))
        return T.mse(out, np.asarray(labels, dtype=out.dtype))
