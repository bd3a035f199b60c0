"""Low-rank adapters over the flat parameter dict.

Each targeted linear map W (d_in, d_out) gets factors a (d_in, r) and
b (r, d_out); the adapted map is W + (alpha/rank) * a @ b. In the usual
column-vector notation that is W + (alpha/rank)·B·A with B = b.T zero at
init, so attaching changes nothing until the first optimizer step.

Adapted training materializes the effective weights for the existing
forward/backward and then projects the dense gradient back onto the
factors, which is exact:

    dL/da = s * dW_eff @ b.T        dL/db = s * a.T @ dW_eff
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

# Per-layer linear maps; the output head can be targeted by naming it
# explicitly, matching the common "all linear layers" reading that leaves
# the head alone.
ALL_LINEAR = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")


@dataclass
class LoraState:
    rank: int
    alpha: float
    adapters: dict = field(default_factory=dict)  # name -> {"a": ..., "b": ...}
    merged: bool = False

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank


def _expand_targets(params: dict, targets) -> list[str]:
    """Resolve target names to fully-qualified parameter keys.

    A bare suffix like "wq" selects that map in every layer; a full key
    like "layers.2.wq" or "lm_head" selects exactly that map.
    """
    known_suffixes = set(ALL_LINEAR)
    resolved: list[str] = []
    for t in targets:
        if t in params and params[t].ndim == 2 and t != "tok_emb":
            resolved.append(t)
        elif t in known_suffixes:
            hits = [k for k in params if k.endswith("." + t)]
            if not hits:
                raise ValueError(f"unknown LoRA target: {t}")
            resolved.extend(hits)
        else:
            raise ValueError(f"unknown LoRA target: {t}")
    return sorted(set(resolved))


def attach_lora(params: dict, rank: int, alpha: float, targets=ALL_LINEAR,
                seed: int = 0) -> LoraState:
    """Create zero-effect adapters for the targeted maps (a random, b zero)."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    rng = np.random.default_rng([seed, 0x10AA])
    state = LoraState(rank=rank, alpha=float(alpha))
    for name in _expand_targets(params, targets):
        w = params[name]
        a = rng.normal(0.0, 0.02, size=(w.shape[0], rank)).astype(w.dtype)
        b = np.zeros((rank, w.shape[1]), dtype=w.dtype)
        state.adapters[name] = {"a": a, "b": b}
    return state


def adapted_params(params: dict, lora: LoraState) -> dict:
    """Dense weights with the adapter deltas applied (base dict untouched)."""
    out = dict(params)
    s = lora.scaling
    for name, f in lora.adapters.items():
        out[name] = params[name] + s * (f["a"] @ f["b"])
    return out


def lora_grads(dense_grads: dict, lora: LoraState) -> dict:
    """Project gradients w.r.t. effective weights onto the adapter factors."""
    s = lora.scaling
    out = {}
    for name, f in lora.adapters.items():
        dw = dense_grads[name]
        out[name] = {"a": s * (dw @ f["b"].T), "b": s * (f["a"].T @ dw)}
    return out


def merge_lora(params: dict, lora: LoraState) -> dict:
    """Fold adapters into the base weights; safe to call once."""
    if lora.merged or not lora.adapters:
        warnings.warn("merge_lora: no active adapters, returning weights unchanged")
        return dict(params)
    merged = adapted_params(params, lora)
    lora.merged = True
    lora.adapters = {}
    return merged


def lora_param_count(params: dict, rank: int, targets=ALL_LINEAR) -> int:
    """Closed form: sum over targets of rank * (d_in + d_out)."""
    total = 0
    for name in _expand_targets(params, targets):
        d_in, d_out = params[name].shape
        total += rank * (d_in + d_out)
    return total


@dataclass(frozen=True)
class LoraConfig:
    """Bundled settings; reference recipe uses rank 256, alpha 16."""

    rank: int = 16
    alpha: float = 16.0
    targets: tuple = ALL_LINEAR
    seed: int = 0
