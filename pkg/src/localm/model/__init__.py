"""Decoder-only transformer in plain NumPy.

Forward, hand-written backward, AdamW-ready gradients, KV-cached sampling,
LoRA adapters, and a self-describing binary checkpoint format. NumPy keeps
the gradient path fully inspectable and finite-difference checkable, which
is the point at desk scale.
"""

from .config import GenConfig, ModelConfig, PAPER_CONFIGS
from .transformer import (
    forward,
    generate,
    init_params,
    loss_and_grads,
    masked_loss,
    masked_nll,
    n_params,
)
from .lora import (
    ALL_LINEAR,
    LoraConfig,
    LoraState,
    adapted_params,
    attach_lora,
    lora_grads,
    lora_param_count,
    merge_lora,
)
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "GenConfig",
    "ModelConfig",
    "PAPER_CONFIGS",
    "forward",
    "generate",
    "init_params",
    "loss_and_grads",
    "masked_loss",
    "masked_nll",
    "n_params",
    "ALL_LINEAR",
    "LoraConfig",
    "LoraState",
    "adapted_params",
    "attach_lora",
    "lora_grads",
    "lora_param_count",
    "merge_lora",
    "load_checkpoint",
    "save_checkpoint",
]
