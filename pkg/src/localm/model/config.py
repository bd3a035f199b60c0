"""Model and generation hyperparameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from ..tokenizer import DEFAULT_VOCAB_SIZE


@dataclass(frozen=True)
class ModelConfig:
    """Decoder-only transformer shape.

    Defaults describe the desk-scale byte-level model (~1M params). The
    reference scales used for the full experiments are in PAPER_CONFIGS.
    """

    vocab_size: int = DEFAULT_VOCAB_SIZE
    n_layers: int = 4
    hidden: int = 128
    n_heads: int = 4
    n_kv_heads: int = 2
    ffn_hidden: int = 512
    block_size: int = 384
    rope_base: float = 10_000.0
    norm_eps: float = 1e-5
    init_std: float = 0.02
    tie_embeddings: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.hidden % self.n_heads != 0:
            raise ValueError("hidden must be divisible by n_heads")
        if self.n_heads % self.n_kv_heads != 0:
            raise ValueError("n_heads must be divisible by n_kv_heads")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.n_heads

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, blob: str) -> "ModelConfig":
        return cls(**json.loads(blob))


# Reference scales (sequence length 2048, vocab 128,256 in the full setup).
PAPER_CONFIGS = {
    "500m": ModelConfig(
        vocab_size=128_256,
        n_layers=24,
        hidden=1024,
        n_heads=16,
        n_kv_heads=16,
        ffn_hidden=4096,
        block_size=2048,
    ),
    "1b": ModelConfig(
        vocab_size=128_256,
        n_layers=16,
        hidden=2048,
        n_heads=16,
        n_kv_heads=16,
        ffn_hidden=5632,
        block_size=2048,
    ),
}


@dataclass(frozen=True)
class GenConfig:
    """Sampling settings; temperature 0 switches to greedy decoding."""

    max_new_tokens: int = 32
    temperature: float = 0.6
    top_p: float = 0.9
    stop_ids: tuple = ()

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
