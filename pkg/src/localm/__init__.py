"""locaLM: a desk-scale lab for metadata-conditioned LM pretraining.

The package covers the full pipeline: corpus ingestion and synthetic corpus
generation, metadata-prefixed document formatting, byte-level tokenization
with loss-mask spans, a from-scratch numpy decoder-only transformer with
LoRA adapters, pretraining and SFT loops, masked-perplexity evaluation with
bootstrap confidence intervals, a localized-MCQ benchmark harness, and an
experiment orchestrator.
"""

__version__ = "0.1.0"
