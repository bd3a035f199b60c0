"""Pre-training and LoRA fine-tuning loops.

Schedule, optimizer, clipping, and cadence follow the reference recipe:
linear warmup from zero to the peak rate, cosine decay to the final rate,
AdamW with decoupled weight decay, global-norm gradient clipping, and
periodic validation + checkpointing. Desk defaults shrink every knob; the
reference-scale values stay representable (see PAPER_TRAIN).

Determinism: with a fixed (seed, corpus, config) the metrics log and the
final checkpoint are reproducible in single-threaded float64 mode; float32
runs are reproducible on the same BLAS build.
"""

from __future__ import annotations

import json
import math
import time
import warnings
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .corpus import Document, TokenStream
from .evalppl import perplexity
from .model import ModelConfig, init_params, save_checkpoint
from .model.lora import LoraState, adapted_params, attach_lora, lora_grads
from .model.transformer import loss_and_grads
from .textformat import MetadataVariant, SftPair
from .tokenizer import Block, PAD_ID, encode_text, pack_stream


class TrainingDiverged(RuntimeError):
    """Raised when a non-finite loss or gradient appears (bug, not noise)."""


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 600
    warmup_steps: int = 60
    lr_peak: float = 3e-3
    lr_final: float = 3e-4
    weight_decay: float = 0.033
    grad_clip: float = 0.1
    micro_batch: int = 8
    grad_accum: int = 1
    seq_len: int = 384
    val_every: int = 200   # 0 disables mid-run validation
    ckpt_every: int = 200  # 0 keeps only the final checkpoint
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.lr_final > self.lr_peak:
            raise ValueError("lr_final must be <= lr_peak")
        if self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive")

    @property
    def tokens_per_step(self) -> int:
        return self.micro_batch * self.grad_accum * self.seq_len


# Reference-scale recipe: 10k steps, 500-step warmup to 3e-3, cosine to
# 3e-4, wd 0.033, clip 0.1, micro batch 8 x accum 64 at seq 2048 (about 4M
# tokens per optimizer step across the original 4-way data parallelism).
PAPER_TRAIN = TrainConfig(
    total_steps=10_000,
    warmup_steps=500,
    lr_peak=3e-3,
    lr_final=3e-4,
    weight_decay=0.033,
    grad_clip=0.1,
    micro_batch=8,
    grad_accum=64,
    seq_len=2048,
    val_every=1_000,
    ckpt_every=1_000,
)


def lr_at(step: int, c: TrainConfig) -> float:
    """Warmup-then-cosine schedule; continuous at the junction."""
    if step < 0 or step > c.total_steps:
        raise ValueError(f"step {step} outside [0, {c.total_steps}]")
    if step < c.warmup_steps:
        return c.lr_peak * step / c.warmup_steps
    span = c.total_steps - c.warmup_steps
    frac = (step - c.warmup_steps) / span
    return c.lr_final + (c.lr_peak - c.lr_final) * (1.0 + math.cos(math.pi * frac)) / 2.0


# --- optimizer ----------------------------------------------------------------


@dataclass
class OptState:
    m: dict
    v: dict
    t: int = 0


def init_opt(params: dict) -> OptState:
    return OptState(
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def global_grad_norm(grads: dict) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.astype(np.float64) ** 2))
    return math.sqrt(total)


def clip_grads_(grads: dict, max_norm: float) -> float:
    """Scale grads in place to global norm <= max_norm; returns pre-clip norm."""
    norm = global_grad_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adamw_update_(params: dict, grads: dict, opt: OptState, lr: float,
                  c: TrainConfig) -> None:
    """In-place decoupled-decay AdamW step over every parameter."""
    opt.t += 1
    b1c = 1.0 - c.beta1 ** opt.t
    b2c = 1.0 - c.beta2 ** opt.t
    for k, p in params.items():
        g = grads[k]
        m = opt.m[k]
        v = opt.v[k]
        m *= c.beta1
        m += (1.0 - c.beta1) * g
        v *= c.beta2
        v += (1.0 - c.beta2) * g * g
        update = (m / b1c) / (np.sqrt(v / b2c) + c.eps)
        p -= lr * update
        if c.weight_decay:
            p -= lr * c.weight_decay * p


# --- pre-training -------------------------------------------------------------


def _batch_from_blocks(blocks: list[Block]):
    ids = np.stack([b.ids for b in blocks]).astype(np.int32)
    weights = np.stack([b.content for b in blocks]).astype(np.float64)
    return ids, weights


def train_step(params: dict, opt: OptState, micro_batches, c: TrainConfig,
               step: int, cfg: ModelConfig) -> dict:
    """One optimizer step over grad_accum micro-batches of packed blocks."""
    accum = {k: np.zeros_like(v) for k, v in params.items()}
    losses = []
    content = 0.0
    n_micro = 0
    for ids, weights in micro_batches:
        loss, grads, aux = loss_and_grads(params, cfg, ids, weights)
        if not math.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss {loss} at step {step} "
                f"(grad norm so far {global_grad_norm(accum):.3e})"
            )
        losses.append(loss)
        content += aux["weight_sum"]
        for k in accum:
            accum[k] += grads[k]
        n_micro += 1
    if n_micro != c.grad_accum:
        raise ValueError(f"expected {c.grad_accum} micro-batches, got {n_micro}")
    for k in accum:
        accum[k] /= n_micro
    pre_norm = clip_grads_(accum, c.grad_clip)
    if not math.isfinite(pre_norm):
        raise TrainingDiverged(f"non-finite gradient norm at step {step}")
    lr = lr_at(step, c)
    adamw_update_(params, accum, opt, lr, c)
    return {
        "step": step,
        "loss": float(np.mean(losses)),
        "lr": lr,
        "grad_norm": pre_norm,
        "content_tokens": content,
        "tokens_seen": (step + 1) * c.tokens_per_step,
    }


@dataclass
class PretrainResult:
    params: dict
    metrics: list
    val_records: list
    checkpoints: list
    wraps: int = 0


def pretrain(stream: TokenStream, mcfg: ModelConfig, c: TrainConfig,
             out_dir=None, val_docs: list[Document] | None = None,
             val_variant: MetadataVariant | None = None,
             quiet: bool = True) -> PretrainResult:
    """Pre-train from scratch over a budgeted mix stream.

    The stream supplies its canonical budget pass; if total_steps needs
    more tokens the stream wraps to a reshuffled epoch and the wrap is
    logged. Checkpoints land in out_dir every ckpt_every steps, metrics in
    metrics.jsonl, validation records in val.jsonl.
    """
    if c.seq_len != stream.mix.packing:
        raise ValueError(
            f"TrainConfig.seq_len {c.seq_len} != mix packing {stream.mix.packing}"
        )
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    params = init_params(mcfg, seed=c.seed)
    opt = init_opt(params)

    wraps = 0

    def doc_iter():
        nonlocal wraps
        wrap = 0
        while True:
            yield from stream.iter_docs(wrap)
            wrap += 1
            wraps = wrap

    blocks = pack_stream(doc_iter(), c.seq_len)
    metrics: list[dict] = []
    val_records: list[dict] = []
    ckpts: list[Path] = []
    mfh = open(out / "metrics.jsonl", "w") if out is not None else None
    t0 = time.time()
    try:
        for step in range(c.total_steps):
            micro = []
            for _ in range(c.grad_accum):
                group = [next(blocks) for _ in range(c.micro_batch)]
                micro.append(_batch_from_blocks(group))
            rec = train_step(params, opt, micro, c, step, cfg=mcfg)
            metrics.append(rec)
            if mfh is not None:
                mfh.write(json.dumps(rec) + "\n")
            done = step + 1
            if val_docs and c.val_every and done % c.val_every == 0:
                res = perplexity(params, mcfg, val_docs,
                                 val_variant or stream.mix.variant,
                                 model_id="train", test_id="val", resamples=0)
                vrec = {"step": done, "val_ppl": res.ppl,
                        "val_docs": len(res.per_doc)}
                val_records.append(vrec)
                if out is not None:
                    with open(out / "val.jsonl", "a") as fh:
                        fh.write(json.dumps(vrec) + "\n")
            if out is not None and c.ckpt_every and done % c.ckpt_every == 0:
                path = out / f"step_{done:06d}.ckpt"
                save_checkpoint(path, params, {
                    "kind": "model", "step": done,
                    "final": done == c.total_steps,
                    "model": json.loads(mcfg.to_json()),
                    "train": asdict(c), "wraps": wraps,
                })
                ckpts.append(path)
            if not quiet and (done % 50 == 0 or done == c.total_steps):
                print(f"step {done}/{c.total_steps} loss {rec['loss']:.4f} "
                      f"lr {rec['lr']:.2e} ({time.time() - t0:.0f}s)")
    finally:
        if mfh is not None:
            mfh.close()
    if out is not None:
        final = out / "final.ckpt"
        save_checkpoint(final, params, {
            "kind": "model", "step": c.total_steps, "final": True,
            "model": json.loads(mcfg.to_json()), "train": asdict(c),
            "wraps": wraps,
        })
        ckpts.append(final)
    return PretrainResult(params=params, metrics=metrics, val_records=val_records,
                          checkpoints=ckpts, wraps=wraps)


# --- supervised fine-tuning ----------------------------------------------------


@dataclass(frozen=True)
class SftConfig:
    epochs: int = 3
    per_device_batch: int = 2
    grad_accum: int = 8
    lr: float = 2e-4
    lora_rank: int = 16
    lora_alpha: float = 16.0
    lora_targets: tuple = ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down")
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


def encode_sft_pair(pair: SftPair, block_size: int):
    """Token ids and target-only weights for one prompt/target pair.

    Prompt tokens (and BOS) get weight zero; target tokens and the closing
    EOS get weight one. Overlong pairs are truncated from the left of the
    prompt so the target always survives.
    """
    prompt_ids = encode_text(pair.prompt, add_bos=True, add_eos=False).tolist()
    target_ids = encode_text(pair.target, add_bos=False, add_eos=True).tolist()
    if len(target_ids) >= block_size:
        raise ValueError("SFT target longer than block size")
    room = block_size - len(target_ids)
    if len(prompt_ids) > room:
        tail = prompt_ids[-(room - 1):] if room > 1 else []
        prompt_ids = [prompt_ids[0]] + tail
    ids = np.array(prompt_ids + target_ids, dtype=np.int32)
    w = np.zeros(len(ids), dtype=np.float64)
    w[len(prompt_ids):] = 1.0
    return ids, w


def _sft_batches(encoded, batch: int, order):
    for start in range(0, len(order), batch):
        chunk = [encoded[i] for i in order[start:start + batch]]
        width = max(len(ids) for ids, _ in chunk)
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int32)
        w = np.zeros((len(chunk), width), dtype=np.float64)
        for row, (i_ids, i_w) in enumerate(chunk):
            ids[row, : len(i_ids)] = i_ids
            w[row, : len(i_w)] = i_w
        yield ids, w


def sft_target_nll(params, mcfg: ModelConfig, pairs: list[SftPair]) -> float:
    """Mean NLL over target tokens only; the before/after SFT yardstick."""
    from .model.transformer import forward, masked_nll
    total, count = 0.0, 0.0
    encoded = [encode_sft_pair(p, mcfg.block_size) for p in pairs]
    for ids, w in _sft_batches(encoded, 8, list(range(len(encoded)))):
        logits, _ = forward(params, mcfg, ids)
        nll, wt = masked_nll(logits, ids, w)
        total += float((nll * wt).sum())
        count += float(wt.sum())
    return total / count


@dataclass
class SftResult:
    params: dict          # merged weights (base + adapters)
    lora: LoraState
    metrics: list
    pre_nll: float
    post_nll: float


def sft(params: dict, mcfg: ModelConfig, pairs: list[SftPair], c: SftConfig,
        out_dir=None, quiet: bool = True) -> SftResult:
    """LoRA fine-tuning on rendered instruction pairs.

    Base weights stay frozen; only adapter factors receive AdamW updates at
    a constant learning rate. Loss is computed on target tokens only.
    Returns merged weights plus the adapter state and NLL before/after.
    """
    if not pairs:
        raise ValueError("sft: empty dataset")
    encoded = [encode_sft_pair(p, mcfg.block_size) for p in pairs]
    lora = attach_lora(params, rank=c.lora_rank, alpha=c.lora_alpha,
                       targets=c.lora_targets, seed=c.seed)
    flat = {}
    for name, f in lora.adapters.items():
        flat[name + ".a"] = f["a"]
        flat[name + ".b"] = f["b"]
    opt = init_opt(flat)
    opt_cfg = TrainConfig(total_steps=2, warmup_steps=0, lr_peak=c.lr,
                          lr_final=c.lr, weight_decay=c.weight_decay,
                          grad_clip=c.grad_clip, seed=c.seed)

    pre_nll = sft_target_nll(adapted_params(params, lora), mcfg, pairs)
    rng = np.random.default_rng([c.seed, 0x5F7A])
    metrics = []
    micro_losses: list[float] = []
    accum = {k: np.zeros_like(v) for k, v in flat.items()}
    n_acc = 0
    step = 0
    for epoch in range(c.epochs):
        order = rng.permutation(len(encoded))
        for ids, w in _sft_batches(encoded, c.per_device_batch, list(order)):
            eff = adapted_params(params, lora)
            loss, dense, aux = loss_and_grads(eff, mcfg, ids, w)
            if not math.isfinite(loss):
                raise TrainingDiverged(f"non-finite SFT loss at step {step}")
            lg = lora_grads(dense, lora)
            for name, f in lg.items():
                accum[name + ".a"] += f["a"]
                accum[name + ".b"] += f["b"]
            micro_losses.append(loss)
            n_acc += 1
            if n_acc == c.grad_accum:
                for k in accum:
                    accum[k] /= n_acc
                norm = clip_grads_(accum, c.grad_clip)
                adamw_update_(flat, accum, opt, c.lr, opt_cfg)
                metrics.append({"step": step, "epoch": epoch,
                                "loss": float(np.mean(micro_losses)),
                                "grad_norm": norm, "lr": c.lr})
                for k in accum:
                    accum[k][:] = 0.0
                micro_losses = []
                n_acc = 0
                step += 1
        if not quiet:
            print(f"sft epoch {epoch + 1}/{c.epochs} done ({step} steps)")
    if n_acc:
        for k in accum:
            accum[k] /= n_acc
        norm = clip_grads_(accum, c.grad_clip)
        adamw_update_(flat, accum, opt, c.lr, opt_cfg)
        metrics.append({"step": step, "epoch": c.epochs - 1,
                        "loss": float(np.mean(micro_losses)),
                        "grad_norm": norm, "lr": c.lr})

    post_nll = sft_target_nll(adapted_params(params, lora), mcfg, pairs)
    merged = adapted_params(params, lora)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        adapter_arrays = {}
        for name, f in lora.adapters.items():
            adapter_arrays[name + ".a"] = f["a"]
            adapter_arrays[name + ".b"] = f["b"]
        save_checkpoint(out / "adapters.ckpt", adapter_arrays, {
            "kind": "lora", "rank": c.lora_rank, "alpha": c.lora_alpha,
            "targets": list(c.lora_targets),
        })
        save_checkpoint(out / "merged.ckpt", merged, {
            "kind": "model", "sft": True,
            "model": json.loads(mcfg.to_json()),
        })
        with open(out / "sft_metrics.jsonl", "w") as fh:
            for rec in metrics:
                fh.write(json.dumps(rec) + "\n")
    if post_nll >= pre_nll:
        warnings.warn(
            f"SFT did not reduce target NLL ({pre_nll:.4f} -> {post_nll:.4f})"
        )
    return SftResult(params=merged, lora=lora, metrics=metrics,
                     pre_nll=pre_nll, post_nll=post_nll)
