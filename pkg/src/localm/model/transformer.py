"""Decoder-only transformer: forward, manual backward, sampling.

Pre-norm blocks with RMSNorm, rotary position embeddings, grouped-query
attention, and a gated (SwiGLU) feed-forward. Parameters live in a flat
dict keyed "layers.{i}.wq" etc. so the optimizer, LoRA, and checkpoints
can treat the model as a name->array mapping.

The backward pass is written out by hand and is checked against central
finite differences in the test suite, so resist the urge to "simplify"
algebra here without re-running those checks.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .config import GenConfig, ModelConfig

_NEG_INF = -1e30


def _np_dtype(cfg: ModelConfig):
    return np.float64 if cfg.dtype == "float64" else np.float32


def init_params(cfg: ModelConfig, seed: int) -> dict[str, np.ndarray]:
    """Scaled-normal init; residual output projections shrunk by sqrt(2L)."""
    rng = np.random.default_rng([seed, 0x90DE1])
    dt = _np_dtype(cfg)
    std = cfg.init_std
    resid_std = std / np.sqrt(2.0 * cfg.n_layers)
    kv_dim = cfg.n_kv_heads * cfg.head_dim

    def draw(shape, s):
        return rng.normal(0.0, s, size=shape).astype(dt)

    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = draw((cfg.vocab_size, cfg.hidden), std)
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        p[pre + "attn_norm"] = np.ones(cfg.hidden, dt)
        p[pre + "wq"] = draw((cfg.hidden, cfg.hidden), std)
        p[pre + "wk"] = draw((cfg.hidden, kv_dim), std)
        p[pre + "wv"] = draw((cfg.hidden, kv_dim), std)
        p[pre + "wo"] = draw((cfg.hidden, cfg.hidden), resid_std)
        p[pre + "ffn_norm"] = np.ones(cfg.hidden, dt)
        p[pre + "w_gate"] = draw((cfg.hidden, cfg.ffn_hidden), std)
        p[pre + "w_up"] = draw((cfg.hidden, cfg.ffn_hidden), std)
        p[pre + "w_down"] = draw((cfg.ffn_hidden, cfg.hidden), resid_std)
    p["final_norm"] = np.ones(cfg.hidden, dt)
    if not cfg.tie_embeddings:
        p["lm_head"] = draw((cfg.hidden, cfg.vocab_size), std)
    return p


def n_params(params: dict[str, np.ndarray]) -> int:
    return int(sum(v.size for v in params.values()))


def _head_matrix(params, cfg):
    return params["tok_emb"].T if cfg.tie_embeddings else params["lm_head"]


# --- building blocks ---------------------------------------------------------


def _rmsnorm(x, g, eps):
    ms = np.mean(x * x, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    xhat = x * inv
    return xhat * g, (xhat, inv)


def _rmsnorm_back(dy, g, saved):
    xhat, inv = saved
    dg = np.sum(dy * xhat, axis=tuple(range(dy.ndim - 1)))
    dyg = dy * g
    dx = inv * (dyg - xhat * np.mean(dyg * xhat, axis=-1, keepdims=True))
    return dx, dg


def _rope_tables(positions, head_dim, base, dt):
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=-1).astype(dt)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=-1).astype(dt)
    return cos, sin


@lru_cache(maxsize=8)
def _rope_tables_cached(T: int, head_dim: int, base: float, dtype: str):
    return _rope_tables(np.arange(T), head_dim, base, np.dtype(dtype))


@lru_cache(maxsize=8)
def _causal_mask_cached(T: int, dtype: str):
    return np.triu(np.full((T, T), _NEG_INF, dtype=np.dtype(dtype)), k=1)


def _rotate_half(x):
    h = x.shape[-1] // 2
    return np.concatenate([-x[..., h:], x[..., :h]], axis=-1)


def _rope_apply(x, cos, sin):
    return x * cos + _rotate_half(x) * sin


def _rope_back(dy, cos, sin):
    # the rotation is orthogonal, so the adjoint is the reverse rotation
    return dy * cos - _rotate_half(dy * sin)


def _softmax_lastaxis(z):
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_inplace(z):
    """Softmax over the last axis, reusing z's buffer."""
    m = z.max(axis=-1, keepdims=True)
    np.subtract(z, m, out=z)
    np.exp(z, out=z)
    s = z.sum(axis=-1, keepdims=True)
    z /= s
    return z


def _silu(z):
    sg = 1.0 / (1.0 + np.exp(-z))
    return z * sg, sg


# --- forward -----------------------------------------------------------------


def forward(params, cfg: ModelConfig, ids, want_cache: bool = False):
    """Run the model over a batch of token ids.

    ids: int array (B, T). Returns (logits, cache); cache is None unless
    requested (training needs it, eval does not).
    """
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValueError("ids must be (batch, time)")
    B, T = ids.shape
    if T > cfg.block_size:
        raise ValueError(f"sequence length {T} exceeds block_size {cfg.block_size}")
    dt = _np_dtype(cfg)
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    nrep = H // KV
    scale = 1.0 / np.sqrt(hd)

    cos, sin = _rope_tables_cached(T, hd, cfg.rope_base, np.dtype(dt).name)
    causal = _causal_mask_cached(T, np.dtype(dt).name)

    x = params["tok_emb"][ids]
    layers = []
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        normed1, saved1 = _rmsnorm(x, params[pre + "attn_norm"], cfg.norm_eps)

        q = (normed1 @ params[pre + "wq"]).reshape(B, T, H, hd).transpose(0, 2, 1, 3)
        k = (normed1 @ params[pre + "wk"]).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
        v = (normed1 @ params[pre + "wv"]).reshape(B, T, KV, hd).transpose(0, 2, 1, 3)
        q = _rope_apply(q, cos, sin)
        k = _rope_apply(k, cos, sin)

        q5 = q.reshape(B, KV, nrep, T, hd)
        scores = q5 @ k[:, :, None].swapaxes(-1, -2)
        scores *= scale
        scores += causal
        probs = _softmax_inplace(scores)
        ctx5 = probs @ v[:, :, None]
        ctx = ctx5.reshape(B, H, T, hd).transpose(0, 2, 1, 3).reshape(B, T, cfg.hidden)
        x = x + ctx @ params[pre + "wo"]

        normed2, saved2 = _rmsnorm(x, params[pre + "ffn_norm"], cfg.norm_eps)
        z_gate = normed2 @ params[pre + "w_gate"]
        z_up = normed2 @ params[pre + "w_up"]
        act, sg = _silu(z_gate)
        hmid = act * z_up
        x = x + hmid @ params[pre + "w_down"]

        if want_cache:
            layers.append(
                dict(saved1=saved1, q=q, k=k, v=v, probs=probs, ctx=ctx,
                     saved2=saved2, z_gate=z_gate, z_up=z_up, sg=sg,
                     act=act, hmid=hmid)
            )

    normed_f, saved_f = _rmsnorm(x, params["final_norm"], cfg.norm_eps)
    logits = normed_f @ _head_matrix(params, cfg)

    cache = None
    if want_cache:
        cache = dict(ids=ids, layers=layers, saved_f=saved_f,
                     normed_f=normed_f, cos=cos, sin=sin)
    return logits, cache


# --- loss --------------------------------------------------------------------


def masked_loss(logits, targets, content_mask):
    """Mean NLL over positions whose target token is a content token.

    targets must already be shifted: targets[..., t] is the token that
    logits[..., t, :] predicts. Metadata and PAD targets carry mask 0 and
    contribute exactly nothing. Raises on an all-masked input; callers
    that stream blocks should skip those instead.
    """
    lg = np.asarray(logits)
    tg = np.asarray(targets)
    mask = np.asarray(content_mask).astype(bool)
    if lg.shape[:-1] != tg.shape or tg.shape != mask.shape:
        raise ValueError("masked_loss: shape mismatch")
    count = int(mask.sum())
    if count == 0:
        raise ValueError("no content tokens")
    m = lg.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(lg - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(lg, tg[..., None], axis=-1)[..., 0]
    nll = (lse - picked).astype(np.float64)
    return {"mean_nll": float(nll[mask].sum() / count), "content_token_count": count}


def masked_nll(logits, ids, weights):
    """Per-position NLL under the within-block shift.

    logits[:, t] predicts ids[:, t+1]; returns (nll, w), both (B, T-1),
    where w is weights shifted onto the predicted token. Accumulate sums
    in float64 for stable perplexities.
    """
    ids = np.asarray(ids)
    targets = ids[:, 1:]
    lg = logits[:, :-1, :]
    m = lg.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(lg - m).sum(axis=-1, keepdims=True)))[..., 0]
    picked = np.take_along_axis(lg, targets[..., None], axis=-1)[..., 0]
    nll = lse - picked
    w = np.asarray(weights)[:, 1:].astype(np.float64)
    return nll.astype(np.float64), w


def _ce_loss_and_dlogits(logits, ids, weights):
    nll, w = masked_nll(logits, ids, weights)
    wsum = float(w.sum())
    if wsum == 0.0:
        return 0.0, np.zeros_like(logits), 0.0
    loss = float((nll * w).sum() / wsum)

    targets = np.asarray(ids)[:, 1:]
    probs = _softmax_lastaxis(logits[:, :-1, :])
    onehot_sub = np.zeros_like(probs)
    np.put_along_axis(onehot_sub, targets[..., None], 1.0, axis=-1)
    dshift = (probs - onehot_sub) * (w / wsum)[..., None].astype(logits.dtype)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = dshift
    return loss, dlogits, wsum


# --- backward ----------------------------------------------------------------


def _backward(params, cfg: ModelConfig, cache, dlogits):
    B, T = cache["ids"].shape
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    nrep = H // KV
    scale = 1.0 / np.sqrt(hd)
    cos, sin = cache["cos"], cache["sin"]
    C = cfg.hidden

    grads = {k: np.zeros_like(v) for k, v in params.items()}

    nf_flat = cache["normed_f"].reshape(B * T, C)
    dl_flat = dlogits.reshape(B * T, -1)
    if cfg.tie_embeddings:
        grads["tok_emb"] += (dl_flat.T @ nf_flat)
        dnormed_f = dlogits @ params["tok_emb"]
    else:
        grads["lm_head"] += nf_flat.T @ dl_flat
        dnormed_f = dlogits @ params["lm_head"].T

    dx, dgf = _rmsnorm_back(dnormed_f, params["final_norm"], cache["saved_f"])
    grads["final_norm"] += dgf

    for i in reversed(range(cfg.n_layers)):
        pre = f"layers.{i}."
        c = cache["layers"][i]

        # feed-forward
        dffn_out = dx
        hmid_flat = c["hmid"].reshape(B * T, -1)
        dffn_flat = dffn_out.reshape(B * T, C)
        grads[pre + "w_down"] += hmid_flat.T @ dffn_flat
        dh = dffn_out @ params[pre + "w_down"].T
        dact = dh * c["z_up"]
        dz_up = dh * c["act"]
        sg = c["sg"]
        # d silu(z)/dz = sg*(1 + z*(1-sg)), built in place in a scratch buffer
        dz_gate = 1.0 - sg
        dz_gate *= c["z_gate"]
        dz_gate += 1.0
        dz_gate *= sg
        dz_gate *= dact
        normed2 = c["saved2"][0] * params[pre + "ffn_norm"]
        n2_flat = normed2.reshape(B * T, C)
        grads[pre + "w_gate"] += n2_flat.T @ dz_gate.reshape(B * T, -1)
        grads[pre + "w_up"] += n2_flat.T @ dz_up.reshape(B * T, -1)
        dnormed2 = dz_gate @ params[pre + "w_gate"].T + dz_up @ params[pre + "w_up"].T
        dx_norm2, dg2 = _rmsnorm_back(dnormed2, params[pre + "ffn_norm"], c["saved2"])
        grads[pre + "ffn_norm"] += dg2
        dx = dx + dx_norm2

        # attention
        dattn_out = dx
        ctx_flat = c["ctx"].reshape(B * T, C)
        da_flat = dattn_out.reshape(B * T, C)
        grads[pre + "wo"] += ctx_flat.T @ da_flat
        dctx = dattn_out @ params[pre + "wo"].T
        dctx5 = dctx.reshape(B, T, H, hd).transpose(0, 2, 1, 3).reshape(B, KV, nrep, T, hd)

        probs, q, k, v = c["probs"], c["q"], c["k"], c["v"]
        dP = dctx5 @ v[:, :, None].swapaxes(-1, -2)
        dv = (probs.swapaxes(-1, -2) @ dctx5).sum(axis=2)
        # softmax backward dS = P*(dP - sum(dP*P)), fused into the dP and
        # probs buffers; the cache is consumed (backward is single-shot)
        dP *= probs
        s = dP.sum(axis=-1, keepdims=True)
        probs *= s
        dP -= probs
        dS = dP
        q5 = q.reshape(B, KV, nrep, T, hd)
        dq5 = dS @ k[:, :, None]
        dq5 *= scale
        dk = (dS.swapaxes(-1, -2) @ q5).sum(axis=2)
        dk *= scale

        dq = _rope_back(dq5.reshape(B, H, T, hd), cos, sin)
        dk = _rope_back(dk, cos, sin)
        dq_mat = dq.transpose(0, 2, 1, 3).reshape(B * T, C)
        dk_mat = dk.transpose(0, 2, 1, 3).reshape(B * T, KV * hd)
        dv_mat = dv.transpose(0, 2, 1, 3).reshape(B * T, KV * hd)

        normed1 = c["saved1"][0] * params[pre + "attn_norm"]
        n1_flat = normed1.reshape(B * T, C)
        grads[pre + "wq"] += n1_flat.T @ dq_mat
        grads[pre + "wk"] += n1_flat.T @ dk_mat
        grads[pre + "wv"] += n1_flat.T @ dv_mat
        dnormed1 = (
            dq_mat @ params[pre + "wq"].T
            + dk_mat @ params[pre + "wk"].T
            + dv_mat @ params[pre + "wv"].T
        ).reshape(B, T, C)
        dx_norm1, dg1 = _rmsnorm_back(dnormed1, params[pre + "attn_norm"], c["saved1"])
        grads[pre + "attn_norm"] += dg1
        dx = dx + dx_norm1

    flat_ids = cache["ids"].reshape(-1)
    dx_flat = dx.reshape(B * T, C)
    if cfg.vocab_size <= 4096:
        # scatter-add via one-hot GEMM; much faster than np.add.at for
        # small vocabularies, and the one-hot stays modest in size
        onehot = np.zeros((flat_ids.size, cfg.vocab_size), dtype=dx.dtype)
        onehot[np.arange(flat_ids.size), flat_ids] = 1.0
        grads["tok_emb"] += onehot.T @ dx_flat
    else:
        np.add.at(grads["tok_emb"], flat_ids, dx_flat)
    return grads


def loss_and_grads(params, cfg: ModelConfig, ids, weights):
    """Masked next-token cross-entropy and parameter gradients.

    weights: (B, T) array, nonzero where the token counts as content.
    Returns (loss, grads, aux) with aux carrying the content-token count.
    """
    logits, cache = forward(params, cfg, ids, want_cache=True)
    loss, dlogits, wsum = _ce_loss_and_dlogits(logits, ids, weights)
    if wsum == 0.0:
        return loss, {k: np.zeros_like(v) for k, v in params.items()}, {"weight_sum": 0.0}
    grads = _backward(params, cfg, cache, dlogits)
    return loss, grads, {"weight_sum": wsum}


# --- sampling ----------------------------------------------------------------


def _forward_step(params, cfg: ModelConfig, ids_chunk, state, offset):
    """Incremental forward over a chunk, extending the per-layer KV cache."""
    dt = _np_dtype(cfg)
    H, KV, hd = cfg.n_heads, cfg.n_kv_heads, cfg.head_dim
    nrep = H // KV
    scale = 1.0 / np.sqrt(hd)
    t = len(ids_chunk)

    cos, sin = _rope_tables(np.arange(offset, offset + t), hd, cfg.rope_base, dt)
    x = params["tok_emb"][np.asarray(ids_chunk)]
    for i in range(cfg.n_layers):
        pre = f"layers.{i}."
        normed1, _ = _rmsnorm(x, params[pre + "attn_norm"], cfg.norm_eps)
        q = (normed1 @ params[pre + "wq"]).reshape(t, H, hd).transpose(1, 0, 2)
        k_new = (normed1 @ params[pre + "wk"]).reshape(t, KV, hd).transpose(1, 0, 2)
        v_new = (normed1 @ params[pre + "wv"]).reshape(t, KV, hd).transpose(1, 0, 2)
        q = _rope_apply(q, cos, sin)
        k_new = _rope_apply(k_new, cos, sin)
        k = np.concatenate([state[i]["k"], k_new], axis=1)
        v = np.concatenate([state[i]["v"], v_new], axis=1)
        state[i]["k"], state[i]["v"] = k, v

        S = k.shape[1]
        q5 = q.reshape(KV, nrep, t, hd)
        scores = q5 @ k[:, None].swapaxes(-1, -2) * scale
        cols = np.arange(S)
        rows = offset + np.arange(t)
        scores = scores + np.where(cols[None, :] > rows[:, None], _NEG_INF, 0.0).astype(dt)
        probs = _softmax_lastaxis(scores)
        ctx = (probs @ v[:, None]).reshape(H, t, hd).transpose(1, 0, 2).reshape(t, cfg.hidden)
        x = x + ctx @ params[pre + "wo"]

        normed2, _ = _rmsnorm(x, params[pre + "ffn_norm"], cfg.norm_eps)
        act, _ = _silu(normed2 @ params[pre + "w_gate"])
        x = x + (act * (normed2 @ params[pre + "w_up"])) @ params[pre + "w_down"]

    normed_f, _ = _rmsnorm(x, params["final_norm"], cfg.norm_eps)
    return normed_f @ _head_matrix(params, cfg)


def _sample_token(logits, gen: GenConfig, rng):
    if gen.temperature == 0:
        return int(np.argmax(logits))
    z = logits.astype(np.float64) / gen.temperature
    z -= z.max()
    p = np.exp(z)
    p /= p.sum()
    if gen.top_p < 1.0:
        order = np.argsort(-p, kind="stable")
        csum = np.cumsum(p[order])
        keep = order[: int(np.searchsorted(csum, gen.top_p) + 1)]
        p = p[keep] / p[keep].sum()
        return int(keep[rng.choice(len(keep), p=p)])
    return int(rng.choice(len(p), p=p))


def generate(params, cfg: ModelConfig, prompt_ids, gen: GenConfig, rng=None):
    """Sample a continuation for one prompt. Returns new token ids only.

    Greedy when temperature == 0 (rng unused there, so greedy output is
    seed-invariant). Prompts longer than the usable context are trimmed
    from the left.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    ids = list(prompt_ids)
    limit = cfg.block_size - gen.max_new_tokens
    if limit < 1:
        raise ValueError("max_new_tokens leaves no room for a prompt")
    if len(ids) > limit:
        ids = ids[-limit:]

    KV, hd = cfg.n_kv_heads, cfg.head_dim
    dt = _np_dtype(cfg)
    state = [
        {"k": np.zeros((KV, 0, hd), dt), "v": np.zeros((KV, 0, hd), dt)}
        for _ in range(cfg.n_layers)
    ]
    logits = _forward_step(params, cfg, ids, state, 0)[-1]
    out: list[int] = []
    stop = set(gen.stop_ids)
    while len(out) < gen.max_new_tokens:
        nxt = _sample_token(logits, gen, rng)
        out.append(nxt)
        if nxt in stop or len(ids) + len(out) >= cfg.block_size:
            break
        logits = _forward_step(params, cfg, [nxt], state, len(ids) + len(out) - 1)[-1]
    return out
