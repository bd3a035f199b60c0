"""Masked perplexity, bootstrap CIs, and the experiment matrices.

Perplexity here always means exp of the token-weighted mean NLL over
content tokens only: metadata prefix lines (and the BOS that precedes
them) are conditioning, not scored text. Documents are scored
independently, never packed together, so a document's score cannot leak
context from its neighbors.

Token weighting makes corpus perplexity invariant to how the test set is
partitioned; per-document NLLs are kept so document-weighted summaries
can be derived later without re-running models.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CONTINENTS, Document
from .model import ModelConfig
from .model.transformer import forward, masked_nll
from .textformat import MetadataVariant, render_document
from .tokenizer import PAD_ID, TokenizedDoc, encode_with_span


@dataclass
class PerplexityResult:
    per_doc: list  # (doc_id, mean content-token NLL, content token count)
    ppl: float
    ci_low: float
    ci_high: float
    variant: str
    model_id: str = ""
    test_id: str = ""

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "test_id": self.test_id,
            "variant": self.variant,
            "ppl": self.ppl,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "n_docs": len(self.per_doc),
            "content_tokens": int(sum(c for _, _, c in self.per_doc)),
        }


def _weighted_ppl(nll_means, counts) -> float:
    nll_means = np.asarray(nll_means, dtype=np.float64)
    counts = np.asarray(counts, dtype=np.float64)
    return float(np.exp((nll_means * counts).sum() / counts.sum()))


def bootstrap_ci(per_doc, resamples: int = 1000, level: float = 0.95, seed: int = 0):
    """Percentile bootstrap over documents of the token-weighted ppl.

    per_doc: iterable of (doc_id, mean_nll, count). Resampling is by
    document: CI width reflects document-level variation, not token noise.
    """
    rows = list(per_doc)
    if len(rows) < 2:
        raise ValueError("bootstrap_ci needs at least 2 documents")
    if resamples < 1:
        raise ValueError("resamples must be >= 1")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    nll = np.array([r[1] for r in rows], dtype=np.float64)
    cnt = np.array([r[2] for r in rows], dtype=np.float64)
    rng = np.random.default_rng([seed, 0xB007])
    n = len(rows)
    idx = rng.integers(0, n, size=(resamples, n))
    tok = cnt[idx]
    stats = np.exp((nll[idx] * tok).sum(axis=1) / tok.sum(axis=1))
    alpha = (1.0 - level) / 2.0
    low, high = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(low), float(high)


def pool_per_doc(results):
    """Average per-document NLLs across replicate runs (training seeds).

    Comparisons aggregated over seeds keep the document as the resampling
    unit: each document's mean content NLL is averaged over the replicates
    and the pooled rows go back through bootstrap_ci, so the CI reflects
    document variation of the seed-averaged model rather than run noise.
    All results must score the same documents under the same variant.
    """
    if not results:
        raise ValueError("pool_per_doc: no results")
    order = [doc_id for doc_id, _, _ in results[0].per_doc]
    counts = {doc_id: cnt for doc_id, _, cnt in results[0].per_doc}
    sums = {doc_id: 0.0 for doc_id in order}
    for res in results:
        if len(res.per_doc) != len(order):
            raise ValueError("pool_per_doc: document sets differ")
        for doc_id, nll, cnt in res.per_doc:
            if doc_id not in counts or counts[doc_id] != cnt:
                raise ValueError(f"pool_per_doc: mismatched document {doc_id}")
            sums[doc_id] += nll
    k = len(results)
    return [(doc_id, sums[doc_id] / k, counts[doc_id]) for doc_id in order]


# --- scoring -----------------------------------------------------------------


def _window_spans(length: int, block: int):
    """(offset, score_from) pairs tiling a long sequence.

    The first window scores every predictable position; later windows
    slide by block//2 and score only their second half, so each target
    position is scored exactly once with at least block//2 context.
    """
    if length <= block:
        return [(0, 1)]
    stride = block // 2
    spans = [(0, 1)]
    scored_to = block  # targets [1, block) scored
    while scored_to < length:
        off = min(scored_to - stride, length - block)
        spans.append((off, scored_to))
        scored_to = off + block
    return spans


def doc_nll(params, cfg: ModelConfig, tdoc: TokenizedDoc):
    """(nll_sum, content_count) for one document, windowed if needed."""
    ids = tdoc.ids
    weights = np.zeros(len(ids), dtype=np.float64)
    weights[tdoc.metadata_token_len:] = 1.0
    total, count = 0.0, 0.0
    for off, score_from in _window_spans(len(ids), cfg.block_size):
        chunk = ids[off:off + cfg.block_size][None, :]
        logits, _ = forward(params, cfg, chunk)
        nll, w = masked_nll(logits, chunk, weights[None, off:off + cfg.block_size])
        # masked_nll targets are positions off+1 .. off+len(chunk)-1
        first_target = off + 1
        keep_from = max(score_from - first_target, 0)
        total += float((nll[0, keep_from:] * w[0, keep_from:]).sum())
        count += float(w[0, keep_from:].sum())
    return total, count


def _doc_nlls_batched(params, cfg: ModelConfig, tdocs, batch_docs: int = 16):
    """Per-document (nll_sum, count); single-window docs are batched padded."""
    out = [None] * len(tdocs)
    short = [i for i, d in enumerate(tdocs) if d.total_len <= cfg.block_size]
    long = [i for i, d in enumerate(tdocs) if d.total_len > cfg.block_size]

    short.sort(key=lambda i: tdocs[i].total_len)
    for start in range(0, len(short), batch_docs):
        group = short[start:start + batch_docs]
        width = max(tdocs[i].total_len for i in group)
        ids = np.full((len(group), width), PAD_ID, dtype=np.int32)
        w = np.zeros((len(group), width), dtype=np.float64)
        for row, i in enumerate(group):
            d = tdocs[i]
            ids[row, : d.total_len] = d.ids
            w[row, d.metadata_token_len : d.total_len] = 1.0
        logits, _ = forward(params, cfg, ids)
        nll, wt = masked_nll(logits, ids, w)
        sums = (nll * wt).sum(axis=1)
        counts = wt.sum(axis=1)
        for row, i in enumerate(group):
            out[i] = (float(sums[row]), float(counts[row]))

    for i in long:
        out[i] = doc_nll(params, cfg, tdocs[i])
    return out


def perplexity(params, cfg: ModelConfig, docs: list[Document],
               variant: MetadataVariant, *, model_id: str = "", test_id: str = "",
               resamples: int = 1000, level: float = 0.95, seed: int = 0,
               batch_docs: int = 16) -> PerplexityResult:
    """Masked corpus perplexity of a document list under one variant."""
    if not docs:
        raise ValueError("perplexity: empty test set")
    variant = MetadataVariant.parse(variant) if isinstance(variant, str) else variant
    tdocs = [encode_with_span(render_document(d, variant), doc_id=d.id) for d in docs]
    raw = _doc_nlls_batched(params, cfg, tdocs, batch_docs=batch_docs)
    per_doc = []
    for d, (total, count) in zip(docs, raw):
        if count == 0:
            raise ValueError(f"document {d.id} has no content tokens")
        per_doc.append((d.id, total / count, int(count)))
    ppl = _weighted_ppl([r[1] for r in per_doc], [r[2] for r in per_doc])
    if len(per_doc) >= 2 and resamples > 0:
        low, high = bootstrap_ci(per_doc, resamples=resamples, level=level, seed=seed)
    else:
        # resamples=0 skips the bootstrap (validation loops do not need a CI)
        low = high = ppl
    return PerplexityResult(per_doc=per_doc, ppl=ppl, ci_low=low, ci_high=high,
                            variant=variant.value, model_id=model_id, test_id=test_id)


# --- experiment matrices ------------------------------------------------------


@dataclass
class CrossMatrix:
    """Train-region x test-region grid of PerplexityResults."""

    regions: tuple
    cells: dict  # (train_region, test_region) -> PerplexityResult

    def grid(self) -> np.ndarray:
        return np.array(
            [[self.cells[(r, c)].ppl for c in self.regions] for r in self.regions]
        )

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["train\\test", *self.regions])
            for r in self.regions:
                wr.writerow([r, *[f"{self.cells[(r, c)].ppl:.6f}" for c in self.regions]])


def cross_matrix(models: dict, tests: dict, variant, cfg: ModelConfig,
                 *, resamples: int = 1000, seed: int = 0,
                 model_ids: dict | None = None) -> CrossMatrix:
    """Evaluate each region's model on each region's test set (16 cells)."""
    missing = [r for r in CONTINENTS if r not in models]
    if missing:
        raise ValueError(f"missing models for regions: {missing}")
    missing = [r for r in CONTINENTS if r not in tests]
    if missing:
        raise ValueError(f"missing test sets for regions: {missing}")
    cells = {}
    for train_region in CONTINENTS:
        for test_region in CONTINENTS:
            cells[(train_region, test_region)] = perplexity(
                models[train_region], cfg, tests[test_region], variant,
                model_id=(model_ids or {}).get(train_region, train_region),
                test_id=f"test_{test_region}",
                resamples=resamples, seed=seed,
            )
    return CrossMatrix(regions=tuple(CONTINENTS), cells=cells)


def _check_aligned(a: CrossMatrix, b: CrossMatrix) -> None:
    if a.regions != b.regions:
        raise ValueError("cross matrices cover different regions")


def delta_maps(with_meta: tuple, without_meta: tuple) -> dict:
    """Difference heatmaps between metadata-trained and plain-trained models.

    with_meta / without_meta are (plain_trained, meta_trained) CrossMatrix
    pairs evaluated with and without metadata at inference respectively.
    delta1 > 0 means metadata training helps when metadata is shown at
    inference; delta2 isolates the no-inference-metadata comparison.
    """
    plain_m, meta_m = with_meta
    plain_n, meta_n = without_meta
    _check_aligned(plain_m, meta_m)
    _check_aligned(plain_n, meta_n)
    return {
        "delta1": plain_m.grid() - meta_m.grid(),
        "delta2": plain_n.grid() - meta_n.grid(),
    }


def asymmetry(m: CrossMatrix) -> np.ndarray:
    """A[i, j] = ppl[i, j] - ppl[j, i]; antisymmetric with zero diagonal."""
    g = m.grid()
    return g - g.T


def leave_one_out_deltas(loo_models: dict, full_model, tests: dict,
                         variant, cfg: ModelConfig, *, resamples: int = 1000,
                         seed: int = 0) -> list[dict]:
    """Perplexity increase from dropping one region's training data.

    loo_models: excluded region -> params. tests must hold each excluded
    region's test set plus a "global" entry. Returns one record per
    exclusion with deltas on the held-out and global test sets.
    """
    records = []
    for excluded, params in sorted(loo_models.items()):
        if excluded not in CONTINENTS:
            raise ValueError(f"unknown excluded region: {excluded}")
        if excluded not in tests or "global" not in tests:
            raise ValueError(f"tests must include {excluded} and global")
        row = {"excluded": excluded}
        for test_id in (excluded, "global"):
            loo = perplexity(params, cfg, tests[test_id], variant,
                             model_id=f"loo_{excluded}", test_id=str(test_id),
                             resamples=resamples, seed=seed)
            full = perplexity(full_model, cfg, tests[test_id], variant,
                              model_id="global", test_id=str(test_id),
                              resamples=resamples, seed=seed)
            key = "heldout" if test_id == excluded else "global"
            row[f"delta_{key}"] = loo.ppl - full.ppl
            row[f"ppl_loo_{key}"] = loo.ppl
            row[f"ppl_full_{key}"] = full.ppl
            row[f"ci_loo_{key}"] = (loo.ci_low, loo.ci_high)
            row[f"ci_full_{key}"] = (full.ci_low, full.ci_high)
        records.append(row)
    return records


# --- results store ------------------------------------------------------------


def save_result(res: PerplexityResult, out_dir) -> Path:
    """Write {model}_{test}_{variant}.json plus a per-document CSV."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{res.model_id or 'model'}_{res.test_id or 'test'}_{res.variant}"
    csv_path = out_dir / f"{stem}.per_doc.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["doc_id", "mean_nll", "content_tokens"])
        for doc_id, nll, cnt in res.per_doc:
            wr.writerow([doc_id, f"{nll:.10f}", cnt])
    blob = res.to_dict()
    blob["per_doc_table"] = csv_path.name
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(blob, indent=2) + "\n")
    return json_path
