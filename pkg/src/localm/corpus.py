"""Corpus ingestion, geography validation, token-budget mixes, and splits.

Documents arrive as JSONL with keys `id, url, country, continent, year,
title, content`. Geography is validated against the fixed 17-country,
4-continent mapping; anything outside it is rejected and counted.

Training mixes resolve a (regions, variant, token_budget, seed) recipe into
a deterministic document stream: documents are formatted under the mix
variant, tokenized, shuffled per epoch with the mix seed, and truncated at
the last whole document that fits the budget. Documents are never split to
hit the budget, so every mix under-runs it by less than one document.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .textformat import MetadataVariant, render_document
from .tokenizer import Block, TokenizedDoc, encode_with_span, pack_stream

CONTINENTS = ("Africa", "America", "Asia", "Europe")

# Country -> continent coverage used throughout; lookups outside this table
# are rejected rather than guessed.
COUNTRY_TO_CONTINENT = {
    "United States": "America",
    "Canada": "America",
    "Jamaica": "America",
    "India": "Asia",
    "Pakistan": "Asia",
    "Bangladesh": "Asia",
    "Sri Lanka": "Asia",
    "Hong Kong": "Asia",
    "Malaysia": "Asia",
    "Philippines": "Asia",
    "Nigeria": "Africa",
    "South Africa": "Africa",
    "Kenya": "Africa",
    "Ghana": "Africa",
    "Tanzania": "Africa",
    "United Kingdom": "Europe",
    "Ireland": "Europe",
}

CONTINENT_TO_COUNTRIES = {
    cont: tuple(c for c, k in COUNTRY_TO_CONTINENT.items() if k == cont)
    for cont in CONTINENTS
}


@dataclass(frozen=True)
class Document:
    """One news-like article with verified geographic metadata."""

    id: str
    url: str
    country: str
    continent: str
    year: int
    title: str
    content: str


REQUIRED_FIELDS = ("id", "url", "country", "continent", "year", "title", "content")


def validate_record(rec: dict) -> Document:
    """Build a Document from a raw record, raising ValueError with a reason tag."""
    for name in REQUIRED_FIELDS:
        if name not in rec or rec[name] is None:
            raise ValueError(f"missing field: {name}")
    country = str(rec["country"])
    if country not in COUNTRY_TO_CONTINENT:
        raise ValueError(f"unknown country: {country}")
    continent = str(rec["continent"])
    if COUNTRY_TO_CONTINENT[country] != continent:
        raise ValueError(
            f"continent mismatch: {country} maps to {COUNTRY_TO_CONTINENT[country]}, got {continent}"
        )
    content = str(rec["content"])
    if not content.strip():
        raise ValueError("empty content")
    url = str(rec["url"])
    if not url:
        raise ValueError("missing field: url")
    return Document(
        id=str(rec["id"]),
        url=url,
        country=country,
        continent=continent,
        year=int(rec["year"]),
        title=str(rec["title"]),
        content=content,
    )


@dataclass
class LoadResult:
    docs: list[Document]
    rejected: dict[str, int]
    total_lines: int

    def summary(self) -> str:
        parts = [f"accepted {len(self.docs)}/{self.total_lines} lines"]
        for reason, count in sorted(self.rejected.items()):
            parts.append(f"{reason}: {count}")
        return "; ".join(parts)


def load_corpus(path: str | Path) -> LoadResult:
    """Load a JSONL corpus, keeping valid documents and counting rejects by reason."""
    docs: list[Document] = []
    rejected: dict[str, int] = {}
    total = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            total += 1
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("malformed line")
                docs.append(validate_record(rec))
            except json.JSONDecodeError:
                rejected["malformed line"] = rejected.get("malformed line", 0) + 1
            except (ValueError, TypeError) as exc:
                reason = str(exc).split(":")[0] or "invalid"
                rejected[reason] = rejected.get(reason, 0) + 1
    return LoadResult(docs=docs, rejected=rejected, total_lines=total)


def write_corpus(docs: list[Document], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in docs:
            fh.write(json.dumps(d.__dict__, ensure_ascii=False) + "\n")


# --- token-budget mixes -----------------------------------------------------


@dataclass(frozen=True)
class TrainMix:
    """Reproducible recipe for a packed token stream.

    token_budget counts all emitted tokens, metadata included. The field
    accepts experiment-scale values (tens of billions); resolution stays
    lazy so construction cost does not depend on the budget.
    """

    regions: frozenset[str]
    variant: MetadataVariant
    token_budget: int
    seed: int
    packing: int = 256

    def __post_init__(self):
        if not self.regions:
            raise ValueError("mix regions must be non-empty")
        unknown = self.regions - set(CONTINENTS)
        if unknown:
            raise ValueError(f"unknown regions in mix: {sorted(unknown)}")
        if self.token_budget <= 0:
            raise ValueError("token_budget must be positive")
        if self.packing < 2:
            raise ValueError("packing sequence length must be >= 2")


class TokenStream:
    """A budget-resolved, seeded document stream.

    One pass (`iter_docs`) yields the canonical budget fill: epoch 0 is the
    pool shuffled with the mix seed, later epochs reshuffle with seed+epoch,
    and emission stops at the last whole document within budget. Training
    can wrap past the budget (`iter_docs(wrap=w)` reshuffles with a
    wrap-derived seed), which replays the same budget rule on fresh orders.

    Pure and deterministic given (pool, mix); safe to share across threads.
    Each iterator is single-consumer.
    """

    def __init__(self, pool: list[Document], mix: TrainMix):
        self.mix = mix
        self.pool = list(pool)
        if not self.pool:
            raise ValueError("empty document pool for mix")
        self._tokenized = {
            d.id: encode_with_span(render_document(d, mix.variant), doc_id=d.id)
            for d in self.pool
        }
        self._lengths = np.array([self._tokenized[d.id].total_len for d in self.pool])
        self.tokens_per_epoch = int(self._lengths.sum())
        self.max_doc_len = int(self._lengths.max())
        self._resolve_budget()

    def _epoch_order(self, epoch: int, wrap: int = 0) -> np.ndarray:
        rng = np.random.default_rng([self.mix.seed, wrap, epoch])
        order = np.arange(len(self.pool))
        rng.shuffle(order)
        return order

    def _resolve_budget(self) -> None:
        budget = self.mix.token_budget
        self.full_epochs = budget // self.tokens_per_epoch
        remaining = budget - self.full_epochs * self.tokens_per_epoch
        # Walk the first partial epoch to the last whole document that fits.
        order = self._epoch_order(self.full_epochs)
        taken = 0
        cum = 0
        for idx in order:
            n = int(self._lengths[idx])
            if cum + n > remaining:
                break
            cum += n
            taken += 1
        self.partial_docs = taken
        self.partial_tokens = cum
        self.emitted_tokens = self.full_epochs * self.tokens_per_epoch + cum
        self.docs_emitted = self.full_epochs * len(self.pool) + taken
        if self.docs_emitted == 0:
            warnings.warn(
                f"token budget {budget} is smaller than every document in the pool; "
                "mix stream is empty",
                stacklevel=3,
            )

    def iter_docs(self, wrap: int = 0) -> Iterator[TokenizedDoc]:
        """One budget-constrained pass over the pool (epoch-reshuffled)."""
        for epoch in range(self.full_epochs):
            for idx in self._epoch_order(epoch, wrap):
                yield self._tokenized[self.pool[idx].id]
        order = self._epoch_order(self.full_epochs, wrap)
        if wrap == 0:
            take = self.partial_docs
        else:
            # Re-derive the truncation point for this wrap's order.
            remaining = self.mix.token_budget - self.full_epochs * self.tokens_per_epoch
            take, cum = 0, 0
            for idx in order:
                n = int(self._lengths[idx])
                if cum + n > remaining:
                    break
                cum += n
                take += 1
        for idx in order[:take]:
            yield self._tokenized[self.pool[idx].id]

    def iter_docs_forever(self) -> Iterator[TokenizedDoc]:
        wrap = 0
        while True:
            yield from self.iter_docs(wrap)
            wrap += 1

    def blocks(self) -> Iterator[Block]:
        """Canonical single-pass packed blocks (final partial block padded)."""
        return pack_stream(self.iter_docs(), self.mix.packing)

    def blocks_forever(self) -> Iterator[Block]:
        """Endless packed blocks, wrapping the stream with reshuffled epochs."""
        return pack_stream(self.iter_docs_forever(), self.mix.packing)

    def region_doc_counts(self) -> dict[str, int]:
        counts = {r: 0 for r in sorted(self.mix.regions)}
        for d in self.pool:
            counts[d.continent] += 1
        return counts

    def manifest(self) -> dict:
        return {
            "regions": sorted(self.mix.regions),
            "variant": self.mix.variant.value,
            "token_budget": self.mix.token_budget,
            "seed": self.mix.seed,
            "packing": self.mix.packing,
            "pool_docs": len(self.pool),
            "region_doc_counts": self.region_doc_counts(),
            "tokens_per_epoch": self.tokens_per_epoch,
            "full_epochs": self.full_epochs,
            "docs_emitted": self.docs_emitted,
            "emitted_tokens": self.emitted_tokens,
            "max_doc_len": self.max_doc_len,
        }


def build_local_mix(docs: list[Document], region: str, mix: TrainMix) -> TokenStream:
    """Budgeted stream over a single continent's documents."""
    if mix.regions != frozenset({region}):
        raise ValueError(f"mix regions {sorted(mix.regions)} do not match local region {region}")
    pool = [d for d in docs if d.continent == region]
    if not pool:
        raise ValueError(f"no documents for region {region}")
    return TokenStream(pool, mix)


def build_global_mix(docs: list[Document], mix: TrainMix) -> TokenStream:
    """Budgeted stream interleaving all four continents via one global shuffle."""
    if mix.regions != frozenset(CONTINENTS):
        raise ValueError("global mix must cover all four continents")
    pool = [d for d in docs if d.continent in mix.regions]
    present = {d.continent for d in pool}
    missing = set(CONTINENTS) - present
    if missing:
        raise ValueError(
            f"region(s) {sorted(missing)} absent from corpus; use build_leave_one_out instead"
        )
    return TokenStream(pool, mix)


def build_leave_one_out(docs: list[Document], excluded: str, mix: TrainMix) -> TokenStream:
    """Global-mix procedure restricted to three continents; budget unchanged."""
    if excluded not in CONTINENTS:
        raise ValueError(f"unknown continent to exclude: {excluded}")
    expected = frozenset(CONTINENTS) - {excluded}
    if mix.regions != expected:
        raise ValueError(f"leave-one-out mix regions must be {sorted(expected)}")
    pool = [d for d in docs if d.continent in expected]
    present = {d.continent for d in pool}
    missing = expected - present
    if missing:
        raise ValueError(f"region(s) {sorted(missing)} absent from corpus")
    return TokenStream(pool, mix)


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    test_docs_per_region: int = 1000
    val_docs: int = 1000
    global_test_per_region: int = 250


@dataclass
class Splits:
    train: list[Document]
    val: list[Document]
    test_by_region: dict[str, list[Document]]
    global_test: list[Document]

    def id_sets(self) -> dict[str, set[str]]:
        out = {
            "train": {d.id for d in self.train},
            "val": {d.id for d in self.val},
        }
        for region, docs in self.test_by_region.items():
            out[f"test_{region}"] = {d.id for d in docs}
        out["global_test"] = {d.id for d in self.global_test}
        return out


def carve_splits(docs: list[Document], spec: SplitSpec, seed: int) -> Splits:
    """Carve disjoint train/val/test splits with per-region test sets.

    Per-region test sets are seeded samples of spec.test_docs_per_region;
    the global test draws spec.global_test_per_region uniformly from each
    region's test set; validation is drawn globally from the remainder.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    by_region: dict[str, list[Document]] = {r: [] for r in CONTINENTS}
    for d in docs:
        by_region[d.continent].append(d)

    test_by_region: dict[str, list[Document]] = {}
    remainder: list[Document] = []
    for region in CONTINENTS:
        pool = by_region[region]
        if len(pool) < spec.test_docs_per_region:
            raise ValueError(
                f"region {region} has {len(pool)} documents, "
                f"needs >= {spec.test_docs_per_region} for its test split"
            )
        order = rng.permutation(len(pool))
        test_by_region[region] = [pool[i] for i in order[: spec.test_docs_per_region]]
        remainder.extend(pool[i] for i in order[spec.test_docs_per_region :])

    if len(remainder) < spec.val_docs:
        raise ValueError(
            f"{len(remainder)} documents left after test carving, needs >= {spec.val_docs} for validation"
        )
    order = rng.permutation(len(remainder))
    val = [remainder[i] for i in order[: spec.val_docs]]
    train = [remainder[i] for i in order[spec.val_docs :]]

    global_test: list[Document] = []
    for region in CONTINENTS:
        pool = test_by_region[region]
        if len(pool) < spec.global_test_per_region:
            raise ValueError(
                f"region {region} test set smaller than global_test_per_region"
            )
        pick = rng.permutation(len(pool))[: spec.global_test_per_region]
        global_test.extend(pool[i] for i in pick)

    return Splits(train=train, val=val, test_by_region=test_by_region, global_test=global_test)
