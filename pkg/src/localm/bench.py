"""Localized MCQ benchmark: loading, SFT data assembly, chat-style scoring.

The benchmark file is a JSON array of MCQ objects (question, 4 options,
correct_answer, 3 distractors, country) plus a required continent key.
Evaluation renders one chat prompt per (item, base URL) pair, samples a
completion, extracts an answer letter, and aggregates per-continent and
micro accuracies. Because weaker models skip questions, comparisons are
made on the answered-by-all intersection; see ``answered_by_all``.

Answer extraction is frozen (and golden-tested in tests/):
  1. first standalone A-D letter on the first generated line,
     case-insensitive, optionally followed by ':', '.', or ')';
  2. else a unique exact option-text substring match anywhere in the
     generation;
  3. else the item counts as unanswered.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
import warnings
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .corpus import CONTINENTS, COUNTRY_TO_CONTINENT
from .model import GenConfig, ModelConfig, generate
from .textformat import render_eval_prompt, render_sft_example
from .tokenizer import BOS_ID, EOS_ID, decode, encode_text

# Frozen 10-entry base-URL pool used for both instruction tuning and MCQ
# evaluation repeats. Custom pools are allowed but must also have 10 entries.
URL_POOL = (
    "www.factquizmaster.com",
    "www.globalfactcheck.org",
    "www.worldknowledgehub.com",
    "www.civicspedia.org",
    "www.internationalfacts.net",
    "www.currentaffairsdesk.com",
    "www.newsinsightarchive.com",
    "www.globalquizvault.com",
    "www.factualdigest.org",
    "www.publicknowledgebase.net",
)

POOL_SIZE = 10

# Shape of the full paper-style benchmark file.
PAPER_TOTAL = 800
PAPER_PER_CONTINENT = 200

_REQUIRED_KEYS = ("question", "options", "correct_answer", "distractors", "country", "continent")


@dataclass(frozen=True)
class MCQItem:
    """One multiple-choice question; options keep their stored order."""

    item_id: int
    question: str
    options: tuple[str, ...]
    correct_answer: str
    distractors: tuple[str, ...]
    country: str
    continent: str

    @property
    def correct_letter(self) -> str:
        return "ABCD"[self.options.index(self.correct_answer)]


def validate_mcq_record(rec, region_map) -> list[str]:
    """Return schema/invariant violations for one raw benchmark record."""
    errs: list[str] = []
    if not isinstance(rec, dict):
        return ["record is not a JSON object"]
    for key in _REQUIRED_KEYS:
        if key not in rec:
            errs.append(f"missing key {key!r}")
    if errs:
        return errs
    for key in ("question", "correct_answer", "country", "continent"):
        if not isinstance(rec[key], str) or not rec[key]:
            errs.append(f"{key} must be a non-empty string")
    options = rec["options"]
    distractors = rec["distractors"]
    if not (isinstance(options, list) and len(options) == 4):
        errs.append("options must be a list of exactly 4 strings")
    elif not all(isinstance(o, str) and o for o in options):
        errs.append("options must be non-empty strings")
    if not (isinstance(distractors, list) and len(distractors) == 3):
        errs.append("distractors must be a list of exactly 3 strings")
    if errs:
        return errs
    if rec["correct_answer"] not in options:
        errs.append("correct_answer not among options")
        return errs
    # distractors == options \ {correct} as multisets
    rest = list(options)
    rest.remove(rec["correct_answer"])
    if sorted(rest) != sorted(distractors):
        errs.append("distractors do not equal options minus correct_answer")
    expected = region_map.get(rec["country"])
    if expected is None:
        errs.append(f"unknown country {rec['country']!r}")
    elif expected != rec["continent"]:
        errs.append(
            f"continent {rec['continent']!r} does not match {expected!r} for {rec['country']!r}"
        )
    return errs


@dataclass
class BenchLoadResult:
    """Outcome of loading a benchmark file: kept items plus per-item errors."""

    items: list[MCQItem]
    errors: list[tuple[int, str]]  # (array index, message)
    warnings: list[str]

    @property
    def continent_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for it in self.items:
            counts[it.continent] = counts.get(it.continent, 0) + 1
        return counts

    def paper_shape_ok(self) -> bool:
        """True iff the accepted items match the published benchmark shape."""
        counts = self.continent_counts
        return len(self.items) == PAPER_TOTAL and all(
            counts.get(c, 0) == PAPER_PER_CONTINENT for c in CONTINENTS
        )

    def summary(self) -> str:
        counts = ", ".join(f"{c}={n}" for c, n in sorted(self.continent_counts.items()))
        return f"accepted {len(self.items)} items ({counts}); {len(self.errors)} rejected"


def items_from_records(records, region_map=None) -> BenchLoadResult:
    """Validate raw MCQ dicts and build items; bad records land in errors."""
    if region_map is None:
        region_map = COUNTRY_TO_CONTINENT
    items: list[MCQItem] = []
    errors: list[tuple[int, str]] = []
    for idx, rec in enumerate(records):
        errs = validate_mcq_record(rec, region_map)
        if errs:
            errors.extend((idx, e) for e in errs)
            continue
        items.append(
            MCQItem(
                item_id=idx,
                question=rec["question"],
                options=tuple(rec["options"]),
                correct_answer=rec["correct_answer"],
                distractors=tuple(rec["distractors"]),
                country=rec["country"],
                continent=rec["continent"],
            )
        )
    warns: list[str] = []
    by_question: dict[str, list[int]] = {}
    for it in items:
        by_question.setdefault(it.question, []).append(it.item_id)
    for question, ids in by_question.items():
        if len(ids) > 1:
            warns.append(f"duplicate question at ids {ids}: {question[:60]!r}")
    return BenchLoadResult(items=items, errors=errors, warnings=warns)


def load_benchmark(path, region_map=None) -> BenchLoadResult:
    """Load and validate a benchmark JSON array.

    ``region_map`` defaults to the frozen 17-country table; synthetic
    benchmarks pass their own country -> continent mapping. Item ids are the
    positions in the source array, so rejected records leave holes and the
    ids stay stable references into the file.
    """
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, list):
        raise ValueError(f"{path}: benchmark file must be a JSON array")
    return items_from_records(data, region_map=region_map)


# ---------------------------------------------------------------------------
# SFT dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class SftDataset:
    """Rendered instruction-tuning pairs in both formatting variants.

    ``assignments`` records the sampled (url, country, continent) per
    example so the draw is auditable; the nometa variant renders the same
    examples without the metadata block.
    """

    meta: list
    nometa: list
    assignments: list[dict]


def build_sft_dataset(instructions, pool=URL_POOL, seed: int = 0, regions=None) -> SftDataset:
    """Render instruction examples with seeded metadata sampling.

    Each example draws a base URL uniformly from the 10-entry pool and a
    country uniformly from ``regions`` (default: the frozen 17-country
    table); the continent tag always follows the sampled country, so the
    pair is never inconsistent.
    """
    instructions = list(instructions)
    if not instructions:
        raise ValueError("instructions must be non-empty")
    pool = tuple(pool)
    if len(pool) != POOL_SIZE:
        raise ValueError(f"URL pool must have exactly {POOL_SIZE} entries, got {len(pool)}")
    if regions is None:
        regions = sorted(COUNTRY_TO_CONTINENT.items())
    else:
        regions = [(c, k) for c, k in regions]
    rng = np.random.default_rng([seed, 0xA1FA])
    meta_pairs, nometa_pairs, assignments = [], [], []
    for ex in instructions:
        url = pool[int(rng.integers(len(pool)))]
        country, continent = regions[int(rng.integers(len(regions)))]
        md = {"base_url": url, "country": country, "continent": continent}
        meta_pairs.append(
            render_sft_example(ex["instruction"], ex["input"], ex["output"], md)
        )
        nometa_pairs.append(
            render_sft_example(ex["instruction"], ex["input"], ex["output"], None)
        )
        assignments.append(md)
    return SftDataset(meta=meta_pairs, nometa=nometa_pairs, assignments=assignments)


# ---------------------------------------------------------------------------
# Answer extraction
# ---------------------------------------------------------------------------

# A standalone letter: no alphanumeric neighbours, optionally trailed by
# ':', '.', ')' or whitespace/end. "The answer is C." yields C; the 'A' in
# "Answer" does not match.
_LETTER_RE = re.compile(r"(?<![A-Za-z0-9])([A-Da-d])(?=$|[\s:.)])")


def extract_answer(generation: str, options) -> str | None:
    """Map a raw generation to an option letter, or None if unanswered.

    Rule (frozen, see module docstring): standalone letter on the first
    line wins; otherwise a unique option-text substring match anywhere in
    the generation; ambiguity or no match means unanswered.
    """
    options = list(options)
    if len(options) != 4:
        raise ValueError(f"expected exactly 4 options, got {len(options)}")
    first_line = generation.split("\n", 1)[0]
    m = _LETTER_RE.search(first_line)
    if m:
        return m.group(1).upper()
    hits = [i for i, opt in enumerate(options) if opt and opt in generation]
    if len(hits) == 1:
        return "ABCD"[hits[0]]
    return None


# ---------------------------------------------------------------------------
# Evaluation and reports
# ---------------------------------------------------------------------------


@dataclass
class AccuracyReport:
    """Per-URL answer bookkeeping for one model on one benchmark.

    ``answered``/``correct`` map each base URL to the set of item ids the
    model answered (resp. answered correctly) under that URL. When
    ``intersection`` is set (by ``answered_by_all``) every accuracy is
    computed over it instead; otherwise over the model's own answered set.
    """

    model_id: str
    pool: tuple[str, ...]
    item_ids: tuple[int, ...]
    item_continent: dict[int, str]
    answered: dict[str, frozenset]
    correct: dict[str, frozenset]
    intersection: dict[str, frozenset] | None = None

    def eligible(self, url: str) -> frozenset:
        if self.intersection is not None:
            return self.intersection[url]
        return self.answered[url]

    def cell_counts(self) -> dict[tuple[str, str], tuple[int, int]]:
        """(url, continent) -> (answered count, correct count) over eligibles."""
        out: dict[tuple[str, str], tuple[int, int]] = {}
        continents = sorted(set(self.item_continent.values()))
        for url in self.pool:
            elig = self.eligible(url)
            corr = self.correct[url] & elig
            for cont in continents:
                n_a = sum(1 for i in elig if self.item_continent[i] == cont)
                n_c = sum(1 for i in corr if self.item_continent[i] == cont)
                out[(url, cont)] = (n_a, n_c)
        return out

    def per_url_accuracy(self) -> dict[str, float]:
        out = {}
        for url in self.pool:
            elig = self.eligible(url)
            n = len(elig)
            out[url] = len(self.correct[url] & elig) / n if n else float("nan")
        return out

    def continent_accuracy(self) -> dict[str, tuple[int, int, float]]:
        """continent -> (answered, correct, accuracy) pooled across URLs."""
        agg: dict[str, list[int]] = {}
        for (_, cont), (n_a, n_c) in self.cell_counts().items():
            tot = agg.setdefault(cont, [0, 0])
            tot[0] += n_a
            tot[1] += n_c
        return {
            c: (n_a, n_c, (n_c / n_a if n_a else float("nan")))
            for c, (n_a, n_c) in sorted(agg.items())
        }

    def micro_accuracy(self) -> float:
        """Pooled correct/answered ratio across all URLs and continents."""
        n_a = n_c = 0
        for url in self.pool:
            elig = self.eligible(url)
            n_a += len(elig)
            n_c += len(self.correct[url] & elig)
        return n_c / n_a if n_a else float("nan")

    def micro_ci(self, resamples: int = 1000, level: float = 0.95, seed: int = 0):
        """Percentile bootstrap of the pooled accuracy over the URL pool."""
        pairs = []
        for url in self.pool:
            elig = self.eligible(url)
            pairs.append((len(elig), len(self.correct[url] & elig)))
        arr = np.array(pairs, dtype=np.float64)
        if arr[:, 0].sum() == 0:
            return float("nan"), float("nan")
        rng = np.random.default_rng([seed, 0xACC1])
        idx = rng.integers(0, len(arr), size=(resamples, len(arr)))
        draws = arr[idx]  # (resamples, urls, 2)
        totals = draws.sum(axis=1)
        ok = totals[:, 0] > 0
        accs = totals[ok, 1] / totals[ok, 0]
        alpha = (1.0 - level) / 2.0
        return float(np.quantile(accs, alpha)), float(np.quantile(accs, 1.0 - alpha))

    def to_dict(self) -> dict:
        lo, hi = self.micro_ci()
        return {
            "model_id": self.model_id,
            "pool": list(self.pool),
            "n_items": len(self.item_ids),
            "item_ids": list(self.item_ids),
            "item_continent": {str(i): c for i, c in sorted(self.item_continent.items())},
            "micro_accuracy": self.micro_accuracy(),
            "micro_ci95": [lo, hi],
            "per_url_accuracy": self.per_url_accuracy(),
            "continent_accuracy": {
                c: {"answered": a, "correct": k, "accuracy": acc}
                for c, (a, k, acc) in self.continent_accuracy().items()
            },
            "intersection_applied": self.intersection is not None,
            "answered": {u: sorted(v) for u, v in self.answered.items()},
            "correct": {u: sorted(v) for u, v in self.correct.items()},
            "intersection": (
                None
                if self.intersection is None
                else {u: sorted(v) for u, v in self.intersection.items()}
            ),
        }


def report_from_dict(blob: dict) -> AccuracyReport:
    """Rebuild an AccuracyReport from its saved JSON form."""
    return AccuracyReport(
        model_id=blob["model_id"],
        pool=tuple(blob["pool"]),
        item_ids=tuple(blob["item_ids"]),
        item_continent={int(i): c for i, c in blob["item_continent"].items()},
        answered={u: frozenset(v) for u, v in blob["answered"].items()},
        correct={u: frozenset(v) for u, v in blob["correct"].items()},
        intersection=(
            None
            if blob.get("intersection") is None
            else {u: frozenset(v) for u, v in blob["intersection"].items()}
        ),
    )


def save_report(report: AccuracyReport, out_dir) -> Path:
    """Write {model}.bench.json plus a per-continent CSV table."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"{report.model_id or 'model'}.bench"
    csv_path = out_dir / f"{stem}.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["model_id", "continent", "answered", "correct", "accuracy"])
        for cont, (n_a, n_c, acc) in report.continent_accuracy().items():
            wr.writerow([report.model_id, cont, n_a, n_c, f"{acc:.6f}"])
        lo, hi = report.micro_ci()
        wr.writerow(
            [
                report.model_id,
                "overall",
                sum(len(report.eligible(u)) for u in report.pool),
                sum(len(report.correct[u] & report.eligible(u)) for u in report.pool),
                f"{report.micro_accuracy():.6f} [{lo:.6f}, {hi:.6f}]",
            ]
        )
    json_path = out_dir / f"{stem}.json"
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return json_path


def evaluate_mcq(
    params,
    cfg: ModelConfig,
    items,
    *,
    with_metadata: bool,
    model_id: str = "model",
    pool=URL_POOL,
    gen: GenConfig | None = None,
    seed: int = 0,
    transcript_path=None,
) -> AccuracyReport:
    """Chat-style MCQ evaluation repeated over the base-URL pool.

    For every (item, URL) pair this renders the evaluation prompt (with or
    without the metadata header), samples a completion, extracts a letter,
    and tallies answered/correct sets per URL. Each pair gets its own RNG
    stream keyed by (seed, url index, item id), so results do not depend on
    iteration order. When ``transcript_path`` is given, one JSONL line is
    written per generation for offline re-scoring.
    """
    items = list(items)
    if not items:
        raise ValueError("cannot evaluate an empty item list")
    pool = tuple(pool)
    if len(pool) != POOL_SIZE:
        raise ValueError(f"URL pool must have exactly {POOL_SIZE} entries, got {len(pool)}")
    if gen is None:
        gen = GenConfig(stop_ids=(EOS_ID,))
    limit = cfg.block_size - gen.max_new_tokens
    if limit < 2:
        raise ValueError("max_new_tokens leaves no room for a prompt")

    answered: dict[str, frozenset] = {}
    correct: dict[str, frozenset] = {}
    transcripts: list[dict] = []
    for u, url in enumerate(pool):
        ans_ids, cor_ids = set(), set()
        for it in items:
            md = (
                {"base_url": url, "country_code": it.country, "continent": it.continent}
                if with_metadata
                else None
            )
            prompt = render_eval_prompt(it, md)
            ids = encode_text(prompt, add_bos=True).tolist()
            if len(ids) > limit:
                # keep BOS, drop the oldest prompt bytes (the system preamble)
                ids = [BOS_ID] + ids[-(limit - 1):]
            rng = np.random.default_rng([seed, 0xE7A1, u, it.item_id])
            out = generate(params, cfg, ids, gen, rng)
            text = decode(out, errors="replace")
            letter = extract_answer(text, it.options)
            is_correct = letter is not None and it.options["ABCD".index(letter)] == it.correct_answer
            if letter is not None:
                ans_ids.add(it.item_id)
                if is_correct:
                    cor_ids.add(it.item_id)
            transcripts.append(
                {
                    "item_id": it.item_id,
                    "url": url,
                    "prompt_hash": hashlib.sha256(prompt.encode()).hexdigest()[:16],
                    "generation": text,
                    "extracted": letter,
                    "correct": bool(is_correct),
                }
            )
        answered[url] = frozenset(ans_ids)
        correct[url] = frozenset(cor_ids)

    if transcript_path is not None:
        with open(transcript_path, "w") as fh:
            for rec in transcripts:
                fh.write(json.dumps(rec) + "\n")
    return AccuracyReport(
        model_id=model_id,
        pool=pool,
        item_ids=tuple(it.item_id for it in items),
        item_continent={it.item_id: it.continent for it in items},
        answered=answered,
        correct=correct,
    )


def load_transcripts(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def report_from_transcripts(records, items, *, model_id: str, pool=URL_POOL) -> AccuracyReport:
    """Rebuild an AccuracyReport from a transcript log (imported baselines)."""
    items = list(items)
    pool = tuple(pool)
    answered = {u: set() for u in pool}
    correct = {u: set() for u in pool}
    known = {it.item_id for it in items}
    for rec in records:
        url, iid = rec["url"], rec["item_id"]
        if url not in answered or iid not in known:
            raise ValueError(f"transcript row ({iid}, {url!r}) outside the item set or pool")
        if rec.get("extracted") is not None:
            answered[url].add(iid)
            if rec.get("correct"):
                correct[url].add(iid)
    return AccuracyReport(
        model_id=model_id,
        pool=pool,
        item_ids=tuple(it.item_id for it in items),
        item_continent={it.item_id: it.continent for it in items},
        answered={u: frozenset(v) for u, v in answered.items()},
        correct={u: frozenset(v) for u, v in correct.items()},
    )


def answered_by_all(reports) -> list[AccuracyReport]:
    """Restrict every report to the ids answered by all models, per URL.

    Reports must share the same item universe and URL pool. Accuracies of
    the returned reports are computed over the common answered sets; if the
    intersection is empty everywhere a warning is emitted and the reports
    carry empty eligible sets (accuracies become NaN).
    """
    reports = list(reports)
    if not reports:
        raise ValueError("need at least one report")
    base = reports[0]
    for r in reports[1:]:
        if r.pool != base.pool or set(r.item_ids) != set(base.item_ids):
            raise ValueError("reports must share the same item set and URL pool")
    inter = {
        url: frozenset.intersection(*(r.answered[url] for r in reports))
        for url in base.pool
    }
    if all(len(v) == 0 for v in inter.values()):
        warnings.warn("answered-by-all intersection is empty", stacklevel=2)
    return [replace(r, intersection=dict(inter)) for r in reports]
