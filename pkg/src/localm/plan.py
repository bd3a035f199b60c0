"""Experiment orchestration: plans, run directories, consolidated reports.

A plan enumerates every cell of one experiment:

* exp1              4 regions x {full, nometa} local models, 4x4x2 eval grid
* exp2              exp1 grid plus the two global models, global test added
* exp3-granularity  global models for all five metadata variants, each
                    scored on train-matched / all-tags / control formattings
* exp3-loo          leave-one-out global models (4 regions x 2 variants)
                    next to the full global pair
* exp4              SFT on instruction pairs + MCQ accuracy over the URL pool

run_plan materializes a plan under one run directory. Every cell is keyed
by a content hash of its resolved configuration; completed cells are
skipped on resume and a hash mismatch refuses to run rather than mixing
configurations. Model cells are shared between experiments (exp2 reuses
exp1's local models when the hashes agree). report() consolidates stored
eval results into CSV tables plus a single JSON summary per experiment;
its numbers come exclusively from the stored result files.

Run directory layout:

    corpus/         corpus.jsonl, splits.json, world.json
    models/         {cell}.ckpt and {cell}.train.json per trained cell
    results/        one PerplexityResult JSON + per-doc CSV per eval cell
    bench/          planted MCQ set, SFT logs, accuracy reports (exp4)
    reports/<exp>/  consolidated CSVs and summary.json
    manifest.json   cell ledger, single writer, atomic replace on update

Reports carry no timestamps, so rerunning a completed plan regenerates
them byte-identically.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from types import SimpleNamespace

from .bench import (URL_POOL, build_sft_dataset, evaluate_mcq, load_benchmark,
                    save_report)
from .corpus import (CONTINENTS, SplitSpec, TrainMix, build_global_mix,
                     build_leave_one_out, build_local_mix, carve_splits,
                     write_corpus)
from .evalppl import _weighted_ppl, bootstrap_ci, perplexity, pool_per_doc, save_result
from .model import GenConfig, ModelConfig, load_checkpoint, save_checkpoint
from .synth import SynthSpec, build_instruction_pairs, build_planted_mcq, \
    build_world, generate_documents
from .textformat import MetadataVariant
from .tokenizer import EOS_ID
from .trainer import SftConfig, TrainConfig, pretrain, sft

EXPERIMENTS = ("exp1", "exp2", "exp3-granularity", "exp3-loo", "exp4")

# Desk-scale size ladder; the 5m tag exists for the qualitative scaling
# comparison (both sizes reported side by side when present).
SIZE_CONFIGS = {
    "1m": ModelConfig(),
    "5m": ModelConfig(n_layers=5, hidden=256, n_heads=8, n_kv_heads=2,
                      ffn_hidden=1024),
}

_FULL = MetadataVariant.FULL
_NOMETA = MetadataVariant.NOMETA
GRANULARITY_VARIANTS = (
    MetadataVariant.NOMETA,
    MetadataVariant.URL_ONLY,
    MetadataVariant.URL_COUNTRY,
    MetadataVariant.URL_CONTINENT,
    MetadataVariant.FULL,
)


class PlanError(RuntimeError):
    pass


class ConfigMismatch(PlanError):
    """A cell (or plan) exists in the manifest with a different config hash."""


@dataclass(frozen=True)
class DeskConfig:
    """Everything a desk run depends on, in one hashable bundle.

    Defaults are tuned so exp1 (24 runs at 3 seeds) finishes within the
    two-hour envelope on one CPU core while the in-region effect stays
    CI-separated after seed aggregation.
    """

    docs_per_region: int = 700
    facts_per_region: int = 20
    corpus_seed: int = 0
    test_docs_per_region: int = 150
    val_docs: int = 60
    global_test_per_region: int = 25
    sizes: tuple = ("1m",)
    seeds: tuple = (1, 2, 3)
    total_steps: int = 400
    warmup_steps: int = 60
    lr_peak: float = 6e-3
    lr_final: float = 6e-4
    micro_batch: int = 8
    seq_len: int = 384
    mix_seed: int = 0
    resamples: int = 1000
    eval_seed: int = 0
    sft_pairs: int = 240
    sft_epochs: int = 3
    sft_lr: float = 2e-4
    mcq_questions: int = 40
    max_new_tokens: int = 24
    temperature: float = 0.6
    top_p: float = 0.9

    def __post_init__(self):
        unknown = [s for s in self.sizes if s not in SIZE_CONFIGS]
        if unknown:
            raise ValueError(f"unknown size tags: {unknown}")
        if not self.seeds:
            raise ValueError("need at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be distinct")

    @property
    def token_budget(self) -> int:
        return self.total_steps * self.micro_batch * self.seq_len

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sizes"] = list(self.sizes)
        d["seeds"] = list(self.seeds)
        return d


def _hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# --- cells ---------------------------------------------------------------------


@dataclass(frozen=True)
class TrainCell:
    scope: str  # "local-<region>" | "global" | "loo-<region>"
    variant: MetadataVariant
    size: str
    seed: int

    @property
    def key(self) -> str:
        return f"{self.scope}_{self.variant.value}_{self.size}_s{self.seed}"

    @property
    def region(self) -> str | None:
        for prefix in ("local-", "loo-"):
            if self.scope.startswith(prefix):
                return self.scope[len(prefix):]
        return None


@dataclass(frozen=True)
class EvalCell:
    model: TrainCell
    test_key: str  # "test_<region>" | "global_test"
    infer: MetadataVariant
    label: str = ""  # granularity formatting label; empty otherwise

    @property
    def test_id(self) -> str:
        return f"{self.test_key}+{self.label}" if self.label else self.test_key

    @property
    def key(self) -> str:
        return f"{self.model.key}__{self.test_id}__{self.infer.value}"


@dataclass(frozen=True)
class SftCell:
    base: TrainCell
    seed: int

    @property
    def key(self) -> str:
        return f"sft_{self.base.key}_s{self.seed}"


@dataclass(frozen=True)
class BenchCell:
    sft: SftCell
    with_metadata: bool

    @property
    def key(self) -> str:
        mode = "meta" if self.with_metadata else "plain"
        return f"bench_{self.sft.key}_{mode}"


@dataclass(frozen=True)
class ExperimentPlan:
    experiment: str
    root: str
    config: DeskConfig = DeskConfig()

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(
                f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}"
            )
        if not self.root:
            raise ValueError("plan needs a run directory root")

    # -- model grids ------------------------------------------------------

    def _model_grid(self, size: str, seed: int) -> list[TrainCell]:
        locals_ = [
            TrainCell(f"local-{r}", v, size, seed)
            for r in CONTINENTS
            for v in (_FULL, _NOMETA)
        ]
        globals_ = [TrainCell("global", v, size, seed) for v in (_FULL, _NOMETA)]
        if self.experiment == "exp1":
            return locals_
        if self.experiment == "exp2":
            return locals_ + globals_
        if self.experiment == "exp3-granularity":
            return [TrainCell("global", v, size, seed) for v in GRANULARITY_VARIANTS]
        if self.experiment == "exp3-loo":
            loo = [
                TrainCell(f"loo-{r}", v, size, seed)
                for r in CONTINENTS
                for v in (_FULL, _NOMETA)
            ]
            return globals_ + loo
        # exp4 bases; SFT seeds vary separately, so one pretrain seed suffices
        return []

    def train_cells(self) -> list[TrainCell]:
        c = self.config
        if self.experiment == "exp4":
            return [
                TrainCell("global", v, size, c.seeds[0])
                for size in c.sizes
                for v in (_FULL, _NOMETA)
            ]
        return [
            cell
            for size in c.sizes
            for seed in c.seeds
            for cell in self._model_grid(size, seed)
        ]

    # -- eval grids --------------------------------------------------------

    def _eval_grid(self, size: str, seed: int) -> list[EvalCell]:
        region_tests = [f"test_{r}" for r in CONTINENTS]
        cells: list[EvalCell] = []
        if self.experiment == "exp1":
            for m in self._model_grid(size, seed):
                for t in region_tests:
                    for iv in (_FULL, _NOMETA):
                        cells.append(EvalCell(m, t, iv))
        elif self.experiment == "exp2":
            for m in self._model_grid(size, seed):
                for t in region_tests + ["global_test"]:
                    for iv in (_FULL, _NOMETA):
                        cells.append(EvalCell(m, t, iv))
        elif self.experiment == "exp3-granularity":
            for m in self._model_grid(size, seed):
                cells.append(EvalCell(m, "global_test", m.variant, "train_matched"))
                cells.append(EvalCell(m, "global_test", _FULL, "all_tags"))
                cells.append(EvalCell(m, "global_test", _NOMETA, "control"))
        elif self.experiment == "exp3-loo":
            for m in self._model_grid(size, seed):
                if m.scope == "global":
                    for t in region_tests + ["global_test"]:
                        cells.append(EvalCell(m, t, m.variant))
                else:
                    cells.append(EvalCell(m, f"test_{m.region}", m.variant))
                    cells.append(EvalCell(m, "global_test", m.variant))
        return cells

    def eval_cells(self) -> list[EvalCell]:
        c = self.config
        return [
            cell
            for size in c.sizes
            for seed in c.seeds
            for cell in self._eval_grid(size, seed)
        ]

    def sft_cells(self) -> list[SftCell]:
        if self.experiment != "exp4":
            return []
        c = self.config
        return [
            SftCell(base, seed)
            for base in self.train_cells()
            for seed in c.seeds
        ]

    def bench_cells(self) -> list[BenchCell]:
        if self.experiment != "exp4":
            return []
        c = self.config
        return [
            BenchCell(SftCell(base, c.seeds[0]), base.variant is _FULL)
            for base in self.train_cells()
        ]

    def cell_keys(self) -> dict:
        return {
            "train": [c.key for c in self.train_cells()],
            "eval": [c.key for c in self.eval_cells()],
            "sft": [c.key for c in self.sft_cells()],
            "bench": [c.key for c in self.bench_cells()],
        }


# --- manifest -------------------------------------------------------------------


class Manifest:
    """Cell ledger for one run directory.

    All mutation goes through record()/record_plan() followed by save(),
    which writes to a temp file and atomically replaces the manifest; the
    orchestrator is the single writer.
    """

    def __init__(self, path: Path, data: dict):
        self.path = Path(path)
        self.data = data

    @classmethod
    def load(cls, path) -> "Manifest":
        path = Path(path)
        if path.exists():
            data = json.loads(path.read_text())
        else:
            data = {"version": 1, "cells": {}, "plans": {}}
        return cls(path, data)

    @property
    def cells(self) -> dict:
        return self.data["cells"]

    @property
    def plans(self) -> dict:
        return self.data["plans"]

    def check(self, key: str, config_hash: str) -> bool:
        """True if the cell is already done. Mismatched hash refuses."""
        rec = self.cells.get(key)
        if rec is None:
            return False
        if rec["config_hash"] != config_hash:
            raise ConfigMismatch(
                f"cell {key} exists with config hash {rec['config_hash']}, "
                f"current plan wants {config_hash}; use a fresh run directory"
            )
        return True

    def record(self, key: str, kind: str, config_hash: str,
               artifacts: list[str], seconds: float) -> None:
        self.cells[key] = {
            "kind": kind,
            "config_hash": config_hash,
            "artifacts": sorted(artifacts),
            "seconds": round(seconds, 3),
            "completed_at": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
        self.save()

    def record_plan(self, experiment: str, config_hash: str, config: dict,
                    cell_keys: dict) -> None:
        prev = self.plans.get(experiment)
        if prev is not None and prev["config_hash"] != config_hash:
            raise ConfigMismatch(
                f"plan {experiment} was started with config hash "
                f"{prev['config_hash']}, current config hashes to {config_hash}"
            )
        self.plans[experiment] = {
            "config_hash": config_hash,
            "config": config,
            "cells": cell_keys,
        }
        self.save()

    def save(self) -> None:
        tmp = self.path.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.path)


@dataclass(frozen=True)
class RunPaths:
    root: Path

    @property
    def corpus(self) -> Path:
        return self.root / "corpus"

    @property
    def models(self) -> Path:
        return self.root / "models"

    @property
    def results(self) -> Path:
        return self.root / "results"

    @property
    def bench(self) -> Path:
        return self.root / "bench"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.json"

    def ensure(self) -> None:
        for d in (self.corpus, self.models, self.results, self.bench, self.reports):
            d.mkdir(parents=True, exist_ok=True)


# --- config resolution ------------------------------------------------------------


def _corpus_config(c: DeskConfig) -> dict:
    return {
        "synth": {
            "docs_per_region": c.docs_per_region,
            "facts_per_region": c.facts_per_region,
            "seed": c.corpus_seed,
        },
        "split": {
            "test_docs_per_region": c.test_docs_per_region,
            "val_docs": c.val_docs,
            "global_test_per_region": c.global_test_per_region,
            "seed": c.corpus_seed,
        },
    }


def _mix_regions(cell: TrainCell) -> frozenset:
    if cell.scope.startswith("local-"):
        return frozenset({cell.region})
    if cell.scope.startswith("loo-"):
        return frozenset(CONTINENTS) - {cell.region}
    return frozenset(CONTINENTS)


def _train_cell_config(c: DeskConfig, cell: TrainCell) -> dict:
    return {
        "corpus": _corpus_config(c),
        "mix": {
            "regions": sorted(_mix_regions(cell)),
            "variant": cell.variant.value,
            "token_budget": c.token_budget,
            "seed": c.mix_seed,
            "packing": c.seq_len,
        },
        "model": json.loads(SIZE_CONFIGS[cell.size].to_json()),
        "train": {
            "total_steps": c.total_steps,
            "warmup_steps": c.warmup_steps,
            "lr_peak": c.lr_peak,
            "lr_final": c.lr_final,
            "micro_batch": c.micro_batch,
            "seq_len": c.seq_len,
            "seed": cell.seed,
        },
    }


def _eval_cell_config(c: DeskConfig, ecell: EvalCell) -> dict:
    return {
        "model": _train_cell_config(c, ecell.model),
        "test": ecell.test_id,
        "infer": ecell.infer.value,
        "resamples": c.resamples,
        "eval_seed": c.eval_seed,
    }


def _sft_cell_config(c: DeskConfig, cell: SftCell) -> dict:
    return {
        "base": _train_cell_config(c, cell.base),
        "pairs": c.sft_pairs,
        "epochs": c.sft_epochs,
        "lr": c.sft_lr,
        "data_seed": c.corpus_seed,
        "seed": cell.seed,
    }


def _bench_cell_config(c: DeskConfig, cell: BenchCell) -> dict:
    return {
        "sft": _sft_cell_config(c, cell.sft),
        "with_metadata": cell.with_metadata,
        "questions": c.mcq_questions,
        "gen": {
            "max_new_tokens": c.max_new_tokens,
            "temperature": c.temperature,
            "top_p": c.top_p,
        },
        "eval_seed": c.eval_seed,
    }


# --- running --------------------------------------------------------------------


def _say(progress, msg: str) -> None:
    if progress:
        print(msg, flush=True)


def _ensure_corpus(plan: ExperimentPlan, paths: RunPaths, man: Manifest,
                   progress) -> tuple:
    c = plan.config
    conf = _corpus_config(c)
    h = _hash(conf)
    world = build_world(SynthSpec(c.docs_per_region, c.facts_per_region, c.corpus_seed))
    docs = generate_documents(world)
    splits = carve_splits(
        docs,
        SplitSpec(c.test_docs_per_region, c.val_docs, c.global_test_per_region),
        seed=c.corpus_seed,
    )
    if not man.check("corpus", h):
        t0 = time.time()
        write_corpus(docs, paths.corpus / "corpus.jsonl")
        id_sets = {k: sorted(v) for k, v in splits.id_sets().items()}
        (paths.corpus / "splits.json").write_text(
            json.dumps({"config": conf, "ids": id_sets}, indent=2) + "\n"
        )
        (paths.corpus / "world.json").write_text(
            json.dumps(
                {
                    "filler_nouns": world.filler_nouns,
                    "exclusive_facts": world.exclusive_facts,
                    "continent_keyed": world.continent_keyed,
                    "country_keyed": world.country_keyed,
                    "neutral_facts": world.neutral_facts,
                },
                indent=2,
            )
            + "\n"
        )
        man.record("corpus", "corpus", h,
                   ["corpus.jsonl", "splits.json", "world.json"], time.time() - t0)
        _say(progress, f"corpus: {len(docs)} docs, {len(splits.train)} train")
    return world, splits


class _ModelStore:
    """Lazy cache of trained parameters keyed by cell."""

    def __init__(self, paths: RunPaths):
        self.paths = paths
        self._cache: dict[str, dict] = {}

    def path(self, cell_key: str) -> Path:
        return self.paths.models / f"{cell_key}.ckpt"

    def put(self, cell_key: str, params: dict) -> None:
        self._cache[cell_key] = params

    def get(self, cell_key: str) -> dict:
        if cell_key not in self._cache:
            params, _ = load_checkpoint(self.path(cell_key))
            self._cache[cell_key] = params
        return self._cache[cell_key]


def _ensure_trained(plan: ExperimentPlan, paths: RunPaths, man: Manifest,
                    store: _ModelStore, cell: TrainCell, splits, progress) -> None:
    c = plan.config
    conf = _train_cell_config(c, cell)
    h = _hash(conf)
    key = f"train/{cell.key}"
    if man.check(key, h):
        return
    mix = TrainMix(
        regions=_mix_regions(cell),
        variant=cell.variant,
        token_budget=c.token_budget,
        seed=c.mix_seed,
        packing=c.seq_len,
    )
    if cell.scope.startswith("local-"):
        stream = build_local_mix(splits.train, cell.region, mix)
    elif cell.scope.startswith("loo-"):
        stream = build_leave_one_out(splits.train, cell.region, mix)
    else:
        stream = build_global_mix(splits.train, mix)
    tcfg = TrainConfig(
        total_steps=c.total_steps,
        warmup_steps=c.warmup_steps,
        lr_peak=c.lr_peak,
        lr_final=c.lr_final,
        micro_batch=c.micro_batch,
        seq_len=c.seq_len,
        val_every=0,
        ckpt_every=0,
        seed=cell.seed,
    )
    t0 = time.time()
    res = pretrain(stream, SIZE_CONFIGS[cell.size], tcfg)
    dt = time.time() - t0
    ckpt = store.path(cell.key)
    save_checkpoint(ckpt, res.params, {
        "kind": "model",
        "cell": cell.key,
        "model": conf["model"],
        "config": conf,
        "wraps": res.wraps,
        "final_loss": res.metrics[-1]["loss"],
    })
    log = {
        "cell": cell.key,
        "config_hash": h,
        "final_loss": res.metrics[-1]["loss"],
        "wraps": res.wraps,
        "steps": c.total_steps,
        "seconds": round(dt, 1),
    }
    (paths.models / f"{cell.key}.train.json").write_text(
        json.dumps(log, indent=2) + "\n"
    )
    store.put(cell.key, res.params)
    man.record(key, "train", h, [ckpt.name, f"{cell.key}.train.json"], dt)
    _say(progress, f"train {cell.key}: {dt:.0f}s loss {log['final_loss']:.4f}")


def _test_docs(splits, test_key: str):
    if test_key == "global_test":
        return splits.global_test
    return splits.test_by_region[test_key.removeprefix("test_")]


def _ensure_eval(plan: ExperimentPlan, paths: RunPaths, man: Manifest,
                 store: _ModelStore, ecell: EvalCell, splits, progress) -> None:
    c = plan.config
    conf = _eval_cell_config(c, ecell)
    h = _hash(conf)
    key = f"eval/{ecell.key}"
    if man.check(key, h):
        return
    t0 = time.time()
    res = perplexity(
        store.get(ecell.model.key),
        SIZE_CONFIGS[ecell.model.size],
        _test_docs(splits, ecell.test_key),
        ecell.infer,
        model_id=ecell.model.key,
        test_id=ecell.test_id,
        resamples=c.resamples,
        seed=c.eval_seed,
    )
    json_path = save_result(res, paths.results)
    dt = time.time() - t0
    man.record(key, "eval", h,
               [json_path.name, json_path.name.replace(".json", ".per_doc.csv")], dt)
    _say(progress, f"eval {ecell.key}: ppl {res.ppl:.4f} ({dt:.1f}s)")


def _ensure_sft(plan: ExperimentPlan, paths: RunPaths, man: Manifest,
                store: _ModelStore, cell: SftCell, dataset, progress) -> None:
    c = plan.config
    conf = _sft_cell_config(c, cell)
    h = _hash(conf)
    key = f"sft/{cell.key}"
    if man.check(key, h):
        return
    pairs = dataset.meta if cell.base.variant is _FULL else dataset.nometa
    t0 = time.time()
    res = sft(
        store.get(cell.base.key),
        SIZE_CONFIGS[cell.base.size],
        pairs,
        SftConfig(epochs=c.sft_epochs, lr=c.sft_lr, seed=cell.seed),
    )
    dt = time.time() - t0
    ckpt = store.path(cell.key)
    save_checkpoint(ckpt, res.params, {"kind": "model", "cell": cell.key,
                                       "model": conf["base"]["model"],
                                       "config": conf})
    log = {
        "cell": cell.key,
        "config_hash": h,
        "pre_nll": res.pre_nll,
        "post_nll": res.post_nll,
        "pairs": len(pairs),
        "seconds": round(dt, 1),
    }
    (paths.bench / f"{cell.key}.sft.json").write_text(json.dumps(log, indent=2) + "\n")
    store.put(cell.key, res.params)
    man.record(key, "sft", h, [ckpt.name, f"{cell.key}.sft.json"], dt)
    _say(progress,
         f"sft {cell.key}: nll {res.pre_nll:.4f} -> {res.post_nll:.4f} ({dt:.0f}s)")


def _ensure_bench(plan: ExperimentPlan, paths: RunPaths, man: Manifest,
                  store: _ModelStore, cell: BenchCell, items, progress) -> None:
    c = plan.config
    conf = _bench_cell_config(c, cell)
    h = _hash(conf)
    key = f"bench/{cell.key}"
    if man.check(key, h):
        return
    gen = GenConfig(
        max_new_tokens=c.max_new_tokens,
        temperature=c.temperature,
        top_p=c.top_p,
        stop_ids=(EOS_ID,),
    )
    t0 = time.time()
    report_ = evaluate_mcq(
        store.get(cell.sft.key),
        SIZE_CONFIGS[cell.sft.base.size],
        items,
        with_metadata=cell.with_metadata,
        model_id=cell.key,
        pool=URL_POOL,
        gen=gen,
        seed=c.eval_seed,
        transcript_path=paths.bench / f"{cell.key}.transcripts.jsonl",
    )
    json_path = save_report(report_, paths.bench)
    dt = time.time() - t0
    man.record(key, "bench", h,
               [json_path.name, f"{cell.key}.bench.csv",
                f"{cell.key}.transcripts.jsonl"], dt)
    _say(progress,
         f"bench {cell.key}: micro acc {report_.micro_accuracy():.3f} ({dt:.0f}s)")


def run_plan(plan: ExperimentPlan, progress: bool = False) -> Path:
    """Materialize every cell of the plan; idempotent on completed cells."""
    paths = RunPaths(Path(plan.root))
    paths.ensure()
    man = Manifest.load(paths.manifest)
    c = plan.config
    plan_hash = _hash({"experiment": plan.experiment, "config": c.to_dict()})
    man.record_plan(plan.experiment, plan_hash, c.to_dict(), plan.cell_keys())

    world, splits = _ensure_corpus(plan, paths, man, progress)
    store = _ModelStore(paths)
    for cell in plan.train_cells():
        _ensure_trained(plan, paths, man, store, cell, splits, progress)
    for ecell in plan.eval_cells():
        _ensure_eval(plan, paths, man, store, ecell, splits, progress)

    if plan.experiment == "exp4":
        instructions = build_instruction_pairs(world, c.sft_pairs, seed=c.corpus_seed)
        dataset = build_sft_dataset(instructions, pool=URL_POOL, seed=c.corpus_seed)
        mcq_path = paths.bench / "planted_mcq.json"
        if not mcq_path.exists():
            records = build_planted_mcq(world, c.mcq_questions, seed=c.corpus_seed)
            mcq_path.write_text(json.dumps(records, indent=2) + "\n")
        loaded = load_benchmark(mcq_path)
        if loaded.errors:
            raise PlanError(f"planted MCQ set failed validation: {loaded.errors[:3]}")
        for scell in plan.sft_cells():
            _ensure_sft(plan, paths, man, store, scell, dataset, progress)
        for bcell in plan.bench_cells():
            _ensure_bench(plan, paths, man, store, bcell, loaded.items, progress)

    report(plan.root, plan.experiment)
    return paths.root


# --- reporting ------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_eval_result(paths: RunPaths, man: Manifest, cell_key: str) -> dict:
    rec = man.cells[f"eval/{cell_key}"]
    json_name = next(a for a in rec["artifacts"] if a.endswith(".json"))
    json_path = paths.results / json_name
    blob = json.loads(json_path.read_text())
    per_doc = []
    with open(paths.results / blob["per_doc_table"], newline="") as fh:
        for row in csv.DictReader(fh):
            per_doc.append(
                (row["doc_id"], float(row["mean_nll"]), int(row["content_tokens"]))
            )
    blob["per_doc"] = per_doc
    blob["source"] = json_name
    blob["sha256"] = _sha256(json_path)
    return blob


def _pooled(results: list[dict], resamples: int, seed: int) -> dict:
    """Token-weighted ppl + CI after per-document averaging across seeds."""
    rows = pool_per_doc([SimpleNamespace(per_doc=r["per_doc"]) for r in results])
    ppl = _weighted_ppl([r[1] for r in rows], [r[2] for r in rows])
    lo, hi = bootstrap_ci(rows, resamples=resamples, seed=seed)
    return {"ppl": ppl, "ci": [lo, hi], "n_seeds": len(results)}


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def _fmt(x: float) -> str:
    return f"{x:.6f}"


class _Reporter:
    """Builds one experiment's consolidated tables from stored results."""

    def __init__(self, plan_rec: dict, paths: RunPaths, man: Manifest,
                 experiment: str):
        self.experiment = experiment
        self.paths = paths
        self.man = man
        self.config = plan_rec["config"]
        self.plan_rec = plan_rec
        self.out = paths.reports / experiment
        self.sources: dict[str, dict] = {}
        self._evals: dict[str, dict] = {}

    # declared cells that are not in the manifest yet
    def missing(self) -> list[str]:
        prefix = {"train": "train/", "eval": "eval/", "sft": "sft/", "bench": "bench/"}
        out = []
        for kind, keys in self.plan_rec["cells"].items():
            for k in keys:
                if prefix[kind] + k not in self.man.cells:
                    out.append(prefix[kind] + k)
        return sorted(out)

    def eval_blob(self, cell_key: str) -> dict:
        if cell_key not in self._evals:
            blob = _load_eval_result(self.paths, self.man, cell_key)
            self._evals[cell_key] = blob
            self.sources[f"eval/{cell_key}"] = {
                "file": blob["source"], "sha256": blob["sha256"],
            }
        return self._evals[cell_key]

    def pooled(self, cell_keys: list[str]) -> dict:
        return _pooled(
            [self.eval_blob(k) for k in cell_keys],
            self.config["resamples"],
            self.config["eval_seed"],
        )

    # -- keys ---------------------------------------------------------------

    def model_key(self, scope: str, variant: MetadataVariant, size: str,
                  seed: int) -> str:
        return TrainCell(scope, variant, size, seed).key

    def ekey(self, scope: str, variant: MetadataVariant, size: str, seed: int,
             test_key: str, infer: MetadataVariant, label: str = "") -> str:
        return EvalCell(TrainCell(scope, variant, size, seed), test_key, infer,
                        label).key

    # -- per-experiment tables ------------------------------------------------

    def build(self) -> dict:
        seeds = list(self.config["seeds"])
        sizes = list(self.config["sizes"])
        summary: dict = {
            "experiment": self.experiment,
            "config_hash": self.plan_rec["config_hash"],
            "sizes": {},
        }
        build = {
            "exp1": self._exp1,
            "exp2": self._exp2,
            "exp3-granularity": self._exp3_granularity,
            "exp3-loo": self._exp3_loo,
            "exp4": self._exp4,
        }[self.experiment]
        for size in sizes:
            summary["sizes"][size] = build(size, seeds)
        if len(sizes) >= 2:
            summary["scaling"] = self._scaling(sizes, seeds)
        return summary

    def _exp1(self, size: str, seeds: list[int]) -> dict:
        cells_rows = []
        for seed in seeds:
            for r in CONTINENTS:
                for v in (_FULL, _NOMETA):
                    for t in CONTINENTS:
                        for iv in (_FULL, _NOMETA):
                            k = self.ekey(f"local-{r}", v, size, seed,
                                          f"test_{t}", iv)
                            b = self.eval_blob(k)
                            cells_rows.append(
                                [size, seed, f"local-{r}", v.value, f"test_{t}",
                                 iv.value, _fmt(b["ppl"]), _fmt(b["ci_low"]),
                                 _fmt(b["ci_high"]), b["source"]]
                            )
        _write_csv(self.out / f"cells_{size}.csv",
                   ["size", "seed", "model", "trained", "test", "infer",
                    "ppl", "ci_low", "ci_high", "source"], cells_rows)

        in_region = {}
        for r in CONTINENTS:
            meta = self.pooled([
                self.ekey(f"local-{r}", _FULL, size, s, f"test_{r}", _FULL)
                for s in seeds
            ])
            plain = self.pooled([
                self.ekey(f"local-{r}", _NOMETA, size, s, f"test_{r}", _NOMETA)
                for s in seeds
            ])
            in_region[r] = {
                "meta": meta,
                "plain": plain,
                "separated": bool(meta["ci"][1] < plain["ci"][0]),
                "rel_gap": (plain["ppl"] - meta["ppl"]) / plain["ppl"],
            }
        _write_csv(
            self.out / f"inregion_{size}.csv",
            ["region", "meta_ppl", "meta_lo", "meta_hi",
             "plain_ppl", "plain_lo", "plain_hi", "separated", "rel_gap"],
            [
                [r, _fmt(d["meta"]["ppl"]), _fmt(d["meta"]["ci"][0]),
                 _fmt(d["meta"]["ci"][1]), _fmt(d["plain"]["ppl"]),
                 _fmt(d["plain"]["ci"][0]), _fmt(d["plain"]["ci"][1]),
                 d["separated"], _fmt(d["rel_gap"])]
                for r, d in in_region.items()
            ],
        )

        # delta grids: rows = model region, cols = test region, pooled over seeds
        def grid(model_variant, infer):
            return {
                r: {
                    t: self.pooled([
                        self.ekey(f"local-{r}", model_variant, size, s,
                                  f"test_{t}", infer)
                        for s in seeds
                    ])["ppl"]
                    for t in CONTINENTS
                }
                for r in CONTINENTS
            }

        # delta1 compares both models with metadata shown at inference,
        # delta2 with metadata hidden (Table 2 notation: [Local] vs Local)
        meta_m = grid(_FULL, _FULL)
        plain_m = grid(_NOMETA, _FULL)
        meta_n = grid(_FULL, _NOMETA)
        plain_n = grid(_NOMETA, _NOMETA)
        delta1 = {r: {t: plain_m[r][t] - meta_m[r][t] for t in CONTINENTS}
                  for r in CONTINENTS}
        delta2 = {r: {t: plain_n[r][t] - meta_n[r][t] for t in CONTINENTS}
                  for r in CONTINENTS}
        for name, g in (("delta1", delta1), ("delta2", delta2)):
            _write_csv(
                self.out / f"{name}_{size}.csv",
                ["model_region", *CONTINENTS],
                [[r, *[_fmt(g[r][t]) for t in CONTINENTS]] for r in CONTINENTS],
            )
        offdiag = [delta1[r][t] for r in CONTINENTS for t in CONTINENTS if r != t]
        return {
            "in_region": in_region,
            "regions_separated": sum(d["separated"] for d in in_region.values()),
            "delta1": delta1,
            "delta2": delta2,
            "delta1_offdiag_positive": sum(d > 0 for d in offdiag),
            "delta1_offdiag_total": len(offdiag),
        }

    def _exp2(self, size: str, seeds: list[int]) -> dict:
        g_meta = self.pooled([
            self.ekey("global", _FULL, size, s, "global_test", _FULL)
            for s in seeds
        ])
        g_ctrl = self.pooled([
            self.ekey("global", _NOMETA, size, s, "global_test", _NOMETA)
            for s in seeds
        ])
        within = {}
        for r in CONTINENTS:
            glob = self.pooled([
                self.ekey("global", _FULL, size, s, f"test_{r}", _FULL)
                for s in seeds
            ])
            local = self.pooled([
                self.ekey(f"local-{r}", _FULL, size, s, f"test_{r}", _FULL)
                for s in seeds
            ])
            within[r] = {
                "global_ppl": glob["ppl"],
                "local_ppl": local["ppl"],
                "rel_gap": abs(glob["ppl"] - local["ppl"]) / local["ppl"],
            }
        max_gap = max(d["rel_gap"] for d in within.values())
        _write_csv(
            self.out / f"global_{size}.csv",
            ["comparison", "ppl", "ci_low", "ci_high"],
            [
                ["global_meta", _fmt(g_meta["ppl"]), _fmt(g_meta["ci"][0]),
                 _fmt(g_meta["ci"][1])],
                ["control_plain", _fmt(g_ctrl["ppl"]), _fmt(g_ctrl["ci"][0]),
                 _fmt(g_ctrl["ci"][1])],
            ],
        )
        _write_csv(
            self.out / f"within15_{size}.csv",
            ["region", "global_ppl", "local_ppl", "rel_gap"],
            [
                [r, _fmt(d["global_ppl"]), _fmt(d["local_ppl"]), _fmt(d["rel_gap"])]
                for r, d in within.items()
            ],
        )
        return {
            "global_test": {
                "meta": g_meta,
                "control": g_ctrl,
                "separated": bool(g_meta["ci"][1] < g_ctrl["ci"][0]),
            },
            "within_region": within,
            "max_rel_gap": max_gap,
            "all_within_15pct": bool(max_gap <= 0.15),
        }

    def _exp3_granularity(self, size: str, seeds: list[int]) -> dict:
        labels = (("train_matched", None), ("all_tags", _FULL),
                  ("control", _NOMETA))
        grid = {}
        for v in GRANULARITY_VARIANTS:
            row = {}
            for label, infer in labels:
                use = infer if infer is not None else v
                row[label] = self.pooled([
                    self.ekey("global", v, size, s, "global_test", use, label)
                    for s in seeds
                ])
            grid[v.value] = row
        _write_csv(
            self.out / f"granularity_{size}.csv",
            ["variant", *[lab for lab, _ in labels]],
            [
                [v, *[_fmt(grid[v][lab]["ppl"]) for lab, _ in labels]]
                for v in grid
            ],
        )
        return {"grid": grid}

    def _exp3_loo(self, size: str, seeds: list[int]) -> dict:
        out = {}
        for r in CONTINENTS:
            row = {}
            for v in (_FULL, _NOMETA):
                loo = self.pooled([
                    self.ekey(f"loo-{r}", v, size, s, f"test_{r}", v)
                    for s in seeds
                ])
                full = self.pooled([
                    self.ekey("global", v, size, s, f"test_{r}", v)
                    for s in seeds
                ])
                row[v.value] = {
                    "loo": loo,
                    "full": full,
                    "delta": loo["ppl"] - full["ppl"],
                    "separated": bool(loo["ci"][0] > full["ci"][1]),
                }
            out[r] = row
        _write_csv(
            self.out / f"loo_{size}.csv",
            ["excluded", "variant", "loo_ppl", "loo_lo", "loo_hi",
             "full_ppl", "full_lo", "full_hi", "delta", "separated"],
            [
                [r, v, _fmt(d["loo"]["ppl"]), _fmt(d["loo"]["ci"][0]),
                 _fmt(d["loo"]["ci"][1]), _fmt(d["full"]["ppl"]),
                 _fmt(d["full"]["ci"][0]), _fmt(d["full"]["ci"][1]),
                 _fmt(d["delta"]), d["separated"]]
                for r, row in out.items()
                for v, d in row.items()
            ],
        )
        return {
            "heldout": out,
            "all_separated_full": all(
                row["full"]["separated"] for row in out.values()
            ),
        }

    def _exp4(self, size: str, seeds: list[int]) -> dict:
        sft_rows = {}
        for v in (_FULL, _NOMETA):
            base = self.model_key("global", v, size, seeds[0])
            for s in seeds:
                cell_key = f"sft_{base}_s{s}"
                rec = self.man.cells[f"sft/{cell_key}"]
                log_name = next(a for a in rec["artifacts"]
                                if a.endswith(".sft.json"))
                log_path = self.paths.bench / log_name
                log = json.loads(log_path.read_text())
                self.sources[f"sft/{cell_key}"] = {
                    "file": log_name, "sha256": _sha256(log_path),
                }
                sft_rows[cell_key] = {
                    "variant": v.value,
                    "seed": s,
                    "pre_nll": log["pre_nll"],
                    "post_nll": log["post_nll"],
                    "reduced": bool(log["post_nll"] < log["pre_nll"]),
                }

        acc = {}
        for v, mode in ((_FULL, "meta"), (_NOMETA, "plain")):
            base = self.model_key("global", v, size, seeds[0])
            cell_key = f"bench_sft_{base}_s{seeds[0]}_{mode}"
            rec = self.man.cells[f"bench/{cell_key}"]
            json_name = next(a for a in rec["artifacts"]
                             if a.endswith(".bench.json"))
            json_path = self.paths.bench / json_name
            blob = json.loads(json_path.read_text())
            self.sources[f"bench/{cell_key}"] = {
                "file": json_name, "sha256": _sha256(json_path),
            }
            n_items = blob["n_items"]
            strict = [
                len(blob["correct"][u]) / n_items for u in blob["pool"]
            ]
            acc[mode] = {
                "micro_accuracy": blob["micro_accuracy"],
                "micro_ci95": blob["micro_ci95"],
                "strict_mean_accuracy": sum(strict) / len(strict),
                "per_continent": blob["continent_accuracy"],
            }

        gap = (acc["meta"]["strict_mean_accuracy"]
               - acc["plain"]["strict_mean_accuracy"]) * 100.0
        _write_csv(
            self.out / f"sft_{size}.csv",
            ["cell", "variant", "seed", "pre_nll", "post_nll", "reduced"],
            [
                [k, d["variant"], d["seed"], _fmt(d["pre_nll"]),
                 _fmt(d["post_nll"]), d["reduced"]]
                for k, d in sft_rows.items()
            ],
        )
        _write_csv(
            self.out / f"accuracy_{size}.csv",
            ["mode", "micro_accuracy", "ci_low", "ci_high",
             "strict_mean_accuracy"],
            [
                [m, _fmt(d["micro_accuracy"]), _fmt(d["micro_ci95"][0]),
                 _fmt(d["micro_ci95"][1]), _fmt(d["strict_mean_accuracy"])]
                for m, d in acc.items()
            ],
        )
        return {
            "sft": sft_rows,
            "all_reduced": all(d["reduced"] for d in sft_rows.values()),
            "accuracy": acc,
            "gap_points": gap,
        }

    def _scaling(self, sizes: list[str], seeds: list[int]) -> dict:
        """Side-by-side ppl of the size ladder on whatever tests both ran."""
        table = {}
        for size in sizes:
            per_size = {}
            for kind, keys in self.plan_rec["cells"].items():
                if kind != "eval":
                    continue
                for k in keys:
                    if f"_{size}_" not in k:
                        continue
                    blob = self.eval_blob(k)
                    per_size[k] = blob["ppl"]
            table[size] = per_size
        # align on the cell identity modulo the size tag
        def strip(k, size):
            return k.replace(f"_{size}_", "_<size>_")
        common = set.intersection(*[
            {strip(k, size) for k in table[size]} for size in sizes
        ]) if table else set()
        rows = []
        for ident in sorted(common):
            row = [ident]
            for size in sizes:
                match = next(k for k in table[size] if strip(k, size) == ident)
                row.append(_fmt(table[size][match]))
            rows.append(row)
        _write_csv(self.out / "scaling.csv", ["cell", *sizes], rows)
        return {"cells_compared": len(rows)}


def report(root, experiment: str | None = None) -> dict:
    """Consolidate stored eval results into reports/{experiment}/.

    Returns the summary dict (or {experiment: summary} when reporting every
    recorded plan). Incomplete plans produce a partial report with the
    missing cells flagged; an empty run directory is an error.
    """
    paths = RunPaths(Path(root))
    if not paths.manifest.exists():
        raise PlanError(f"no manifest at {paths.manifest}; nothing to report")
    man = Manifest.load(paths.manifest)
    if not man.plans:
        raise PlanError("manifest records no plans; nothing to report")

    if experiment is None:
        return {exp: report(root, exp) for exp in sorted(man.plans)}
    if experiment not in man.plans:
        raise PlanError(
            f"plan {experiment} not recorded in this run directory "
            f"(have: {sorted(man.plans)})"
        )

    rep = _Reporter(man.plans[experiment], paths, man, experiment)
    rep.out.mkdir(parents=True, exist_ok=True)
    missing = rep.missing()
    summary: dict = {
        "experiment": experiment,
        "config_hash": man.plans[experiment]["config_hash"],
        "partial": bool(missing),
        "missing": missing,
    }
    if missing:
        (rep.out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n"
        )
        return summary
    summary.update(rep.build())
    summary["sources"] = rep.sources
    (rep.out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True) + "\n"
    )
    return summary
