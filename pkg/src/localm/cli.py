"""Command-line entry points.

Subcommands: corpus synth|validate|split, mix build, train pretrain|sft,
eval ppl|matrix|loo, bench run|intersect, plan run|report.

Every flag is mirrored by a JSON config file passed with --config: the
file maps flag destinations (underscore form, e.g. "docs_per_region") to
values, and explicit flags win over the file. Commands with any random
element require a seed, from either source.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from .bench import (URL_POOL, answered_by_all, build_sft_dataset, evaluate_mcq,
                    load_benchmark, report_from_dict, save_report)
from .corpus import (CONTINENTS, SplitSpec, TrainMix, build_global_mix,
                     build_leave_one_out, build_local_mix, carve_splits,
                     load_corpus, write_corpus)
from .evalppl import cross_matrix, leave_one_out_deltas, perplexity, save_result
from .model import GenConfig, ModelConfig, load_checkpoint, save_checkpoint
from .plan import (EXPERIMENTS, SIZE_CONFIGS, DeskConfig, ExperimentPlan,
                   PlanError, report as plan_report, run_plan)
from .synth import (SynthSpec, build_instruction_pairs, build_planted_mcq,
                    build_world, generate_documents)
from .textformat import MetadataVariant
from .tokenizer import EOS_ID
from .trainer import SftConfig, TrainConfig, pretrain, sft


class CliError(SystemExit):
    def __init__(self, msg: str):
        print(f"error: {msg}", file=sys.stderr)
        super().__init__(2)


class _Resolved:
    """Flag values with config-file fallback.

    Argparse defaults are all None so an unset flag is distinguishable
    from an explicit one; resolution order is flag, then config file,
    then the built-in default.
    """

    def __init__(self, ns: argparse.Namespace, config: dict):
        self.ns = vars(ns)
        self.config = config

    def get(self, key, default=None, required=False):
        v = self.ns.get(key)
        if v is None:
            v = self.config.get(key)
        if v is None:
            v = default
        if v is None and required:
            raise CliError(f"--{key.replace('_', '-')} is required "
                           "(flag or config file)")
        return v

    def seed(self, key: str = "seed"):
        v = self.get(key)
        if v is None:
            raise CliError(f"--{key.replace('_', '-')} is required: "
                           "this command is stochastic")
        return v


def _load_config(path) -> dict:
    if not path:
        return {}
    blob = json.loads(Path(path).read_text())
    if not isinstance(blob, dict):
        raise CliError("config file must hold a JSON object")
    return blob


def _variant(name: str) -> MetadataVariant:
    try:
        return MetadataVariant(name)
    except ValueError:
        raise CliError(
            f"unknown variant {name!r}; choose from "
            f"{[v.value for v in MetadataVariant]}"
        )


def _docs_from(corpus_path, splits_path=None, split=None):
    res = load_corpus(corpus_path)
    if res.rejected:
        print(res.summary(), file=sys.stderr)
    docs = res.docs
    if splits_path is None and split is None:
        return docs
    if splits_path is None or split is None:
        raise CliError("--splits and --split go together")
    ids = json.loads(Path(splits_path).read_text())["ids"]
    if split not in ids:
        raise CliError(f"split {split!r} not in {sorted(ids)}")
    keep = set(ids[split])
    picked = [d for d in docs if d.id in keep]
    if not picked:
        raise CliError(f"split {split!r} selected no documents")
    return picked


def _regions(spec: str) -> tuple[str, frozenset]:
    """Returns (mix kind, regions). Kind: local | global | loo-<region>."""
    if spec == "all":
        return "global", frozenset(CONTINENTS)
    if spec.startswith("loo:"):
        region = spec[4:]
        if region not in CONTINENTS:
            raise CliError(f"unknown region {region!r} in {spec!r}")
        return f"loo-{region}", frozenset(CONTINENTS) - {region}
    names = [r for r in spec.split(",") if r]
    unknown = [r for r in names if r not in CONTINENTS]
    if unknown:
        raise CliError(f"unknown regions: {unknown}")
    if len(names) == 1:
        return "local", frozenset(names)
    if frozenset(names) == frozenset(CONTINENTS):
        return "global", frozenset(CONTINENTS)
    raise CliError("--regions must be one region, 'all', or 'loo:<region>'")


def _build_stream(docs, kind: str, regions: frozenset, mix: TrainMix):
    if kind == "local":
        return build_local_mix(docs, next(iter(regions)), mix)
    if kind.startswith("loo-"):
        return build_leave_one_out(docs, kind[4:], mix)
    return build_global_mix(docs, mix)


def _model_from_ckpt(path):
    params, meta = load_checkpoint(path)
    if "model" not in meta:
        raise CliError(f"checkpoint {path} lacks a model config in its metadata")
    mcfg = ModelConfig.from_json(json.dumps(meta["model"]))
    return params, mcfg


def _int_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(int(x) for x in text)
    return tuple(int(x) for x in str(text).split(",") if x)


def _str_list(text) -> tuple:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(x for x in str(text).split(",") if x)


# --- corpus ----------------------------------------------------------------------


def _cmd_corpus_synth(r: _Resolved) -> int:
    out = Path(r.get("out", required=True))
    spec = SynthSpec(
        docs_per_region=int(r.get("docs_per_region", 500)),
        facts_per_region=int(r.get("facts_per_region", 20)),
        seed=int(r.seed()),
    )
    world = build_world(spec)
    docs = generate_documents(world)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_corpus(docs, out)
    print(f"wrote {len(docs)} documents to {out}")
    mcq_out = r.get("mcq_out")
    if mcq_out:
        n = int(r.get("mcq_questions", 40))
        records = build_planted_mcq(world, n, seed=spec.seed)
        Path(mcq_out).write_text(json.dumps(records, indent=2) + "\n")
        print(f"wrote {n} planted MCQ items to {mcq_out}")
    instr_out = r.get("instructions_out")
    if instr_out:
        n = int(r.get("instruction_pairs", 240))
        pairs = build_instruction_pairs(world, n, seed=spec.seed)
        Path(instr_out).write_text(json.dumps(pairs, indent=2) + "\n")
        print(f"wrote {n} instruction pairs to {instr_out}")
    return 0


def _cmd_corpus_validate(r: _Resolved) -> int:
    res = load_corpus(r.get("infile", required=True))
    print(res.summary())
    return 0 if not res.rejected else 1


def _cmd_corpus_split(r: _Resolved) -> int:
    docs = _docs_from(r.get("infile", required=True))
    spec = SplitSpec(
        test_docs_per_region=int(r.get("test_per_region", 1000)),
        val_docs=int(r.get("val_docs", 1000)),
        global_test_per_region=int(r.get("global_per_region", 250)),
    )
    splits = carve_splits(docs, spec, seed=int(r.seed()))
    out = Path(r.get("out", required=True))
    ids = {k: sorted(v) for k, v in splits.id_sets().items()}
    out.write_text(json.dumps({"config": spec.__dict__, "ids": ids}, indent=2) + "\n")
    sizes = {k: len(v) for k, v in ids.items()}
    print(f"wrote {out}: " + ", ".join(f"{k}={v}" for k, v in sorted(sizes.items())))
    return 0


# --- mix -------------------------------------------------------------------------


def _mix_args(r: _Resolved):
    docs = _docs_from(r.get("infile", required=True), r.get("splits"), r.get("split"))
    kind, regions = _regions(r.get("regions", required=True))
    packing = int(r.get("seq_len", 384))
    budget = r.get("budget")
    if budget is None:
        steps = int(r.get("steps", required=True))
        budget = steps * int(r.get("micro_batch", 8)) * packing
    mix = TrainMix(
        regions=regions,
        variant=_variant(r.get("variant", required=True)),
        token_budget=int(budget),
        seed=int(r.seed()),
        packing=packing,
    )
    return docs, kind, mix


def _cmd_mix_build(r: _Resolved) -> int:
    docs, kind, mix = _mix_args(r)
    stream = _build_stream(docs, kind, mix.regions, mix)
    out = Path(r.get("out", required=True))
    out.write_text(json.dumps(stream.manifest(), indent=2) + "\n")
    m = stream.manifest()
    print(f"wrote {out}: {m['docs_emitted']} docs, {m['emitted_tokens']} tokens")
    return 0


# --- train -----------------------------------------------------------------------


def _cmd_train_pretrain(r: _Resolved) -> int:
    docs, kind, mix = _mix_args(r)
    stream = _build_stream(docs, kind, mix.regions, mix)
    size = r.get("size", "1m")
    if size not in SIZE_CONFIGS:
        raise CliError(f"unknown size {size!r}; choose from {sorted(SIZE_CONFIGS)}")
    mcfg = SIZE_CONFIGS[size]
    tcfg = TrainConfig(
        total_steps=int(r.get("steps", required=True)),
        warmup_steps=int(r.get("warmup", 60)),
        lr_peak=float(r.get("lr_peak", 6e-3)),
        lr_final=float(r.get("lr_final", 6e-4)),
        micro_batch=int(r.get("micro_batch", 8)),
        seq_len=mix.packing,
        val_every=int(r.get("val_every", 200)),
        ckpt_every=int(r.get("ckpt_every", 200)),
        seed=int(r.seed()),
    )
    out = Path(r.get("out", required=True))
    res = pretrain(stream, mcfg, tcfg, out_dir=out, quiet=False)
    final = res.metrics[-1]["loss"]
    print(f"trained {tcfg.total_steps} steps, final loss {final:.4f}, "
          f"checkpoints in {out}")
    return 0


def _cmd_train_sft(r: _Resolved) -> int:
    params, mcfg = _model_from_ckpt(r.get("ckpt", required=True))
    instructions = json.loads(Path(r.get("pairs", required=True)).read_text())
    seed = int(r.seed())
    dataset = build_sft_dataset(instructions, pool=URL_POOL,
                                seed=int(r.get("data_seed", 0)))
    mode = r.get("mode", "meta")
    if mode not in ("meta", "plain"):
        raise CliError("--mode must be meta or plain")
    pairs = dataset.meta if mode == "meta" else dataset.nometa
    cfg = SftConfig(
        epochs=int(r.get("epochs", 3)),
        lr=float(r.get("lr", 2e-4)),
        lora_rank=int(r.get("rank", 16)),
        seed=seed,
    )
    out = Path(r.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    res = sft(params, mcfg, pairs, cfg)
    save_checkpoint(out / "sft.ckpt", res.params,
                    {"kind": "model", "model": json.loads(mcfg.to_json()),
                     "sft": {"mode": mode, "pairs": len(pairs), "seed": seed}})
    (out / "sft.json").write_text(json.dumps(
        {"pre_nll": res.pre_nll, "post_nll": res.post_nll,
         "pairs": len(pairs), "mode": mode}, indent=2) + "\n")
    print(f"sft: target nll {res.pre_nll:.4f} -> {res.post_nll:.4f}, "
          f"merged weights in {out / 'sft.ckpt'}")
    return 0


# --- eval ------------------------------------------------------------------------


def _cmd_eval_ppl(r: _Resolved) -> int:
    params, mcfg = _model_from_ckpt(r.get("ckpt", required=True))
    docs = _docs_from(r.get("infile", required=True), r.get("splits"), r.get("split"))
    res = perplexity(
        params, mcfg, docs, _variant(r.get("variant", required=True)),
        model_id=r.get("model_id", "model"),
        test_id=r.get("split") or "corpus",
        resamples=int(r.get("resamples", 1000)),
        seed=int(r.seed()),
    )
    out = r.get("out")
    if out:
        path = save_result(res, out)
        print(f"wrote {path}")
    print(f"ppl {res.ppl:.6f}  ci95 [{res.ci_low:.6f}, {res.ci_high:.6f}]  "
          f"docs {len(res.per_doc)}")
    return 0


def _parse_model_args(entries) -> dict:
    out = {}
    for entry in entries or []:
        if "=" not in entry:
            raise CliError(f"--model needs region=checkpoint, got {entry!r}")
        region, _, path = entry.partition("=")
        if region not in CONTINENTS:
            raise CliError(f"unknown region {region!r}")
        out[region] = path
    return out


def _cmd_eval_matrix(r: _Resolved) -> int:
    paths = _parse_model_args(r.get("model"))
    missing = [c for c in CONTINENTS if c not in paths]
    if missing:
        raise CliError(f"--model required for every region; missing {missing}")
    models, cfgs = {}, {}
    for region, path in paths.items():
        models[region], cfgs[region] = _model_from_ckpt(path)
    if len({json.dumps(json.loads(c.to_json()), sort_keys=True)
            for c in cfgs.values()}) != 1:
        raise CliError("matrix checkpoints disagree on model config")
    docs = _docs_from(r.get("infile", required=True))
    splits_path = r.get("splits", required=True)
    ids = json.loads(Path(splits_path).read_text())["ids"]
    tests = {}
    for region in CONTINENTS:
        keep = set(ids[f"test_{region}"])
        tests[region] = [d for d in docs if d.id in keep]
    variant = _variant(r.get("variant", required=True))
    seed = int(r.seed())
    matrix = cross_matrix(models, tests, variant, next(iter(cfgs.values())),
                          resamples=int(r.get("resamples", 1000)), seed=seed)
    out = Path(r.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    for cell in matrix.cells.values():
        save_result(cell, out)
    matrix.to_csv(out / "matrix.csv")
    print(f"wrote 16 cells + matrix.csv to {out}")
    return 0


def _cmd_eval_loo(r: _Resolved) -> int:
    full_params, mcfg = _model_from_ckpt(r.get("full", required=True))
    loo_paths = _parse_model_args(r.get("loo"))
    if not loo_paths:
        raise CliError("need at least one --loo region=checkpoint")
    loo_models = {}
    for region, path in loo_paths.items():
        loo_models[region], _ = _model_from_ckpt(path)
    docs = _docs_from(r.get("infile", required=True))
    ids = json.loads(Path(r.get("splits", required=True)).read_text())["ids"]
    tests = {}
    for region in loo_models:
        keep = set(ids[f"test_{region}"])
        tests[region] = [d for d in docs if d.id in keep]
    keep = set(ids["global_test"])
    tests["global"] = [d for d in docs if d.id in keep]
    records = leave_one_out_deltas(
        loo_models, full_params, tests,
        _variant(r.get("variant", required=True)), mcfg,
        resamples=int(r.get("resamples", 1000)), seed=int(r.seed()),
    )
    out = Path(r.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    (out / "loo.json").write_text(json.dumps(records, indent=2, default=list) + "\n")
    for rec in records:
        print(f"excluded {rec['excluded']}: heldout delta {rec['delta_heldout']:+.4f}, "
              f"global delta {rec['delta_global']:+.4f}")
    return 0


# --- bench -----------------------------------------------------------------------


def _cmd_bench_run(r: _Resolved) -> int:
    params, mcfg = _model_from_ckpt(r.get("ckpt", required=True))
    loaded = load_benchmark(r.get("items", required=True))
    if loaded.errors:
        raise CliError(f"benchmark file invalid: {loaded.errors[:3]}")
    mode = r.get("mode", "meta")
    if mode not in ("meta", "plain"):
        raise CliError("--mode must be meta or plain")
    out = Path(r.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    gen = GenConfig(
        max_new_tokens=int(r.get("max_new_tokens", 24)),
        temperature=float(r.get("temperature", 0.6)),
        top_p=float(r.get("top_p", 0.9)),
        stop_ids=(EOS_ID,),
    )
    model_id = r.get("model_id", "model")
    rep = evaluate_mcq(
        params, mcfg, loaded.items,
        with_metadata=(mode == "meta"),
        model_id=model_id,
        pool=URL_POOL,
        gen=gen,
        seed=int(r.seed()),
        transcript_path=out / f"{model_id}.transcripts.jsonl",
    )
    save_report(rep, out)
    lo, hi = rep.micro_ci()
    print(f"micro accuracy {rep.micro_accuracy():.4f}  ci95 [{lo:.4f}, {hi:.4f}]  "
          f"({len(loaded.items)} items x {len(URL_POOL)} urls)")
    return 0


def _cmd_bench_intersect(r: _Resolved) -> int:
    report_paths = r.get("report")
    if not report_paths:
        raise CliError("need at least one --report file")
    reports = [report_from_dict(json.loads(Path(p).read_text()))
               for p in report_paths]
    restricted = answered_by_all(reports)
    out = Path(r.get("out", required=True))
    out.mkdir(parents=True, exist_ok=True)
    for rep in restricted:
        rep2 = replace(rep, model_id=rep.model_id + ".intersect")
        save_report(rep2, out)
        print(f"{rep.model_id}: micro accuracy on intersection "
              f"{rep2.micro_accuracy():.4f}")
    return 0


# --- plan ------------------------------------------------------------------------


def _desk_config(r: _Resolved) -> DeskConfig:
    return DeskConfig(
        docs_per_region=int(r.get("docs_per_region", 700)),
        facts_per_region=int(r.get("facts_per_region", 20)),
        corpus_seed=int(r.get("corpus_seed", 0)),
        test_docs_per_region=int(r.get("test_per_region", 150)),
        val_docs=int(r.get("val_docs", 60)),
        global_test_per_region=int(r.get("global_per_region", 25)),
        sizes=_str_list(r.get("sizes", "1m")),
        seeds=_int_list(r.seed("seeds")),
        total_steps=int(r.get("steps", 400)),
        warmup_steps=int(r.get("warmup", 60)),
        lr_peak=float(r.get("lr_peak", 6e-3)),
        lr_final=float(r.get("lr_final", 6e-4)),
        micro_batch=int(r.get("micro_batch", 8)),
        seq_len=int(r.get("seq_len", 384)),
        mix_seed=int(r.get("mix_seed", 0)),
        resamples=int(r.get("resamples", 1000)),
        eval_seed=int(r.get("eval_seed", 0)),
        sft_pairs=int(r.get("sft_pairs", 240)),
        sft_epochs=int(r.get("sft_epochs", 3)),
        sft_lr=float(r.get("sft_lr", 2e-4)),
        mcq_questions=int(r.get("mcq_questions", 40)),
        max_new_tokens=int(r.get("max_new_tokens", 24)),
        temperature=float(r.get("temperature", 0.6)),
        top_p=float(r.get("top_p", 0.9)),
    )


def _cmd_plan_run(r: _Resolved) -> int:
    experiment = r.get("experiment", required=True)
    if experiment not in EXPERIMENTS:
        raise CliError(f"unknown experiment {experiment!r}; "
                       f"choose from {list(EXPERIMENTS)}")
    plan = ExperimentPlan(experiment, str(r.get("root", required=True)),
                          _desk_config(r))
    root = run_plan(plan, progress=True)
    print(f"plan {experiment} complete under {root}")
    return 0


def _cmd_plan_report(r: _Resolved) -> int:
    summary = plan_report(r.get("root", required=True), r.get("experiment"))
    if "experiment" in summary:
        summary = {summary["experiment"]: summary}
    for exp, s in sorted(summary.items()):
        state = "partial" if s.get("partial") else "complete"
        print(f"{exp}: {state}, report under reports/{exp}/")
    return 0


# --- parser ----------------------------------------------------------------------


def _add(parser, *names, **kw):
    kw.setdefault("default", None)
    parser.add_argument(*names, **kw)


def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(
        prog="localm",
        description="desk-scale metadata-conditioned LM experiments",
    )
    top.add_argument("--config", default=None,
                     help="JSON file supplying defaults for any flag")
    sub = top.add_subparsers(dest="command", required=True)

    corpus = sub.add_parser("corpus", help="synthetic corpus tools")
    csub = corpus.add_subparsers(dest="subcommand", required=True)
    p = csub.add_parser("synth", help="generate the planted-fact corpus")
    _add(p, "--out")
    _add(p, "--docs-per-region", type=int)
    _add(p, "--facts-per-region", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--mcq-out")
    _add(p, "--mcq-questions", type=int)
    _add(p, "--instructions-out")
    _add(p, "--instruction-pairs", type=int)
    p.set_defaults(func=_cmd_corpus_synth)
    p = csub.add_parser("validate", help="validate a JSONL corpus")
    _add(p, "--in", dest="infile")
    p.set_defaults(func=_cmd_corpus_validate)
    p = csub.add_parser("split", help="carve train/val/test splits")
    _add(p, "--in", dest="infile")
    _add(p, "--out")
    _add(p, "--test-per-region", type=int)
    _add(p, "--val-docs", type=int)
    _add(p, "--global-per-region", type=int)
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_corpus_split)

    mix = sub.add_parser("mix", help="token-budget mixes")
    msub = mix.add_subparsers(dest="subcommand", required=True)
    p = msub.add_parser("build", help="resolve a mix and write its manifest")
    _add(p, "--in", dest="infile")
    _add(p, "--splits")
    _add(p, "--split")
    _add(p, "--regions", help="one region, 'all', or 'loo:<region>'")
    _add(p, "--variant")
    _add(p, "--budget", type=int)
    _add(p, "--steps", type=int)
    _add(p, "--micro-batch", type=int)
    _add(p, "--seq-len", type=int)
    _add(p, "--seed", type=int)
    _add(p, "--out")
    p.set_defaults(func=_cmd_mix_build)

    train = sub.add_parser("train", help="pretraining and SFT")
    tsub = train.add_subparsers(dest="subcommand", required=True)
    p = tsub.add_parser("pretrain", help="train from scratch on a mix")
    for flag, typ in [("--in", None), ("--splits", None), ("--split", None),
                      ("--regions", None), ("--variant", None),
                      ("--budget", int), ("--steps", int),
                      ("--micro-batch", int), ("--seq-len", int),
                      ("--warmup", int), ("--lr-peak", float),
                      ("--lr-final", float), ("--val-every", int),
                      ("--ckpt-every", int), ("--size", None),
                      ("--out", None), ("--seed", int)]:
        dest = "infile" if flag == "--in" else None
        kw = {"type": typ} if typ else {}
        if dest:
            kw["dest"] = dest
        _add(p, flag, **kw)
    p.set_defaults(func=_cmd_train_pretrain)
    p = tsub.add_parser("sft", help="LoRA instruction tuning")
    _add(p, "--ckpt")
    _add(p, "--pairs")
    _add(p, "--mode", help="meta or plain prompt rendering")
    _add(p, "--data-seed", type=int)
    _add(p, "--epochs", type=int)
    _add(p, "--lr", type=float)
    _add(p, "--rank", type=int)
    _add(p, "--out")
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_train_sft)

    ev = sub.add_parser("eval", help="perplexity evaluation")
    esub = ev.add_subparsers(dest="subcommand", required=True)
    p = esub.add_parser("ppl", help="masked perplexity of one model")
    _add(p, "--ckpt")
    _add(p, "--in", dest="infile")
    _add(p, "--splits")
    _add(p, "--split")
    _add(p, "--variant")
    _add(p, "--model-id")
    _add(p, "--resamples", type=int)
    _add(p, "--out")
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_eval_ppl)
    p = esub.add_parser("matrix", help="4x4 cross-region grid")
    _add(p, "--model", action="append", help="region=checkpoint, four times")
    _add(p, "--in", dest="infile")
    _add(p, "--splits")
    _add(p, "--variant")
    _add(p, "--resamples", type=int)
    _add(p, "--out")
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_eval_matrix)
    p = esub.add_parser("loo", help="leave-one-out deltas")
    _add(p, "--full", help="full global model checkpoint")
    _add(p, "--loo", action="append", help="region=checkpoint")
    _add(p, "--in", dest="infile")
    _add(p, "--splits")
    _add(p, "--variant")
    _add(p, "--resamples", type=int)
    _add(p, "--out")
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_eval_loo)

    bench = sub.add_parser("bench", help="MCQ benchmark")
    bsub = bench.add_subparsers(dest="subcommand", required=True)
    p = bsub.add_parser("run", help="generate answers over the URL pool")
    _add(p, "--ckpt")
    _add(p, "--items")
    _add(p, "--mode", help="meta or plain prompts")
    _add(p, "--model-id")
    _add(p, "--max-new-tokens", type=int)
    _add(p, "--temperature", type=float)
    _add(p, "--top-p", type=float)
    _add(p, "--out")
    _add(p, "--seed", type=int)
    p.set_defaults(func=_cmd_bench_run)
    p = bsub.add_parser("intersect", help="answered-by-all restriction")
    _add(p, "--report", action="append", help="saved .bench.json, repeatable")
    _add(p, "--out")
    p.set_defaults(func=_cmd_bench_intersect)

    plan = sub.add_parser("plan", help="experiment orchestration")
    psub = plan.add_subparsers(dest="subcommand", required=True)
    p = psub.add_parser("run", help="materialize one experiment plan")
    _add(p, "--experiment", help=f"one of {list(EXPERIMENTS)}")
    _add(p, "--root")
    _add(p, "--seeds", help="comma-separated training seeds")
    _add(p, "--sizes", help="comma-separated size tags")
    for flag, typ in [("--docs-per-region", int), ("--facts-per-region", int),
                      ("--corpus-seed", int), ("--test-per-region", int),
                      ("--val-docs", int), ("--global-per-region", int),
                      ("--steps", int), ("--warmup", int),
                      ("--lr-peak", float), ("--lr-final", float),
                      ("--micro-batch", int), ("--seq-len", int),
                      ("--mix-seed", int), ("--resamples", int),
                      ("--eval-seed", int), ("--sft-pairs", int),
                      ("--sft-epochs", int), ("--sft-lr", float),
                      ("--mcq-questions", int), ("--max-new-tokens", int),
                      ("--temperature", float), ("--top-p", float)]:
        _add(p, flag, type=typ)
    p.set_defaults(func=_cmd_plan_run)
    p = psub.add_parser("report", help="rebuild consolidated reports")
    _add(p, "--root")
    _add(p, "--experiment")
    p.set_defaults(func=_cmd_plan_report)

    return top


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    config = _load_config(ns.config)
    try:
        return ns.func(_Resolved(ns, config))
    except CliError:
        raise
    except (PlanError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
