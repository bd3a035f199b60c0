"""Synthesize a geographic corpus and render it under each metadata variant.

Run: python demos/01_corpus_and_variants.py
"""

import tempfile
from pathlib import Path

from localm.corpus import SplitSpec, carve_splits, load_corpus, write_corpus
from localm.synth import SynthSpec, build_world, generate_documents
from localm.textformat import MetadataVariant, render_document

# A "world" fixes the facts: each region gets statements that only appear in
# documents from that region, so a model can only learn them from there.
spec = SynthSpec(docs_per_region=40, facts_per_region=8, seed=0)
world = build_world(spec)
docs = generate_documents(world)

print(f"{len(docs)} documents over 4 regions")
print("sample region-exclusive facts (Asia):")
for sub, obj in world.exclusive_facts["Asia"][:3]:
    print(f"   {sub} -> {obj}")

# The same document, five ways. The metadata prefix is what the model gets
# to condition on; the body is identical in every variant.
doc = docs[0]
print(f"\n--- {doc.id} ({doc.country}, {doc.continent}) ---")
for variant in MetadataVariant:
    r = render_document(doc, variant)
    prefix = r.text[: r.metadata_char_len].rstrip("\n")
    shown = prefix if prefix else "(no metadata prefix)"
    print(f"{variant.value:>13}: {shown!r}")

body = render_document(doc, MetadataVariant.FULL)
print("\nbody starts:", body.text[body.metadata_char_len:][:80], "...")

# Round-trip through the JSONL format and carve held-out splits.
with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "corpus.jsonl"
    write_corpus(docs, path)
    back = load_corpus(path)
    assert [d.id for d in back.docs] == [d.id for d in docs]
    print(f"\nround trip ok: {len(back.docs)} docs, {len(back.rejected)} rejected")

splits = carve_splits(docs, SplitSpec(test_docs_per_region=6, val_docs=8,
                                      global_test_per_region=2), seed=1)
ids = splits.id_sets()
print("splits:", {k: len(v) for k, v in ids.items()})
