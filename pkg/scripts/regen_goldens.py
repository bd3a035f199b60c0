#!/usr/bin/env python3
"""Regenerate the formatting golden files under tests/goldens/.

Run from the repo root after a deliberate change to textformat, then
inspect `git diff tests/goldens` before committing. Tests compare against
these files byte for byte.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(ROOT / "tests"))

from localm.textformat import (  # noqa: E402
    MetadataVariant,
    render_document,
    render_eval_prompt,
    render_sft_example,
)
from util import FIXTURE_DOCS  # noqa: E402


class _Q:
    question = "Which river is longest?"
    options = ("Nile", "Amazon", "Yangtze", "Mississippi")


def main():
    out = ROOT / "tests" / "goldens" / "render"
    out.mkdir(parents=True, exist_ok=True)
    spans = {}
    for doc in FIXTURE_DOCS:
        for variant in MetadataVariant:
            r = render_document(doc, variant)
            name = f"{doc.id}_{variant.value}.txt"
            (out / name).write_bytes(r.text.encode("utf-8"))
            spans[name] = r.metadata_char_len
    (out / "spans.json").write_text(json.dumps(spans, indent=2, sort_keys=True) + "\n")

    prompts = ROOT / "tests" / "goldens" / "prompts"
    prompts.mkdir(parents=True, exist_ok=True)
    sft_meta = render_sft_example(
        "Answer the multiple-choice question.",
        "Question: Which planet is largest?\n\nOptions:\nA: Mars\nB: Jupiter\nC: Venus\nD: Pluto\n\nAnswer with the correct option.",
        "Jupiter",
        {"base_url": "www.factquizmaster.com", "country": "Canada", "continent": "America"},
    )
    sft_plain = render_sft_example(
        "Complete the sentence.", "Water boils at", "one hundred degrees Celsius.", None
    )
    (prompts / "sft_meta.txt").write_bytes((sft_meta.prompt + sft_meta.target).encode())
    (prompts / "sft_nometa.txt").write_bytes((sft_plain.prompt + sft_plain.target).encode())
    eval_meta = render_eval_prompt(
        _Q, {"base_url": "www.globalfactcheck.org", "country_code": "Kenya", "continent": "Africa"}
    )
    eval_plain = render_eval_prompt(_Q, None)
    (prompts / "eval_meta.txt").write_bytes(eval_meta.encode())
    (prompts / "eval_nometa.txt").write_bytes(eval_plain.encode())
    n = 30 + 4
    print(f"wrote {n} golden files under {out.parent}")


if __name__ == "__main__":
    main()
