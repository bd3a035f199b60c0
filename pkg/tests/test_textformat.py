"""Formatting golden suite plus span/variant unit checks."""

import json
import time
from pathlib import Path

import pytest

from localm.textformat import (
    MetadataVariant,
    render_document,
    render_eval_prompt,
    render_sft_example,
)
from util import FIXTURE_DOCS

GOLDEN = Path(__file__).parent / "goldens"


def test_render_goldens_byte_exact():
    t0 = time.time()
    spans = json.loads((GOLDEN / "render" / "spans.json").read_text())
    checked = 0
    for doc in FIXTURE_DOCS:
        for variant in MetadataVariant:
            r = render_document(doc, variant)
            name = f"{doc.id}_{variant.value}.txt"
            want = (GOLDEN / "render" / name).read_bytes()
            assert r.text.encode("utf-8") == want, f"render drift in {name}"
            assert r.metadata_char_len == spans[name]
            checked += 1
    assert checked == 30  # 5 variants x 6 fixture docs
    assert time.time() - t0 < 1.0


def test_prompt_goldens_byte_exact():
    sft_meta = render_sft_example(
        "Answer the multiple-choice question.",
        "Question: Which planet is largest?\n\nOptions:\nA: Mars\nB: Jupiter\nC: Venus\nD: Pluto\n\nAnswer with the correct option.",
        "Jupiter",
        {"base_url": "www.factquizmaster.com", "country": "Canada", "continent": "America"},
    )
    assert (sft_meta.prompt + sft_meta.target).encode() == (
        GOLDEN / "prompts" / "sft_meta.txt"
    ).read_bytes()

    sft_plain = render_sft_example(
        "Complete the sentence.", "Water boils at", "one hundred degrees Celsius.", None
    )
    assert (sft_plain.prompt + sft_plain.target).encode() == (
        GOLDEN / "prompts" / "sft_nometa.txt"
    ).read_bytes()

    class Q:
        question = "Which river is longest?"
        options = ("Nile", "Amazon", "Yangtze", "Mississippi")

    got = render_eval_prompt(
        Q, {"base_url": "www.globalfactcheck.org", "country_code": "Kenya", "continent": "Africa"}
    )
    assert got.encode() == (GOLDEN / "prompts" / "eval_meta.txt").read_bytes()
    got_plain = render_eval_prompt(Q, None)
    assert got_plain.encode() == (GOLDEN / "prompts" / "eval_nometa.txt").read_bytes()


def test_metadata_prefix_is_exactly_the_span():
    doc = FIXTURE_DOCS[0]
    for variant in MetadataVariant:
        r = render_document(doc, variant)
        prefix = r.text[: r.metadata_char_len]
        body = r.text[r.metadata_char_len :]
        if variant is MetadataVariant.NOMETA:
            assert prefix == ""
        else:
            assert prefix.endswith("\n")
            assert "URL: " in prefix
        assert body.startswith("TITLE: ")
        assert doc.content in body


def test_variant_field_selection():
    doc = FIXTURE_DOCS[1]
    cases = {
        MetadataVariant.NOMETA: (False, False, False),
        MetadataVariant.URL_ONLY: (True, False, False),
        MetadataVariant.URL_COUNTRY: (True, True, False),
        MetadataVariant.URL_CONTINENT: (True, False, True),
        MetadataVariant.FULL: (True, True, True),
    }
    for variant, (has_url, has_country, has_continent) in cases.items():
        text = render_document(doc, variant).text
        assert ("URL: " in text) == has_url
        assert ("COUNTRY: " in text) == has_country
        assert ("CONTINENT: " in text) == has_continent


def test_variant_parse_round_trip():
    for variant in MetadataVariant:
        assert MetadataVariant.parse(variant.value) is variant
    with pytest.raises(ValueError):
        MetadataVariant.parse("url_planet")


def test_eval_prompt_requires_four_options():
    class Q:
        question = "?"
        options = ("x", "y", "z")

    with pytest.raises(ValueError):
        render_eval_prompt(Q, None)
