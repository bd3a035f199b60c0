"""Synthetic world invariants: disjoint vocabularies, determinism, planted facts."""

import numpy as np
import pytest

from localm.corpus import CONTINENTS, CONTINENT_TO_COUNTRIES, COUNTRY_TO_CONTINENT
from localm.synth import (
    SynthSpec,
    build_instruction_pairs,
    build_planted_mcq,
    build_world,
    generate_documents,
    generate_synthetic_corpus,
)

SPEC = SynthSpec(docs_per_region=30, facts_per_region=6, seed=42)


@pytest.fixture(scope="module")
def world():
    return build_world(SPEC)


@pytest.fixture(scope="module")
def docs(world):
    return generate_documents(world)


def test_world_is_deterministic(world):
    again = build_world(SynthSpec(docs_per_region=30, facts_per_region=6, seed=42))
    assert again.exclusive_facts == world.exclusive_facts
    assert again.continent_keyed == world.continent_keyed
    assert again.country_keyed == world.country_keyed
    assert again.neutral_facts == world.neutral_facts
    other = build_world(SynthSpec(docs_per_region=30, facts_per_region=6, seed=43))
    assert other.exclusive_facts != world.exclusive_facts


def _all_words(world):
    words = []
    for c in CONTINENTS:
        words.extend(world.filler_nouns[c])
        for s, o in world.exclusive_facts[c]:
            words.extend([s, o])
    for s, objs in world.continent_keyed:
        words.append(s)
        words.extend(objs.values())
    for s, objs in world.country_keyed:
        words.append(s)
        words.extend(objs.values())
    for s, o in world.neutral_facts:
        words.extend([s, o])
    return words


def test_no_word_is_substring_of_another(world):
    words = _all_words(world)
    assert len(words) == len(set(words))
    for i, a in enumerate(words):
        for j, b in enumerate(words):
            if i != j:
                assert a not in b, (a, b)


def test_region_vocabularies_are_disjoint(world):
    per_region = {c: world.planted_fact_strings(c) for c in CONTINENTS}
    for a in CONTINENTS:
        for b in CONTINENTS:
            if a != b:
                assert not (per_region[a] & per_region[b])


def test_corpus_shape_and_fields(docs):
    assert len(docs) == 4 * SPEC.docs_per_region
    for d in docs:
        assert COUNTRY_TO_CONTINENT[d.country] == d.continent
        assert d.url.startswith("www.")
        assert 2010 <= d.year <= 2024
        assert d.content and d.title
    counts = {c: sum(1 for d in docs if d.continent == c) for c in CONTINENTS}
    assert all(v == SPEC.docs_per_region for v in counts.values())


def test_documents_plant_region_facts(world, docs):
    for d in docs[:40]:
        planted = world.planted_fact_strings(d.continent)
        hits = [w for w in planted if w in d.content]
        assert hits, f"document {d.id} contains no planted strings"
        # no other region's exclusive vocabulary leaks in
        for other in CONTINENTS:
            if other != d.continent:
                for w in world.planted_fact_strings(other):
                    assert w not in d.content, (d.id, other, w)


def test_url_slug_names_the_lead_fact(world, docs):
    for d in docs[:40]:
        slug = d.url.split("/")[-1]
        subs = [s for s, o in world.exclusive_facts[d.continent] if s in slug]
        assert subs, f"no exclusive subject in slug {slug!r}"
        sub = subs[0]
        obj = dict(world.exclusive_facts[d.continent])[sub]
        assert obj in slug
        assert sub in d.content and obj in d.content


def test_generate_matches_build_world_path():
    direct = generate_synthetic_corpus(SPEC)
    assert [d.id for d in direct] == [d.id for d in generate_documents(build_world(SPEC))]
    assert direct[0].content == generate_documents(build_world(SPEC))[0].content


def test_instruction_pairs_are_neutral_only(world):
    pairs = build_instruction_pairs(world, 60, seed=7)
    assert len(pairs) == 60
    regional = set()
    for c in CONTINENTS:
        regional |= world.planted_fact_strings(c)
    for p in pairs:
        assert set(p) == {"instruction", "input", "output"}
        blob = " ".join(p.values())
        leaked = [w for w in regional if w in blob]
        assert not leaked, f"regional words leaked into SFT pair: {leaked}"
    # deterministic
    again = build_instruction_pairs(world, 60, seed=7)
    assert again == pairs


def test_planted_mcq_records_are_valid(world):
    recs = build_planted_mcq(world, 40, seed=5)
    assert len(recs) == 40
    per_cont = {c: 0 for c in CONTINENTS}
    for r in recs:
        per_cont[r["continent"]] += 1
        assert len(r["options"]) == 4 and len(set(r["options"])) == 4
        assert r["correct_answer"] in r["options"]
        rest = [o for o in r["options"] if o != r["correct_answer"]]
        assert sorted(rest) == sorted(r["distractors"])
        assert COUNTRY_TO_CONTINENT[r["country"]] == r["continent"]
    assert all(v == 10 for v in per_cont.values())
    with pytest.raises(ValueError):
        build_planted_mcq(world, 41, seed=5)


def test_planted_mcq_answer_is_region_keyed(world):
    recs = build_planted_mcq(world, 40, seed=5)
    for r in recs:
        # the correct option is vocabulary of the item's own region; the
        # distractors come from other regions, so metadata disambiguates
        assert r["correct_answer"] in world.planted_fact_strings(r["continent"])
        for d in r["distractors"]:
            assert d not in world.planted_fact_strings(r["continent"])
