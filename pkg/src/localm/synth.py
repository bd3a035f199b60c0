"""Synthetic planted-fact corpus for desk-scale localization experiments.

Real regional signal is replaced by a constructed world whose facts are
keyed to geography in three ways:

* exclusive facts: subject and object words appear in one continent only
  (the per-continent vocabularies are fully disjoint);
* continent-keyed facts: a shared subject whose object differs per
  continent, so the answer is ambiguous without a region signal;
* country-keyed facts: a shared subject whose object differs per country.

On top of those, neutral facts hold globally (same subject and object
everywhere); they carry no regional information and are what the synthetic
instruction-tuning data quizzes on, keeping SFT free of regional leakage.

Document URLs embed the country slug and the lead fact's words, so
conditioning on the URL reveals both the region and the document topic,
mirroring how real news URLs carry domains and headline slugs.

Everything is a pure function of the generation spec and seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import CONTINENTS, CONTINENT_TO_COUNTRIES, Document

# Region-distinct syllable inventories. Words are syllable concatenations;
# build_world additionally enforces that no generated word is a substring of
# any other, which keeps answer extraction by text match unambiguous.
_SYLLABLES = {
    "Africa": ["za", "mbo", "ku", "nga", "twe", "lu", "ba", "sha", "yo", "nde"],
    "America": ["ro", "ka", "den", "ver", "tis", "mon", "cal", "bri", "hu", "pex"],
    "Asia": ["shi", "ran", "ji", "pok", "mei", "tan", "go", "ze", "kir", "ula"],
    "Europe": ["vel", "gry", "ost", "fen", "dra", "il", "bur", "ske", "ny", "thu"],
    "neutral": ["pel", "dor", "mi", "sta", "ren", "fo", "lis", "gar", "nu", "vex"],
}

_PUBLISHERS = ("daily", "herald", "times", "post", "gazette")


@dataclass(frozen=True)
class SynthSpec:
    docs_per_region: int = 500
    facts_per_region: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.docs_per_region < 10:
            raise ValueError("docs_per_region must be >= 10")
        if self.facts_per_region < 1:
            raise ValueError("facts_per_region must be >= 1")


@dataclass
class SyntheticWorld:
    """Ground-truth fact tables behind a synthetic corpus."""

    spec: SynthSpec
    filler_nouns: dict[str, list[str]]  # continent -> nouns
    exclusive_facts: dict[str, list[tuple[str, str]]]  # continent -> (subject, object)
    continent_keyed: list[tuple[str, dict[str, str]]]  # (subject, {continent: object})
    country_keyed: list[tuple[str, dict[str, str]]]  # (subject, {country: object})
    neutral_facts: list[tuple[str, str]] = field(default_factory=list)

    def planted_fact_strings(self, continent: str) -> set[str]:
        """All region-exclusive strings for one continent."""
        out: set[str] = set(self.filler_nouns[continent])
        for sub, obj in self.exclusive_facts[continent]:
            out.add(sub)
            out.add(obj)
        for _, objs in self.continent_keyed:
            out.add(objs[continent])
        for _, objs in self.country_keyed:
            for country in CONTINENT_TO_COUNTRIES[continent]:
                out.add(objs[country])
        return out


def _make_words(rng: np.random.Generator, syllables: list[str], count: int,
                taken: set[str], n_syll: int = 2) -> list[str]:
    """Draw distinct words that are not substrings of any existing word."""
    words: list[str] = []
    while len(words) < count:
        parts = [syllables[rng.integers(len(syllables))] for _ in range(n_syll)]
        w = "".join(parts)
        if len(w) < 4:
            continue
        if any(w in t or t in w for t in taken):
            continue
        taken.add(w)
        words.append(w)
    return words


def build_world(spec: SynthSpec) -> SyntheticWorld:
    rng = np.random.default_rng([spec.seed, 0xFAC7])
    taken: set[str] = set()

    filler = {c: _make_words(rng, _SYLLABLES[c], 10, taken) for c in CONTINENTS}
    exclusive = {}
    for c in CONTINENTS:
        words = _make_words(rng, _SYLLABLES[c], 2 * spec.facts_per_region, taken)
        exclusive[c] = list(zip(words[::2], words[1::2]))

    n_cont = max(6, spec.facts_per_region // 2)
    cont_subjects = _make_words(rng, _SYLLABLES["neutral"], n_cont, taken, n_syll=3)
    continent_keyed = []
    for sub in cont_subjects:
        objs = {c: _make_words(rng, _SYLLABLES[c], 1, taken)[0] for c in CONTINENTS}
        continent_keyed.append((sub, objs))

    n_country = max(4, spec.facts_per_region // 4)
    country_subjects = _make_words(rng, _SYLLABLES["neutral"], n_country, taken, n_syll=3)
    country_keyed = []
    for sub in country_subjects:
        objs = {}
        for c in CONTINENTS:
            for country in CONTINENT_TO_COUNTRIES[c]:
                objs[country] = _make_words(rng, _SYLLABLES[c], 1, taken)[0]
        country_keyed.append((sub, objs))

    n_neutral = max(8, spec.facts_per_region // 2)
    neutral_words = _make_words(rng, _SYLLABLES["neutral"], 2 * n_neutral, taken, n_syll=3)
    neutral_facts = list(zip(neutral_words[::2], neutral_words[1::2]))

    return SyntheticWorld(
        spec=spec,
        filler_nouns=filler,
        exclusive_facts=exclusive,
        continent_keyed=continent_keyed,
        country_keyed=country_keyed,
        neutral_facts=neutral_facts,
    )


def _country_slug(country: str) -> str:
    return country.lower().replace(" ", "-")


def _make_document(world: SyntheticWorld, continent: str, index: int,
                   rng: np.random.Generator) -> Document:
    countries = CONTINENT_TO_COUNTRIES[continent]
    country = countries[rng.integers(len(countries))]
    year = int(rng.integers(2010, 2025))

    sub_x, obj_x = world.exclusive_facts[continent][
        rng.integers(len(world.exclusive_facts[continent]))
    ]
    csub, cobjs = world.continent_keyed[rng.integers(len(world.continent_keyed))]
    # two country-keyed slots with distinct subjects: without metadata the
    # object is ambiguous among the region's countries, which is the signal
    # the conditioned models get to resolve
    ka, kb = rng.choice(len(world.country_keyed), size=2, replace=False)
    nsub_a, nobjs_a = world.country_keyed[ka]
    nsub_b, nobjs_b = world.country_keyed[kb]

    # Lead sentence carries the exclusive fact named in the URL slug; the
    # keyed sentences are shuffled for mild variety. Deliberately no filler
    # or neutral sentences: they only add variance shared by every model.
    lead = f"The {sub_x} council honoured {obj_x}."
    middle = [
        f"This season the {csub} is {cobjs[continent]}.",
        f"In this land the {nsub_a} remains {nobjs_a[country]}.",
        f"Most residents say the {nsub_b} favours {nobjs_b[country]}.",
    ]
    rng.shuffle(middle)
    content = " ".join([lead, *middle])

    publisher = _PUBLISHERS[rng.integers(len(_PUBLISHERS))]
    url = f"www.{_country_slug(country)}-{publisher}.com/{year}/{sub_x}-{obj_x}-{index:05d}"
    title = f"Report on the {sub_x}"

    return Document(
        id=f"{continent[:2].lower()}-{index:05d}",
        url=url,
        country=country,
        continent=continent,
        year=year,
        title=title,
        content=content,
    )


def generate_synthetic_corpus(spec: SynthSpec) -> list[Document]:
    """Deterministic planted-fact corpus: docs_per_region documents per continent."""
    world = build_world(spec)
    return generate_documents(world)


def generate_documents(world: SyntheticWorld) -> list[Document]:
    spec = world.spec
    docs: list[Document] = []
    index = 0
    for continent in CONTINENTS:
        rng = np.random.default_rng([spec.seed, 0xD0C5, CONTINENTS.index(continent)])
        for _ in range(spec.docs_per_region):
            docs.append(_make_document(world, continent, index, rng))
            index += 1
    return docs


# --- synthetic instruction data and planted-fact MCQs -----------------------


def build_instruction_pairs(world: SyntheticWorld, n: int, seed: int) -> list[dict]:
    """Synthetic instruction/input/output triples for SFT.

    Quizzes only the region-neutral facts, so instruction tuning teaches the
    answer format without touching regional knowledge. Roughly 60% MCQ
    practice, 20% sentence completion, 20% copy tasks.
    """
    rng = np.random.default_rng([seed, 0x5F7])
    facts = world.neutral_facts
    words = [w for pair in facts for w in pair]
    pairs: list[dict] = []
    letters = "ABCD"
    for i in range(n):
        kind = rng.random()
        gsub, gobj = facts[rng.integers(len(facts))]
        if kind < 0.6:
            distractor_pool = [o for _, o in facts if o != gobj]
            picks = rng.permutation(len(distractor_pool))[:3]
            options = [gobj] + [distractor_pool[p] for p in picks]
            rng.shuffle(options)
            option_block = "\n".join(
                f"{letters[j]}: {opt}" for j, opt in enumerate(options)
            )
            pairs.append(
                {
                    "instruction": "Answer the multiple-choice question.",
                    "input": (
                        f"Question: What is the {gsub}?\n"
                        "\n"
                        "Options:\n"
                        f"{option_block}\n"
                        "\n"
                        "Answer with the correct option."
                    ),
                    "output": gobj,
                }
            )
        elif kind < 0.8:
            pairs.append(
                {
                    "instruction": "Complete the sentence.",
                    "input": f"Everyone agrees the {gsub} is",
                    "output": gobj + ".",
                }
            )
        else:
            w = words[rng.integers(len(words))]
            pairs.append(
                {
                    "instruction": "Repeat the word.",
                    "input": w,
                    "output": w,
                }
            )
    return pairs


def build_planted_mcq(world: SyntheticWorld, n: int, seed: int) -> list[dict]:
    """Planted-fact MCQ items (raw benchmark records, n/4 per continent).

    Continent-keyed questions use the four continents' objects as options;
    country-keyed questions use the item's country plus three countries from
    other continents, so the metadata header disambiguates the answer.
    """
    if n % 4 != 0:
        raise ValueError("question count must be divisible by 4")
    rng = np.random.default_rng([seed, 0x3C0])
    per_region = n // 4
    items: list[dict] = []
    for continent in CONTINENTS:
        countries = CONTINENT_TO_COUNTRIES[continent]
        for i in range(per_region):
            country = countries[rng.integers(len(countries))]
            if i % 2 == 0 or not world.country_keyed:
                sub, objs = world.continent_keyed[rng.integers(len(world.continent_keyed))]
                correct = objs[continent]
                distractors = [objs[c] for c in CONTINENTS if c != continent]
                question = f"What is the {sub} this season?"
            else:
                sub, objs = world.country_keyed[rng.integers(len(world.country_keyed))]
                correct = objs[country]
                other = [
                    c
                    for cont in CONTINENTS
                    if cont != continent
                    for c in CONTINENT_TO_COUNTRIES[cont]
                ]
                picks = rng.permutation(len(other))[:3]
                distractors = [objs[other[p]] for p in picks]
                question = f"What is the {sub} in this country?"
            options = [correct] + distractors
            order = rng.permutation(4)
            options = [options[j] for j in order]
            items.append(
                {
                    "question": question,
                    "options": options,
                    "correct_answer": correct,
                    "distractors": distractors,
                    "country": country,
                    "continent": continent,
                }
            )
    return items
