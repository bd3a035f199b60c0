"""Render documents and prompts with geographic metadata prefixes.

The training layout puts one metadata field per line (URL, COUNTRY,
CONTINENT, in that fixed order), a blank line, then the body:

    URL: news.com/jp/article/12345
    COUNTRY: Japan
    CONTINENT: Asia

    TITLE: Election results spark debate
    CONTENT: The recent election results ...

The TITLE/CONTENT labels belong to the body and appear under every variant,
including the no-metadata control; only the URL/COUNTRY/CONTINENT lines plus
the blank line that follows them count as the metadata prefix. That prefix
is what downstream loss masking excludes, so `metadata_char_len` must cover
exactly those bytes and nothing else: stripping the prefix from any variant
yields the no-metadata render byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum


class MetadataVariant(Enum):
    """Which metadata lines are prepended to a document."""

    NOMETA = "nometa"
    URL_ONLY = "url"
    URL_COUNTRY = "url_country"
    URL_CONTINENT = "url_continent"
    FULL = "full"

    @property
    def fields(self) -> tuple[str, ...]:
        return _VARIANT_FIELDS[self]

    @classmethod
    def parse(cls, name: str) -> "MetadataVariant":
        try:
            return cls(name.strip().lower())
        except ValueError:
            valid = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown metadata variant {name!r} (one of: {valid})") from None


_VARIANT_FIELDS = {
    MetadataVariant.NOMETA: (),
    MetadataVariant.URL_ONLY: ("URL",),
    MetadataVariant.URL_COUNTRY: ("URL", "COUNTRY"),
    MetadataVariant.URL_CONTINENT: ("URL", "CONTINENT"),
    MetadataVariant.FULL: ("URL", "COUNTRY", "CONTINENT"),
}


@dataclass(frozen=True)
class RenderedDoc:
    """A formatted document plus the exact span bookkeeping for masking."""

    text: str
    metadata_char_len: int
    body_char_span: tuple[int, int]

    @property
    def body(self) -> str:
        start, end = self.body_char_span
        return self.text[start:end]


def render_document(doc, variant: MetadataVariant) -> RenderedDoc:
    """Format one document under the given metadata variant.

    `doc` needs `url`, `country`, `continent`, `title` and `content`
    attributes (see `localm.corpus.Document`).
    """
    values = {"URL": doc.url, "COUNTRY": doc.country, "CONTINENT": doc.continent}
    fields = variant.fields
    if fields:
        prefix = "".join(f"{name}: {values[name]}\n" for name in fields) + "\n"
    else:
        prefix = ""
    body = f"TITLE: {doc.title}\n\nCONTENT: {doc.content}"
    text = prefix + body
    return RenderedDoc(
        text=text,
        metadata_char_len=len(prefix),
        body_char_span=(len(prefix), len(text)),
    )


# --- chat-style prompts for instruction tuning and MCQ evaluation ----------

SFT_SYSTEM = (
    "Below is an instruction that describes a task, paired with an input "
    "that provides further context. Write a response that appropriately "
    "completes the request."
)

EVAL_PREAMBLE = (
    "Below is an instruction that describes a task.\n"
    "Write a response that appropriately completes the request."
)

EVAL_CLOSING = "Answer with the correct option."

ASSISTANT_MARKER = "ASSISTANT: "


@dataclass(frozen=True)
class SftPair:
    """Prompt/target split for supervised fine-tuning; loss runs on `target` only."""

    prompt: str
    target: str

    @property
    def text(self) -> str:
        return self.prompt + self.target


def _metadata_header(base_url: str, country: str, continent: str) -> str:
    return (
        f"URL: {base_url}/{country}\n"
        f"COUNTRY: {country}\n"
        f"CONTINENT: {continent}\n"
        "\n"
    )


def render_sft_example(
    instruction: str,
    input_text: str,
    output: str,
    meta: dict | None,
) -> SftPair:
    """Render one instruction-tuning example as a (prompt, target) pair.

    With `meta` (keys `base_url`, `country`, `continent`) the user block is
    headed by the same URL/COUNTRY/CONTINENT lines used in pretraining and a
    synthetic fact-page title. With `meta=None` the metadata lines are
    omitted (control-model variant); the TITLE/CONTENT framing stays, since
    control pretraining also sees titled documents.
    """
    if meta is not None:
        header = _metadata_header(meta["base_url"], meta["country"], meta["continent"])
        title = f"TITLE: Facts about the country {meta['country']}\n\n"
    else:
        header = ""
        title = "TITLE: Facts and questions\n\n"
    prompt = (
        f"SYSTEM: {SFT_SYSTEM}\n"
        "\n"
        "USER:\n"
        f"{header}"
        f"{title}"
        "CONTENT:\n"
        "### Instruction:\n"
        f"{instruction}\n"
        "\n"
        "### Input:\n"
        f"{input_text}\n"
        "\n"
        f"{ASSISTANT_MARKER}"
    )
    return SftPair(prompt=prompt, target=output)


def render_eval_prompt(q, meta: dict | None) -> str:
    """Render the chat-style MCQ evaluation prompt for one benchmark item.

    `q` needs `question` and `options` attributes with exactly 4 options
    (stored order is preserved; labels are A: through D:). `meta` carries
    `base_url`, `country_code`, `continent`; pass None for the no-metadata
    control rendering.
    """
    options = list(q.options)
    if len(options) != 4:
        raise ValueError(f"MCQ item must have exactly 4 options, got {len(options)}")
    if meta is not None:
        header = _metadata_header(meta["base_url"], meta["country_code"], meta["continent"])
        title = f"TITLE: Facts about the country {meta['country_code']}\n\n"
    else:
        header = ""
        title = "TITLE: Facts and questions\n\n"
    letters = "ABCD"
    option_block = "\n".join(f"{letters[i]}: {opt}" for i, opt in enumerate(options))
    return (
        f"SYSTEM: {EVAL_PREAMBLE}\n"
        "\n"
        "USER:\n"
        f"{header}"
        f"{title}"
        "CONTENT:\n"
        "\n"
        f"Question: {q.question}\n"
        "\n"
        "Options:\n"
        f"{option_block}\n"
        "\n"
        f"{EVAL_CLOSING}\n"
        "\n"
        f"{ASSISTANT_MARKER}"
    )
