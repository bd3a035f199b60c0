"""Byte-level tokenizer with special tokens and loss-mask spans.

Ids 0..255 are raw bytes; BOS/EOS/PAD sit above them, so the desk default
vocabulary size is 259. Encoding is `[BOS] + utf8_bytes(text) + [EOS]` and
is lossless by construction. The BOS token is counted inside the masked
metadata prefix, so the first scored target of any document is always a
body token.

Packing concatenates documents in stream order into fixed-length blocks.
Documents may straddle block boundaries (attention is not reset); only the
final partial block is padded, and PAD positions carry a cleared content
bit just like metadata positions.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .textformat import RenderedDoc

N_BYTES = 256
BOS_ID = 256
EOS_ID = 257
PAD_ID = 258
DEFAULT_VOCAB_SIZE = 259

# Paper-scale BPE vocabulary size, kept as a validated config constant for
# parity checks; desk builds stay byte-level.
PAPER_VOCAB_SIZE = 128_256


@dataclass(frozen=True)
class Vocab:
    size: int = DEFAULT_VOCAB_SIZE

    def __post_init__(self):
        if self.size < DEFAULT_VOCAB_SIZE:
            raise ValueError(f"vocab size must be >= {DEFAULT_VOCAB_SIZE}, got {self.size}")

    @property
    def bos(self) -> int:
        return BOS_ID

    @property
    def eos(self) -> int:
        return EOS_ID

    @property
    def pad(self) -> int:
        return PAD_ID


@dataclass
class TokenizedDoc:
    """Token ids for one rendered document plus its masked-prefix length."""

    ids: np.ndarray  # int32, [BOS] + bytes + [EOS]
    metadata_token_len: int  # BOS plus the metadata prefix bytes
    doc_id: str = ""

    @property
    def total_len(self) -> int:
        return int(self.ids.shape[0])

    @property
    def content_token_len(self) -> int:
        return self.total_len - self.metadata_token_len


def encode_with_span(rendered: RenderedDoc, doc_id: str = "") -> TokenizedDoc:
    """Tokenize a rendered document, recording the metadata token span.

    metadata_token_len = 1 + metadata byte length: BOS is assigned to the
    masked span so loss over non-metadata tokens stays literal.
    """
    raw = rendered.text.encode("utf-8")
    ids = np.empty(len(raw) + 2, dtype=np.int32)
    ids[0] = BOS_ID
    ids[1:-1] = np.frombuffer(raw, dtype=np.uint8)
    ids[-1] = EOS_ID
    meta_bytes = len(rendered.text[: rendered.metadata_char_len].encode("utf-8"))
    return TokenizedDoc(ids=ids, metadata_token_len=1 + meta_bytes, doc_id=doc_id)


def encode_text(text: str, add_bos: bool = True, add_eos: bool = False) -> np.ndarray:
    """Tokenize a bare string (prompt encoding for generation)."""
    raw = text.encode("utf-8")
    parts = []
    if add_bos:
        parts.append([BOS_ID])
    parts.append(np.frombuffer(raw, dtype=np.uint8))
    if add_eos:
        parts.append([EOS_ID])
    return np.concatenate([np.asarray(p, dtype=np.int32) for p in parts])


def decode(ids, errors: str = "strict") -> str:
    """Inverse of encoding: drops special tokens, reassembles UTF-8 bytes.

    Round-trips of encoded text use the strict default; pass
    ``errors="replace"`` for sampled model output, which is free to emit
    byte sequences that are not valid UTF-8.
    """
    arr = np.asarray(ids, dtype=np.int64).ravel()
    byte_vals = arr[arr < N_BYTES]
    return bytes(byte_vals.astype(np.uint8).tolist()).decode("utf-8", errors=errors)


@dataclass
class Block:
    """One packed training block: seq_len ids plus per-position content bits."""

    ids: np.ndarray  # int32 (seq_len,)
    content: np.ndarray  # bool (seq_len,); True = contributes to loss


def pack_stream(docs: Iterable[TokenizedDoc], seq_len: int) -> Iterator[Block]:
    """Chunk a document stream into fixed-length blocks with mask bits.

    The trailing partial block, if any, is padded with PAD and emitted; its
    pad positions have the content bit cleared. All content positions of the
    input documents survive packing exactly.
    """
    if seq_len < 2:
        raise ValueError(f"seq_len must be >= 2, got {seq_len}")
    buf_ids = np.empty(0, dtype=np.int32)
    buf_content = np.empty(0, dtype=bool)
    for doc in docs:
        content = np.ones(doc.total_len, dtype=bool)
        content[: doc.metadata_token_len] = False
        buf_ids = np.concatenate([buf_ids, doc.ids])
        buf_content = np.concatenate([buf_content, content])
        while buf_ids.shape[0] >= seq_len:
            yield Block(ids=buf_ids[:seq_len].copy(), content=buf_content[:seq_len].copy())
            buf_ids = buf_ids[seq_len:]
            buf_content = buf_content[seq_len:]
    if buf_ids.shape[0] > 0:
        pad = seq_len - buf_ids.shape[0]
        ids = np.concatenate([buf_ids, np.full(pad, PAD_ID, dtype=np.int32)])
        content = np.concatenate([buf_content, np.zeros(pad, dtype=bool)])
        yield Block(ids=ids, content=content)


# --- flat binary serialization ---------------------------------------------
# <name>.tokens.bin  little-endian uint32 ids, block-major
# <name>.mask.bin    np.packbits of the content bits, same order
# <name>.json        counts sidecar

def write_stream(blocks: Iterable[Block], path_prefix: str | Path) -> dict:
    prefix = Path(path_prefix)
    ids_path = prefix.with_suffix(".tokens.bin")
    mask_path = prefix.with_suffix(".mask.bin")
    sidecar_path = prefix.with_suffix(".json")

    all_ids = []
    all_content = []
    for block in blocks:
        all_ids.append(block.ids)
        all_content.append(block.content)
    n_blocks = len(all_ids)
    seq_len = int(all_ids[0].shape[0]) if n_blocks else 0
    flat_ids = (
        np.concatenate(all_ids).astype("<u4") if n_blocks else np.empty(0, dtype="<u4")
    )
    flat_content = np.concatenate(all_content) if n_blocks else np.empty(0, dtype=bool)
    ids_path.write_bytes(flat_ids.tobytes())
    mask_path.write_bytes(np.packbits(flat_content).tobytes())
    sidecar = {
        "blocks": n_blocks,
        "seq_len": seq_len,
        "total_positions": int(flat_ids.shape[0]),
        "content_positions": int(flat_content.sum()),
        "pad_positions": int((flat_ids == PAD_ID).sum()),
        "ids_crc32": zlib.crc32(flat_ids.tobytes()),
    }
    sidecar_path.write_text(json.dumps(sidecar, indent=2))
    return sidecar


def read_stream(path_prefix: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Load a serialized stream back as (ids, content) arrays of shape (blocks, seq_len)."""
    prefix = Path(path_prefix)
    sidecar = json.loads(prefix.with_suffix(".json").read_text())
    n, seq_len = sidecar["blocks"], sidecar["seq_len"]
    ids = np.frombuffer(prefix.with_suffix(".tokens.bin").read_bytes(), dtype="<u4")
    if zlib.crc32(ids.tobytes()) != sidecar["ids_crc32"]:
        raise IOError(f"checksum mismatch reading {prefix}")
    content = np.unpackbits(
        np.frombuffer(prefix.with_suffix(".mask.bin").read_bytes(), dtype=np.uint8),
        count=n * seq_len,
    ).astype(bool)
    return (
        ids.astype(np.int32).reshape(n, seq_len),
        content.reshape(n, seq_len),
        sidecar,
    )
