"""Word-level tokenizer with byte fallback and a hard 77-id budget.

Token ids:
  0 pad, 1 bos, 2 eos, 3..258 bytes 0x00..0xFF, 259+ learned words.

Unknown words are encoded as the UTF-8 bytes of the word, prefixed with a
space byte when the word is not the first token — that keeps decode() able to
reconstruct token boundaries exactly (word tokens likewise decode with a
leading space except at the start). Sequences are BOS + at most 75 content ids
+ EOS, so no encoding ever exceeds 77 ids and EOS is always present.
"""

from __future__ import annotations

import re
from collections import Counter
from typing import Iterable, Sequence

from sketchlab.errors import ConfigError, ValidationError

MAX_TOKENS = 77
CONTENT_BUDGET = MAX_TOKENS - 2  # bos + eos are always present
VOCAB_CAP = 2048

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
_BYTE_OFFSET = 3
_NUM_BYTES = 256
_RESERVED = _BYTE_OFFSET + _NUM_BYTES  # 259 ids before the first word token

_TOKEN_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")


def _words_of(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Tokenizer:
    """Fixed-vocabulary tokenizer; build with fit() or from an explicit word list."""

    def __init__(self, words: Sequence[str] = (), *, vocab_cap: int = VOCAB_CAP):
        if vocab_cap < _RESERVED + 1:
            raise ConfigError(
                f"vocab_cap {vocab_cap} leaves no room for word tokens "
                f"(need > {_RESERVED})"
            )
        words = list(words)
        if len(set(words)) != len(words):
            raise ConfigError("tokenizer word list contains duplicates")
        if len(words) > vocab_cap - _RESERVED:
            raise ConfigError(
                f"{len(words)} words exceed vocab cap {vocab_cap} "
                f"({vocab_cap - _RESERVED} word slots)"
            )
        self.vocab_cap = vocab_cap
        self.words = words
        self._word_to_id = {w: _RESERVED + i for i, w in enumerate(words)}

    @classmethod
    def fit(cls, corpus: Iterable[str], *, vocab_cap: int = VOCAB_CAP) -> "Tokenizer":
        """Rank words by frequency (ties lexicographic) and keep what fits."""
        counts: Counter[str] = Counter()
        for text in corpus:
            counts.update(_words_of(text))
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        keep = [w for w, _ in ranked[: vocab_cap - _RESERVED]]
        return cls(keep, vocab_cap=vocab_cap)

    @property
    def vocab_size(self) -> int:
        return _RESERVED + len(self.words)

    def encode(self, text: str) -> list[int]:
        if not isinstance(text, str) or not text.strip():
            raise ValidationError("cannot tokenize empty text")
        ids: list[int] = []
        for i, word in enumerate(_words_of(text)):
            wid = self._word_to_id.get(word)
            if wid is not None:
                ids.append(wid)
            else:
                chunk = (" " + word if i else word).encode("utf-8")
                ids.extend(_BYTE_OFFSET + b for b in chunk)
            if len(ids) >= CONTENT_BUDGET:
                break
        ids = ids[:CONTENT_BUDGET]
        return [BOS_ID] + ids + [EOS_ID]

    def decode(self, ids: Sequence[int]) -> str:
        buf = bytearray()
        for tid in ids:
            if tid in (PAD_ID, BOS_ID, EOS_ID):
                continue
            if tid < 0 or tid >= self.vocab_size:
                raise ValidationError(f"token id {tid} outside vocab of size {self.vocab_size}")
            if tid < _RESERVED:
                buf.append(tid - _BYTE_OFFSET)
            else:
                word = self.words[tid - _RESERVED]
                if buf:
                    buf.extend(b" ")
                buf.extend(word.encode("utf-8"))
        return buf.decode("utf-8", errors="replace")

    def to_dict(self) -> dict:
        return {"vocab_cap": self.vocab_cap, "words": list(self.words)}

    @classmethod
    def from_dict(cls, payload: dict) -> "Tokenizer":
        return cls(payload["words"], vocab_cap=payload["vocab_cap"])

    def __eq__(self, other) -> bool:
        return (isinstance(other, Tokenizer)
                and self.vocab_cap == other.vocab_cap
                and self.words == other.words)
