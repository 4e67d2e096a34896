"""Shared multilingual vocabulary with per-language start tokens.

One table serves every language. Ids 0, 1, 2 are pinned to the padding,
unknown, and end-of-sequence tokens; the language start tokens follow at
ids 3..3+L-1 in sorted language-code order; surface tokens come after,
ordered by descending frequency with ties broken lexicographically. Encoded
sequences never contain the padding id or a start id, and always end with
the end-of-sequence id.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
EOS_TOKEN = "<eos>"
PAD_ID = 0
UNK_ID = 1
EOS_ID = 2


def start_token(language: str) -> str:
    return f"<{language}>"


@dataclass(frozen=True)
class TokenSequence:
    """An encoded caption: surface ids ending with eos, plus its language."""

    ids: tuple[int, ...]
    language: str


class Vocabulary:
    """Bijective token/id table plus the language start-id map."""

    def __init__(self, tokens: Sequence[str], languages: Sequence[str]):
        tokens = list(tokens)
        languages = list(languages)
        if languages != sorted(languages) or len(set(languages)) != len(languages):
            raise ValueError("languages must be unique and sorted")
        expected = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] + [start_token(l) for l in languages]
        if tokens[: len(expected)] != expected:
            raise ValueError(f"vocabulary must begin with {expected}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocabulary tokens must be unique")
        self.id_to_token: tuple[str, ...] = tuple(tokens)
        self.token_to_id: dict[str, int] = {t: i for i, t in enumerate(tokens)}
        self.languages: tuple[str, ...] = tuple(languages)
        self.first_surface_id: int = len(expected)
        self._start_ids = {l: 3 + i for i, l in enumerate(languages)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.languages == other.languages
        )

    def start_id(self, language: str) -> int:
        if language not in self._start_ids:
            raise ValueError(f"unknown language {language!r}; known: {list(self.languages)}")
        return self._start_ids[language]

    @property
    def start_ids(self) -> tuple[int, ...]:
        return tuple(self._start_ids[l] for l in self.languages)

    def encode(self, tokens: Iterable[str], language: str) -> TokenSequence:
        """Map surface tokens to ids (unknowns to unk) and append eos.

        The language start id is not part of the encoded sequence; it is
        consumed by the decoder as conditioning input, never predicted.
        Control-token strings in the input are treated as unknown.
        """
        self.start_id(language)  # validates the code
        ids = []
        for tok in tokens:
            i = self.token_to_id.get(tok, UNK_ID)
            ids.append(i if i >= self.first_surface_id else UNK_ID)
        ids.append(EOS_ID)
        return TokenSequence(tuple(ids), language)

    def decode(self, ids: Iterable[int]) -> list[str]:
        """Ids back to surface tokens: stop at eos, drop pad and start ids."""
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.id_to_token):
                raise IndexError(f"token id {i} out of range for vocabulary of {len(self)}")
            if i == EOS_ID:
                break
            if i == PAD_ID or 3 <= i < self.first_surface_id:
                continue
            out.append(self.id_to_token[i])
        return out


def build_vocab(corpus: Iterable[tuple[str, Sequence[str]]], min_count: int = 5) -> Vocabulary:
    """Build the shared table from (language, tokens) caption pairs.

    Surface tokens with corpus frequency below ``min_count`` are dropped
    (their occurrences encode as unk). A surface token that collides with a
    control-token string is an error.
    """
    if min_count < 1:
        raise ValueError(f"min_count must be >= 1, got {min_count}")
    pairs = list(corpus)
    if not pairs:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    languages = sorted({lang for lang, _ in pairs})
    reserved = {PAD_TOKEN, UNK_TOKEN, EOS_TOKEN} | {start_token(l) for l in languages}
    counts: Counter[str] = Counter()
    for _, tokens in pairs:
        counts.update(tokens)
    clashes = sorted(reserved & set(counts))
    if clashes:
        raise ValueError(f"surface tokens collide with control tokens: {clashes}")
    surface = sorted((t for t, c in counts.items() if c >= min_count), key=lambda t: (-counts[t], t))
    tokens = [PAD_TOKEN, UNK_TOKEN, EOS_TOKEN] + [start_token(l) for l in languages] + surface
    return Vocabulary(tokens, languages)
