"""Prompt template rendering and a word-level tokenizer with atomic titles."""

from __future__ import annotations

import hashlib
import json
import re
from typing import Iterable, Sequence

PAD, UNK, YES, NO, NONE, CUE = "<pad>", "<unk>", "Yes", "No", "NONE", "CUE"
SPECIALS = (PAD, UNK, YES, NO, NONE, CUE)

PROMPT_HEAD = "Below is the rating history of a user:"
PROMPT_MID = ". Please predict whether the user will like"
PROMPT_TAIL = ("based on his/her rating history and the quality of the target item. "
               "You should ONLY answer no or yes. Answer:")
INSTRUCTION = "You should ONLY answer no or yes"

_PIECE = re.compile(r"\w+|[^\w\s]")
_GLUE_LEFT = {".", ",", ":", ";", "/"}
_GLUE_RIGHT = {"/"}


def pieces(text: str) -> list[str]:
    return _PIECE.findall(text)


def rating_token(r: int) -> str:
    return f"({int(r)})"


def render_history(history: Sequence[tuple[str, int]]) -> list[str]:
    """``[(title, rating), ...]`` oldest first -> ``Title (r) ; Title (r)``."""
    if not history:
        return [NONE]
    out: list[str] = []
    for i, (title, rating) in enumerate(history):
        if i:
            out.append(";")
        out += [title, rating_token(rating)]
    return out


def prompt_tokens(history: Sequence[tuple[str, int]], target_title: str,
                  cue: bool = False) -> list[str]:
    toks = pieces(PROMPT_HEAD) + render_history(history) + pieces(PROMPT_MID)
    toks.append(target_title)
    if cue:
        toks.append(CUE)
    return toks + pieces(PROMPT_TAIL)


def template_tokens() -> list[str]:
    return pieces(PROMPT_HEAD) + pieces(PROMPT_MID) + pieces(PROMPT_TAIL) + [";"]


class TextTokenizer:
    """Word-level vocabulary; item titles and attribute values are single tokens."""

    def __init__(self, tokens: Sequence[str], max_sequence_length: int = 96):
        tokens = list(tokens)
        if tokens[:len(SPECIALS)] != list(SPECIALS):
            raise ValueError("vocabulary must start with the reserved tokens")
        if len(set(tokens)) != len(tokens):
            raise ValueError("duplicate token in vocabulary")
        self.tokens = tokens
        self.index = {t: i for i, t in enumerate(tokens)}
        self.max_sequence_length = int(max_sequence_length)
        self._trie: dict = {}
        for t in tokens:
            node = self._trie
            for p in pieces(t) or [t]:
                node = node.setdefault(p, {})
            node.setdefault(None, t)

    @classmethod
    def build(cls, titles: Iterable[str], extra: Iterable[str] = (),
              max_sequence_length: int = 96) -> "TextTokenizer":
        words = template_tokens() + [rating_token(r) for r in range(1, 6)]
        seen = set(SPECIALS)
        vocab = list(SPECIALS)
        for t in list(words) + sorted(set(extra)) + sorted(set(titles)):
            if t not in seen:
                seen.add(t)
                vocab.append(t)
        return cls(vocab, max_sequence_length)

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def unk_id(self) -> int:
        return self.index[UNK]

    @property
    def yes_id(self) -> int:
        return self.index[YES]

    @property
    def no_id(self) -> int:
        return self.index[NO]

    def encode_tokens(self, toks: Iterable[str]) -> list[int]:
        unk = self.unk_id
        return [self.index.get(t, unk) for t in toks]

    def tokenize(self, text: str) -> list[int]:
        """Greedy longest match of known tokens over the text's word pieces."""
        ps = pieces(text)
        out, i = [], 0
        while i < len(ps):
            node, j, best = self._trie, i, None
            while j < len(ps) and ps[j] in node:
                node = node[ps[j]]
                j += 1
                if None in node:
                    best = (j, node[None])
            if best is None:
                out.append(self.unk_id)
                i += 1
            else:
                i, tok = best
                out.append(self.index[tok])
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        text = ""
        prev = None
        for i in ids:
            t = self.tokens[i]
            if t == PAD:
                continue
            if prev is not None and t not in _GLUE_LEFT and prev not in _GLUE_RIGHT:
                text += " "
            text += t
            prev = t
        return text

    def to_dict(self) -> dict:
        return {"tokens": self.tokens, "max_sequence_length": self.max_sequence_length}

    @classmethod
    def from_dict(cls, d: dict) -> "TextTokenizer":
        return cls(d["tokens"], d["max_sequence_length"])

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode()
        return hashlib.sha256(blob).hexdigest()
