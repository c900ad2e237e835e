"""Modality transformation: one interaction -> (ID vector, prompt tokens)."""

from __future__ import annotations

import bisect
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .interactions import DatasetSplit, Interaction
from .text import TextTokenizer, prompt_tokens

HISTORY_LENGTH = 10


class FieldVocab:
    """Per-field value -> index maps; index 0 is the out-of-vocabulary bucket."""

    def __init__(self, fields: Sequence[str], maps: dict[str, dict[str, int]]):
        self.fields = list(fields)
        self.maps = maps

    @staticmethod
    def field_values(x: Interaction) -> list[tuple[str, str]]:
        return [("user_id", x.user_id), ("item_id", x.item_id), *x.user_attrs, *x.item_attrs]

    @classmethod
    def build(cls, train: Sequence[Interaction]) -> "FieldVocab":
        if not train:
            raise ValueError("cannot build a vocabulary from an empty training split")
        fields = [name for name, _ in cls.field_values(train[0])]
        values: dict[str, set] = {f: set() for f in fields}
        for x in train:
            pairs = cls.field_values(x)
            if [name for name, _ in pairs] != fields:
                raise ValueError(f"inconsistent fields for user {x.user_id} item {x.item_id}")
            for name, v in pairs:
                values[name].add(v)
        maps = {f: {v: i + 1 for i, v in enumerate(sorted(values[f]))} for f in fields}
        return cls(fields, maps)

    def cardinalities(self) -> list[int]:
        return [len(self.maps[f]) + 1 for f in self.fields]

    def encode(self, x: Interaction) -> list[int]:
        return [self.maps[name].get(v, 0) for name, v in self.field_values(x)]

    def to_dict(self) -> dict:
        return {"fields": self.fields, "maps": self.maps}

    @classmethod
    def from_dict(cls, d: dict) -> "FieldVocab":
        return cls(d["fields"], d["maps"])

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False).encode()
        return hashlib.sha256(blob).hexdigest()


@dataclass(frozen=True)
class DualModalitySample:
    sample_id: int
    id_input: tuple[int, ...]
    text_input: tuple[int, ...]
    label: int
    label_token: int
    is_cue: bool | None = None


def build_histories(stream: Sequence[Interaction], k: int = HISTORY_LENGTH
                    ) -> list[list[tuple[str, int]]]:
    """For each record, the user's last ``k`` strictly-earlier (title, rating), oldest first."""
    per_user: dict[str, list[int]] = defaultdict(list)
    for i, x in enumerate(stream):
        per_user[x.user_id].append(i)
    out: list[list[tuple[str, int]]] = [[] for _ in stream]
    for idxs in per_user.values():
        idxs.sort(key=lambda i: (stream[i].timestamp, i))
        stamps = [stream[i].timestamp for i in idxs]
        for pos, i in enumerate(idxs):
            earlier = bisect.bisect_left(stamps, stream[i].timestamp, 0, pos)
            out[i] = [(stream[j].item_title, stream[j].rating)
                      for j in idxs[max(0, earlier - k):earlier]]
    return out


def transform_modalities(x: Interaction, vocab: FieldVocab, tok: TextTokenizer,
                         history: Sequence[tuple[str, int]], sample_id: int,
                         k: int = HISTORY_LENGTH) -> DualModalitySample:
    hist = list(history)[-k:] if k > 0 else []
    while True:
        toks = prompt_tokens(hist, x.item_title, cue=x.cue_token)
        if len(toks) <= tok.max_sequence_length:
            break
        if not hist:
            raise ValueError(
                f"prompt needs {len(toks)} tokens even without history; "
                f"max_sequence_length is {tok.max_sequence_length}")
        hist = hist[1:]
    return DualModalitySample(
        sample_id=sample_id,
        id_input=tuple(vocab.encode(x)),
        text_input=tuple(tok.encode_tokens(toks)),
        label=int(x.label),
        label_token=tok.yes_id if x.label else tok.no_id,
        is_cue=x.is_cue,
    )


@dataclass
class PreparedData:
    vocab: FieldVocab
    tokenizer: TextTokenizer
    train: list[DualModalitySample]
    valid: list[DualModalitySample]
    test: list[DualModalitySample]


def prepare(split: DatasetSplit, k: int = HISTORY_LENGTH,
            max_sequence_length: int = 96) -> PreparedData:
    """Vocabulary and tokenizer from train only, then transform every split."""
    vocab = FieldVocab.build(split.train)
    titles = {x.item_title for x in split.train}
    tok = TextTokenizer.build(titles, max_sequence_length=max_sequence_length)
    stream = split.stream()
    histories = build_histories(stream, k)
    samples = [transform_modalities(x, vocab, tok, h, i, k)
               for i, (x, h) in enumerate(zip(stream, histories))]
    a, b, _ = split.sizes()
    return PreparedData(vocab, tok, samples[:a], samples[a:a + b], samples[a + b:])


@dataclass
class SampleArrays:
    """Column-wise numpy view of a list of samples, ready for batching."""

    ids: np.ndarray          # (N, F) int64
    tokens: np.ndarray       # (N, T) int64, right padded
    lengths: np.ndarray      # (N,)
    labels: np.ndarray       # (N,)
    label_tokens: np.ndarray  # (N,)
    sample_ids: np.ndarray   # (N,)
    is_cue: np.ndarray | None = None

    @classmethod
    def from_samples(cls, samples: Sequence[DualModalitySample], pad_id: int) -> "SampleArrays":
        n = len(samples)
        width = max((len(s.text_input) for s in samples), default=1)
        tokens = np.full((n, width), pad_id, dtype=np.int64)
        for r, s in enumerate(samples):
            tokens[r, :len(s.text_input)] = s.text_input
        cue = None
        if samples and samples[0].is_cue is not None:
            cue = np.array([bool(s.is_cue) for s in samples])
        nfields = len(samples[0].id_input) if samples else 0
        return cls(
            ids=np.array([s.id_input for s in samples], dtype=np.int64).reshape(n, nfields),
            tokens=tokens,
            lengths=np.array([len(s.text_input) for s in samples], dtype=np.int64),
            labels=np.array([s.label for s in samples], dtype=np.int64),
            label_tokens=np.array([s.label_token for s in samples], dtype=np.int64),
            sample_ids=np.array([s.sample_id for s in samples], dtype=np.int64),
            is_cue=cue,
        )

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "SampleArrays":
        idx = np.asarray(idx, dtype=np.int64)
        lengths = self.lengths[idx]
        width = int(lengths.max()) if len(idx) else 1
        return SampleArrays(
            ids=self.ids[idx], tokens=self.tokens[idx, :width], lengths=lengths,
            labels=self.labels[idx], label_tokens=self.label_tokens[idx],
            sample_ids=self.sample_ids[idx],
            is_cue=None if self.is_cue is None else self.is_cue[idx],
        )

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.take(order[start:start + batch_size])


