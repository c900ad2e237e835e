"""Canonical processed-sample files (JSON lines with a header object)."""

from __future__ import annotations

import json
from pathlib import Path

from .text import TextTokenizer
from .transform import DualModalitySample, FieldVocab, PreparedData

FORMAT = "corella-processed"
VERSION = 1
SPLITS = ("train", "valid", "test")


class ProcessedFormatError(ValueError):
    pass


def sample_to_record(s: DualModalitySample) -> dict:
    rec = {"sample_id": s.sample_id, "id_input": list(s.id_input),
           "text_tokens": list(s.text_input), "label": s.label, "label_token": s.label_token}
    if s.is_cue is not None:
        rec["is_cue"] = s.is_cue
    return rec


def record_to_sample(rec: dict) -> DualModalitySample:
    return DualModalitySample(
        sample_id=int(rec["sample_id"]), id_input=tuple(rec["id_input"]),
        text_input=tuple(rec["text_tokens"]), label=int(rec["label"]),
        label_token=int(rec["label_token"]), is_cue=rec.get("is_cue"))


def save_prepared(data: PreparedData, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "vocab.json", "w", encoding="utf-8") as fh:
        json.dump(data.vocab.to_dict(), fh, ensure_ascii=False, sort_keys=True)
    with open(directory / "tokenizer.json", "w", encoding="utf-8") as fh:
        json.dump(data.tokenizer.to_dict(), fh, ensure_ascii=False, sort_keys=True)
    header = {"format": FORMAT, "version": VERSION,
              "vocab_sha256": data.vocab.digest(), "tokenizer_sha256": data.tokenizer.digest()}
    for name in SPLITS:
        with open(directory / f"{name}.jsonl", "w", encoding="utf-8") as fh:
            fh.write(json.dumps({**header, "split": name}) + "\n")
            for s in getattr(data, name):
                fh.write(json.dumps(sample_to_record(s)) + "\n")


def load_prepared(directory) -> PreparedData:
    directory = Path(directory)
    with open(directory / "vocab.json", encoding="utf-8") as fh:
        vocab = FieldVocab.from_dict(json.load(fh))
    with open(directory / "tokenizer.json", encoding="utf-8") as fh:
        tok = TextTokenizer.from_dict(json.load(fh))
    splits = {}
    for name in SPLITS:
        with open(directory / f"{name}.jsonl", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != FORMAT or header.get("version") != VERSION:
                raise ProcessedFormatError(f"{name}.jsonl: unsupported header {header}")
            if (header.get("vocab_sha256") != vocab.digest()
                    or header.get("tokenizer_sha256") != tok.digest()):
                raise ProcessedFormatError(f"{name}.jsonl: vocabulary hash mismatch")
            splits[name] = [record_to_sample(json.loads(line)) for line in fh if line.strip()]
    return PreparedData(vocab, tok, splits["train"], splits["valid"], splits["test"])
