"""Readers for MovieLens-1M and Amazon-Books ratings."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from .interactions import Interaction, amazon_label, movielens_label

log = logging.getLogger(__name__)

USER_FIELDS = ("gender", "age", "occupation", "zip")


class DataFormatError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {msg}")


@dataclass
class LoadReport:
    rows: int = 0
    dropped: int = 0
    dropped_ids: list[str] = field(default_factory=list)


def _read_lines(path: Path):
    if not path.is_file():
        raise FileNotFoundError(f"missing data file: {path}")
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if line:
                yield lineno, line


def _split(path, lineno, line, n):
    parts = line.split("::")
    if len(parts) != n:
        raise DataFormatError(path, lineno, f"expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def load_movielens(directory, report: LoadReport | None = None) -> list[Interaction]:
    """Join ratings.dat with users.dat and movies.dat (MovieLens-1M layout)."""
    directory = Path(directory)
    report = report if report is not None else LoadReport()
    users: dict[str, tuple] = {}
    path = directory / "users.dat"
    for lineno, line in _read_lines(path):
        uid, *attrs = _split(path, lineno, line, 5)
        users[uid] = tuple(zip(USER_FIELDS, attrs))
    movies: dict[str, tuple[str, tuple]] = {}
    path = directory / "movies.dat"
    for lineno, line in _read_lines(path):
        mid, title, genres = _split(path, lineno, line, 3)
        # first listed genre is the categorical item attribute
        movies[mid] = (title, (("genre", genres.split("|")[0]),))

    out: list[Interaction] = []
    path = directory / "ratings.dat"
    for lineno, line in _read_lines(path):
        uid, mid, rating, ts = _split(path, lineno, line, 4)
        try:
            rating_i, ts_i = int(rating), int(ts)
        except ValueError:
            raise DataFormatError(path, lineno, "rating and timestamp must be integers") from None
        if not 1 <= rating_i <= 5:
            raise DataFormatError(path, lineno, f"rating {rating_i} outside 1..5")
        report.rows += 1
        if uid not in users or mid not in movies:
            report.dropped += 1
            report.dropped_ids.append(f"{uid}:{mid}")
            continue
        title, item_attrs = movies[mid]
        out.append(Interaction(uid, mid, users[uid], item_attrs, title, rating_i, ts_i,
                               movielens_label(rating_i)))
    if report.dropped:
        log.warning("dropped %d ratings with unknown user/item ids", report.dropped)
    return out


def load_amazon_books(ratings_csv, meta_jsonl=None, report: LoadReport | None = None
                      ) -> list[Interaction]:
    """Amazon review ratings CSV (item,user,rating,timestamp) plus optional metadata.

    Metadata lines are JSON objects with ``asin`` and optionally ``title`` and
    ``brand``. There are no user attributes.
    """
    ratings_csv = Path(ratings_csv)
    report = report if report is not None else LoadReport()
    meta: dict[str, dict] = {}
    if meta_jsonl is not None:
        for lineno, line in _read_lines(Path(meta_jsonl)):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise DataFormatError(meta_jsonl, lineno, f"bad JSON: {e}") from None
            meta[obj["asin"]] = obj
    if not ratings_csv.is_file():
        raise FileNotFoundError(f"missing data file: {ratings_csv}")
    out: list[Interaction] = []
    with open(ratings_csv, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            if len(row) != 4:
                raise DataFormatError(ratings_csv, lineno, f"expected 4 columns, got {len(row)}")
            item, user, rating, ts = row
            try:
                rating_i, ts_i = int(float(rating)), int(ts)
            except ValueError:
                raise DataFormatError(ratings_csv, lineno, "rating and timestamp must be numeric") from None
            report.rows += 1
            if meta and item not in meta:
                report.dropped += 1
                report.dropped_ids.append(f"{user}:{item}")
                continue
            m = meta.get(item, {})
            title = m.get("title") or item
            brand = m.get("brand") or "unknown"
            out.append(Interaction(user, item, (), (("brand", brand),), title, rating_i, ts_i,
                                   amazon_label(rating_i)))
    return out
