"""Corpus and question file ingestion.

Line-delimited JSON in, normalized in-memory records out. All text fields go
through :func:`fix_text`; passage bodies additionally get bracketed numeric
ids rewritten so that prompt-side ``[i]`` markers stay unambiguous.
"""

from __future__ import annotations

import json
import re
import unicodedata
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

# Controls except newline/tab; tab is handled by the whitespace collapse.
_CONTROL_RE = re.compile(r"[\x00-\x08\x0b-\x1f\x7f-\x9f]")
_WS_RE = re.compile(r"\s+")
_BRACKET_NUM_RE = re.compile(r"\[(\d+)\]")
# Sentence boundary: terminal punctuation followed by whitespace.
_SENT_RE = re.compile(r"(?<=[.!?])\s+")

DEFAULT_CHUNK_LIMIT = 300
INSUFFICIENT_MARKER = "Insufficient Information"


class CorpusError(ValueError):
    """Raised for malformed corpus or question files."""


def fix_text(raw: str) -> str:
    """Normalize raw text: NFC, no control characters, single spaces, trimmed.

    Idempotent and total; never raises on str input.
    """
    text = unicodedata.normalize("NFC", raw)
    text = _CONTROL_RE.sub(" ", text)
    text = _WS_RE.sub(" ", text)
    return text.strip()


def rewrite_bracket_ids(text: str) -> str:
    """Rewrite every maximal ``[digits]`` token to ``(digits)``.

    Non-numeric bracket contents are left alone. Idempotent.
    """
    return _BRACKET_NUM_RE.sub(r"(\1)", text)


def split_sentences(text: str) -> list[str]:
    return [s for s in _SENT_RE.split(text) if s]


def word_count(text: str) -> int:
    return len(text.split())


def chunk_text(text: str, limit: int) -> list[str]:
    """Split text on sentence boundaries into chunks of at most ``limit`` words.

    A single sentence longer than the limit stays whole (its chunk may exceed
    the limit); chunks otherwise never do.
    """
    if word_count(text) <= limit:
        return [text]
    chunks: list[str] = []
    current: list[str] = []
    current_wc = 0
    for sentence in split_sentences(text):
        wc = word_count(sentence)
        if current and current_wc + wc > limit:
            chunks.append(" ".join(current))
            current = []
            current_wc = 0
        current.append(sentence)
        current_wc += wc
    if current:
        chunks.append(" ".join(current))
    return chunks


@dataclass(frozen=True)
class Passage:
    id: str
    doc_id: str
    text: str
    title: str | None = None

    def to_dict(self) -> dict:
        record = {"id": self.id, "doc_id": self.doc_id, "text": self.text}
        if self.title is not None:
            record["title"] = self.title
        return record


@dataclass(frozen=True)
class QuestionRecord:
    id: str
    question: str
    gold_answers: tuple[str, ...] = ()
    evidence: tuple[str, ...] = ()
    gold_passage_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "question": self.question,
            "answers": list(self.gold_answers),
            "evidence": list(self.evidence),
            "gold_passage_ids": list(self.gold_passage_ids),
        }

    @classmethod
    def from_dict(cls, record: dict) -> "QuestionRecord":
        return cls(
            id=record["id"],
            question=record["question"],
            gold_answers=tuple(record.get("answers", ())),
            evidence=tuple(record.get("evidence", ())),
            gold_passage_ids=tuple(record.get("gold_passage_ids", ())),
        )


class PassageStore:
    """Ordered passage collection with id lookup and length statistics."""

    def __init__(self, passages: Iterable[Passage]):
        self._passages: list[Passage] = list(passages)
        self._by_id: dict[str, Passage] = {}
        for p in self._passages:
            if p.id in self._by_id:
                raise CorpusError(f"duplicate passage id: {p.id!r}")
            self._by_id[p.id] = p
        self._lengths = {p.id: word_count(p.text) for p in self._passages}

    def __len__(self) -> int:
        return len(self._passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self._passages)

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._by_id

    @property
    def passages(self) -> list[Passage]:
        return list(self._passages)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self._passages]

    def get(self, passage_id: str) -> Passage:
        try:
            return self._by_id[passage_id]
        except KeyError:
            raise CorpusError(f"unknown passage id: {passage_id!r}") from None

    def length(self, passage_id: str) -> int:
        self.get(passage_id)
        return self._lengths[passage_id]

    @property
    def avg_length(self) -> float:
        if not self._passages:
            return 0.0
        return sum(self._lengths.values()) / len(self._passages)

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for p in self._passages:
                fh.write(json.dumps(p.to_dict(), ensure_ascii=False) + "\n")


def _iter_jsonl(path: str | Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}: line {lineno}: invalid JSON: {exc}") from None
            if not isinstance(record, dict):
                raise CorpusError(f"{path}: line {lineno}: expected an object")
            yield lineno, record


def _require_str(record: dict, key: str, path: str | Path, lineno: int) -> str:
    value = record.get(key)
    if not isinstance(value, str) or not value:
        raise CorpusError(f"{path}: line {lineno}: missing or empty field {key!r}")
    return value


def load_corpus(path: str | Path, chunk_limit: int | None = DEFAULT_CHUNK_LIMIT) -> PassageStore:
    """Load a line-delimited JSON corpus into a PassageStore.

    Text is normalized (fix_text, bracket-id rewrite) and passages longer
    than ``chunk_limit`` words are split on sentence boundaries into
    ``{id}#0``, ``{id}#1``, ... chunks. ``chunk_limit=None`` disables
    splitting.
    """
    passages: list[Passage] = []
    seen: dict[str, int] = {}
    for lineno, record in _iter_jsonl(path):
        pid = _require_str(record, "id", path, lineno)
        doc_id = _require_str(record, "doc_id", path, lineno)
        raw_text = _require_str(record, "text", path, lineno)
        text = rewrite_bracket_ids(fix_text(raw_text))
        if not text:
            raise CorpusError(f"{path}: line {lineno}: passage {pid!r} is empty after normalization")
        title = record.get("title")
        if title is not None:
            if not isinstance(title, str):
                raise CorpusError(f"{path}: line {lineno}: field 'title' must be a string")
            title = fix_text(title) or None
        if chunk_limit is not None and word_count(text) > chunk_limit:
            pieces = chunk_text(text, chunk_limit)
        else:
            pieces = [text]
        for n, piece in enumerate(pieces):
            piece_id = pid if len(pieces) == 1 else f"{pid}#{n}"
            if piece_id in seen:
                raise CorpusError(
                    f"{path}: line {lineno}: duplicate passage id: {piece_id!r}"
                    f" (first seen on line {seen[piece_id]})"
                )
            seen[piece_id] = lineno
            passages.append(Passage(id=piece_id, doc_id=doc_id, text=piece, title=title))
    return PassageStore(passages)


def _clean_str_list(record: dict, key: str, path: str | Path, lineno: int) -> tuple[str, ...]:
    value = record.get(key, [])
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise CorpusError(f"{path}: line {lineno}: field {key!r} must be a list of strings")
    return tuple(value)


def load_questions(path: str | Path) -> list[QuestionRecord]:
    """Load a line-delimited JSON question file.

    Every record needs at least one of: non-empty answers, non-empty
    evidence, non-empty gold_passage_ids. Question text and evidence spans
    are fix_text-normalized (no bracket rewrite).
    """
    questions: list[QuestionRecord] = []
    seen: set[str] = set()
    for lineno, record in _iter_jsonl(path):
        qid = _require_str(record, "id", path, lineno)
        if qid in seen:
            raise CorpusError(f"{path}: line {lineno}: duplicate question id: {qid!r}")
        seen.add(qid)
        question = fix_text(_require_str(record, "question", path, lineno))
        if not question:
            raise CorpusError(f"{path}: line {lineno}: question {qid!r} is empty after normalization")
        answers = tuple(fix_text(a) for a in _clean_str_list(record, "answers", path, lineno))
        if any(not a for a in answers):
            raise CorpusError(f"{path}: line {lineno}: question {qid!r} has an empty answer")
        evidence = tuple(fix_text(e) for e in _clean_str_list(record, "evidence", path, lineno))
        if any(not e for e in evidence):
            raise CorpusError(f"{path}: line {lineno}: question {qid!r} has an empty evidence span")
        gold_ids = _clean_str_list(record, "gold_passage_ids", path, lineno)
        if not (answers or evidence or gold_ids):
            raise CorpusError(
                f"{path}: line {lineno}: question {qid!r} has no answers, evidence,"
                " or gold_passage_ids"
            )
        questions.append(
            QuestionRecord(
                id=qid,
                question=question,
                gold_answers=answers,
                evidence=evidence,
                gold_passage_ids=gold_ids,
            )
        )
    return questions
