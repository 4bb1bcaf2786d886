"""End-to-end query pipeline: retrieve, select, generate, trace.

Traces are deterministic given transcript backends: they carry no wall
clock, so identical runs serialize byte-identically. Timestamps live only
in the run manifest.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Sequence

from .corpus import PassageStore, Passage, QuestionRecord
from .gateway import ApiError, TranscriptMissError, TransportError, Usage, user_request
from .retrieval import CandidateList
from .selection import SelectionOutcome, Strategy, load_template, select

TRACE_SCHEMA_VERSION = 1


class PromptStyle(str, Enum):
    """Answer-prompt flavor.

    GENERAL: bare passages, "Q: ... A:" completion.
    STRICT: word-or-entity answer over source-separated context, with an
    explicit insufficient-information refusal instruction.
    """

    GENERAL = "general"
    STRICT = "strict"


class PipelineError(RuntimeError):
    pass


class QueryError(PipelineError):
    """A per-query failure, tagged with the query id."""

    def __init__(self, query_id: str, cause: Exception):
        super().__init__(f"query {query_id}: {cause}")
        self.query_id = query_id
        self.cause = cause


@dataclass
class PipelineConfig:
    strategy: Strategy = Strategy.REQUIREMENT_COT
    prompt_style: PromptStyle = PromptStyle.GENERAL
    k: int = 20
    rerank_truncate: int = 5
    concurrency: int = 4
    selection_model: str = "selector"
    generation_model: str = "generator"
    selection_max_tokens: int | None = None
    generation_max_tokens: int | None = 256
    templates_dir: str | None = None

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "prompt_style": self.prompt_style.value,
            "k": self.k,
            "rerank_truncate": self.rerank_truncate,
            "concurrency": self.concurrency,
            "selection_model": self.selection_model,
            "generation_model": self.generation_model,
            "selection_max_tokens": self.selection_max_tokens,
            "generation_max_tokens": self.generation_max_tokens,
            "templates_dir": self.templates_dir,
        }


def render_answer_prompt(
    style: PromptStyle,
    question: str,
    passages: Sequence[Passage],
    templates_dir: str | Path | None = None,
) -> str:
    """Build the generation prompt; passages appear in selection order.

    GENERAL joins passage bodies with blank lines; STRICT prefixes each
    with a source line so different origins stay separated.
    """
    template = load_template(f"answer_{style.value}", templates_dir)
    if style is PromptStyle.STRICT:
        blocks = [f"Source: {p.title or p.doc_id}\n{p.text}" for p in passages]
    else:
        blocks = [p.text for p in passages]
    context = "\n\n".join(blocks)
    prompt = template.replace("{question}", question)
    return prompt.replace("{context}", context)


def extract_answer(style: PromptStyle, completion: str) -> str:
    """Trim the completion; in GENERAL style an "A:" line restarts it."""
    text = completion.strip()
    if style is PromptStyle.GENERAL:
        lines = text.splitlines()
        for i, line in enumerate(lines):
            stripped = line.strip()
            if stripped.startswith("A:"):
                first = stripped[2:].lstrip()
                return "\n".join([first] + lines[i + 1 :]).strip()
    return text


@dataclass
class QueryTrace:
    question: QuestionRecord
    candidates: CandidateList | None = None
    selection: SelectionOutcome | None = None
    selected_ids: list[str] = field(default_factory=list)
    answer_prompt: str = ""
    answer: str = ""
    generation_usage: Usage | None = None
    no_candidates: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": TRACE_SCHEMA_VERSION,
            "id": self.question.id,
            "question": self.question.to_dict(),
            "candidates": self.candidates.to_dict() if self.candidates else None,
            "selection": self.selection.to_dict() if self.selection else None,
            "selected_ids": self.selected_ids,
            "answer_prompt": self.answer_prompt,
            "answer": self.answer,
            "generation_usage": self.generation_usage.to_dict() if self.generation_usage else None,
            "no_candidates": self.no_candidates,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "QueryTrace":
        return cls(
            question=QuestionRecord.from_dict(record["question"]),
            candidates=CandidateList.from_dict(record["candidates"]) if record.get("candidates") else None,
            selection=SelectionOutcome.from_dict(record["selection"]) if record.get("selection") else None,
            selected_ids=list(record.get("selected_ids", ())),
            answer_prompt=record.get("answer_prompt", ""),
            answer=record.get("answer", ""),
            generation_usage=Usage(**record["generation_usage"]) if record.get("generation_usage") else None,
            no_candidates=record.get("no_candidates", False),
            error=record.get("error"),
        )


def run_query(
    question: QuestionRecord,
    retriever,
    store: PassageStore,
    select_backend,
    generate_backend,
    config: PipelineConfig,
) -> QueryTrace:
    """Run one query through retrieve -> select -> generate.

    Zero retrieved candidates short-circuits with an empty answer and no
    LLM calls. Backend failures re-raise as QueryError naming the query.
    """
    try:
        candidates = retriever.retrieve(question.question, config.k, query_id=question.id)
        if len(candidates) == 0:
            return QueryTrace(question=question, candidates=candidates, no_candidates=True)
        texts = [store.get(pid).text for pid in candidates.ids]
        outcome = select(
            question.question,
            texts,
            config.strategy,
            select_backend,
            model=config.selection_model,
            max_tokens=config.selection_max_tokens,
            templates_dir=config.templates_dir,
        )
        indices = outcome.indices
        if config.strategy is Strategy.LISTWISE_RERANK:
            indices = indices[: config.rerank_truncate]
        selected_ids = [candidates.ids[i - 1] for i in indices]
        passages = [store.get(pid) for pid in selected_ids]
        prompt = render_answer_prompt(
            config.prompt_style, question.question, passages, config.templates_dir
        )
        completion, gen_usage = generate_backend.chat(
            user_request(
                config.generation_model, prompt, max_tokens=config.generation_max_tokens
            )
        )
        return QueryTrace(
            question=question,
            candidates=candidates,
            selection=outcome,
            selected_ids=selected_ids,
            answer_prompt=prompt,
            answer=extract_answer(config.prompt_style, completion),
            generation_usage=gen_usage,
        )
    except (TransportError, ApiError, TranscriptMissError) as exc:
        raise QueryError(question.id, exc) from exc


def config_hash(effective_config: dict) -> str:
    canonical = json.dumps(effective_config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def run_benchmark(
    questions: Sequence[QuestionRecord],
    retriever,
    store: PassageStore,
    select_backend,
    generate_backend,
    config: PipelineConfig,
    effective_config: dict | None = None,
) -> tuple[list[QueryTrace], dict]:
    """Run every question under a bounded thread pool.

    Traces come back in input order regardless of concurrency; a failing
    query yields a trace with its error recorded instead of aborting the
    run.
    """
    started_at = datetime.now(timezone.utc).isoformat()

    def run_one(q: QuestionRecord) -> QueryTrace:
        try:
            return run_query(q, retriever, store, select_backend, generate_backend, config)
        except QueryError as exc:
            return QueryTrace(question=q, error=str(exc))
        except Exception as exc:  # defensive: never abort the whole run
            return QueryTrace(question=q, error=f"query {q.id}: unexpected {type(exc).__name__}: {exc}")

    workers = max(1, config.concurrency)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        traces = list(pool.map(run_one, questions))
    finished_at = datetime.now(timezone.utc).isoformat()
    effective = effective_config if effective_config is not None else config.to_dict()
    manifest = {
        "schema_version": TRACE_SCHEMA_VERSION,
        "config": effective,
        "config_hash": config_hash(effective),
        "backends": {
            "retriever": getattr(retriever, "name", type(retriever).__name__),
            "selection": select_backend.describe() if hasattr(select_backend, "describe") else {},
            "generation": generate_backend.describe() if hasattr(generate_backend, "describe") else {},
        },
        "started_at": started_at,
        "finished_at": finished_at,
        "query_count": len(traces),
        "failure_count": sum(1 for t in traces if t.error is not None),
        "no_candidate_count": sum(1 for t in traces if t.no_candidates),
        "fallback_count": sum(1 for t in traces if t.selection and t.selection.fallback_applied),
    }
    return traces, manifest


def write_traces(path: str | Path, traces: Sequence[QueryTrace]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for trace in traces:
            fh.write(json.dumps(trace.to_dict(), ensure_ascii=False) + "\n")


def read_traces(path: str | Path) -> list[QueryTrace]:
    traces = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                traces.append(QueryTrace.from_dict(json.loads(line)))
    return traces


def write_manifest(path: str | Path, manifest: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
