"""Set-wise passage selection over a fixed candidate list.

One LLM call per query: render the strategy's prompt over the numbered
candidates, then parse either an unordered selection ("### Final
Selection: [2] [1]") or a listwise ranking ("[2] > [1] > [3]") out of the
completion. Parse failure is a value, not an exception; the caller-visible
fallback takes the leading candidates in retrieval order.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Sequence

from .corpus import rewrite_bracket_ids
from .gateway import Usage, user_request

logger = logging.getLogger(__name__)

SELECTION_MARKER = "### Final Selection:"

_BRACKET_INT_RE = re.compile(r"\[\s*(\d+)\s*\]")


class Strategy(str, Enum):
    """Prompting strategies for the second-stage pass over candidates.

    REQUIREMENT_COT enumerates the query's information requirements step by
    step before selecting; COT free-form reasons then selects;
    SELECTION_ONLY answers with the selection line alone; LISTWISE_RERANK
    emits a full ranking instead of a subset.
    """

    REQUIREMENT_COT = "requirement_cot"
    COT = "cot"
    SELECTION_ONLY = "selection_only"
    LISTWISE_RERANK = "listwise_rerank"


SELECTION_STRATEGIES = (Strategy.REQUIREMENT_COT, Strategy.COT, Strategy.SELECTION_ONLY)


class SelectionError(ValueError):
    pass


def load_template(name: str, templates_dir: str | Path | None = None) -> str:
    """Load a prompt template by name; a file in templates_dir overrides."""
    filename = f"{name}.txt"
    if templates_dir is not None:
        override = Path(templates_dir) / filename
        if override.exists():
            return override.read_text(encoding="utf-8").rstrip("\n")
    ref = resources.files("ragsel").joinpath("templates", filename)
    if not ref.is_file():
        raise SelectionError(f"no template named {name!r}")
    return ref.read_text(encoding="utf-8").rstrip("\n")


def render_context(candidate_texts: Sequence[str]) -> str:
    # Bracket rewrite is idempotent; applying it here keeps the [i] markers
    # unambiguous even for texts that skipped corpus loading.
    return "\n".join(
        f"[{i}] {rewrite_bracket_ids(text)}" for i, text in enumerate(candidate_texts, start=1)
    )


def render_prompt(
    strategy: Strategy,
    question: str,
    candidate_texts: Sequence[str],
    templates_dir: str | Path | None = None,
) -> str:
    """Instantiate the strategy template with {num}, {question}, {context}."""
    if not candidate_texts:
        raise SelectionError("candidate list must be non-empty")
    template = load_template(strategy.value, templates_dir)
    prompt = template.replace("{num}", str(len(candidate_texts)))
    prompt = prompt.replace("{question}", question)
    return prompt.replace("{context}", render_context(candidate_texts))


def parse_selection(text: str) -> list[int] | None:
    """Extract the selection from the last '### Final Selection:' line.

    Returns 1-based indices in order of appearance with duplicates dropped
    (first occurrence wins), or None when no marker line carries a
    bracketed integer.
    """
    marker_line = None
    for line in text.splitlines():
        if SELECTION_MARKER in line:
            marker_line = line
    if marker_line is None:
        return None
    tail = marker_line.split(SELECTION_MARKER, 1)[1]
    indices = [int(m) for m in _BRACKET_INT_RE.findall(tail)]
    if not indices:
        return None
    return list(dict.fromkeys(indices))


def parse_ranking(text: str) -> list[int] | None:
    """Extract a listwise ranking: bracketed integers, '>'-separated,
    whitespace tolerant; duplicates dropped keeping the first."""
    indices = [int(m) for m in _BRACKET_INT_RE.findall(text)]
    if not indices:
        return None
    return list(dict.fromkeys(indices))


def sanitize_indices(indices: Sequence[int], num_candidates: int) -> list[int]:
    """Drop out-of-range indices (keeping order); each drop is logged."""
    kept = []
    for idx in indices:
        if 1 <= idx <= num_candidates:
            kept.append(idx)
        else:
            logger.warning("dropping out-of-range index %d (candidates: %d)", idx, num_candidates)
    return kept


def fallback_indices(num_candidates: int) -> list[int]:
    """Leading candidates in retrieval order: top 5, or top 1 when fewer
    than 5 candidates exist."""
    if num_candidates <= 0:
        raise SelectionError("fallback needs at least one candidate")
    if num_candidates < 5:
        return [1]
    return [1, 2, 3, 4, 5]


def _strip_marker_line(text: str) -> str:
    lines = text.splitlines()
    marker_at = None
    for i, line in enumerate(lines):
        if SELECTION_MARKER in line:
            marker_at = i
    if marker_at is None:
        return text.strip()
    return "\n".join(lines[:marker_at] + lines[marker_at + 1 :]).strip()


@dataclass
class SelectionOutcome:
    """Result of one selection call.

    ``indices`` are 1-based positions into the candidate list, unique and
    in range; ``reasoning`` is the completion minus the final-selection
    line (empty for listwise reranking).
    """

    strategy: Strategy
    indices: list[int]
    raw_completion: str
    reasoning: str
    usage: Usage
    fallback_applied: bool
    dropped_indices: int = 0

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "indices": self.indices,
            "raw_completion": self.raw_completion,
            "reasoning": self.reasoning,
            "usage": self.usage.to_dict(),
            "fallback_applied": self.fallback_applied,
            "dropped_indices": self.dropped_indices,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "SelectionOutcome":
        return cls(
            strategy=Strategy(record["strategy"]),
            indices=list(record["indices"]),
            raw_completion=record["raw_completion"],
            reasoning=record["reasoning"],
            usage=Usage(**record["usage"]),
            fallback_applied=record["fallback_applied"],
            dropped_indices=record.get("dropped_indices", 0),
        )


def select(
    question: str,
    candidate_texts: Sequence[str],
    strategy: Strategy,
    backend,
    model: str,
    temperature: float = 0.0,
    max_tokens: int | None = None,
    templates_dir: str | Path | None = None,
) -> SelectionOutcome:
    """Run one selection (or reranking) call and parse the outcome.

    Transport errors propagate; parse failures and empty selections fall
    back to the leading candidates and set ``fallback_applied``.
    """
    prompt = render_prompt(strategy, question, candidate_texts, templates_dir)
    text, usage = backend.chat(
        user_request(model, prompt, temperature=temperature, max_tokens=max_tokens)
    )
    num = len(candidate_texts)
    if strategy is Strategy.LISTWISE_RERANK:
        parsed = parse_ranking(text)
        reasoning = ""
    else:
        parsed = parse_selection(text)
        reasoning = _strip_marker_line(text)
    fallback = False
    dropped = 0
    if parsed is None:
        indices = fallback_indices(num)
        fallback = True
    else:
        kept = sanitize_indices(parsed, num)
        dropped = len(parsed) - len(kept)
        if kept:
            indices = kept
        else:
            indices = fallback_indices(num)
            fallback = True
    return SelectionOutcome(
        strategy=strategy,
        indices=indices,
        raw_completion=text,
        reasoning=reasoning,
        usage=usage,
        fallback_applied=fallback,
        dropped_indices=dropped,
    )
