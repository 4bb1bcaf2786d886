"""Evaluation metrics over pipeline traces.

Rank and presence metrics score the *selected* passages in output order;
relevance judgments come from gold passage ids when present, otherwise
from evidence-span matching over the candidate pool. Queries without the
gold data a metric needs are excluded from that metric's aggregate and
counted separately, never silently zeroed.
"""

from __future__ import annotations

import json
import math
import re
import string
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .corpus import INSUFFICIENT_MARKER, Passage, PassageStore, QuestionRecord
from .pipeline import QueryTrace

_ARTICLE_RE = re.compile(r"\b(a|an|the)\b")
_PUNCT = frozenset(string.punctuation)


class MetricsError(ValueError):
    pass


# --- rank metrics ---------------------------------------------------------


def mrr_at_k(ranked_ids: Sequence[str], relevant: Iterable[str], k: int = 10) -> float | None:
    """Reciprocal rank of the first relevant id within the top k; None when
    the relevant set is empty (query excluded)."""
    relevant = set(relevant)
    if not relevant:
        return None
    for position, pid in enumerate(ranked_ids[:k], start=1):
        if pid in relevant:
            return 1.0 / position
    return 0.0


def ndcg_at_k(ranked_ids: Sequence[str], relevant: Iterable[str], k: int = 10) -> float | None:
    """Binary-gain NDCG with 1/log2(pos+1) discounts; the ideal ranking
    fills the first min(|relevant|, k) positions."""
    relevant = set(relevant)
    if not relevant:
        return None
    dcg = 0.0
    for position, pid in enumerate(ranked_ids[:k], start=1):
        if pid in relevant:
            dcg += 1.0 / math.log2(position + 1)
    ideal = sum(1.0 / math.log2(position + 1) for position in range(1, min(len(relevant), k) + 1))
    return dcg / ideal


def precision_recall_at_k(
    returned_ids: Sequence[str],
    relevant: Iterable[str],
    k: int = 5,
    denominator: str = "k",
) -> tuple[float, float] | None:
    """Precision/recall over the top min(k, len(returned)) ids.

    The precision denominator is fixed at k by default so short selections
    are not rewarded; ``denominator="returned"`` divides by the actual
    count instead.
    """
    if denominator not in ("k", "returned"):
        raise MetricsError(f"unknown precision denominator mode: {denominator!r}")
    relevant = set(relevant)
    if not relevant:
        return None
    top = list(returned_ids[:k])
    hits = sum(1 for pid in top if pid in relevant)
    if denominator == "k":
        precision = hits / k
    else:
        precision = hits / len(top) if top else 0.0
    recall = hits / len(relevant)
    return precision, recall


# --- evidence presence metrics --------------------------------------------


def _squash(text: str) -> str:
    return " ".join(text.lower().split())


def evidence_match(passage_text: str, span: str) -> bool:
    """Case- and whitespace-insensitive containment of span in passage."""
    span_norm = _squash(span)
    if not span_norm:
        raise MetricsError("evidence span must be non-empty")
    return span_norm in _squash(passage_text)


def _matched_span_indices(texts: Sequence[str], spans: Sequence[str]) -> set[int]:
    matched = set()
    for i, span in enumerate(spans):
        if any(evidence_match(text, span) for text in texts):
            matched.add(i)
    return matched


def info_coverage_at_k(
    passage_texts: Sequence[str], evidence: Sequence[str], k: int
) -> float | None:
    """Fraction of distinct gold evidence spans matched anywhere in the top
    k passages; a span matched by several passages counts once."""
    spans = list(dict.fromkeys(evidence))
    if not spans:
        return None
    return len(_matched_span_indices(passage_texts[:k], spans)) / len(spans)


def hit_at_k(
    passage_texts: Sequence[str], evidence: Sequence[str], k: int, mode: str = "any"
) -> int | None:
    """1 when gold evidence appears in the top k passages.

    mode="any": at least one span matched; mode="all": every span matched.
    """
    if mode not in ("any", "all"):
        raise MetricsError(f"unknown hit mode: {mode!r}")
    spans = list(dict.fromkeys(evidence))
    if not spans:
        return None
    matched = _matched_span_indices(passage_texts[:k], spans)
    if mode == "any":
        return int(bool(matched))
    return int(len(matched) == len(spans))


# --- answer metrics --------------------------------------------------------


def normalize_answer(text: str) -> str:
    """Lowercase, strip punctuation, drop English articles, collapse
    whitespace. Idempotent."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLE_RE.sub(" ", text)
    return " ".join(text.split())


def token_f1(prediction: str, gold: str) -> float:
    pred_tokens = normalize_answer(prediction).split()
    gold_tokens = normalize_answer(gold).split()
    if not pred_tokens and not gold_tokens:
        return 1.0
    common = Counter(pred_tokens) & Counter(gold_tokens)
    num_same = sum(common.values())
    if num_same == 0:
        return 0.0
    precision = num_same / len(pred_tokens)
    recall = num_same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def qa_scores(prediction: str, golds: Sequence[str]) -> tuple[int, float] | None:
    """(exact match, best token F1) against any gold answer; None when the
    gold list is empty."""
    if not golds:
        return None
    norm_pred = normalize_answer(prediction)
    em = int(any(norm_pred == normalize_answer(g) for g in golds))
    f1 = max(token_f1(prediction, g) for g in golds)
    return em, f1


def _contains_token_run(haystack: Sequence[str], needle: Sequence[str]) -> bool:
    n = len(needle)
    return any(list(haystack[i : i + n]) == list(needle) for i in range(len(haystack) - n + 1))


def containment_accuracy(prediction: str, gold: str) -> int:
    """1 when the normalized gold occurs as a contiguous token run inside
    the normalized prediction, or both equal the insufficient marker."""
    norm_pred = normalize_answer(prediction)
    norm_gold = normalize_answer(gold)
    marker = normalize_answer(INSUFFICIENT_MARKER)
    if norm_pred == marker and norm_gold == marker:
        return 1
    if not norm_gold:
        return int(norm_pred == norm_gold)
    return int(_contains_token_run(norm_pred.split(), norm_gold.split()))


# --- relevance judgments ----------------------------------------------------


@dataclass(frozen=True)
class RelevanceJudgment:
    relevant_ids: frozenset[str]
    source: str  # "gold_ids" | "evidence" | "none"


def judge_relevance(question: QuestionRecord, candidates: Sequence[Passage]) -> RelevanceJudgment:
    """Relevant ids from gold_passage_ids when present, otherwise evidence
    matching over the candidate pool."""
    if question.gold_passage_ids:
        return RelevanceJudgment(frozenset(question.gold_passage_ids), "gold_ids")
    if question.evidence:
        relevant = frozenset(
            p.id for p in candidates if any(evidence_match(p.text, span) for span in question.evidence)
        )
        return RelevanceJudgment(relevant, "evidence")
    return RelevanceJudgment(frozenset(), "none")


# --- trace evaluation --------------------------------------------------------


@dataclass(frozen=True)
class MetricsConfig:
    hit_mode: str = "any"
    precision_denominator: str = "k"
    rank_k: int = 10
    pr_k: int = 5
    max_k: int = 10

    def to_dict(self) -> dict:
        return {
            "hit_mode": self.hit_mode,
            "precision_denominator": self.precision_denominator,
            "rank_k": self.rank_k,
            "pr_k": self.pr_k,
            "max_k": self.max_k,
        }


@dataclass
class MetricReport:
    per_query: list[dict]
    aggregate: dict
    counts: dict
    fallback_rate: float | None
    efficiency: dict
    config: dict

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "config": self.config,
            "counts": self.counts,
            "fallback_rate": self.fallback_rate,
            "efficiency": self.efficiency,
            "aggregate": self.aggregate,
            "per_query": self.per_query,
        }

    @classmethod
    def from_dict(cls, record: dict) -> "MetricReport":
        return cls(
            per_query=record["per_query"],
            aggregate=record["aggregate"],
            counts=record["counts"],
            fallback_rate=record["fallback_rate"],
            efficiency=record["efficiency"],
            config=record["config"],
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "MetricReport":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def metric_names(config: MetricsConfig) -> list[str]:
    names = [
        f"mrr@{config.rank_k}",
        f"ndcg@{config.rank_k}",
        f"precision@{config.pr_k}",
        f"recall@{config.pr_k}",
        "em",
        "f1",
        "accuracy",
    ]
    names += [f"hit@{k}" for k in range(1, config.max_k + 1)]
    names += [f"ic@{k}" for k in range(1, config.max_k + 1)]
    return names


def evaluate_trace(
    trace: QueryTrace, store: PassageStore, config: MetricsConfig = MetricsConfig()
) -> dict:
    """Metric row for a single trace; ineligible metrics are None."""
    row: dict = {"id": trace.question.id}
    if trace.error is not None:
        row["error"] = trace.error
        return row
    candidates = [store.get(pid) for pid in trace.candidates.ids] if trace.candidates else []
    judgment = judge_relevance(trace.question, candidates)
    row["judgment_source"] = judgment.source
    ranked = trace.selected_ids
    texts = [store.get(pid).text for pid in ranked]
    relevant = judgment.relevant_ids
    row[f"mrr@{config.rank_k}"] = mrr_at_k(ranked, relevant, config.rank_k)
    row[f"ndcg@{config.rank_k}"] = ndcg_at_k(ranked, relevant, config.rank_k)
    pr = precision_recall_at_k(ranked, relevant, config.pr_k, config.precision_denominator)
    row[f"precision@{config.pr_k}"] = pr[0] if pr else None
    row[f"recall@{config.pr_k}"] = pr[1] if pr else None
    for k in range(1, config.max_k + 1):
        row[f"hit@{k}"] = hit_at_k(texts, trace.question.evidence, k, config.hit_mode)
        row[f"ic@{k}"] = info_coverage_at_k(texts, trace.question.evidence, k)
    qa = qa_scores(trace.answer, trace.question.gold_answers)
    row["em"] = qa[0] if qa else None
    row["f1"] = qa[1] if qa else None
    if trace.question.gold_answers:
        row["accuracy"] = max(containment_accuracy(trace.answer, g) for g in trace.question.gold_answers)
    else:
        row["accuracy"] = None
    row["fallback"] = trace.selection.fallback_applied if trace.selection else None
    row["selected_count"] = len(trace.selected_ids) if trace.selection else None
    row["selector_completion_tokens"] = (
        trace.selection.usage.completion_tokens if trace.selection else None
    )
    row["generator_prompt_tokens"] = (
        trace.generation_usage.prompt_tokens if trace.generation_usage else None
    )
    return row


def _mean_entry(values: list[float]) -> dict:
    if not values:
        return {"mean": None, "count": 0}
    return {"mean": sum(values) / len(values), "count": len(values)}


def aggregate_rows(rows: Sequence[dict], config: MetricsConfig = MetricsConfig()) -> dict:
    """Macro-average every metric over the rows where it is defined."""
    out = {}
    for name in metric_names(config):
        values = [row[name] for row in rows if row.get(name) is not None]
        out[name] = _mean_entry(values)
    return out


def merge_aggregates(a: dict, b: dict) -> dict:
    """Combine two disjoint partitions' aggregates by weighted counts."""
    merged = {}
    for name in set(a) | set(b):
        ea, eb = a.get(name, {"mean": None, "count": 0}), b.get(name, {"mean": None, "count": 0})
        count = ea["count"] + eb["count"]
        if count == 0:
            merged[name] = {"mean": None, "count": 0}
        else:
            total = (ea["mean"] or 0.0) * ea["count"] + (eb["mean"] or 0.0) * eb["count"]
            merged[name] = {"mean": total / count, "count": count}
    return merged


def evaluate_traces(
    traces: Sequence[QueryTrace],
    store: PassageStore,
    config: MetricsConfig = MetricsConfig(),
) -> MetricReport:
    if not traces:
        raise MetricsError("no traces to evaluate")
    rows = [evaluate_trace(t, store, config) for t in traces]
    ok_rows = [r for r in rows if "error" not in r]
    aggregate = aggregate_rows(ok_rows, config)
    with_selection = [t for t in traces if t.selection is not None]
    fallback_rate = (
        sum(1 for t in with_selection if t.selection.fallback_applied) / len(with_selection)
        if with_selection
        else None
    )
    selector_tokens = [r["selector_completion_tokens"] for r in ok_rows if r.get("selector_completion_tokens") is not None]
    generator_tokens = [r["generator_prompt_tokens"] for r in ok_rows if r.get("generator_prompt_tokens") is not None]
    selected_counts = [r["selected_count"] for r in ok_rows if r.get("selected_count") is not None]
    efficiency = {
        "mean_selector_completion_tokens": _mean_entry(selector_tokens)["mean"],
        "mean_generator_prompt_tokens": _mean_entry(generator_tokens)["mean"],
        "mean_selected_count": _mean_entry(selected_counts)["mean"],
    }
    counts = {
        "queries": len(traces),
        "errors": sum(1 for r in rows if "error" in r),
        "no_candidates": sum(1 for t in traces if t.no_candidates),
        "excluded_rank": sum(1 for r in ok_rows if r.get(f"mrr@{config.rank_k}") is None),
        "excluded_evidence": sum(1 for r in ok_rows if r.get("hit@1") is None),
        "excluded_answer": sum(1 for r in ok_rows if r.get("em") is None),
    }
    return MetricReport(
        per_query=rows,
        aggregate=aggregate,
        counts=counts,
        fallback_rate=fallback_rate,
        efficiency=efficiency,
        config=config.to_dict(),
    )


def write_plot_data(report: MetricReport, out_dir: str | Path) -> list[Path]:
    """Plain columnar exports: k vs hit@k and k vs ic@k."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    max_k = report.config.get("max_k", 10)
    for stem, prefix in (("hit_at_k", "hit@"), ("ic_at_k", "ic@")):
        path = out_dir / f"{stem}.tsv"
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"k\t{prefix}k\n")
            for k in range(1, max_k + 1):
                entry = report.aggregate.get(f"{prefix}{k}", {"mean": None})
                mean = entry["mean"]
                fh.write(f"{k}\t{'' if mean is None else repr(mean)}\n")
        written.append(path)
    return written
