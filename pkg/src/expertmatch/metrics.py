"""Ranking evaluation metrics: P@N, average precision, and cascade ERR@N.

All metrics take a ranked id list plus the set of relevant ids, so they can be
cross-checked against brute-force reference implementations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence


@dataclass(frozen=True)
class JudgedRanking:
    ranked: tuple[str, ...]
    relevant: frozenset[str]

    def __post_init__(self):
        if len(set(self.ranked)) != len(self.ranked):
            raise ValueError("ranked list contains duplicates")
        if not self.relevant:
            raise ValueError("relevant set is empty")


def judged(ranked: Sequence[str], relevant: Iterable[str]) -> JudgedRanking:
    return JudgedRanking(tuple(ranked), frozenset(relevant))


def precision_at_n(ranking: JudgedRanking, n: int) -> float:
    if n < 1:
        raise ValueError(f"precision_at_n needs n >= 1, got {n}")
    hits = sum(1 for doc in ranking.ranked[:n] if doc in ranking.relevant)
    return hits / n


def average_precision(ranking: JudgedRanking) -> float:
    """Mean of precision-at-rank over relevant items; unretrieved items count 0."""
    hits = 0
    total = 0.0
    for rank, doc in enumerate(ranking.ranked, start=1):
        if doc in ranking.relevant:
            hits += 1
            total += hits / rank
    return total / len(ranking.relevant)


def err_at_n(ranking: JudgedRanking, n: int) -> float:
    """Cascade expected reciprocal rank with binary gains (R = 1/2 if relevant)."""
    if n < 1:
        raise ValueError(f"err_at_n needs n >= 1, got {n}")
    err = 0.0
    not_stopped = 1.0
    for rank, doc in enumerate(ranking.ranked[:n], start=1):
        r = 0.5 if doc in ranking.relevant else 0.0
        err += not_stopped * r / rank
        not_stopped *= 1.0 - r
    return err


@dataclass
class MetricsReport:
    p_at_1: float
    map: float
    err_at_5: float
    query_count: int
    buckets: dict[str, "MetricsReport"] = field(default_factory=dict)

    def to_json(self) -> dict:
        out = {
            "overall": {"p_at_1": self.p_at_1, "map": self.map,
                        "err_at_5": self.err_at_5, "query_count": self.query_count},
        }
        if self.buckets:
            out["buckets"] = {
                name: {"p_at_1": b.p_at_1, "map": b.map,
                       "err_at_5": b.err_at_5, "query_count": b.query_count}
                for name, b in self.buckets.items()
            }
        return out

    def table(self) -> str:
        rows = [("overall", self)]
        rows.extend(sorted(self.buckets.items()))
        name_w = max(len(name) for name, _ in rows)
        lines = [f"{'':<{name_w}}  {'P@1':>8}  {'MAP':>8}  {'ERR@5':>8}  {'queries':>8}"]
        for name, rep in rows:
            lines.append(f"{name:<{name_w}}  {rep.p_at_1:>8.4f}  {rep.map:>8.4f}  "
                         f"{rep.err_at_5:>8.4f}  {rep.query_count:>8d}")
        return "\n".join(lines)


def aggregate(per_query: Sequence[Mapping[str, float]]) -> MetricsReport:
    """Arithmetic mean of per-query metric dicts with keys p_at_1/ap/err_at_5."""
    if not per_query:
        raise ValueError("aggregate over an empty query set")
    n = len(per_query)
    return MetricsReport(
        p_at_1=sum(m["p_at_1"] for m in per_query) / n,
        map=sum(m["ap"] for m in per_query) / n,
        err_at_5=sum(m["err_at_5"] for m in per_query) / n,
        query_count=n,
    )


def score_ranking(ranking: JudgedRanking, p_n: int = 1, err_n: int = 5) -> dict[str, float]:
    return {
        "p_at_1": precision_at_n(ranking, p_n),
        "ap": average_precision(ranking),
        "err_at_5": err_at_n(ranking, err_n),
    }
