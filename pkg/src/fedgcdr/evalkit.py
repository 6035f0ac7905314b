"""Leave-one-out top-K evaluation against sampled negatives."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SplitPair


class EvalError(ValueError):
    pass


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    n_users: int
    n_skipped: int = 0
    seed: int | None = None
    ranks: dict[int, int] = field(default_factory=dict, repr=False)

    def to_json(self) -> str:
        payload = {
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "n_users": self.n_users,
            "n_skipped": self.n_skipped,
            "seed": self.seed,
        }
        return json.dumps(payload, sort_keys=True, indent=2)

    def write_json(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")

    def write_ranks(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user_idx", "rank"])
            w.writerows(sorted(self.ranks.items()))


def rank_candidates(scores: np.ndarray, candidates: np.ndarray, positive: int) -> int:
    """1-indexed rank of ``positive`` when candidates are sorted by score, ties to the smaller index."""
    scores = np.asarray(scores, dtype=float)
    candidates = np.asarray(candidates)
    hit = np.flatnonzero(candidates == positive)
    if len(hit) == 0:
        raise EvalError(f"positive item {positive} missing from candidates")
    s = scores[hit[0]]
    ahead = (scores > s) | ((scores == s) & (candidates < positive))
    return int(ahead.sum()) + 1


def hr_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        return 0.0
    return int((ranks <= k).sum()) / len(ranks)


def ndcg_at_k(ranks: Sequence[int], k: int) -> float:
    ranks = np.asarray(ranks, dtype=np.int64)
    if len(ranks) == 0:
        return 0.0
    # exact rational mean of the float gains, rounded once; at most k distinct terms
    counts = np.bincount(ranks[(ranks >= 1) & (ranks <= k)], minlength=k + 1)
    total = sum((int(c) * Fraction(1.0 / math.log2(r + 1)) for r, c in enumerate(counts) if c), Fraction(0))
    return float(total / len(ranks))


def evaluate(
    user_emb: np.ndarray,
    item_emb: np.ndarray,
    split: SplitPair,
    negatives: dict[int, np.ndarray],
    ks: Sequence[int] = (5, 10),
    seed: int | None = None,
) -> MetricsReport:
    """Score each test user's positive against its pre-sampled negatives by inner product."""
    ranks: dict[int, int] = {}
    skipped = 0
    for u, pos in zip(split.test_users.tolist(), split.test_items.tolist()):
        negs = negatives.get(u)
        if negs is None:
            skipped += 1
            continue
        cand = np.concatenate([[pos], negs])
        scores = item_emb[cand] @ user_emb[u]
        ranks[u] = rank_candidates(scores, cand, pos)
    r = np.fromiter(ranks.values(), dtype=np.int64, count=len(ranks))
    return MetricsReport(
        {k: hr_at_k(r, k) for k in ks},
        {k: ndcg_at_k(r, k) for k in ks},
        len(ranks),
        skipped,
        seed,
        ranks,
    )
