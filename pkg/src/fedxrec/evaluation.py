"""Leave-one-out ranking evaluation with sampled negatives (HR@N, NDCG@N)."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .model import mlp_forward

CUTOFFS = (5, 10)
METRICS = ("hr", "ndcg")


class EvaluationError(ValueError):
    pass


@dataclass
class EvalResult:
    """Per-domain metric means; keys look like ``hr_5``, ``ndcg_10``."""

    domains: dict[int, dict[str, float]]
    n_users: dict[int, int]
    seed: int = 0
    run: int = 0
    per_user: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def rows(self) -> list[dict]:
        out = []
        for dom in sorted(self.domains):
            for metric in METRICS:
                for n in CUTOFFS:
                    out.append({"run": self.run, "domain": dom, "metric": metric.upper(), "N": n,
                                "value": self.domains[dom][f"{metric}_{n}"]})
        return out


def hr_ndcg(rank: int, n: int) -> tuple[float, float]:
    """Metrics for a single relevant item at 1-based ``rank`` in a top-``n`` list."""
    if rank <= n:
        return 1.0, 1.0 / math.log2(rank + 1)
    return 0.0, 0.0


def rank_of_positive(scores: np.ndarray, items: np.ndarray, positive: int) -> int:
    """1-based rank of ``positive`` after sorting by score (desc), ties by item index (asc)."""
    order = np.lexsort((items, -scores))
    return int(np.flatnonzero(items[order] == positive)[0]) + 1


def score_candidates(client, user_row: int, candidates: np.ndarray, mixed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Score candidate items for one user; returns (items ranked best-first, their scores).

    Scoring uses the candidate's own item vector; ``mixed=True`` instead feeds
    each candidate's mean-interpolated vector with its mined potential items,
    for studying training/inference mismatch.
    """
    candidates = np.asarray(candidates, dtype=np.int64)
    scores = _score_matrix(client, np.array([user_row]), candidates[None, :], mixed)[0]
    order = np.lexsort((candidates, -scores))
    return candidates[order], scores[order]


def _score_matrix(client, user_rows: np.ndarray, cands: np.ndarray, mixed: bool = False) -> np.ndarray:
    utab, itab = client.scoring_tables()
    if mixed and client.index is not None:
        itab = _mixed_item_table(client, itab)
    n, m = cands.shape
    u = np.repeat(utab[user_rows], m, axis=0)
    v = itab[cands.ravel()]
    logits, _ = mlp_forward(client.params.layers, np.concatenate([u, v], axis=1))
    # Ranking only needs logits; sigmoid is monotone.
    return logits.reshape(n, m)


def _mixed_item_table(client, itab: np.ndarray) -> np.ndarray:
    mu = client.cfg.interp.mu
    out = itab.copy()
    idx = client.index
    for (_, v), items in zip(idx.pairs, idx.items):
        items = items[items >= 0]
        if len(items):
            out[v] = mu * itab[v] + (1 - mu) * itab[items].mean(axis=0)
    return out


def evaluate_client(client, mixed: bool = False, chunk: int = 256) -> tuple[dict[str, float], np.ndarray]:
    """Mean metrics over the domain's test users, plus the per-user rank vector."""
    ds = client.dataset
    if ds.test_pairs is None or len(ds.test_pairs) == 0:
        raise EvaluationError(f"domain {ds.domain_id}: no test users to evaluate")
    cands = np.concatenate([ds.test_pairs[:, 1:2], ds.eval_negatives], axis=1)
    ranks = np.empty(len(cands), dtype=np.int64)
    for s in range(0, len(cands), chunk):
        sl = slice(s, s + chunk)
        scores = _score_matrix(client, ds.test_pairs[sl, 0], cands[sl], mixed)
        for k, (row_scores, row_items) in enumerate(zip(scores, cands[sl])):
            ranks[s + k] = rank_of_positive(row_scores, row_items, row_items[0])
    return metrics_from_ranks(ranks), ranks


def metrics_from_ranks(ranks: Sequence[int]) -> dict[str, float]:
    ranks = np.asarray(ranks)
    if len(ranks) == 0:
        raise EvaluationError("no users evaluated")
    out = {}
    for n in CUTOFFS:
        hits = ranks <= n
        out[f"hr_{n}"] = float(hits.mean())
        out[f"ndcg_{n}"] = float(np.where(hits, 1.0 / np.log2(ranks + 1.0), 0.0).mean())
    return out


def evaluate_run(clients, seed: int = 0, run: int = 0, mixed: bool = False) -> EvalResult:
    domains, n_users, per_user = {}, {}, {}
    for c in clients:
        metrics, ranks = evaluate_client(c, mixed)
        domains[c.dataset.domain_id] = metrics
        n_users[c.dataset.domain_id] = len(ranks)
        per_user[c.dataset.domain_id] = ranks
    return EvalResult(domains, n_users, seed, run, per_user)


def repeat_runs(run_fn: Callable[[int], EvalResult], seeds: Sequence[int]) -> dict:
    """Call ``run_fn(seed)`` for each seed and summarise per domain/metric as mean and sample std."""
    results = [run_fn(s) for s in seeds]
    return summarize(results)


def summarize(results: Sequence[EvalResult]) -> dict:
    summary: dict = {}
    for dom in sorted(results[0].domains):
        summary[dom] = {}
        for key in results[0].domains[dom]:
            vals = np.array([r.domains[dom][key] for r in results])
            summary[dom][key] = {"mean": float(vals.mean()),
                                 "std": float(vals.std(ddof=1)) if len(vals) > 1 else 0.0,
                                 "n": len(vals)}
    return summary


def write_results_csv(results: Sequence[EvalResult], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["run", "domain", "metric", "N", "value"], lineterminator="\n")
        w.writeheader()
        for r in results:
            for row in r.rows():
                w.writerow({**row, "value": repr(float(row["value"]))})


def write_summary_json(summary: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps({str(k): v for k, v in summary.items()}, indent=2, sort_keys=True))
