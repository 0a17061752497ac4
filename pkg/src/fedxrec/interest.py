"""Potential-interest mining and interpolated (mixed) item vectors."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DomainDataset, l2_normalize_rows, sample_uniform_negatives
from .losses import MixedItems


@dataclass(frozen=True)
class InterpolationConfig:
    mu: float = 0.7
    sigma: float = 0.1
    threshold: float = 0.5
    top_t: int = 4
    neg_samples: int = 4
    max_draws: int = 100

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.top_t < 1 or self.neg_samples < 1:
            raise ValueError("top_t and neg_samples must be >= 1")
        if not self.sigma > 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")


@dataclass(frozen=True, eq=False)
class PotentialItemIndex:
    """Per training pair, up to T potentially positive items (padded with -1).

    Row ``k`` belongs to ``pairs[k]``; candidates are sorted by descending
    score, ties by item index.
    """

    pairs: np.ndarray
    items: np.ndarray
    scores: np.ndarray

    @property
    def counts(self) -> np.ndarray:
        return (self.items >= 0).sum(axis=1)

    def lookup(self, user: int, item: int) -> list[tuple[int, float]]:
        hit = np.flatnonzero((self.pairs[:, 0] == user) & (self.pairs[:, 1] == item))
        if not len(hit):
            raise KeyError((user, item))
        k = hit[0]
        return [(int(i), float(s)) for i, s in zip(self.items[k], self.scores[k]) if i >= 0]

    def to_tsv(self, path: str | Path, dataset: DomainDataset | None = None) -> None:
        """Sidecar for inspection: user, pos_item, candidates, scores."""
        uname = (lambda r: dataset.user_ids[r]) if dataset else str
        iname = (lambda v: dataset.item_ids[v]) if dataset else str
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["user", "pos_item", "candidates", "scores"])
            for (u, v), items, scores in zip(self.pairs, self.items, self.scores):
                keep = items >= 0
                w.writerow([uname(u), iname(v), ",".join(iname(i) for i in items[keep]),
                            ",".join(f"{s:.6f}" for s in scores[keep])])


def mine_potential_items(dataset: DomainDataset, cfg: InterpolationConfig = InterpolationConfig()) -> PotentialItemIndex:
    """For every training pair (u, v), rank items u never interacted with by
    review-embedding cosine to v and keep those at or above the threshold (top T).
    """
    pairs = dataset.train_pairs
    h = l2_normalize_rows(dataset.item_review_emb)
    valid = np.linalg.norm(h, axis=1) > 0
    sims = h @ h.T
    sims[:, ~valid] = -np.inf
    y = dataset.interactions

    items = np.full((len(pairs), cfg.top_t), -1, dtype=np.int64)
    scores = np.full((len(pairs), cfg.top_t), np.nan)
    for k, (u, v) in enumerate(pairs):
        if not valid[v]:
            continue
        row = sims[v].copy()
        row[y.indices[y.indptr[u] : y.indptr[u + 1]]] = -np.inf
        cand = np.flatnonzero(row >= cfg.threshold)
        if not len(cand):
            continue
        cand = cand[np.lexsort((cand, -row[cand]))][: cfg.top_t]
        items[k, : len(cand)] = cand
        scores[k, : len(cand)] = row[cand]
    return PotentialItemIndex(pairs.copy(), items, scores)


def random_potential_items(
    dataset: DomainDataset, cfg: InterpolationConfig = InterpolationConfig(), seed: int = 0
) -> PotentialItemIndex:
    """Ablation: T uniformly random non-interacted items per pair instead of similar ones."""
    pairs = dataset.train_pairs
    rng = np.random.default_rng([seed, dataset.domain_id, 0x4A5])
    items = sample_uniform_negatives(pairs[:, 0], dataset.interactions, dataset.n_items, rng, cfg.top_t)
    return PotentialItemIndex(pairs.copy(), items, np.full(items.shape, np.nan))


def draw_beta(rng: np.random.Generator, size: int, cfg: InterpolationConfig = InterpolationConfig()) -> np.ndarray:
    """Normal(mu, sigma^2) redrawn until inside (0, 1); after ``max_draws`` tries, clamp."""
    beta = rng.normal(cfg.mu, cfg.sigma, size)
    for _ in range(cfg.max_draws - 1):
        bad = (beta <= 0) | (beta >= 1)
        if not bad.any():
            break
        beta[bad] = rng.normal(cfg.mu, cfg.sigma, int(bad.sum()))
    return np.clip(beta, 0.01, 0.99) if np.any((beta <= 0) | (beta >= 1)) else beta


def mix_positive(e_v, potential_ids, item_emb, cfg: InterpolationConfig = InterpolationConfig(), rng=None, beta=None):
    """m = beta * e_v + (1 - beta) * mean(item_emb[potential_ids]); returns (m, beta).

    With no potential items, m = e_v and beta = 1.
    """
    e_v = np.asarray(e_v, dtype=np.float64)
    potential_ids = list(potential_ids)
    if not potential_ids:
        return e_v.copy(), 1.0
    if beta is None:
        beta = float(draw_beta(rng, 1, cfg)[0])
    e_hat = item_emb[potential_ids].mean(axis=0)
    return beta * e_v + (1.0 - beta) * e_hat, beta


def mix_negative(u: int, anchor: int, dataset: DomainDataset, item_emb, cfg: InterpolationConfig = InterpolationConfig(),
                 rng=None, beta=None):
    """Interpolate the negative ``anchor`` with S uniformly drawn non-interacted items.

    Returns (m, sampled item ids). Fewer than S candidates -> all are used.
    """
    seen = dataset.interacted(u)
    pool = np.setdiff1d(np.arange(dataset.n_items), seen, assume_unique=True)
    s = min(cfg.neg_samples, len(pool))
    sampled = np.sort(rng.choice(pool, s, replace=False))
    m, _ = mix_positive(item_emb[anchor], sampled, item_emb, cfg, rng, beta)
    return m, sampled


def epoch_mixing(
    dataset: DomainDataset,
    index: PotentialItemIndex | None,
    triples: np.ndarray,
    cfg: InterpolationConfig,
    rng: np.random.Generator,
) -> tuple[MixedItems, MixedItems]:
    """Mixing recipes for every training pair of one epoch, indexed by pair.

    Draws depend only on the (seeded) stream and pair order, never on batch
    layout, so any sharding of the epoch reproduces the same vectors.
    ``index=None`` disables mixing (plain item vectors).
    """
    if index is None:
        return MixedItems.plain(triples[:, 1]), MixedItems.plain(triples[:, 2])
    n = len(triples)
    beta_pos = draw_beta(rng, n, cfg)
    beta_neg = draw_beta(rng, n, cfg)
    y = dataset.interactions
    others = _sample_distinct_negatives(triples[:, 0], y, dataset.n_items, cfg.neg_samples, rng)
    pos = MixedItems(triples[:, 1].copy(), beta_pos, index.items)
    neg = MixedItems(triples[:, 2].copy(), beta_neg, others)
    return pos, neg


def _sample_distinct_negatives(rows, y, n_items, s, rng):
    """``s`` distinct non-interacted items per row (-1 padding if the pool is smaller)."""
    out = sample_uniform_negatives(rows, y, n_items, rng, s)
    if s == 1:
        return out
    srt = np.sort(out, axis=1)
    dup = np.flatnonzero((srt[:, 1:] == srt[:, :-1]).any(axis=1))
    for r in dup:
        seen = y.indices[y.indptr[rows[r]] : y.indptr[rows[r] + 1]]
        pool = np.setdiff1d(np.arange(n_items), seen, assume_unique=True)
        k = min(s, len(pool))
        out[r] = -1
        out[r, :k] = rng.choice(pool, k, replace=False)
    return out
