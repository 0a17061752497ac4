"""Loss terms and their exact gradients.

Gradients are dicts keyed like :meth:`ModelParams.named`; missing keys mean
zero. Review embeddings and received prototypes are constants and never get
gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import ModelParams, mlp_backward, mlp_forward, sigmoid

PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    gamma: float = 0.2
    alpha: float = 0.05
    # None: every other in-batch entity is a negative.
    batch_negatives: int | None = None
    # Contrast against every entity with a review embedding, not just the batch.
    full_negatives: bool = False

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.gamma < 0 or self.alpha < 0:
            raise ValueError("gamma and alpha must be >= 0")


@dataclass
class LossBreakdown:
    l_prd: float
    l_intra_u: float
    l_intra_v: float
    l_inter: float
    total: float
    grads: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in ("l_prd", "l_intra_u", "l_intra_v", "l_inter", "total")}


def cosine_sim_scaled(x: np.ndarray, y: np.ndarray, tau: float) -> float:
    nx, ny = np.linalg.norm(x), np.linalg.norm(y)
    if nx == 0 or ny == 0:
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return float(np.dot(x, y) / (nx * ny * tau))


def _unit(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("cosine similarity is undefined for a zero-norm vector")
    return x / norms, norms


def _unit_backward(g_hat: np.ndarray, x_hat: np.ndarray, norms: np.ndarray) -> np.ndarray:
    return (g_hat - np.sum(g_hat * x_hat, axis=-1, keepdims=True) * x_hat) / norms


def contrastive(
    anchors: np.ndarray,
    candidates: np.ndarray,
    positive: np.ndarray,
    tau: float,
    mask: np.ndarray | None = None,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean InfoNCE over anchor rows with cosine/tau logits.

    ``positive[i]`` indexes the candidate paired with anchor ``i``; every other
    candidate allowed by ``mask[i]`` is a negative. Returns
    (loss, d_anchors, d_candidates).
    """
    n = len(anchors)
    a_hat, a_norm = _unit(anchors)
    c_hat, c_norm = _unit(candidates)
    logits = a_hat @ c_hat.T / tau
    rows = np.arange(n)
    if mask is not None:
        mask = mask.copy()
        mask[rows, positive] = True
        logits = np.where(mask, logits, -np.inf)
    top = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - top)
    denom = ex.sum(axis=1, keepdims=True)
    # Shifting the positive logit too keeps the equal-logit case exactly log(n).
    loss = float(np.mean(np.log(denom[:, 0]) - (logits[rows, positive] - top[:, 0])))

    dlogits = ex / denom
    dlogits[rows, positive] -= 1.0
    dlogits /= n * tau
    d_a = _unit_backward(dlogits @ c_hat, a_hat, a_norm)
    d_c = _unit_backward(dlogits.T @ a_hat, c_hat, c_norm)
    return loss, d_a, d_c


def infonce(anchor, positive, negatives, tau: float):
    """Single-anchor InfoNCE; returns (loss, {"anchor", "positive", "negatives"} grads)."""
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] < 1:
        raise ValueError("InfoNCE needs at least one negative")
    cands = np.vstack([positive, negatives])
    loss, d_a, d_c = contrastive(np.atleast_2d(anchor), cands, np.array([0]), tau)
    return loss, {"anchor": d_a[0], "positive": d_c[0], "negatives": d_c[1:]}


def _negative_mask(n_anchors: int, n_cands: int, k: int | None) -> np.ndarray | None:
    """Restrict each anchor to the next ``k`` candidates in cyclic batch order."""
    if k is None or k >= n_cands - 1:
        return None
    mask = np.zeros((n_anchors, n_cands), dtype=bool)
    offsets = np.arange(1, k + 1)
    idx = (np.arange(n_anchors)[:, None] + offsets) % n_cands
    mask[np.arange(n_anchors)[:, None], idx] = True
    return mask


def _side_loss(emb, review, idx, cfg: LossConfig):
    """InfoNCE between ID embeddings and review embeddings for one entity type."""
    idx = np.unique(idx)
    idx = idx[np.linalg.norm(review[idx], axis=1) > 0]
    grad = np.zeros_like(emb)
    if len(idx) < 2:
        return 0.0, grad, len(idx)
    if cfg.full_negatives:
        pool = np.flatnonzero(np.linalg.norm(review, axis=1) > 0)
        positive = np.searchsorted(pool, idx)
        loss, d_a, _ = contrastive(emb[idx], review[pool], positive, cfg.tau)
    else:
        mask = _negative_mask(len(idx), len(idx), cfg.batch_negatives)
        loss, d_a, _ = contrastive(emb[idx], review[idx], np.arange(len(idx)), cfg.tau, mask)
    grad[idx] = d_a
    return loss, grad, len(idx)


def intra_losses(
    params: ModelParams,
    user_review: np.ndarray,
    item_review: np.ndarray,
    users: np.ndarray,
    items: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, float, dict[str, np.ndarray]]:
    """User- and item-side alignment of ID embeddings with review embeddings.

    Anchors are the distinct batch members with a non-zero review row; the
    review rows of the other anchors are the negatives.
    """
    if len(np.unique(users)) < 2 and len(np.unique(items)) < 2:
        raise ValueError("intra-domain contrast needs at least two distinct batch members")
    l_u, g_u, _ = _side_loss(params.user_emb, user_review, users, cfg)
    l_v, g_v, _ = _side_loss(params.item_emb, item_review, items, cfg)
    return l_u, l_v, {"user_emb": g_u, "item_emb": g_v}


def inter_loss(
    params: ModelParams,
    targets: np.ndarray,
    has_target: np.ndarray,
    users: np.ndarray,
    cfg: LossConfig,
    user_ids=None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Contrast each batch user's ID embedding with its global prototype.

    ``targets`` is (|U|, d) by local user row; other batch users' prototypes are
    the negatives. Prototypes are constants, so only ``user_emb`` gets a gradient.
    """
    users = np.unique(users)
    missing = users[~has_target[users]]
    if len(missing):
        name = user_ids[missing[0]] if user_ids is not None else int(missing[0])
        raise KeyError(f"no global prototype for user {name!r}")
    grad = np.zeros_like(params.user_emb)
    if len(users) < 2:
        return 0.0, {"user_emb": grad}
    mask = _negative_mask(len(users), len(users), cfg.batch_negatives)
    loss, d_a, _ = contrastive(params.user_emb[users], targets[users], np.arange(len(users)), cfg.tau, mask)
    grad[users] = d_a
    return loss, {"user_emb": grad}


@dataclass(frozen=True)
class MixedItems:
    """Recipe for interpolated item vectors: beta * e[anchor] + (1-beta) * mean(e[others]).

    ``others`` is padded with -1; rows with no others collapse to e[anchor].
    """

    anchor: np.ndarray
    beta: np.ndarray
    others: np.ndarray

    @classmethod
    def plain(cls, items) -> "MixedItems":
        items = np.asarray(items, dtype=np.int64)
        return cls(items, np.ones(len(items)), np.full((len(items), 0), -1, dtype=np.int64))

    @property
    def counts(self) -> np.ndarray:
        return (self.others >= 0).sum(axis=1)

    def effective_beta(self) -> np.ndarray:
        return np.where(self.counts > 0, self.beta, 1.0)

    def vectors(self, table: np.ndarray) -> np.ndarray:
        beta = self.effective_beta()[:, None]
        out = beta * table[self.anchor]
        counts = self.counts
        if self.others.shape[1]:
            valid = self.others >= 0
            gathered = table[np.where(valid, self.others, 0)] * valid[..., None]
            mean = gathered.sum(axis=1) / np.maximum(counts, 1)[:, None]
            out = out + (1.0 - beta) * mean * (counts > 0)[:, None]
        return out

    def backward(self, d_mixed: np.ndarray, grad_table: np.ndarray) -> None:
        """Scatter-add the gradient of :meth:`vectors` into ``grad_table``."""
        beta = self.effective_beta()[:, None]
        np.add.at(grad_table, self.anchor, beta * d_mixed)
        if self.others.shape[1]:
            counts = self.counts
            share = (1.0 - beta) * d_mixed / np.maximum(counts, 1)[:, None]
            r, c = np.nonzero(self.others >= 0)
            np.add.at(grad_table, self.others[r, c], share[r])


@dataclass(frozen=True)
class Fusion:
    """Element-wise fusion used by the "*_sum" ablations: x <- (x + side) / 2.

    Sides are constants (review embeddings or received prototypes); masks
    select which rows are fused.
    """

    user_side: np.ndarray | None = None
    user_mask: np.ndarray | None = None
    item_side: np.ndarray | None = None
    item_mask: np.ndarray | None = None

    @staticmethod
    def _apply(table, side, mask):
        if side is None:
            return table, None
        w = np.where(mask, 0.5, 1.0)[:, None] if mask is not None else np.full((len(table), 1), 0.5)
        return w * table + (1.0 - w) * side, w

    def user_table(self, params: ModelParams):
        return self._apply(params.user_emb, self.user_side, self.user_mask)

    def item_table(self, params: ModelParams):
        return self._apply(params.item_emb, self.item_side, self.item_mask)


def prediction_loss(
    params: ModelParams,
    users: np.ndarray,
    pos: MixedItems,
    neg: MixedItems,
    fusion: Fusion | None = None,
) -> tuple[float, dict[str, np.ndarray]]:
    """Binary cross-entropy over 2n rows (label 1 for ``pos``, 0 for ``neg``).

    Backprop runs through the MLP, the interpolation weights and any fusion.
    Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped rows pass no gradient.
    """
    fusion = fusion or Fusion()
    d = params.d
    users = np.asarray(users, dtype=np.int64)
    n = len(users)
    utab, uw = fusion.user_table(params)
    itab, iw = fusion.item_table(params)
    u_vec = utab[users]
    x = np.vstack([
        np.concatenate([u_vec, pos.vectors(itab)], axis=1),
        np.concatenate([u_vec, neg.vectors(itab)], axis=1),
    ])
    labels = np.concatenate([np.ones(n), np.zeros(n)])
    logits, acts = mlp_forward(params.layers, x)
    p = sigmoid(logits)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    loss = float(-np.mean(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc)))

    dlogits = (p - labels) / (2 * n)
    dlogits[(p != pc)] = 0.0
    dx, layer_grads = mlp_backward(params.layers, acts, dlogits)

    g_user = np.zeros_like(params.user_emb)
    np.add.at(g_user, users, dx[:n, :d] + dx[n:, :d])
    g_item = np.zeros_like(params.item_emb)
    pos.backward(dx[:n, d:], g_item)
    neg.backward(dx[n:, d:], g_item)
    if uw is not None:
        g_user *= uw
    if iw is not None:
        g_item *= iw

    grads = {"user_emb": g_user, "item_emb": g_item}
    for k, (dw, db) in enumerate(layer_grads):
        grads[f"W{k}"] = dw
        grads[f"b{k}"] = db
    return loss, grads


def total_loss(
    l_prd: float,
    g_prd: dict[str, np.ndarray],
    l_intra_u: float = 0.0,
    l_intra_v: float = 0.0,
    g_intra: dict[str, np.ndarray] | None = None,
    l_inter: float = 0.0,
    g_inter: dict[str, np.ndarray] | None = None,
    cfg: LossConfig = LossConfig(),
) -> LossBreakdown:
    """Weighted sum L = L_prd + gamma (L_u + L_v) + alpha L_inter, gradients alike."""
    grads = {k: v.copy() for k, v in g_prd.items()}
    for weight, part in ((cfg.gamma, g_intra), (cfg.alpha, g_inter)):
        if not part or weight == 0:
            continue
        for k, g in part.items():
            if k in grads:
                grads[k] += weight * g
            else:
                grads[k] = weight * g
    total = l_prd + cfg.gamma * (l_intra_u + l_intra_v) + cfg.alpha * l_inter
    parts = (l_prd, l_intra_u, l_intra_v, l_inter, total)
    if not all(math.isfinite(x) for x in parts):
        raise FloatingPointError(f"non-finite loss: {parts}")
    return LossBreakdown(l_prd, l_intra_u, l_intra_v, l_inter, total, grads)
