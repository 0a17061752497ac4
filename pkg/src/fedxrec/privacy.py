"""Local prototypes, the clip-plus-Laplace publication mechanism, and
server-side prototype aggregation.

Upload/broadcast messages are plain JSON so the simulator can capture and
inspect exactly what crosses the client/server boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

AGGREGATIONS = ("weighted", "average", "sum")


@dataclass(frozen=True)
class PrivacyConfig:
    clip_c: float = 0.1
    noise_eta: float = 0.3
    group_n: int = 10
    group_mode: str = "overlap"  # or "strict": identical item sets only
    aggregation: str = "weighted"
    enabled: bool = True  # False publishes raw prototypes (no clip, no noise)

    def __post_init__(self):
        if not self.clip_c > 0:
            raise ValueError(f"clip_c must be > 0, got {self.clip_c}")
        if self.noise_eta < 0:
            raise ValueError(f"noise_eta must be >= 0, got {self.noise_eta}")
        if self.group_n < 1:
            raise ValueError("group_n must be >= 1")
        if self.group_mode not in ("overlap", "strict"):
            raise ValueError(f"unknown group_mode {self.group_mode!r}")
        if self.aggregation not in AGGREGATIONS:
            raise ValueError(f"unknown aggregation {self.aggregation!r}")

    def epsilon(self) -> float:
        return privacy_budget(self)


def privacy_budget(cfg: PrivacyConfig) -> float:
    """Per-publication budget 2C/eta; ``inf`` when no noise is added."""
    if not cfg.enabled or cfg.noise_eta == 0:
        return math.inf
    return 2.0 * cfg.clip_c / cfg.noise_eta


@dataclass(frozen=True, eq=False)
class Prototype:
    user: int
    vector: np.ndarray
    domain: int = 0


@dataclass(frozen=True, eq=False)
class PrivatePrototype(Prototype):
    pass


@dataclass(eq=False)
class GlobalPrototypeSet:
    users: np.ndarray
    vectors: np.ndarray
    round: int = 0

    @classmethod
    def empty(cls, d: int = 0) -> "GlobalPrototypeSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros((0, d)), 0)

    def __len__(self) -> int:
        return len(self.users)

    def __contains__(self, user) -> bool:
        return int(user) in self._index

    def get(self, user: int) -> np.ndarray:
        return self.vectors[self._index[int(user)]]

    @property
    def _index(self) -> dict[int, int]:
        cached = self.__dict__.get("_idx")
        if cached is None or len(cached) != len(self.users):
            cached = {int(u): k for k, u in enumerate(self.users)}
            self.__dict__["_idx"] = cached
        return cached

    def rows_for(self, global_users: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(targets, mask) aligned with ``global_users``; missing users get zero rows."""
        d = self.vectors.shape[1] if self.vectors.size else 0
        out = np.zeros((len(global_users), d))
        mask = np.zeros(len(global_users), dtype=bool)
        idx = self._index
        for r, g in enumerate(global_users):
            k = idx.get(int(g))
            if k is not None:
                out[r] = self.vectors[k]
                mask[r] = True
        return out, mask


# ---------------------------------------------------------------------------
# Client side
# ---------------------------------------------------------------------------


def co_interaction_counts(y: sp.csr_matrix) -> sp.csr_matrix:
    y = sp.csr_matrix(y, dtype=np.int64)
    return (y @ y.T).tocsr()


def form_group(u: int, y: sp.csr_matrix, group_n: int = 10, mode: str = "overlap", common=None) -> np.ndarray:
    """u followed by up to N-1 users sharing the most items with u (ties: lower index).

    ``strict`` mode keeps only users whose item set equals u's. ``common`` may
    carry a precomputed :func:`co_interaction_counts` matrix.
    """
    common = co_interaction_counts(y) if common is None else common
    row = common.getrow(u)
    others, shared = row.indices, row.data
    keep = (others != u) & (shared > 0)
    others, shared = others[keep], shared[keep]
    if mode == "strict":
        sizes = np.diff(y.indptr)
        keep = (shared == sizes[u]) & (sizes[others] == sizes[u])
        others, shared = others[keep], shared[keep]
    order = np.lexsort((others, -shared))
    return np.concatenate([[u], others[order][: group_n - 1]]).astype(np.int64)


def form_groups(y: sp.csr_matrix, group_n: int = 10, mode: str = "overlap") -> list[np.ndarray]:
    common = co_interaction_counts(y)
    return [form_group(u, y, group_n, mode, common) for u in range(y.shape[0])]


def local_prototype(group, user_emb: np.ndarray) -> np.ndarray:
    group = np.asarray(group, dtype=np.int64)
    if len(group) == 0:
        raise ValueError("a group must contain at least its own user")
    return user_emb[group].mean(axis=0)


def local_prototypes(groups: list[np.ndarray], user_emb: np.ndarray) -> np.ndarray:
    return np.vstack([local_prototype(g, user_emb) for g in groups])


# Clipped rows land this far inside the ball, so ||out|| <= c holds under any
# float64 norm evaluation order (rounding error ~ d * 1e-16).
CLIP_MARGIN = 1e-12


def clip_l2(p: np.ndarray, c: float) -> np.ndarray:
    """Scale rows down to L2 norm at most ``c``; rows already inside are untouched."""
    p = np.asarray(p, dtype=np.float64)
    norms = np.linalg.norm(p, axis=-1, keepdims=True)
    scale = np.where(norms > c, c * (1.0 - CLIP_MARGIN) / np.where(norms > 0, norms, 1.0), 1.0)
    return p * scale


def laplace_noise(rng: np.random.Generator, scale: float, size) -> np.ndarray:
    """Laplace(0, scale) by inverse CDF of seeded uniforms on (-1/2, 1/2)."""
    u = rng.random(size) - 0.5
    # rng.random() can return exactly 0.0, which would map to -inf.
    u = np.where(u == -0.5, 0.0, u)
    return -scale * np.sign(u) * np.log1p(-2.0 * np.abs(u))


def ldp_publish(p: np.ndarray, cfg: PrivacyConfig, rng: np.random.Generator) -> np.ndarray:
    """clip(p, C) + Lap(0, eta) per coordinate; works on one vector or a stack."""
    if not cfg.enabled:
        return np.array(p, dtype=np.float64)
    out = clip_l2(p, cfg.clip_c)
    if cfg.noise_eta > 0:
        out = out + laplace_noise(rng, cfg.noise_eta, out.shape)
    return out


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

UPLOAD_FIELDS = {"round", "domain_id", "entries", "counts"}
BROADCAST_FIELDS = {"round", "entries"}


def _f32_list(vec) -> list[float]:
    return [float(x) for x in np.asarray(vec, dtype=np.float32)]


def encode_upload(round_: int, domain_id: int, users, vectors, counts) -> bytes:
    msg = {
        "round": int(round_),
        "domain_id": int(domain_id),
        "entries": [{"user": int(u), "vector": _f32_list(v)} for u, v in zip(users, vectors)],
        "counts": [{"user": int(u), "n": int(n)} for u, n in zip(users, counts)],
    }
    return json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()


def decode_upload(payload: bytes) -> dict:
    msg = json.loads(payload)
    if set(msg) != UPLOAD_FIELDS:
        raise ValueError(f"upload has fields {sorted(msg)}, expected {sorted(UPLOAD_FIELDS)}")
    return msg


def encode_broadcast(g: GlobalPrototypeSet) -> bytes:
    msg = {"round": int(g.round),
           "entries": [{"user": int(u), "vector": _f32_list(v)} for u, v in zip(g.users, g.vectors)]}
    return json.dumps(msg, sort_keys=True, separators=(",", ":")).encode()


def decode_broadcast(payload: bytes) -> GlobalPrototypeSet:
    msg = json.loads(payload)
    entries = msg["entries"]
    if not entries:
        return GlobalPrototypeSet(np.zeros(0, dtype=np.int64), np.zeros((0, 0)), msg["round"])
    users = np.array([e["user"] for e in entries], dtype=np.int64)
    vectors = np.array([e["vector"] for e in entries], dtype=np.float64)
    return GlobalPrototypeSet(users, vectors, msg["round"])


# ---------------------------------------------------------------------------
# Server side
# ---------------------------------------------------------------------------


def aggregation_weights(counts: dict[int, float], method: str = "weighted") -> dict[int, float]:
    """Per-domain weights for one user given that user's per-domain interaction counts."""
    if method == "sum":
        return {i: 1.0 for i in counts}
    if method == "average":
        return {i: 1.0 / len(counts) for i in counts}
    total = float(sum(counts.values()))
    if total <= 0:
        raise ValueError("cannot weight prototypes of a user with zero interactions")
    return {i: n / total for i, n in counts.items()}


def aggregate_global(
    uploads: list[dict],
    method: str = "weighted",
    round_: int = 0,
) -> GlobalPrototypeSet:
    """Combine decoded uploads into g_u = sum_i w_i p_u^i.

    ``weighted`` uses w_i = n_i(u) / sum_j n_j(u); users seen in one domain get
    that domain's prototype unchanged.
    """
    vecs: dict[int, dict[int, np.ndarray]] = {}
    counts: dict[int, dict[int, float]] = {}
    for msg in uploads:
        dom = msg["domain_id"]
        n_by_user = {c["user"]: c["n"] for c in msg["counts"]}
        for e in msg["entries"]:
            u = e["user"]
            if u not in n_by_user:
                raise ValueError(f"domain {dom} uploaded no count for user {u}")
            vecs.setdefault(u, {})[dom] = np.asarray(e["vector"], dtype=np.float64)
            counts.setdefault(u, {})[dom] = n_by_user[u]
    users = np.array(sorted(vecs), dtype=np.int64)
    if not len(users):
        return GlobalPrototypeSet.empty()
    out = []
    for u in users:
        w = aggregation_weights(counts[int(u)], method)
        out.append(sum(w[i] * vecs[int(u)][i] for i in sorted(w)))
    return GlobalPrototypeSet(users, np.vstack(out), round_)
