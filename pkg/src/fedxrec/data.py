"""Per-domain interaction data: loading, filtering, review embeddings, splits.

A :class:`DomainDataset` is one client's private view of the world. Users are
identified by *global* indices (shared across domains so prototypes can be
aligned by the server); items are domain-local.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

N_EVAL_NEGATIVES = 99
MIN_USER_INTERACTIONS = 5
MIN_ITEM_INTERACTIONS = 10

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class DataError(ValueError):
    """Raised for malformed input files or datasets that violate a precondition."""


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    rating: float
    review_text: str = ""
    timestamp: int = 0

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 200
    n_items_per_domain: int = 300
    n_domains: int = 2
    latent_dim: int = 8
    density: float = 0.02
    overlap_fraction: float = 1.0
    seed: int = 0
    dim: int = 64
    # Logit scale applied to z_u . w_v / sqrt(latent_dim).
    affinity_scale: float = 2.0
    review_noise: float = 0.5
    # None: same as review_noise.
    user_review_noise: float | None = None

    def __post_init__(self):
        if min(self.n_users, self.n_items_per_domain, self.n_domains, self.latent_dim, self.dim) < 1:
            raise DataError("all counts in SyntheticSpec must be >= 1")
        if not self.density > 0 or self.density >= 1:
            raise DataError(f"density must lie in (0, 1), got {self.density}")
        if not 0 < self.overlap_fraction <= 1:
            raise DataError(f"overlap_fraction must lie in (0, 1], got {self.overlap_fraction}")


@dataclass(frozen=True, eq=False)
class DomainDataset:
    """Implicit-feedback data for one domain.

    ``pairs`` holds every positive (local user row, item) once, with
    ``pair_time`` alongside. ``users[r]`` is the global index of local row
    ``r``. Split fields stay empty until :func:`split_leave_one_out` runs.
    """

    domain_id: int
    user_ids: tuple[str, ...]
    item_ids: tuple[str, ...]
    users: np.ndarray
    pairs: np.ndarray
    pair_time: np.ndarray
    user_docs: tuple[str, ...] = ()
    item_docs: tuple[str, ...] = ()
    user_review_emb: np.ndarray | None = None
    item_review_emb: np.ndarray | None = None
    train_pairs: np.ndarray | None = None
    test_pairs: np.ndarray | None = None
    eval_negatives: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_items(self) -> int:
        return len(self.item_ids)

    @cached_property
    def interactions(self) -> sp.csr_matrix:
        """Binary matrix Y (|U| x |V|)."""
        return _binary_matrix(self.pairs, self.n_users, self.n_items)

    @cached_property
    def train_matrix(self) -> sp.csr_matrix:
        if self.train_pairs is None:
            raise DataError("dataset has not been split")
        return _binary_matrix(self.train_pairs, self.n_users, self.n_items)

    @property
    def is_split(self) -> bool:
        return self.train_pairs is not None

    def interacted(self, row: int) -> np.ndarray:
        y = self.interactions
        return y.indices[y.indptr[row] : y.indptr[row + 1]]

    def digest(self) -> str:
        """Stable content hash, recorded in run manifests."""
        h = hashlib.sha256()
        for arr in (self.users, self.pairs, self.pair_time, self.train_pairs, self.test_pairs,
                    self.eval_negatives, self.user_review_emb, self.item_review_emb):
            if arr is not None:
                h.update(np.ascontiguousarray(arr).tobytes())
        h.update("\x00".join(self.user_ids).encode())
        h.update("\x00".join(self.item_ids).encode())
        return h.hexdigest()[:16]


def _binary_matrix(pairs: np.ndarray, n_rows: int, n_cols: int) -> sp.csr_matrix:
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    data = np.ones(len(pairs), dtype=np.int8)
    y = sp.csr_matrix((data, (pairs[:, 0], pairs[:, 1])), shape=(n_rows, n_cols))
    y.sum_duplicates()
    y.data[:] = 1
    y.sort_indices()
    return y


# ---------------------------------------------------------------------------
# Loading and filtering
# ---------------------------------------------------------------------------


def read_interactions(path: str | Path, format: str | None = None) -> list[Interaction]:
    """Parse a CSV (header required) or JSONL interaction file."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    fmt = (format or path.suffix.lstrip(".")).lower()
    rows: list[Interaction] = []
    if fmt == "csv":
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            required = {"user_id", "item_id", "rating"}
            if reader.fieldnames is None or not required <= set(reader.fieldnames):
                raise DataError(f"{path}: header must include {sorted(required)}")
            for lineno, rec in enumerate(reader, start=2):
                rows.append(_parse_record(rec, f"{path}:{lineno}"))
    elif fmt == "jsonl":
        with path.open(encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
                rows.append(_parse_record(rec, f"{path}:{lineno}"))
    else:
        raise DataError(f"unsupported format {fmt!r} (expected csv or jsonl)")
    return rows


def _parse_record(rec: dict, where: str) -> Interaction:
    try:
        ts = rec.get("timestamp")
        return Interaction(
            user_id=str(rec["user_id"]).strip(),
            item_id=str(rec["item_id"]).strip(),
            rating=float(rec["rating"]),
            review_text=str(rec.get("review_text") or ""),
            timestamp=int(float(ts)) if ts not in (None, "") else 0,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"{where}: cannot parse row ({exc})") from None


def filter_interactions(
    rows: Sequence[Interaction],
    min_user: int = MIN_USER_INTERACTIONS,
    min_item: int = MIN_ITEM_INTERACTIONS,
) -> list[Interaction]:
    """Drop sparse users and items until both thresholds hold simultaneously.

    Counts are over interaction rows (repeat reviews of an item count again).
    The loop runs to a fixed point because removing a user can push an item
    below its threshold and vice versa.
    """
    kept = list(rows)
    while True:
        ucount: dict[str, int] = {}
        icount: dict[str, int] = {}
        for r in kept:
            ucount[r.user_id] = ucount.get(r.user_id, 0) + 1
            icount[r.item_id] = icount.get(r.item_id, 0) + 1
        nxt = [r for r in kept if ucount[r.user_id] >= min_user and icount[r.item_id] >= min_item]
        if len(nxt) == len(kept):
            return nxt
        kept = nxt


def build_dataset(rows: Sequence[Interaction], domain_id: int = 0) -> DomainDataset:
    """Assemble a dataset from interactions; ids are indexed lexicographically."""
    rows = [r for r in rows if r.rating > 0]
    if not rows:
        raise DataError("dataset is empty")
    user_ids = tuple(sorted({r.user_id for r in rows}))
    item_ids = tuple(sorted({r.item_id for r in rows}))
    uidx = {u: k for k, u in enumerate(user_ids)}
    iidx = {i: k for k, i in enumerate(item_ids)}

    latest: dict[tuple[int, int], int] = {}
    udocs: list[list[str]] = [[] for _ in user_ids]
    idocs: list[list[str]] = [[] for _ in item_ids]
    for r in rows:
        key = (uidx[r.user_id], iidx[r.item_id])
        latest[key] = max(latest.get(key, r.timestamp), r.timestamp)
        if r.review_text:
            udocs[key[0]].append(r.review_text)
            idocs[key[1]].append(r.review_text)
    keys = sorted(latest)
    pairs = np.array(keys, dtype=np.int64).reshape(-1, 2)
    pair_time = np.array([latest[k] for k in keys], dtype=np.int64)
    return DomainDataset(
        domain_id=domain_id,
        user_ids=user_ids,
        item_ids=item_ids,
        users=np.arange(len(user_ids), dtype=np.int64),
        pairs=pairs,
        pair_time=pair_time,
        user_docs=tuple(" ".join(d) for d in udocs),
        item_docs=tuple(" ".join(d) for d in idocs),
    )


def load_domain(
    path: str | Path,
    format: str | None = None,
    filter: bool = True,
    domain_id: int = 0,
) -> DomainDataset:
    """Read one domain's interactions; any rating > 0 becomes an implicit positive."""
    rows = [r for r in read_interactions(path, format) if r.rating > 0]
    if filter:
        rows = filter_interactions(rows)
        if not rows:
            raise DataError(f"{path}: empty after filtering")
    return build_dataset(rows, domain_id=domain_id)


def align_users(datasets: Sequence[DomainDataset]) -> list[DomainDataset]:
    """Assign global user indices from the sorted union of user ids."""
    universe = sorted(set().union(*(d.user_ids for d in datasets)))
    gidx = {u: k for k, u in enumerate(universe)}
    return [replace(d, users=np.array([gidx[u] for u in d.user_ids], dtype=np.int64)) for d in datasets]


# ---------------------------------------------------------------------------
# Review embeddings
# ---------------------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return [t for t in _TOKEN_SPLIT.split(text.lower()) if t]


def hash_bucket(token: str, dim: int, seed: int = 0) -> int:
    """Seeded 64-bit token hash (keyed BLAKE2b) reduced modulo ``dim``."""
    key = int(seed).to_bytes(8, "little", signed=True)
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8, key=key).digest()
    return int.from_bytes(digest, "little") % dim


def hashed_tfidf(docs: Sequence[str], dim: int, seed: int = 0) -> np.ndarray:
    """Hashed term counts -> smoothed TF-IDF -> L2 rows. Empty documents give zero rows."""
    counts = np.zeros((len(docs), dim))
    cache: dict[str, int] = {}
    for r, doc in enumerate(docs):
        for tok in tokenize(doc):
            b = cache.get(tok)
            if b is None:
                b = cache[tok] = hash_bucket(tok, dim, seed)
            counts[r, b] += 1.0
    n_docs = len(docs)
    df = (counts > 0).sum(axis=0)
    idf = np.log((1.0 + n_docs) / (1.0 + df)) + 1.0
    return l2_normalize_rows(counts * idf)


def l2_normalize_rows(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def read_embedding_file(path: str | Path) -> tuple[int, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(encoding="utf-8") as fh:
        header = fh.readline().strip()
        if not header.startswith("dim="):
            raise DataError(f"{path}: first line must be 'dim=<d>'")
        dim = int(header[4:])
        table: dict[str, np.ndarray] = {}
        for lineno, line in enumerate(fh, start=2):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            key, _, rest = line.partition("\t")
            vec = np.array(rest.split(), dtype=np.float64)
            if vec.shape != (dim,):
                raise DataError(f"{path}:{lineno}: expected {dim} values for {key!r}, got {vec.size}")
            table[key] = vec
    return dim, table


def embed_reviews(
    dataset: DomainDataset,
    mode: str = "hashing",
    dim: int = 256,
    path: str | Path | None = None,
    seed: int = 0,
) -> DomainDataset:
    """Attach user/item review embeddings of width ``dim``.

    ``precomputed`` files key rows by bare id, or by ``u:<id>`` / ``i:<id>``
    when user and item ids overlap; prefixed keys win.
    """
    if mode == "hashing":
        u = hashed_tfidf(dataset.user_docs or [""] * dataset.n_users, dim, seed)
        v = hashed_tfidf(dataset.item_docs or [""] * dataset.n_items, dim, seed)
    elif mode == "precomputed":
        if path is None:
            raise DataError("precomputed mode needs an embedding file path")
        file_dim, table = read_embedding_file(path)
        if file_dim != dim:
            raise DataError(f"embedding file has dim={file_dim}, expected {dim}")
        u = _lookup_rows(table, dataset.user_ids, "u:")
        v = _lookup_rows(table, dataset.item_ids, "i:")
        u, v = l2_normalize_rows(u), l2_normalize_rows(v)
    else:
        raise DataError(f"unknown embedding mode {mode!r}")
    return replace(dataset, user_review_emb=u, item_review_emb=v)


def _lookup_rows(table: dict[str, np.ndarray], ids: Iterable[str], prefix: str) -> np.ndarray:
    rows, missing = [], []
    for i in ids:
        vec = table.get(prefix + i, table.get(i))
        if vec is None:
            missing.append(i)
        rows.append(vec)
    if missing:
        raise DataError(f"embedding file is missing ids: {', '.join(missing[:20])}"
                        + (f" (+{len(missing) - 20} more)" if len(missing) > 20 else ""))
    return np.vstack(rows)


# ---------------------------------------------------------------------------
# Splits and sampling
# ---------------------------------------------------------------------------


def split_leave_one_out(dataset: DomainDataset, seed: int = 0) -> DomainDataset:
    """Hold out each user's latest interaction and fix 99 sampled negatives for it.

    Ties on timestamp (including "no timestamps") are broken by a seeded shuffle.
    Users with fewer than two interactions stay train-only and are counted in
    ``meta['skipped_users']``.
    """
    rng = np.random.default_rng([seed, dataset.domain_id, 0x5E11])
    y = dataset.interactions
    order = np.lexsort((dataset.pairs[:, 1], dataset.pairs[:, 0]))
    pairs, times = dataset.pairs[order], dataset.pair_time[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(dataset.n_users + 1))

    test_idx, negatives, skipped = [], [], 0
    for row in range(dataset.n_users):
        lo, hi = bounds[row], bounds[row + 1]
        if hi - lo < 2:
            skipped += 1
            continue
        t = times[lo:hi]
        latest = np.flatnonzero(t == t.max())
        test_idx.append(lo + latest[rng.integers(len(latest))] if len(latest) > 1 else lo + latest[0])
        seen = y.indices[y.indptr[row] : y.indptr[row + 1]]
        candidates = np.setdiff1d(np.arange(dataset.n_items), seen, assume_unique=True)
        if len(candidates) < N_EVAL_NEGATIVES:
            raise DataError(
                f"user {dataset.user_ids[row]!r} has only {len(candidates)} non-interacted items; "
                f"{N_EVAL_NEGATIVES} evaluation negatives are required"
            )
        negatives.append(np.sort(rng.choice(candidates, N_EVAL_NEGATIVES, replace=False)))
    if skipped:
        logger.warning("domain %d: %d users with < 2 interactions kept train-only", dataset.domain_id, skipped)

    is_test = np.zeros(len(pairs), dtype=bool)
    is_test[test_idx] = True
    meta = dict(dataset.meta, skipped_users=skipped, split_seed=seed)
    return replace(
        dataset,
        train_pairs=pairs[~is_test],
        test_pairs=pairs[is_test],
        eval_negatives=np.array(negatives, dtype=np.int64).reshape(-1, N_EVAL_NEGATIVES),
        meta=meta,
    )


def sample_uniform_negatives(
    rows: np.ndarray, y: sp.csr_matrix, n_items: int, rng: np.random.Generator, size: int = 1
) -> np.ndarray:
    """For each row draw ``size`` items not in that row of ``y`` (with replacement across draws).

    Vectorised rejection sampling; users never interact with almost all items
    at the densities this package targets, so few rounds are needed.
    """
    rows = np.asarray(rows, dtype=np.int64)
    out = rng.integers(n_items, size=(len(rows), size))
    bad = _is_interacted(y, np.repeat(rows, size), out.ravel()).reshape(out.shape)
    while bad.any():
        r, c = np.nonzero(bad)
        out[r, c] = rng.integers(n_items, size=len(r))
        bad[r, c] = _is_interacted(y, rows[r], out[r, c])
    return out


def _is_interacted(y: sp.csr_matrix, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    if len(rows) == 0:
        return np.zeros(0, dtype=bool)
    return np.asarray(y[rows, cols]).ravel() > 0


def sample_training_negatives(dataset: DomainDataset, seed: int, epoch: int) -> np.ndarray:
    """One uniform non-interacted item per training positive; returns (u, v_pos, v_neg) rows.

    The stream is keyed by (seed, epoch) so each epoch resamples; callers that
    train several domains pass a per-domain seed.
    """
    if not dataset.is_split:
        raise DataError("split the dataset before sampling training negatives")
    rng = np.random.default_rng([seed, epoch, 0x7E6])
    tp = dataset.train_pairs
    neg = sample_uniform_negatives(tp[:, 0], dataset.interactions, dataset.n_items, rng)[:, 0]
    return np.column_stack([tp, neg])


def apply_density(dataset: DomainDataset, m: float, seed: int = 0) -> DomainDataset:
    """Keep ceil(m * n_u) training positives per user (at least one); tests unchanged."""
    if not 0 < m <= 1:
        raise DataError(f"density must lie in (0, 1], got {m}")
    if not dataset.is_split:
        raise DataError("split the dataset before applying a density")
    rng = np.random.default_rng([seed, dataset.domain_id, 0xD5])
    tp = dataset.train_pairs
    keep = []
    bounds = np.searchsorted(tp[:, 0], np.arange(dataset.n_users + 1))
    for row in range(dataset.n_users):
        lo, hi = bounds[row], bounds[row + 1]
        n = hi - lo
        if n == 0:
            continue
        k = max(1, math.ceil(m * n - 1e-9))
        keep.append(np.sort(lo + rng.choice(n, k, replace=False)))
    idx = np.concatenate(keep) if keep else np.zeros(0, dtype=np.int64)
    return replace(dataset, train_pairs=tp[idx], meta=dict(dataset.meta, density=m))


# ---------------------------------------------------------------------------
# Synthetic benchmark
# ---------------------------------------------------------------------------


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _density_offset(logits: np.ndarray, density: float) -> float:
    """Logit shift b with mean(sigmoid(logits + b)) == density (bisection)."""
    lo, hi = -50.0 - logits.max(), 50.0 - logits.min()
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if _sigmoid(logits + mid).mean() < density:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_synthetic(spec: SyntheticSpec) -> list[DomainDataset]:
    """Latent-factor multi-domain benchmark with overlapping users.

    Each (user, item) is an independent Bernoulli draw with probability
    sigmoid(scale * affinity + b), the offset b calibrated per domain so the
    expected density matches ``spec.density``.

    User latents are shared by all domains and review embeddings of users and
    items go through one shared projection, so review similarity tracks
    co-preference and cross-domain transfer is useful by construction.
    """
    per_user = spec.density * spec.n_items_per_domain
    if per_user < 2:
        raise DataError(
            f"density {spec.density} x {spec.n_items_per_domain} items gives {per_user:.2f} "
            "interactions per user; at least 2 are needed"
        )
    rng = np.random.default_rng([spec.seed, 0x5A7])
    k = spec.latent_dim
    z_user = rng.standard_normal((spec.n_users, k))
    projection = rng.standard_normal((k, spec.dim)) / math.sqrt(k)

    n_overlap = max(1, round(spec.overlap_fraction * spec.n_users))
    perm = rng.permutation(spec.n_users)
    overlap, rest = np.sort(perm[:n_overlap]), perm[n_overlap:]
    home = rng.integers(spec.n_domains, size=len(rest))

    width = len(str(spec.n_users - 1))
    iwidth = len(str(spec.n_items_per_domain - 1))
    out = []
    for dom in range(spec.n_domains):
        drng = np.random.default_rng([spec.seed, dom, 0xD0])
        members = np.sort(np.concatenate([overlap, rest[home == dom]])).astype(np.int64)
        w_item = drng.standard_normal((spec.n_items_per_domain, k))
        logits = spec.affinity_scale * (z_user[members] @ w_item.T) / math.sqrt(k)
        prob = _sigmoid(logits + _density_offset(logits, spec.density))
        hit = drng.random(prob.shape) < prob
        # Top up users below two interactions with their most likely items.
        for r in np.flatnonzero(hit.sum(axis=1) < 2):
            hit[r, np.argsort(-prob[r], kind="stable")[:2]] = True
        rows, cols = np.nonzero(hit)
        pairs = np.column_stack([rows, cols]).astype(np.int64)
        pair_time = drng.integers(1, 10**9, size=len(pairs))

        u_noise = spec.review_noise if spec.user_review_noise is None else spec.user_review_noise
        h_user = z_user[members] @ projection + u_noise * drng.standard_normal((len(members), spec.dim))
        h_item = w_item @ projection + spec.review_noise * drng.standard_normal((spec.n_items_per_domain, spec.dim))
        out.append(
            DomainDataset(
                domain_id=dom,
                user_ids=tuple(f"u{g:0{width}d}" for g in members),
                item_ids=tuple(f"d{dom}_i{v:0{iwidth}d}" for v in range(spec.n_items_per_domain)),
                users=members,
                pairs=pairs,
                pair_time=pair_time,
                user_review_emb=l2_normalize_rows(h_user),
                item_review_emb=l2_normalize_rows(h_item),
                meta={"synthetic_seed": spec.seed},
            )
        )
    return out


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


_ARRAY_FIELDS = ("users", "pairs", "pair_time", "user_review_emb", "item_review_emb",
                 "train_pairs", "test_pairs", "eval_negatives")


def save_dataset(dataset: DomainDataset, path: str | Path) -> None:
    arrays = {k: getattr(dataset, k) for k in _ARRAY_FIELDS if getattr(dataset, k) is not None}
    header = {
        "domain_id": dataset.domain_id,
        "user_ids": list(dataset.user_ids),
        "item_ids": list(dataset.item_ids),
        "user_docs": list(dataset.user_docs),
        "item_docs": list(dataset.item_docs),
        "meta": dataset.meta,
    }
    np.savez(path, _header=np.array(json.dumps(header, sort_keys=True)), **arrays)


def load_dataset(path: str | Path) -> DomainDataset:
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["_header"]))
        arrays = {k: z[k] for k in _ARRAY_FIELDS if k in z.files}
    return DomainDataset(
        domain_id=header["domain_id"],
        user_ids=tuple(header["user_ids"]),
        item_ids=tuple(header["item_ids"]),
        user_docs=tuple(header["user_docs"]),
        item_docs=tuple(header["item_docs"]),
        meta=header["meta"],
        **arrays,
    )
