"""In-process simulation of the federated training protocol.

Each round every client trains locally, publishes privatised user prototypes,
and the server aggregates them into global prototypes that are broadcast
back. All client/server traffic passes through JSON-encoded messages so the
simulation can count bytes and tests can inspect payloads.
"""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import privacy
from .data import DomainDataset, sample_training_negatives
from .interest import InterpolationConfig, PotentialItemIndex, epoch_mixing, mine_potential_items, random_potential_items
from .losses import Fusion, LossBreakdown, LossConfig, intra_losses, inter_loss, prediction_loss, total_loss
from .model import ModelParams, OptimizerState, adam_step, init_params
from .privacy import GlobalPrototypeSet, PrivacyConfig

logger = logging.getLogger(__name__)

VARIANTS = ("full", "wo_intra_cl", "intra_sum", "wo_inter_cl", "inter_sum", "wo_pi", "rand_sam", "wo_ldp")


class FederationError(RuntimeError):
    pass


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 5
    batch_size: int = 128
    seed: int = 0
    overlap_mode: str = "full"
    surrogate_k: int = 3
    workers: int = 1
    # Every client uses the run seed unchanged (for symmetry experiments).
    symmetric_seeds: bool = False

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 0:
            raise ValueError("rounds must be >= 1 and local_epochs >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: the contrastive terms need in-batch negatives")
        if self.overlap_mode not in ("full", "partial"):
            raise ValueError(f"unknown overlap_mode {self.overlap_mode!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Everything a client needs to train, with the ablation variant applied."""

    dim: int = 256
    hidden: tuple[int, ...] = (256, 128, 64)
    lr: float = 1e-3
    weight_decay: float = 0.0
    loss: LossConfig = LossConfig()
    interp: InterpolationConfig = InterpolationConfig()
    privacy: PrivacyConfig = PrivacyConfig()
    fed: FederationConfig = FederationConfig()
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {', '.join(VARIANTS)}")

    @property
    def effective_loss(self) -> LossConfig:
        kw = asdict(self.loss)
        if self.variant in ("wo_intra_cl", "intra_sum"):
            kw["gamma"] = 0.0
        if self.variant in ("wo_inter_cl", "inter_sum"):
            kw["alpha"] = 0.0
        return LossConfig(**kw)

    @property
    def effective_privacy(self) -> PrivacyConfig:
        if self.variant == "wo_ldp":
            return PrivacyConfig(**{**asdict(self.privacy), "enabled": False})
        return self.privacy

    @property
    def mixing(self) -> str:
        return {"wo_pi": "none", "rand_sam": "random"}.get(self.variant, "similarity")


@dataclass(eq=False)
class ClientState:
    dataset: DomainDataset
    params: ModelParams
    opt: OptimizerState
    index: PotentialItemIndex | None
    cfg: TrainConfig
    seed: int
    overlapping: np.ndarray
    groups: list[np.ndarray]
    G: GlobalPrototypeSet = field(default_factory=GlobalPrototypeSet.empty)
    round: int = 0
    telemetry: list[dict] = field(default_factory=list)

    @property
    def domain(self) -> int:
        return self.dataset.domain_id

    def prototype_targets(self) -> tuple[np.ndarray, np.ndarray]:
        """Per local user row: the received (or surrogate) global prototype and a presence mask."""
        if len(self.G) == 0:
            return np.zeros((self.dataset.n_users, self.params.d)), np.zeros(self.dataset.n_users, dtype=bool)
        targets, mask = self.G.rows_for(self.dataset.users)
        if self.cfg.fed.overlap_mode == "partial":
            protos = privacy.local_prototypes(self.groups, self.params.user_emb)
            anchors = np.flatnonzero(mask)
            lonely = np.flatnonzero(~mask)
            if len(lonely) and not len(anchors):
                logger.warning("domain %d: no overlapping users; %d users skip the prototype loss",
                               self.domain, len(lonely))
            elif len(lonely):
                targets[lonely] = resolve_prototype_partial(protos[lonely], protos[anchors], targets[anchors],
                                                            self.cfg.fed.surrogate_k)
                mask[lonely] = True
        return targets, mask

    def fusion(self) -> Fusion:
        ds = self.dataset
        if self.cfg.variant == "intra_sum":
            return Fusion(user_side=ds.user_review_emb, item_side=ds.item_review_emb)
        if self.cfg.variant == "inter_sum" and len(self.G):
            targets, mask = self.prototype_targets()
            return Fusion(user_side=targets, user_mask=mask)
        return Fusion()

    def scoring_tables(self) -> tuple[np.ndarray, np.ndarray]:
        """User and item tables as the predictor sees them (after any fusion)."""
        f = self.fusion()
        return f.user_table(self.params)[0], f.item_table(self.params)[0]


def _client_seed(cfg: FederationConfig, domain: int) -> int:
    return cfg.seed if cfg.symmetric_seeds else cfg.seed * 1009 + domain


def overlapping_users(datasets: list[DomainDataset]) -> set[int]:
    """Global users present in at least two domains."""
    seen: dict[int, int] = {}
    for d in datasets:
        for u in d.users:
            seen[int(u)] = seen.get(int(u), 0) + 1
    return {u for u, c in seen.items() if c >= 2}


def init_client(dataset: DomainDataset, cfg: TrainConfig, overlap: set[int] | None = None) -> ClientState:
    seed = _client_seed(cfg.fed, dataset.domain_id)
    params = init_params(dataset.n_users, dataset.n_items, cfg.dim, seed, cfg.hidden)
    opt = OptimizerState.for_params(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    if cfg.mixing == "similarity":
        index = mine_potential_items(dataset, cfg.interp)
    elif cfg.mixing == "random":
        index = random_potential_items(dataset, cfg.interp, seed)
    else:
        index = None
    if overlap is None:
        mask = np.ones(dataset.n_users, dtype=bool)
    else:
        mask = np.array([int(u) in overlap for u in dataset.users], dtype=bool)
    pcfg = cfg.effective_privacy
    groups = privacy.form_groups(dataset.train_matrix, pcfg.group_n, pcfg.group_mode)
    return ClientState(dataset, params, opt, index, cfg, seed, mask, groups)


def resolve_prototype_partial(
    lonely_protos: np.ndarray, anchor_protos: np.ndarray, anchor_globals: np.ndarray, k: int = 3
) -> np.ndarray:
    """Surrogate global prototypes for users seen in only one domain.

    Each row is the mean global prototype of the ``k`` overlapping users whose
    local prototypes are most cosine-similar (ties: lower index).
    """
    def unit(x):
        n = np.linalg.norm(x, axis=1, keepdims=True)
        return np.divide(x, n, out=np.zeros_like(x), where=n > 0)

    sims = unit(lonely_protos) @ unit(anchor_protos).T
    k = min(k, anchor_protos.shape[0])
    out = np.empty((len(lonely_protos), anchor_globals.shape[1]))
    cols = np.arange(anchor_protos.shape[0])
    for r in range(len(lonely_protos)):
        top = np.lexsort((cols, -sims[r]))[:k]
        out[r] = anchor_globals[top].mean(axis=0)
    return out


def _train_batch(client: ClientState, batch: np.ndarray, triples, pos_all, neg_all, loss_cfg, targets, has_target,
                 fusion: Fusion) -> LossBreakdown:
    params, ds = client.params, client.dataset
    users = triples[batch, 0]
    pos = type(pos_all)(pos_all.anchor[batch], pos_all.beta[batch], pos_all.others[batch])
    neg = type(neg_all)(neg_all.anchor[batch], neg_all.beta[batch], neg_all.others[batch])

    l_prd, g_prd = prediction_loss(params, users, pos, neg, fusion)
    l_u = l_v = l_inter = 0.0
    g_intra = g_inter = None
    if loss_cfg.gamma > 0:
        l_u, l_v, g_intra = intra_losses(params, ds.user_review_emb, ds.item_review_emb, users, pos.anchor, loss_cfg)
    if loss_cfg.alpha > 0 and targets is not None:
        in_scope = users[has_target[users]]
        l_inter, g_inter = inter_loss(params, targets, has_target, in_scope, loss_cfg, ds.user_ids)
    parts = total_loss(l_prd, g_prd, l_u, l_v, g_intra, l_inter, g_inter, loss_cfg)

    item_rows = [pos.anchor, neg.anchor, pos.others.ravel(), neg.others.ravel()]
    touched = {
        "user_emb": np.unique(users),
        "item_emb": np.unique(np.concatenate([r[r >= 0] for r in item_rows])),
    }
    adam_step(params, parts.grads, client.opt, touched)
    return parts


def local_update(client: ClientState, G: GlobalPrototypeSet, round_: int) -> bytes:
    """Train for E epochs against the received prototypes, then publish an upload message."""
    cfg = client.cfg
    loss_cfg = cfg.effective_loss
    pcfg = cfg.effective_privacy
    ds = client.dataset
    client.G, client.round = G, round_

    targets = has_target = None
    if loss_cfg.alpha > 0 and len(G):
        targets, has_target = client.prototype_targets()
    fusion = client.fusion()

    B = cfg.fed.batch_size
    for epoch in range(cfg.fed.local_epochs):
        epoch_key = (round_ - 1) * cfg.fed.local_epochs + epoch
        triples = sample_training_negatives(ds, client.seed, epoch_key)
        rng = np.random.default_rng([client.seed, round_, epoch, 0x313])
        pos_all, neg_all = epoch_mixing(ds, client.index, triples, cfg.interp, rng)
        order = rng.permutation(len(triples))
        for b, start in enumerate(range(0, len(order), B)):
            batch = order[start : start + B]
            try:
                parts = _train_batch(client, batch, triples, pos_all, neg_all, loss_cfg, targets, has_target, fusion)
            except FloatingPointError as exc:
                raise FederationError(
                    f"domain {client.domain} round {round_} epoch {epoch} batch {b}: {exc}") from exc
            client.telemetry.append({"round": round_, "domain": client.domain, "epoch": epoch, "batch": b,
                                     **parts.as_dict()})

    return publish_prototypes(client, pcfg, round_)


def publish_prototypes(client: ClientState, pcfg: PrivacyConfig, round_: int) -> bytes:
    ds = client.dataset
    protos = privacy.local_prototypes(client.groups, client.params.user_emb)
    rows = np.arange(ds.n_users) if client.cfg.fed.overlap_mode == "full" else np.flatnonzero(client.overlapping)
    rng = np.random.default_rng([client.seed, round_, 0x1D9])
    noisy = privacy.ldp_publish(protos[rows], pcfg, rng)
    counts = np.bincount(ds.train_pairs[:, 0], minlength=ds.n_users)[rows]
    return privacy.encode_upload(round_, ds.domain_id, ds.users[rows], noisy, counts)


@dataclass
class FederationResult:
    clients: list[ClientState]
    G: GlobalPrototypeSet
    telemetry: list[dict]
    manifest: dict


MessageHook = Callable[[str, int, int, bytes], None]


def run_federation(
    datasets: list[DomainDataset],
    cfg: TrainConfig,
    on_message: MessageHook | None = None,
    clients: list[ClientState] | None = None,
) -> FederationResult:
    """Run R synchronous rounds over all domains.

    ``on_message(direction, round, domain, payload)`` sees every upload
    ("up") and broadcast ("down") payload. A failing client aborts the round
    before any aggregation happens.
    """
    fed = cfg.fed
    t0 = time.perf_counter()
    overlap = overlapping_users(datasets) if fed.overlap_mode == "partial" else None
    if clients is None:
        clients = [init_client(ds, cfg, overlap) for ds in datasets]
    timings = {"init": time.perf_counter() - t0, "local": 0.0, "aggregate": 0.0}
    G = GlobalPrototypeSet.empty(cfg.dim)
    rounds_log = []
    pool = ThreadPoolExecutor(fed.workers) if fed.workers > 1 else None
    try:
        for r in range(1, fed.rounds + 1):
            t = time.perf_counter()
            jobs = [(c, G) for c in clients]
            try:
                if pool:
                    uploads = list(pool.map(lambda job: local_update(job[0], job[1], r), jobs))
                else:
                    uploads = [local_update(c, g, r) for c, g in jobs]
            except FederationError:
                raise
            except Exception as exc:
                raise FederationError(f"round {r} aborted: client failure ({type(exc).__name__}: {exc})") from exc
            timings["local"] += time.perf_counter() - t

            t = time.perf_counter()
            for c, payload in zip(clients, uploads):
                if on_message:
                    on_message("up", r, c.domain, payload)
            decoded = [privacy.decode_upload(p) for p in uploads]
            G_new = privacy.aggregate_global(decoded, cfg.effective_privacy.aggregation, r)
            down = privacy.encode_broadcast(G_new)
            if on_message:
                on_message("down", r, -1, down)
            G = privacy.decode_broadcast(down)
            timings["aggregate"] += time.perf_counter() - t
            rounds_log.append({"round": r, "upload_bytes": {str(c.domain): len(p) for c, p in zip(clients, uploads)},
                               "broadcast_bytes": len(down), "entries": {str(c.domain): len(m["entries"])
                                                                         for c, m in zip(clients, decoded)}})
            for c in clients:
                c.G = G
    finally:
        if pool:
            pool.shutdown()

    telemetry = [row for c in clients for row in c.telemetry]
    manifest = {
        "config": config_snapshot(cfg),
        "seeds": {str(c.domain): c.seed for c in clients},
        "dataset_digests": {str(d.domain_id): d.digest() for d in datasets},
        "rounds": rounds_log,
        "wall_clock": timings,
        "epsilon": _json_float(cfg.effective_privacy.epsilon()),
    }
    return FederationResult(clients, G, telemetry, manifest)


def _json_float(x: float):
    return x if math.isfinite(x) else None


def config_snapshot(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["hidden"] = list(cfg.hidden)
    return out
