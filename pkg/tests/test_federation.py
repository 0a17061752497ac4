import dataclasses
import json
import math

import numpy as np
import pytest

from builders import small_config, small_domains
from fedxrec import privacy
from fedxrec.data import sample_training_negatives
from fedxrec.evaluation import evaluate_run
from fedxrec.federation import (
    FederationConfig,
    FederationError,
    TrainConfig,
    init_client,
    overlapping_users,
    resolve_prototype_partial,
    run_federation,
)
from fedxrec.interest import epoch_mixing, mine_potential_items
from fedxrec.losses import intra_losses, prediction_loss, total_loss
from fedxrec.model import OptimizerState, adam_step, init_params


@pytest.fixture(scope="module")
def domains():
    return small_domains(seed=0)


def capture():
    log = []
    return log, lambda direction, r, dom, payload: log.append((direction, r, dom, payload))


def same_params(a, b):
    na, nb = a.named(), b.named()
    return all(np.array_equal(na[k], nb[k]) for k in na)


def standalone_training(ds, cfg):
    """Single-domain training written out directly from the library pieces."""
    seed = cfg.fed.seed * 1009 + ds.domain_id
    params = init_params(ds.n_users, ds.n_items, cfg.dim, seed, cfg.hidden)
    opt = OptimizerState.for_params(params, lr=cfg.lr)
    index = mine_potential_items(ds, cfg.interp)
    for epoch in range(cfg.fed.local_epochs):
        triples = sample_training_negatives(ds, seed, epoch)
        rng = np.random.default_rng([seed, 1, epoch, 0x313])
        pos, neg = epoch_mixing(ds, index, triples, cfg.interp, rng)
        order = rng.permutation(len(triples))
        for start in range(0, len(order), cfg.fed.batch_size):
            b = order[start : start + cfg.fed.batch_size]
            p = type(pos)(pos.anchor[b], pos.beta[b], pos.others[b])
            n = type(neg)(neg.anchor[b], neg.beta[b], neg.others[b])
            users = triples[b, 0]
            l_prd, g_prd = prediction_loss(params, users, p, n)
            lu, lv, g_intra = intra_losses(params, ds.user_review_emb, ds.item_review_emb, users, p.anchor, cfg.loss)
            parts = total_loss(l_prd, g_prd, lu, lv, g_intra, cfg=cfg.loss)
            rows = [p.anchor, n.anchor, p.others.ravel(), n.others.ravel()]
            touched = {"user_emb": np.unique(users),
                       "item_emb": np.unique(np.concatenate([r[r >= 0] for r in rows]))}
            adam_step(params, parts.grads, opt, touched)
    return params


class TestProtocol:
    def test_single_domain_single_round_without_inter_equals_standalone(self, domains):
        cfg = small_config(rounds=1, epochs=3, alpha=0.0)
        res = run_federation(domains[:1], cfg)
        assert same_params(res.clients[0].params, standalone_training(domains[0], cfg))

    def test_symmetric_domains_upload_identical_prototypes(self, domains):
        twin = dataclasses.replace(domains[0], domain_id=1)
        log, hook = capture()
        run_federation([domains[0], twin], small_config(rounds=2, symmetric_seeds=True), on_message=hook)
        ups = {(r, d): json.loads(p) for direction, r, d, p in log if direction == "up"}
        for r in (1, 2):
            assert ups[(r, 0)]["entries"] == ups[(r, 1)]["entries"]

    def test_upload_entry_counts(self, domains):
        log, hook = capture()
        run_federation(domains, small_config(rounds=2), on_message=hook)
        for direction, _, dom, payload in log:
            if direction == "up":
                msg = json.loads(payload)
                assert len(msg["entries"]) == domains[dom].n_users
                counts = {c["user"]: c["n"] for c in msg["counts"]}
                ds = domains[dom]
                train_counts = np.bincount(ds.train_pairs[:, 0], minlength=ds.n_users)
                assert counts == {int(ds.users[r]): int(train_counts[r]) for r in range(ds.n_users)}

    def test_partial_mode_uploads_only_overlapping_users(self):
        doms = small_domains(seed=1, overlap_fraction=0.5)
        overlap = overlapping_users(doms)
        log, hook = capture()
        run_federation(doms, small_config(rounds=2, overlap_mode="partial"), on_message=hook)
        for direction, _, dom, payload in log:
            if direction == "up":
                users = {e["user"] for e in json.loads(payload)["entries"]}
                assert users == {int(u) for u in doms[dom].users if int(u) in overlap}
                assert 0 < len(users) < doms[dom].n_users

    def test_zero_epochs_publish_initial_prototypes(self, domains):
        cfg = small_config(rounds=1, epochs=0, eta=0.0)
        log, hook = capture()
        res = run_federation(domains, cfg, on_message=hook)
        client = res.clients[0]
        fresh = init_params(domains[0].n_users, domains[0].n_items, cfg.dim, client.seed, cfg.hidden)
        assert same_params(client.params, fresh)
        expected = privacy.clip_l2(privacy.local_prototypes(client.groups, fresh.user_emb), cfg.privacy.clip_c)
        up = json.loads(next(p for d, _, dom, p in log if d == "up" and dom == 0))
        got = np.array([e["vector"] for e in up["entries"]])
        assert np.array_equal(got, expected.astype(np.float32))
        assert res.telemetry == []

    def test_telemetry_row_count(self, domains):
        cfg = small_config(rounds=2, epochs=3, batch=32)
        res = run_federation(domains, cfg)
        for ds in domains:
            rows = [t for t in res.telemetry if t["domain"] == ds.domain_id]
            assert len(rows) == 2 * 3 * math.ceil(len(ds.train_pairs) / 32)
            assert all(math.isfinite(t["total"]) for t in rows)

    def test_first_round_skips_inter_term(self, domains):
        res = run_federation(domains, small_config(rounds=2))
        assert all(t["l_inter"] == 0.0 for t in res.telemetry if t["round"] == 1)
        assert all(t["l_inter"] > 0.0 for t in res.telemetry if t["round"] == 2)

    def test_without_inter_server_is_a_no_op(self, domains):
        a = run_federation(domains, small_config(rounds=3, alpha=0.0, eta=0.3))
        b = run_federation(domains, small_config(rounds=3, alpha=0.0, eta=5.0))
        for ca, cb in zip(a.clients, b.clients):
            assert same_params(ca.params, cb.params)

    def test_runs_are_deterministic(self, domains):
        a = run_federation(domains, small_config(rounds=2))
        b = run_federation(domains, small_config(rounds=2))
        assert a.telemetry == b.telemetry
        assert np.array_equal(a.G.vectors, b.G.vectors)

    def test_parallel_clients_match_serial(self, domains):
        serial = run_federation(domains, small_config(rounds=2))
        parallel = run_federation(domains, small_config(rounds=2, workers=2))
        s, p = evaluate_run(serial.clients), evaluate_run(parallel.clients)
        for dom in s.domains:
            for key, value in s.domains[dom].items():
                assert abs(value - p.domains[dom][key]) <= 1e-9

    def test_non_finite_loss_names_batch(self, domains):
        cfg = small_config(rounds=1)
        clients = [init_client(ds, cfg) for ds in domains]
        clients[1].params.user_emb[:] = np.nan
        with pytest.raises(FederationError, match="domain 1 round 1 epoch 0 batch 0"):
            run_federation(domains, cfg, clients=clients)

    def test_manifest(self, domains):
        res = run_federation(domains, small_config(rounds=2))
        m = res.manifest
        assert m["epsilon"] == pytest.approx(2 / 3)
        assert set(m["dataset_digests"]) == {"0", "1"}
        assert [r["round"] for r in m["rounds"]] == [1, 2]
        assert all(b > 0 for r in m["rounds"] for b in r["upload_bytes"].values())
        assert set(m["wall_clock"]) == {"init", "local", "aggregate"}
        json.dumps(m)
        assert run_federation(domains, small_config(rounds=1, variant="wo_ldp")).manifest["epsilon"] is None

    @pytest.mark.parametrize("variant", ["wo_intra_cl", "intra_sum", "inter_sum", "wo_pi", "rand_sam"])
    def test_every_variant_trains(self, domains, variant):
        res = run_federation(domains, small_config(rounds=2, epochs=1, variant=variant))
        assert all(math.isfinite(t["total"]) for t in res.telemetry)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FederationConfig(batch_size=1)
        with pytest.raises(ValueError):
            FederationConfig(rounds=0)
        with pytest.raises(ValueError, match="variant"):
            TrainConfig(variant="bogus")


class TestPrivacySchema:
    def test_payloads_carry_only_user_keyed_vectors_and_counts(self, domains):
        log, hook = capture()
        cfg = small_config(rounds=2)
        run_federation(domains, cfg, on_message=hook)
        item_ids = {i for ds in domains for i in ds.item_ids}
        for direction, _, _, payload in log:
            msg = json.loads(payload)
            if direction == "up":
                assert set(msg) == {"round", "domain_id", "entries", "counts"}
                assert all(set(c) == {"user", "n"} for c in msg["counts"])
            else:
                assert set(msg) == {"round", "entries"}
            for e in msg["entries"]:
                assert set(e) == {"user", "vector"} and len(e["vector"]) == cfg.dim
            text = payload.decode()
            assert not any(i in text for i in item_ids)


class TestPartialOverlap:
    def test_equal_prototype_picks_that_user(self):
        anchors = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        globals_ = np.array([[5.0, 5.0], [6.0, 6.0], [7.0, 7.0]])
        got = resolve_prototype_partial(np.array([[0.0, 2.0]]), anchors, globals_, k=1)
        assert np.array_equal(got[0], globals_[1])

    def test_matches_brute_force_cosine_sort(self):
        rng = np.random.default_rng(3)
        protos = rng.standard_normal((6, 4))
        globals_ = rng.standard_normal((6, 4))
        lonely, anchors = protos[:2], protos[2:]
        got = resolve_prototype_partial(lonely, anchors, globals_[2:], k=3)
        for r, p in enumerate(lonely):
            sims = [(-(p @ a) / (np.linalg.norm(p) * np.linalg.norm(a)), j) for j, a in enumerate(anchors)]
            top = [j for _, j in sorted(sims)[:3]]
            assert np.allclose(got[r], globals_[2:][top].mean(axis=0), atol=1e-15)

    def test_lonely_users_get_surrogates(self):
        doms = small_domains(seed=1, overlap_fraction=0.5)
        res = run_federation(doms, small_config(rounds=2, overlap_mode="partial"))
        for c in res.clients:
            targets, mask = c.prototype_targets()
            assert mask.all() and np.all(np.isfinite(targets))
            assert not c.overlapping.all()

    def test_full_mode_never_builds_surrogates(self, domains, monkeypatch):
        import fedxrec.federation as fed

        def boom(*a, **k):
            raise AssertionError("surrogate path used in full mode")

        monkeypatch.setattr(fed, "resolve_prototype_partial", boom)
        run_federation(domains, small_config(rounds=2))
