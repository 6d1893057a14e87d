import dataclasses
import itertools

import numpy as np
import pytest

import oracles
from fedirm import federation
from fedirm import relation as rel
from fedirm.config import DataConfig, ExperimentConfig, ModelConfig
from fedirm.errors import InvalidInputError
from fedirm.federation import (
    ClientFailure,
    ClientUpdate,
    build_split,
    client_seed,
    fedavg,
    initial_state,
    run_experiment,
    run_round,
)
from fedirm.numerics import ParameterSet, init_parameters, load_checkpoint
from fedirm.training import LocalConfig, labeled_local_update, unlabeled_local_update, warmup


def small_cfg(**kw):
    base = dict(
        mode="fedirm", seed=3, clients=3, labeled=1, rounds=2,
        data=DataConfig(n_classes=3, per_class=40, dim=4, spread=1.0),
        model=ModelConfig(hidden=(6,)),
        local=LocalConfig(batch_size=8, lr=0.01, warmup_horizon=2),
    )
    base.update(kw)
    return ExperimentConfig(**base).resolved()


def params_like(value, sig=(2, 3, 2)):
    p = init_parameters(sig, 0)
    return ParameterSet([(np.full_like(w, value), np.full_like(b, value)) for w, b in p.layers])


# --- fedavg -------------------------------------------------------------------------

def test_fedavg_single_client_is_identity():
    p = init_parameters((3, 4, 2), 1)
    assert fedavg([ClientUpdate(5, p, 17)]).bit_equal(p)


def test_fedavg_weighted_fixture():
    out = fedavg([ClientUpdate(0, params_like(0.0), 1), ClientUpdate(1, params_like(4.0), 3)])
    assert all(np.all(a == 3.0) for a in out.arrays())


def test_fedavg_equal_counts_is_plain_mean():
    ps = [init_parameters((3, 5, 2), s) for s in range(4)]
    out = fedavg([ClientUpdate(i, p, 10) for i, p in enumerate(ps)])
    want = np.mean([p.flat() for p in ps], axis=0)
    assert np.max(np.abs(out.flat() - want)) <= 1e-12


def test_fedavg_matches_scalar_oracle():
    ps = [init_parameters((2, 3, 2), s) for s in range(3)]
    counts = [3, 7, 11]
    out = fedavg([ClientUpdate(i, p, n) for i, (p, n) in enumerate(zip(ps, counts))]).flat()
    for j in range(out.size):
        assert abs(out[j] - oracles.weighted_mean([p.flat()[j] for p in ps], counts)) <= 1e-12


def test_fedavg_permutation_invariant_bitwise():
    updates = [ClientUpdate(i, init_parameters((3, 4, 2), i), 5 + 3 * i) for i in range(4)]
    ref = fedavg(updates)
    for perm in itertools.permutations(updates):
        assert fedavg(list(perm)).bit_equal(ref)


def test_fedavg_idempotent():
    p = init_parameters((3, 4, 2), 2)
    out = fedavg([ClientUpdate(i, p.copy(), n) for i, n in enumerate((3, 5, 8))])
    assert np.max(np.abs(out.flat() - p.flat())) <= 1e-15


def test_fedavg_shape_mismatch_names_client():
    with pytest.raises(InvalidInputError, match="client 7"):
        fedavg([ClientUpdate(0, init_parameters((3, 4, 2), 0), 5), ClientUpdate(7, init_parameters((3, 5, 2), 0), 5)])


def test_fedavg_rejects_empty_and_zero_count():
    with pytest.raises(InvalidInputError):
        fedavg([])
    with pytest.raises(InvalidInputError):
        ClientUpdate(0, init_parameters((2, 2), 0), 0)


def test_client_seeds_are_distinct():
    seeds = {client_seed(0, r, c) for r in range(5) for c in range(10)}
    assert len(seeds) == 50
    assert client_seed(1, 2, 3) == client_seed(1, 2, 3)


# --- rounds --------------------------------------------------------------------------

def test_first_round_has_no_relation_target():
    cfg = small_cfg()
    split = build_split(cfg)
    state = initial_state(cfg, 4, 3)
    assert state.relation is None
    after = run_round(state, split, cfg)
    assert after.relation is not None
    assert after.relation.provenance == "server-aggregate"
    assert after.round == 1


def test_single_labeled_client_zero_lr_keeps_model():
    cfg = small_cfg(clients=1, labeled=1, local=LocalConfig(batch_size=8, lr=0.0))
    split = build_split(cfg)
    state = initial_state(cfg, 4, 3)
    after = run_round(state, split, cfg)
    assert after.params.bit_equal(state.params)


def test_round_matches_scripted_reexecution():
    cfg = small_cfg()
    split = build_split(cfg)
    state = initial_state(cfg, 4, 3)
    theta, target = state.params.copy(), None
    net = state.net
    for omega in range(2):
        lam = warmup(omega, cfg.local.warmup_horizon)
        g = net.with_params(theta)
        new, counts, relations = [], [], []
        for client in split.clients:
            s = client_seed(cfg.seed, omega, client.client_id)
            if client.labeled:
                p = labeled_local_update(g, client, cfg.local, s)
                relations.append(rel.labeled_relation(g.with_params(p), client, cfg.local.tau))
            else:
                p = unlabeled_local_update(g, client, target, lam, cfg.local, s)
            new.append(p.flat())
            counts.append(client.n_samples)
        flat = np.array([oracles.weighted_mean([v[j] for v in new], counts) for j in range(new[0].size)])
        theta = ParameterSet.from_flat(theta.shape_signature, flat)
        target = rel.aggregate_relations(relations)

        state = run_round(state, split, cfg)
        assert np.max(np.abs(state.params.flat() - theta.flat())) <= 1e-12
        np.testing.assert_array_equal(state.relation.entries, target.entries)


def test_client_failure_names_client(monkeypatch):
    cfg = small_cfg()
    split = build_split(cfg)

    def broken(*args, **kwargs):
        raise FloatingPointError("boom")

    monkeypatch.setattr(federation, "unlabeled_local_update", broken)
    with pytest.raises(ClientFailure) as info:
        run_round(initial_state(cfg, 4, 3), split, cfg)
    assert info.value.client_id == split.unlabeled[0].client_id
    assert "boom" in str(info.value)


def test_labeled_only_mode_ignores_unlabeled_clients(monkeypatch):
    cfg = small_cfg(mode="fedavg_labeled_only")
    split = build_split(cfg)

    def forbidden(*args, **kwargs):
        raise AssertionError("unlabeled client trained")

    monkeypatch.setattr(federation, "unlabeled_local_update", forbidden)
    state = run_round(initial_state(cfg, 4, 3), split, cfg)
    solo = labeled_local_update(initial_state(cfg, 4, 3).net, split.labeled[0], cfg.local,
                                client_seed(cfg.seed, 0, 0))
    assert state.params.bit_equal(solo)


def test_consistency_mode_never_uses_relation(monkeypatch):
    cfg = small_cfg(mode="fed_consistency", rounds=3)
    seen = []
    real = federation.unlabeled_local_update

    def spy(net, client, target, *args, **kwargs):
        seen.append(target)
        return real(net, client, target, *args, **kwargs)

    monkeypatch.setattr(federation, "unlabeled_local_update", spy)
    run_experiment(cfg)
    assert seen and all(t is None for t in seen)


def test_all_labeled_mode_uses_every_client():
    cfg = small_cfg(mode="fedavg_all_labeled")
    split = build_split(cfg)
    assert len(split.labeled) == 3 and not split.unlabeled


# --- experiment outputs --------------------------------------------------------------

def test_experiment_outputs_are_deterministic(tmp_path):
    cfg = small_cfg(rounds=3)
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    a = (tmp_path / "a" / "metrics.csv").read_bytes()
    assert a == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "checkpoints" / "final.bin").read_bytes() == \
        (tmp_path / "b" / "checkpoints" / "final.bin").read_bytes()


def test_experiment_output_layout(tmp_path):
    cfg = small_cfg(rounds=3)
    res = run_experiment(cfg, tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "round,split,auc,sensitivity,specificity,accuracy,f1,lambda"
    assert len(lines) == 1 + 3 + 1
    assert lines[-1].split(",")[:2] == [str(res.best_round), "test"]
    assert all(len(line.split(",")) == 8 for line in lines)
    assert sorted(p.name for p in (tmp_path / "relations").iterdir()) == [f"round_{i}.csv" for i in range(3)]
    best = load_checkpoint(tmp_path / "checkpoints" / "best.bin")
    assert best.shape_signature == (4, 6, 3)
    assert (tmp_path / "config.resolved").read_text().startswith("[experiment]")
    assert "best round" in (tmp_path / "test_report.txt").read_text()


def test_relation_dump_has_three_blocks(tmp_path):
    run_experiment(small_cfg(rounds=2), tmp_path)
    text = (tmp_path / "relations" / "round_1.csv").read_text()
    names = {line.split(",")[0] for line in text.splitlines()[1:]}
    assert names == {"labeled_aggregate", "unlabeled", "abs_difference"}


def test_best_round_tracks_validation_auc():
    res = run_experiment(small_cfg(rounds=4))
    aucs = [row["auc"] for row in res.history]
    assert res.best_round == int(np.argmax(aucs))
    assert res.test_row["round"] == res.best_round


def test_resolved_config_not_mutated():
    cfg = ExperimentConfig()
    out = cfg.resolved()
    assert cfg.local.batch_size == 0 and out.local.batch_size == 16
    assert dataclasses.replace(cfg, data=DataConfig(source="idx", images="a", labels="b")).resolved().local.batch_size == 48
