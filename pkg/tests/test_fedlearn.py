import io
import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedehr.dataset import ClientShard
from fedehr.errors import ArityMismatch, EmptyShard, EmptyUpdates, NonFinite
from fedehr.fedlearn import (
    Aggregation,
    ClientUpdate,
    FederationConfig,
    aggregate,
    apply_update,
    broadcast,
    initialize,
    run_rounds,
    select_clients,
    write_metrics_csv,
)
from fedehr.models import ModelParams, TrainConfig, gradient, mlp_init, train_sgd


def _shards(n_clients, rows_each, d=4, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n_clients * rows_each, d))
    y = X @ rng.normal(size=d) + 0.1 * rng.normal(size=len(X))
    return [
        ClientShard(f"c{i}", X[i * rows_each:(i + 1) * rows_each], y[i * rows_each:(i + 1) * rows_each])
        for i in range(n_clients)
    ], X, y


def _upd(vec, count=1, cid="x"):
    return ClientUpdate(cid, np.asarray(vec, dtype=float), count)


# --- initialize / broadcast ------------------------------------------------

def test_initialize_is_deterministic():
    cfg = FederationConfig()
    a, b = initialize(cfg, 11), initialize(cfg, 11)
    np.testing.assert_array_equal(a.global_params.flat(), b.global_params.flat())
    assert a.round_index == 0 and a.history == ()
    assert a.global_params.n_params == 241


def test_broadcast_copies_are_isolated():
    state = initialize(FederationConfig(), 5)
    before = state.global_params.flat().copy()
    copies = broadcast(state, 3)
    assert len(copies) == 3
    for c in copies:
        np.testing.assert_array_equal(c.flat(), before)
    copies[0].weights[0][:] = 99.0
    np.testing.assert_array_equal(state.global_params.flat(), before)
    (only,) = broadcast(state, 1)
    assert only.flat().tobytes() == before.tobytes()


# --- selection -------------------------------------------------------------

def test_full_selection():
    assert select_clients(FederationConfig(num_clients=3), 1) == [0, 1, 2]


def test_partial_selection_is_stable():
    cfg = FederationConfig(num_clients=3, selection_fraction=0.34, seed=9)
    picks = select_clients(cfg, 4)
    assert len(picks) == 1
    assert picks == select_clients(cfg, 4)


def test_partial_selection_varies_over_rounds():
    cfg = FederationConfig(num_clients=3, selection_fraction=0.34, seed=9)
    for start in range(1, 30):
        window = {tuple(select_clients(cfg, r)) for r in range(start, start + 20)}
        assert len(window) > 1


def test_selection_fraction_rounding():
    assert FederationConfig(num_clients=10, selection_fraction=0.25).clients_per_round == 3
    assert FederationConfig(num_clients=3, selection_fraction=0.01).clients_per_round == 1
    with pytest.raises(ValueError):
        FederationConfig(selection_fraction=0.0)


# --- aggregate -------------------------------------------------------------

def test_uniform_average():
    np.testing.assert_array_equal(aggregate([_upd([1.0]), _upd([3.0])]), [2.0])


def test_sample_weighted_average():
    out = aggregate([_upd([1.0], 1), _upd([4.0], 2)], Aggregation.SAMPLE_WEIGHTED)
    np.testing.assert_allclose(out, [3.0], atol=1e-15)


def test_aggregate_errors():
    with pytest.raises(EmptyUpdates):
        aggregate([])
    with pytest.raises(ArityMismatch):
        aggregate([_upd([1.0]), _upd([1.0, 2.0])])


@settings(max_examples=50)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6),
       st.randoms(use_true_random=False))
def test_aggregate_permutation_invariance(vectors, rnd):
    updates = [_upd(v, i + 1) for i, v in enumerate(vectors)]
    shuffled = updates[:]
    rnd.shuffle(shuffled)
    assert aggregate(updates).tobytes() == aggregate(shuffled).tobytes()
    np.testing.assert_allclose(
        aggregate(updates, "sample_weighted"), aggregate(shuffled, "sample_weighted"), rtol=0, atol=1e-12 * 1e3)


def test_all_orderings_of_three_clients():
    rng = np.random.default_rng(2)
    updates = [_upd(rng.normal(size=251)) for _ in range(3)]
    results = {aggregate(list(p)).tobytes() for p in itertools.permutations(updates)}
    assert len(results) == 1


# --- apply_update ----------------------------------------------------------

def test_apply_update_adds():
    state = initialize(FederationConfig(), 1)
    state = type(state)(ModelParams.linear([1.0], 0.0))
    out = apply_update(state, [2.0, 0.0])
    assert out.global_params.flat()[0] == 3.0
    assert out.round_index == 1


def test_apply_zero_update():
    state = initialize(FederationConfig(), 11)
    out = apply_update(state, np.zeros(241))
    np.testing.assert_array_equal(out.global_params.flat(), state.global_params.flat())
    assert out.round_index == 1


def test_apply_update_errors():
    state = initialize(FederationConfig(), 11)
    with pytest.raises(ArityMismatch):
        apply_update(state, np.zeros(240))
    bad = np.zeros(241)
    bad[7] = np.inf
    with pytest.raises(NonFinite):
        apply_update(state, bad)


# --- run_rounds ------------------------------------------------------------

def test_huge_tolerance_stops_after_one_round():
    shards, _, _ = _shards(3, 10)
    state = run_rounds(FederationConfig(convergence_tol=1e9), shards)
    assert len(state.history) == 1 == state.round_index


def test_history_length_bounded():
    shards, _, _ = _shards(3, 10)
    state = run_rounds(FederationConfig(rounds_max=7), shards)
    assert len(state.history) == state.round_index <= 7
    assert all(h.delta_inf_norm >= 0 for h in state.history)
    assert [h.round for h in state.history] == list(range(1, len(state.history) + 1))


def test_single_client_matches_centralized_sgd():
    shards, X, y = _shards(1, 40)
    train = TrainConfig(learning_rate=0.01, batch_size=None, loss="mae")
    cfg = FederationConfig(num_clients=1, rounds_max=25, convergence_tol=1e-300, train=train, seed=3)
    fed = run_rounds(cfg, shards)
    central, _ = train_sgd(mlp_init(4, 10, 10, seed=3), X, y, train, epochs=25)
    assert fed.round_index == 25
    np.testing.assert_allclose(fed.global_params.flat(), central.flat(), rtol=0, atol=1e-9)


@pytest.mark.parametrize("n_clients", [2, 3, 5])
def test_one_round_equals_pooled_full_batch_step(n_clients):
    shards, X, y = _shards(n_clients, 12, seed=n_clients)
    train = TrainConfig(learning_rate=0.05, batch_size=None, loss="mse")
    cfg = FederationConfig(num_clients=n_clients, rounds_max=1, train=train, seed=1)
    fed = run_rounds(cfg, shards)
    start = initialize(cfg, X.shape[1]).global_params
    pooled = start.flat() - 0.05 * gradient(start, X, y, "mse")
    np.testing.assert_allclose(fed.global_params.flat(), pooled, rtol=0, atol=1e-9)


def test_selection_limits_participants():
    shards, _, _ = _shards(4, 8)
    cfg = FederationConfig(num_clients=4, selection_fraction=0.5, rounds_max=5, seed=2)
    state = run_rounds(cfg, shards)
    assert all(len(h.participating) == 2 for h in state.history)


def test_shard_count_must_match():
    shards, _, _ = _shards(2, 5)
    with pytest.raises(ValueError):
        run_rounds(FederationConfig(num_clients=3), shards)


def test_empty_shard_rejected():
    with pytest.raises(EmptyShard):
        ClientShard("empty", np.empty((0, 3)), np.empty(0))


def test_runs_are_deterministic_to_the_byte():
    shards, _, _ = _shards(3, 30)
    cfg = FederationConfig(rounds_max=12, seed=5)
    outputs = []
    for _ in range(2):
        buf = io.StringIO()
        write_metrics_csv(run_rounds(cfg, shards).history, buf)
        outputs.append(buf.getvalue())
    assert outputs[0] == outputs[1]
    lines = outputs[0].splitlines()
    assert lines[0] == "round,loss_mae,metric_mse,delta_inf_norm"
    assert len(lines) == 13


def test_resume_from_state_continues():
    shards, _, _ = _shards(3, 10)
    whole = run_rounds(FederationConfig(rounds_max=6), shards)
    half = run_rounds(FederationConfig(rounds_max=3), shards)
    resumed = run_rounds(FederationConfig(rounds_max=6), shards, half)
    np.testing.assert_array_equal(resumed.global_params.flat(), whole.global_params.flat())


def test_config_json_roundtrip():
    cfg = FederationConfig(num_clients=4, aggregation="sample_weighted", train=TrainConfig(batch_size=8))
    back = FederationConfig.from_json(json.dumps(cfg.to_dict()))
    assert back == cfg
    with pytest.raises(ValueError):
        FederationConfig.from_dict({"clients": 3})
