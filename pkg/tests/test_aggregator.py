import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import MICRO, micro_plan
from fedlm.aggregator import (
    FederationConfig,
    FederationState,
    checkpoint_global,
    compute_pseudo_gradient,
    restore_global,
    run_federation,
    run_round,
    sample_clients,
)
from fedlm.checkpoint import read_checkpoint
from fedlm.client import Client, LocalTrainConfig
from fedlm.costmodel import CostModelParams, Topology
from fedlm.errors import ConfigError, ContractError, IntegrityError, RoundFailure
from fedlm.model import init_model
from fedlm.optim import LrSchedule, ServerOptState, server_step
from fedlm.tensor import ParamVector

HP = LocalTrainConfig(schedule=LrSchedule(1e-2, 2, 20), batch_size=4)
COST = CostModelParams(payload_mb=1.0, local_steps=3)


def pv(*values):
    return ParamVector([("w", np.array(values, dtype=np.float64))])


def setup(n=4, k=None, topology="ps", rounds=3, tau=3, workers=1, **kw):
    plan = micro_plan(n)
    config = FederationConfig(
        population=n, clients_per_round=k or n, rounds=rounds, local_steps=tau,
        topology=topology, workers=workers, **kw,
    )
    clients = {c: Client(c, plan, MICRO, HP, seed=7) for c in range(n)}
    state = FederationState(theta=init_model(MICRO, 0), server=config.make_server_state())
    return config, clients, state


# sampling

def test_full_participation_samples_everyone():
    assert sample_clients(5, 5, 0, 3) == [0, 1, 2, 3, 4]


def test_sampling_is_deterministic_and_sorted():
    a = [sample_clients(16, 4, 9, r) for r in range(20)]
    assert a == [sample_clients(16, 4, 9, r) for r in range(20)]
    assert all(s == sorted(s) and len(set(s)) == 4 for s in a)
    assert len({tuple(s) for s in a}) > 1


def test_sampling_frequency_is_uniform():
    rounds, p, k = 10_000, 16, 4
    counts = Counter(c for r in range(rounds) for c in sample_clients(p, k, 1, r))
    mean = rounds * k / p
    sd = math.sqrt(rounds * (k / p) * (1 - k / p))
    assert set(counts) == set(range(p))
    assert all(abs(v - mean) <= 3 * sd for v in counts.values())


def test_oversampling_rejected():
    with pytest.raises(ConfigError):
        sample_clients(3, 4, 0, 0)
    with pytest.raises(ConfigError):
        FederationConfig(population=3, clients_per_round=4, rounds=1, local_steps=1)


def test_participation_sets_k():
    assert FederationConfig(population=16, clients_per_round=1, rounds=1, local_steps=1,
                            participation=0.25).clients_per_round == 4


# pseudo-gradient

def test_pseudo_gradient_hand_case():
    pg = compute_pseudo_gradient(pv(2.0, 2.0), {0: pv(1.0, 3.0), 1: pv(3.0, 1.0)})
    assert pg.delta["w"].tolist() == [0.0, 0.0]
    pg = compute_pseudo_gradient(pv(0.0, 0.0), {0: pv(1.0, 3.0), 1: pv(3.0, 1.0)})
    assert pg.delta["w"].tolist() == [-2.0, -2.0]
    assert pg.client_mean["w"].tolist() == [2.0, 2.0]


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=6),
       st.randoms())
def test_pseudo_gradient_ignores_arrival_order(rows, rnd):
    theta = pv(0.5, -0.5, 1.0)
    models = {i: pv(*r) for i, r in enumerate(rows)}
    keys = list(models)
    rnd.shuffle(keys)
    shuffled = {k: models[k] for k in keys}
    a = compute_pseudo_gradient(theta, models)
    b = compute_pseudo_gradient(theta, shuffled)
    assert a.delta.equal_bytes(b.delta)


def test_pseudo_gradient_rejects_empty_and_mismatch():
    with pytest.raises(ContractError):
        compute_pseudo_gradient(pv(1.0), {})
    with pytest.raises(Exception):
        compute_pseudo_gradient(pv(1.0), {0: pv(1.0, 2.0)})


def test_server_step_against_stale_theta():
    pg = compute_pseudo_gradient(pv(1.0), {0: pv(2.0)})
    with pytest.raises(ContractError):
        server_step(ServerOptState(), pv(1.5), pg, 0)


# rounds

class Echo:
    """A client that returns a scripted model."""

    def __init__(self, out):
        self.out = out

    def train(self, theta, tau, *, round, step_offset, cursors=None):
        from fedlm.client import ClientResult
        return ClientResult(0, self.out(theta), [1.0], [1], [0.5], ())


def test_fixed_point_when_clients_return_theta():
    config, _, state = setup()
    theta0 = state.theta
    clients = {c: Echo(lambda t: t.copy()) for c in range(4)}
    for _ in range(3):
        run_round(state, config, clients, COST)
    assert state.theta.equal_bytes(theta0)


def test_scripted_two_client_round():
    config = FederationConfig(population=2, clients_per_round=2, rounds=2, local_steps=1,
                              server_opt="fedmomentum", server_lr=0.5, server_momentum=0.5)
    state = FederationState(theta=pv(1.0, 1.0), server=config.make_server_state())
    clients = {0: Echo(lambda t: t - pv(1.0, 0.0)), 1: Echo(lambda t: t - pv(0.0, 3.0))}
    run_round(state, config, clients, COST)
    # delta = (0.5, 1.5); v = delta; theta = 1 - 0.5 delta
    assert state.theta["w"].tolist() == [0.75, 0.25]
    run_round(state, config, clients, COST)
    # v = 0.5 v + delta = (0.75, 2.25); theta -= 0.5 v
    assert state.theta["w"].tolist() == [0.375, -0.875]


def test_single_client_round_equals_its_model():
    config, clients, state = setup(n=4, k=1)
    theta0 = state.theta
    _, rec = run_round(state, config, clients, COST)
    (cid,) = rec.sampled_ids
    solo = clients[cid].train(theta0, 3, round=0, step_offset=0)
    assert state.theta.equal_bytes(solo.theta)
    assert rec.t_comm_s == 0.0 and rec.bytes_round == 0.0


def test_dropout_uses_survivor_mean():
    config, clients, state = setup()
    theta0 = state.theta
    run_round(state, config, clients, COST, dropouts=[2])
    survivors = [0, 1, 3]
    outs = {c: clients[c].train(theta0, 3, round=0, step_offset=0).theta for c in survivors}
    assert state.theta.equal_bytes(ParamVector.mean([outs[c] for c in survivors]))
    assert state.records[-1].survivor_ids == survivors
    assert 2 not in state.cursors


def test_dropout_breaks_ring():
    config, clients, state = setup(topology="rar")
    with pytest.raises(RoundFailure):
        run_round(state, config, clients, COST, dropouts=[1])
    assert state.round == 0


def test_topology_changes_time_not_parameters():
    finals, comms = {}, {}
    for topo in ("ps", "ar", "rar"):
        config, clients, state = setup(topology=topo, rounds=2)
        run_federation(state, config, clients, COST)
        finals[topo] = state.theta
        comms[topo] = state.records[0].t_comm_s
    assert finals["ps"].equal_bytes(finals["ar"]) and finals["ps"].equal_bytes(finals["rar"])
    assert len(set(comms.values())) == 3
    assert comms["rar"] <= comms["ar"] <= comms["ps"]


def test_wall_time_is_cumulative():
    config, clients, state = setup(rounds=3)
    run_federation(state, config, clients, COST)
    t = [r.t_cum_s for r in state.records]
    assert t == sorted(t) and t[-1] == pytest.approx(3 * (1.5 + 4 * 1.0 / 125.0))


def test_threads_do_not_change_results():
    outs = []
    for workers in (1, 4):
        config, clients, state = setup(rounds=2, workers=workers)
        run_federation(state, config, clients, COST)
        outs.append(state.theta)
    assert outs[0].equal_bytes(outs[1])


def test_client_failure_propagates_after_others_finish():
    config, _, state = setup(n=3, rounds=1, workers=2)
    calls = []

    class Boom:
        def train(self, *a, **k):
            calls.append(1)
            raise RuntimeError("node lost")

    clients = {0: Echo(lambda t: t), 1: Boom(), 2: Echo(lambda t: t)}
    with pytest.raises(RuntimeError, match="node lost"):
        run_round(state, config, clients, COST)
    assert state.round == 0


# checkpoints

def test_checkpoint_roundtrip(tmp_path):
    config, clients, state = setup(rounds=2, server_opt="fedmomentum", server_lr=0.7,
                                   server_momentum=0.9, nesterov=True)
    run_federation(state, config, clients, COST, checkpoint_dir=tmp_path)
    back = restore_global(tmp_path / "latest.phck")
    assert back.theta.equal_bytes(state.theta)
    assert back.server.velocity.equal_bytes(state.server.velocity)
    assert back.round == 2 and back.cursors == state.cursors
    assert repr(back.records) == repr(state.records) and back.t_cum == state.t_cum


def test_corrupt_checkpoint_rejected(tmp_path):
    config, clients, state = setup(rounds=1)
    run_federation(state, config, clients, COST)
    path = tmp_path / "g.phck"
    checkpoint_global(state, path)
    raw = bytearray(path.read_bytes())
    raw[len(raw) // 2] ^= 0x10
    path.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        restore_global(path)


def test_resume_matches_uninterrupted(tmp_path):
    kw = dict(rounds=4, server_opt="fedmomentum", server_lr=0.7, server_momentum=0.9, nesterov=True)
    config, clients, state = setup(**kw)
    run_federation(state, config, clients, COST)

    config, clients, first = setup(**kw)
    run_federation(first, config, clients, COST, checkpoint_dir=tmp_path, stop_after=2)
    resumed = restore_global(tmp_path / "latest.phck")
    _, clients, _ = setup(**kw)
    run_federation(resumed, config, clients, COST)
    assert resumed.theta.equal_bytes(state.theta)
    assert repr(resumed.records) == repr(state.records)
    assert read_checkpoint(tmp_path / "latest.phck").round == 2
